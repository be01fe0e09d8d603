#include "flowmo/cli.hpp"

#include <CLI11.hpp>
#include <fcntl.h>
#include <unistd.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "flowmo/ablation.hpp"
#include "flowmo/checkpoint.hpp"
#include "flowmo/config.hpp"
#include "flowmo/data.hpp"
#include "flowmo/maskgit.hpp"
#include "flowmo/metrics.hpp"
#include "flowmo/pipeline.hpp"
#include "flowmo/plot.hpp"
#include "flowmo/trainer.hpp"

namespace flowmo::cli {

namespace {

namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class StageDependencyError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class OutputLockedError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Exclusive ownership of an output directory for one invocation.
class OutputLock {
public:
    explicit OutputLock(const fs::path& dir) : path_(dir / ".flowmo.lock") {
        fs::create_directories(dir);
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0)
            throw OutputLockedError("output directory " + dir.string() + " is in use (remove " + path_.string() +
                                    " if no other run is active)");
        const std::string pid = std::to_string(::getpid()) + "\n";
        [[maybe_unused]] auto n = ::write(fd_, pid.data(), pid.size());
    }
    ~OutputLock() {
        ::close(fd_);
        std::error_code ec;
        fs::remove(path_, ec);
    }
    OutputLock(const OutputLock&) = delete;
    OutputLock& operator=(const OutputLock&) = delete;

private:
    fs::path path_;
    int fd_ = -1;
};

struct CommonArgs {
    std::string config_path;
    std::string preset = "default";
    std::vector<std::string> overrides;
    std::uint64_t seed = 0;
    std::string out;
};

struct DataArgs {
    std::string dir;
    std::size_t synthetic = 0;
    std::uint64_t synthetic_seed = 0;
};

struct SamplerArgs {
    std::optional<std::size_t> steps;
    std::optional<double> rho;
    std::optional<double> guidance;
    std::string guidance_interval;
    std::optional<double> noise_scale;
};

void add_common(CLI::App* app, CommonArgs& a) {
    app->add_option("--config", a.config_path, "Config file (section.field = value lines)");
    app->add_option("--preset", a.preset, "Base config when --config is absent")
        ->check(CLI::IsMember({"default", "tiny"}));
    app->add_option("--set", a.overrides, "Override a config key, e.g. --set train.max_steps=500 (repeatable)");
    app->add_option("--seed", a.seed, "Random seed");
    app->add_option("--out", a.out, "Output directory (default: $FLOWMO_OUT/<command> or ./flowmo-out/<command>)");
}

void add_data(CLI::App* app, DataArgs& d, const std::string& prefix, const std::string& what) {
    app->add_option("--" + prefix + "data", d.dir, "Folder of PNG images for the " + what + " set");
    app->add_option("--" + prefix + "synthetic", d.synthetic, "Use N synthetic shape images for the " + what + " set");
    app->add_option("--" + prefix + "synthetic-seed", d.synthetic_seed, "Seed of the synthetic " + what + " set");
}

void add_sampler(CLI::App* app, SamplerArgs& s) {
    app->add_option("--steps", s.steps, "Decoder sampling steps");
    app->add_option("--rho", s.rho, "Timestep shift exponent (1 = linear)");
    app->add_option("--guidance", s.guidance, "Decoder guidance weight (1 disables)");
    app->add_option("--guidance-interval", s.guidance_interval, "Guidance interval lo,hi in flow time");
    app->add_option("--noise-scale", s.noise_scale, "Initial noise scale");
}

fs::path output_dir(const CommonArgs& a, const std::string& command) {
    if (!a.out.empty()) return a.out;
    const char* env = std::getenv("FLOWMO_OUT");
    return fs::path(env && *env ? env : "flowmo-out") / command;
}

ConfigBundle base_bundle(const CommonArgs& a, const std::string& checkpoint_config = {}) {
    ConfigBundle b;
    if (!a.config_path.empty())
        b = load_config_file(a.config_path);
    else if (!checkpoint_config.empty())
        b = parse_config_text(checkpoint_config);
    else
        b = a.preset == "tiny" ? tiny_config() : default_config();
    for (const auto& o : a.overrides) apply_override(b, o);
    return b;
}

void apply_sampler(ConfigBundle& b, const SamplerArgs& s) {
    if (s.steps) b.sampler.num_steps = *s.steps;
    if (s.rho) b.sampler.rho = *s.rho;
    if (s.guidance) b.sampler.guidance_weight = *s.guidance;
    if (s.noise_scale) b.sampler.noise_scale = *s.noise_scale;
    if (!s.guidance_interval.empty()) apply_override(b, "sampler.guidance_interval=" + s.guidance_interval);
}

data::Dataset load_data(const DataArgs& d, std::size_t resolution, const std::string& what, bool required = true) {
    if (!d.dir.empty() && d.synthetic > 0)
        throw UsageError("give either a folder or a synthetic count for the " + what + " set, not both");
    if (!d.dir.empty()) return data::load_folder(d.dir, resolution);
    if (d.synthetic > 0) return data::synthetic_dataset(d.synthetic_seed, d.synthetic, resolution);
    if (required) throw UsageError("the " + what + " set is missing (use a data folder or a synthetic count)");
    return {};
}

ckpt::CheckpointState require_checkpoint(const std::string& path, const std::string& command, const std::string& needs) {
    if (path.empty()) throw StageDependencyError(command + " needs --init pointing to " + needs);
    return ckpt::load_checkpoint(path);
}

void write_text(const fs::path& p, const std::string& s) {
    std::ofstream os(p);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    os << s;
}

void plot_report(const train::TrainReport& r, const fs::path& path) {
    plot::Series flow{"flow"}, total{"total"}, sample{"sample"};
    for (const auto& s : r.steps) {
        const auto x = static_cast<double>(s.step);
        flow.x.push_back(x);
        flow.y.push_back(s.flow);
        total.x.push_back(x);
        total.y.push_back(s.total);
        sample.x.push_back(x);
        sample.y.push_back(s.sample);
    }
    plot::PlotOptions o;
    o.smooth = 10;
    plot::write_line_plot({total, flow, sample}, path, o);
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

// ------------------------------------------------------------ commands

int cmd_train_stage1a(const CommonArgs& c, const DataArgs& d, const DataArgs& val, std::ostream& out) {
    const auto cfg = validate_config(base_bundle(c));
    const auto dir = output_dir(c, "train-stage1a");
    OutputLock lock(dir);
    const auto train_set = load_data(d, cfg.bundle.model.image_resolution, "training");
    const auto val_set = load_data(val, cfg.bundle.model.image_resolution, "validation", false);
    train::TrainOptions o;
    o.seed = c.seed;
    if (!val_set.empty()) o.validation = &val_set;
    const auto r = train::train_stage1a(cfg, train_set, o);
    ckpt::save_checkpoint(r.checkpoint, dir / "stage1a.ckpt");
    r.report.write_csv(dir / "train_report.csv");
    plot_report(r.report, dir / "loss_curve.png");
    write_text(dir / "config.txt", to_config_text(cfg.bundle));
    out << "stage 1A: " << r.report.steps.size() << " steps, final flow loss " << fmt_double(r.report.steps.back().flow)
        << "\ncheckpoint: " << (dir / "stage1a.ckpt").string() << '\n';
    return 0;
}

int cmd_train_stage1b(const CommonArgs& c, const DataArgs& d, const DataArgs& val, const std::string& init,
                      const std::string& mode, std::ostream& out) {
    const auto state = require_checkpoint(init, "train-stage1b", "a Stage 1A checkpoint");
    const auto cfg = validate_config(base_bundle(c, state.config_text));
    const auto dir = output_dir(c, "train-stage1b");
    OutputLock lock(dir);
    const auto train_set = load_data(d, cfg.bundle.model.image_resolution, "training");
    const auto val_set = load_data(val, cfg.bundle.model.image_resolution, "validation", false);
    train::TrainOptions o;
    o.seed = c.seed;
    if (!val_set.empty()) o.validation = &val_set;
    o.stage1b_mode = mode == "chain" ? train::Stage1BMode::Chain
                     : mode == "onestep" ? train::Stage1BMode::OneStep
                                         : train::Stage1BMode::FlowOnly;
    const auto r = train::train_stage1b(cfg, state, train_set, o);
    ckpt::save_checkpoint(r.checkpoint, dir / "stage1b.ckpt");
    r.report.write_csv(dir / "train_report.csv");
    plot_report(r.report, dir / "loss_curve.png");
    write_text(dir / "config.txt", to_config_text(cfg.bundle));
    out << "stage 1B: " << r.report.steps.size() << " steps" << (r.report.early_stopped ? " (early stopped)" : "")
        << ", kept step " << r.report.best_step << "\ncheckpoint: " << (dir / "stage1b.ckpt").string() << '\n';
    return 0;
}

int cmd_train_stage2(const CommonArgs& c, const DataArgs& d, const std::string& init, std::ostream& out) {
    const auto state = require_checkpoint(init, "train-stage2", "a tokenizer (Stage 1A/1B) checkpoint");
    const auto cfg = validate_config(base_bundle(c, state.config_text));
    const auto dir = output_dir(c, "train-stage2");
    OutputLock lock(dir);
    const auto images = load_data(d, cfg.bundle.model.image_resolution, "training");
    const auto tokens = stage2::tokenize_dataset(cfg, state, images);
    quant::write_token_file(dir / "tokens.fmtk", tokens.tokens, tokens.latent_seq_len, tokens.token_bits);
    if (tokens.conditional()) stage2::write_labels(dir / "labels.txt", tokens.labels);

    const auto r = stage2::train_maskgit(cfg.bundle.stage2, tokens, c.seed);
    ckpt::save_checkpoint(r.checkpoint, dir / "stage2.ckpt");
    {
        std::ofstream os(dir / "train_report.csv");
        os << "step,loss\n";
        for (const auto& s : r.steps) os << s.step << ',' << fmt_double(s.loss) << '\n';
    }
    plot::Series loss{"masked cross-entropy"};
    for (const auto& s : r.steps) {
        loss.x.push_back(static_cast<double>(s.step));
        loss.y.push_back(s.loss);
    }
    plot::PlotOptions po;
    po.smooth = 10;
    plot::write_line_plot({loss}, dir / "loss_curve.png", po);
    out << "stage 2: " << tokens.size() << " sequences of " << tokens.tokens.length << " ids, final loss "
        << fmt_double(r.steps.back().loss) << "\ncheckpoint: " << (dir / "stage2.ckpt").string() << '\n';
    return 0;
}

std::string tensor_summary(const metrics::MetricReport& r) {
    std::ostringstream os;
    os << "images " << r.per_image.size() << "  PSNR(mean) " << fmt_double(r.mean.psnr) << "  SSIM(mean) "
       << fmt_double(r.mean.ssim) << "  perceptual(mean) " << fmt_double(r.mean.perceptual) << "  toy-FID "
       << fmt_double(r.toy_fid);
    return os.str();
}

int cmd_reconstruct(const CommonArgs& c, const DataArgs& d, const SamplerArgs& s, const std::string& init,
                    std::size_t columns, std::ostream& out) {
    const auto state = require_checkpoint(init, "reconstruct", "a tokenizer checkpoint");
    auto bundle = base_bundle(c, state.config_text);
    apply_sampler(bundle, s);
    const auto cfg = validate_config(bundle);
    const auto dir = output_dir(c, "reconstruct");
    OutputLock lock(dir);
    const auto images = load_data(d, cfg.bundle.model.image_resolution, "input");
    ckpt::require_fingerprint(state, cfg.model_fingerprint);
    const auto tok = train::load_tokenizer(cfg.bundle.model, state);
    const Tensor x = data::stack_all(images);
    const Tensor y = pipeline::reconstruct(tok, x, cfg.bundle.sampler, c.seed);

    fs::create_directories(dir / "originals");
    fs::create_directories(dir / "reconstructions");
    const std::size_t N = x.dim(0), per = x.numel() / N;
    Shape one(x.shape().begin() + 1, x.shape().end());
    for (std::size_t i = 0; i < N; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "%05zu.png", i);
        data::write_png(data::tensor_to_raster(Tensor(one, std::vector<double>(x.data() + i * per, x.data() + (i + 1) * per))),
                        dir / "originals" / name);
        data::write_png(data::tensor_to_raster(Tensor(one, std::vector<double>(y.data() + i * per, y.data() + (i + 1) * per))),
                        dir / "reconstructions" / name);
    }
    // side by side: each row of the grid shows originals, the next row their reconstructions
    const std::size_t cols = std::min(columns, N);
    Tensor grid(Shape{0});
    std::vector<double> tiles;
    for (std::size_t r0 = 0; r0 < N; r0 += cols) {
        for (int pass = 0; pass < 2; ++pass) {
            const Tensor& src = pass ? y : x;
            for (std::size_t j = 0; j < cols; ++j) {
                const std::size_t i = r0 + j;
                if (i < N)
                    tiles.insert(tiles.end(), src.data() + i * per, src.data() + (i + 1) * per);
                else
                    tiles.insert(tiles.end(), per, -1.0);
            }
        }
    }
    Shape gs = x.shape();
    gs[0] = tiles.size() / per;
    data::write_grid(Tensor(gs, std::move(tiles)), dir / "comparison.png", cols);

    const metrics::PerceptualExtractor extractor(cfg.bundle.train.perceptual_seed_stage1a);
    const auto report = metrics::evaluate_reconstructions(x, y, extractor);
    metrics::write_metric_report_csv(report, dir / "metrics.csv");
    out << tensor_summary(report) << "\nwritten to " << dir.string() << '\n';
    return 0;
}

int cmd_sample(const CommonArgs& c, const SamplerArgs& s, const std::string& init, const std::string& tokenizer_path,
               std::size_t count, std::optional<int> class_label, std::optional<double> temperature,
               std::optional<double> token_guidance, std::size_t columns, std::ostream& out) {
    const auto gen_state = require_checkpoint(init, "sample", "a Stage 2 checkpoint");
    if (tokenizer_path.empty()) throw StageDependencyError("sample needs --tokenizer pointing to a tokenizer checkpoint");
    const auto tok_state = ckpt::load_checkpoint(tokenizer_path);
    auto bundle = base_bundle(c, tok_state.config_text);
    apply_sampler(bundle, s);
    if (!gen_state.config_text.empty() && c.config_path.empty()) {
        // Stage 2 settings come from the generator checkpoint.
        std::istringstream is(gen_state.config_text);
        std::string line;
        while (std::getline(is, line))
            if (line.rfind("stage2.", 0) == 0) apply_override(bundle, line);
        for (const auto& o : c.overrides)
            if (o.rfind("stage2.", 0) == 0) apply_override(bundle, o);
    }
    const auto cfg = validate_config(bundle);
    const auto dir = output_dir(c, "sample");
    OutputLock lock(dir);
    ckpt::require_fingerprint(tok_state, cfg.model_fingerprint);
    const auto gen = stage2::load_maskgit(cfg.bundle.stage2, gen_state);
    const auto tok = train::load_tokenizer(cfg.bundle.model, tok_state);
    if (gen.seq_len() * tok.config().entropy_group_bits != tok.config().latent_seq_len * tok.config().token_bits)
        throw std::invalid_argument("Stage 2 checkpoint sequence length does not match the tokenizer geometry");

    stage2::SampleOptions so;
    so.steps = cfg.bundle.stage2.sample_steps;
    so.temperature = temperature.value_or(cfg.bundle.stage2.temperature);
    so.guidance_weight = token_guidance.value_or(cfg.bundle.stage2.guidance_weight);
    so.class_label = class_label;
    so.seed = c.seed;
    const auto ids = stage2::sample_maskgit(gen, count, so);
    quant::write_token_file(dir / "samples.fmtk", ids, tok.config().latent_seq_len, tok.config().token_bits);
    const Tensor code = quant::unpack_tokens(ids, tok.config().latent_seq_len, tok.config().token_bits);
    const Tensor images = pipeline::decode_code(tok, code, cfg.bundle.sampler, c.seed);
    data::write_grid(images, dir / "samples.png", columns);
    out << "sampled " << count << " images into " << (dir / "samples.png").string() << '\n';
    return 0;
}

int cmd_eval(const CommonArgs& c, const std::string& originals, const std::string& recons, std::size_t resolution,
             std::ostream& out) {
    if (originals.empty() || recons.empty()) throw UsageError("eval needs --originals and --reconstructions");
    const auto cfg = validate_config(base_bundle(c));
    const auto dir = output_dir(c, "eval");
    OutputLock lock(dir);
    const std::size_t res = resolution ? resolution : cfg.bundle.model.image_resolution;
    const auto a = data::load_folder(originals, res);
    const auto b = data::load_folder(recons, res);
    if (a.size() != b.size())
        throw std::invalid_argument("eval: " + std::to_string(a.size()) + " originals but " + std::to_string(b.size()) +
                                    " reconstructions");
    const metrics::PerceptualExtractor extractor(cfg.bundle.train.perceptual_seed_stage1a);
    const auto report = metrics::evaluate_reconstructions(data::stack_all(a), data::stack_all(b), extractor);
    metrics::write_metric_report_csv(report, dir / "metrics.csv");
    out << tensor_summary(report) << "\nwritten to " << (dir / "metrics.csv").string() << '\n';
    return 0;
}

int cmd_ablate(const CommonArgs& c, const DataArgs& d, const DataArgs& val, const DataArgs& ev,
               const std::vector<std::string>& axes, const std::vector<std::uint64_t>& seeds, std::ostream& out) {
    const auto cfg = validate_config(base_bundle(c));
    const auto dir = output_dir(c, "ablate");
    OutputLock lock(dir);
    const std::size_t R = cfg.bundle.model.image_resolution;
    const auto train_set = load_data(d, R, "training");
    const auto eval_set = load_data(ev, R, "evaluation");
    auto val_set = load_data(val, R, "validation", false);
    if (val_set.empty()) val_set = eval_set;
    ablation::Options o;
    if (!seeds.empty()) o.seeds = seeds;
    if (!axes.empty()) {
        o.axes.clear();
        for (const auto& a : axes) o.axes.push_back(ablation::parse_axis(a));
        if (std::find(o.axes.begin(), o.axes.end(), ablation::Axis::Default) == o.axes.end())
            o.axes.insert(o.axes.begin(), ablation::Axis::Default);
    }
    o.log = [&](const std::string& s) { out << s << '\n'; };
    const auto rows = ablation::run(cfg, train_set, val_set, eval_set, o);
    ablation::write_table_csv(rows, dir / "ablation.csv");
    out << ablation::format_table(rows);
    return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Diffusion-autoencoder image tokenizer: training, reconstruction, sampling and evaluation"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    CommonArgs common;
    DataArgs data_args, val_args, eval_args;
    SamplerArgs sampler_args;
    std::string init, tokenizer_path, mode = "chain", originals, recons;
    std::size_t count = 8, columns = 8, resolution = 0;
    std::optional<int> class_label;
    std::optional<double> temperature, token_guidance;
    std::vector<std::string> axes;
    std::vector<std::uint64_t> seeds;

    auto* s1a = app.add_subcommand("train-stage1a", "End-to-end flow-matching pre-training of the tokenizer");
    add_common(s1a, common);
    add_data(s1a, data_args, "", "training");
    add_data(s1a, val_args, "val-", "validation");

    auto* s1b = app.add_subcommand("train-stage1b", "Decoder post-training through the sampling chain");
    add_common(s1b, common);
    add_data(s1b, data_args, "", "training");
    add_data(s1b, val_args, "val-", "validation");
    s1b->add_option("--init", init, "Stage 1A (or 1B, to resume) checkpoint");
    s1b->add_option("--mode", mode, "Sample loss: chain, onestep, or flow (flow loss only)")
        ->check(CLI::IsMember({"chain", "onestep", "flow"}));

    auto* s2 = app.add_subcommand("train-stage2", "Tokenize a dataset and train the masked-token generator");
    add_common(s2, common);
    add_data(s2, data_args, "", "training");
    s2->add_option("--init", init, "Tokenizer checkpoint used to tokenize the images");

    auto* rec = app.add_subcommand("reconstruct", "Encode, quantize and decode images; write grids and metrics");
    add_common(rec, common);
    add_data(rec, data_args, "", "input");
    add_sampler(rec, sampler_args);
    rec->add_option("--init", init, "Tokenizer checkpoint");
    rec->add_option("--columns", columns, "Images per grid row");

    auto* smp = app.add_subcommand("sample", "Generate token grids with Stage 2 and decode them to images");
    add_common(smp, common);
    add_sampler(smp, sampler_args);
    smp->add_option("--init", init, "Stage 2 checkpoint");
    smp->add_option("--tokenizer", tokenizer_path, "Tokenizer checkpoint used for decoding");
    smp->add_option("--count", count, "Number of samples");
    smp->add_option("--class", class_label, "Class label for conditional generation");
    smp->add_option("--temperature", temperature, "Initial token sampling temperature (annealed to 0)");
    smp->add_option("--token-guidance", token_guidance, "Stage 2 class guidance weight on logits");
    smp->add_option("--columns", columns, "Images per grid row");

    auto* ev = app.add_subcommand("eval", "Metrics between two folders of images");
    add_common(ev, common);
    ev->add_option("--originals", originals, "Folder of original images");
    ev->add_option("--reconstructions", recons, "Folder of reconstructions (same file order)");
    ev->add_option("--resolution", resolution, "Resize both sets to this resolution (default: model resolution)");

    auto* abl = app.add_subcommand("ablate", "Ablation sweeps scored by toy-FID, PSNR and perceptual distance");
    add_common(abl, common);
    add_data(abl, data_args, "", "training");
    add_data(abl, val_args, "val-", "validation");
    add_data(abl, eval_args, "eval-", "evaluation");
    abl->add_option("--axes", axes,
                    "Variants: default, rho1, no_guidance, fsq, no_uniform_mix, stage1b_chain, stage1b_onestep")
        ->delimiter(',');
    abl->add_option("--seeds", seeds, "Seeds to repeat every variant with")->delimiter(',');

    std::vector<std::string> rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
    try {
        app.parse(rev);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error (" << e.get_name() << "): " << e.what() << '\n';
        return e.get_exit_code() ? e.get_exit_code() : 2;
    }

    try {
        if (s1a->parsed()) return cmd_train_stage1a(common, data_args, val_args, out);
        if (s1b->parsed()) return cmd_train_stage1b(common, data_args, val_args, init, mode, out);
        if (s2->parsed()) return cmd_train_stage2(common, data_args, init, out);
        if (rec->parsed()) return cmd_reconstruct(common, data_args, sampler_args, init, columns, out);
        if (smp->parsed())
            return cmd_sample(common, sampler_args, init, tokenizer_path, count, class_label, temperature, token_guidance,
                              columns, out);
        if (ev->parsed()) return cmd_eval(common, originals, recons, resolution, out);
        if (abl->parsed()) return cmd_ablate(common, data_args, val_args, eval_args, axes, seeds, out);
    } catch (const ConfigError& e) {
        err << "error (ConfigError):\n" << e.what() << '\n';
        return 3;
    } catch (const StageDependencyError& e) {
        err << "error (StageDependencyError): " << e.what() << '\n';
        return 4;
    } catch (const OutputLockedError& e) {
        err << "error (OutputLockedError): " << e.what() << '\n';
        return 5;
    } catch (const ckpt::FingerprintMismatchError& e) {
        err << "error (FingerprintMismatchError): " << e.what() << '\n';
        return 6;
    } catch (const ckpt::CheckpointVersionError& e) {
        err << "error (CheckpointVersionError): " << e.what() << '\n';
        return 6;
    } catch (const ckpt::CheckpointError& e) {
        err << "error (CheckpointError): " << e.what() << '\n';
        return 6;
    } catch (const UsageError& e) {
        err << "error (UsageError): " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}

int run(int argc, char** argv) { return run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr); }

}  // namespace flowmo::cli
