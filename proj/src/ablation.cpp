#include "flowmo/ablation.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>

#include "flowmo/metrics.hpp"
#include "flowmo/pipeline.hpp"
#include "flowmo/trainer.hpp"

namespace flowmo::ablation {

namespace {

struct AxisInfo {
    Axis axis;
    const char* name;
};

constexpr AxisInfo kAxes[] = {
    {Axis::Default, "default"},
    {Axis::LinearSchedule, "rho1"},
    {Axis::NoGuidance, "no_guidance"},
    {Axis::Fsq, "fsq"},
    {Axis::NoUniformMix, "no_uniform_mix"},
    {Axis::ChainPostTrain, "stage1b_chain"},
    {Axis::OneStepPostTrain, "stage1b_onestep"},
};

enum class TrainVariant { Base, Fsq, NoMix };

TrainVariant variant_of(Axis a) {
    switch (a) {
        case Axis::Fsq: return TrainVariant::Fsq;
        case Axis::NoUniformMix: return TrainVariant::NoMix;
        default: return TrainVariant::Base;
    }
}

ValidatedConfig config_for(const ValidatedConfig& base, TrainVariant v) {
    ConfigBundle b = base.bundle;
    if (v == TrainVariant::Fsq) b.model.quantizer_kind = QuantizerKind::FSQ;
    if (v == TrainVariant::NoMix) b.train.uniform_mix_prob = 0.0;
    return validate_config(b);
}

}  // namespace

std::string axis_name(Axis axis) {
    for (const auto& a : kAxes)
        if (a.axis == axis) return a.name;
    return "?";
}

Axis parse_axis(const std::string& name) {
    for (const auto& a : kAxes)
        if (name == a.name) return a.axis;
    std::string known;
    for (const auto& a : kAxes) known += std::string(known.empty() ? "" : ", ") + a.name;
    throw std::invalid_argument("unknown ablation axis '" + name + "' (known: " + known + ")");
}

std::vector<Row> run(const ValidatedConfig& base, const data::Dataset& train, const data::Dataset& validation,
                     const data::Dataset& eval, const Options& options) {
    const Tensor eval_images = data::stack_all(eval);
    const metrics::PerceptualExtractor extractor(base.bundle.train.perceptual_seed_stage1a);
    auto log = [&](const std::string& s) {
        if (options.log) options.log(s);
    };

    std::vector<Row> rows;
    for (const auto seed : options.seeds) {
        std::map<TrainVariant, ckpt::CheckpointState> trained;
        auto stage1a = [&](TrainVariant v) -> const ckpt::CheckpointState& {
            if (auto it = trained.find(v); it != trained.end()) return it->second;
            log("seed " + std::to_string(seed) + ": training stage 1A variant " + std::to_string(static_cast<int>(v)));
            train::TrainOptions o;
            o.seed = seed;
            return trained.emplace(v, train::train_stage1a(config_for(base, v), train, o).checkpoint).first->second;
        };

        for (const auto axis : options.axes) {
            const TrainVariant v = variant_of(axis);
            const ValidatedConfig cfg = config_for(base, v);
            ckpt::CheckpointState state = stage1a(v);
            if (axis == Axis::ChainPostTrain || axis == Axis::OneStepPostTrain) {
                log("seed " + std::to_string(seed) + ": post-training (" + axis_name(axis) + ")");
                train::TrainOptions o;
                o.seed = seed;
                o.validation = &validation;
                o.stage1b_mode = axis == Axis::ChainPostTrain ? train::Stage1BMode::Chain : train::Stage1BMode::OneStep;
                state = train::train_stage1b(cfg, state, train, o).checkpoint;
            }
            SamplerConfig sampler = cfg.bundle.sampler;
            if (axis == Axis::LinearSchedule) sampler.rho = 1.0;
            if (axis == Axis::NoGuidance) sampler.guidance_weight = 1.0;

            const auto tok = train::load_tokenizer(cfg.bundle.model, state);
            const Tensor recon = pipeline::reconstruct(tok, eval_images, sampler, options.eval_noise_seed);
            const auto report = metrics::evaluate_reconstructions(eval_images, recon, extractor);
            rows.push_back({axis, seed, report.toy_fid, report.median_psnr(), report.median_perceptual()});
            log("seed " + std::to_string(seed) + " " + axis_name(axis) + ": toy-FID " + std::to_string(report.toy_fid));
        }
    }
    return rows;
}

std::size_t seeds_not_beating_default(const std::vector<Row>& rows, Axis axis) {
    std::map<std::uint64_t, double> def;
    for (const auto& r : rows)
        if (r.axis == Axis::Default) def[r.seed] = r.toy_fid;
    std::size_t n = 0;
    for (const auto& r : rows)
        if (r.axis == axis && def.count(r.seed) && r.toy_fid >= def[r.seed]) ++n;
    return n;
}

namespace {

struct Summary {
    Axis axis;
    double fid = 0, psnr = 0, perc = 0;
    std::size_t count = 0;
};

std::vector<Summary> summarize(const std::vector<Row>& rows) {
    std::vector<Summary> out;
    for (const auto& r : rows) {
        auto it = std::find_if(out.begin(), out.end(), [&](const Summary& s) { return s.axis == r.axis; });
        if (it == out.end()) {
            out.push_back({r.axis});
            it = std::prev(out.end());
        }
        it->fid += r.toy_fid;
        it->psnr += r.psnr;
        it->perc += r.perceptual;
        ++it->count;
    }
    for (auto& s : out) {
        s.fid /= static_cast<double>(s.count);
        s.psnr /= static_cast<double>(s.count);
        s.perc /= static_cast<double>(s.count);
    }
    return out;
}

}  // namespace

void write_table_csv(const std::vector<Row>& rows, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << "axis,seed,toy_fid,median_psnr,median_perceptual\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%llu,%.10g,%.10g,%.10g\n", axis_name(r.axis).c_str(),
                      static_cast<unsigned long long>(r.seed), r.toy_fid, r.psnr, r.perceptual);
        os << buf;
    }
    for (const auto& s : summarize(rows)) {
        std::snprintf(buf, sizeof buf, "%s,mean,%.10g,%.10g,%.10g\n", axis_name(s.axis).c_str(), s.fid, s.psnr, s.perc);
        os << buf;
    }
}

std::string format_table(const std::vector<Row>& rows) {
    std::ostringstream os;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-18s %10s %12s %12s %16s\n", "variant", "toy-FID", "PSNR (dB)", "perceptual",
                  "seeds >= default");
    os << buf;
    for (const auto& s : summarize(rows)) {
        const std::string vs = s.axis == Axis::Default
                                   ? "-"
                                   : std::to_string(seeds_not_beating_default(rows, s.axis)) + "/" + std::to_string(s.count);
        std::snprintf(buf, sizeof buf, "%-18s %10.4f %12.3f %12.4f %16s\n", axis_name(s.axis).c_str(), s.fid, s.psnr,
                      s.perc, vs.c_str());
        os << buf;
    }
    return os.str();
}

}  // namespace flowmo::ablation
