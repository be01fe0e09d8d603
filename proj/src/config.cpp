#include "flowmo/config.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace flowmo {

namespace {

std::string join_lines(const std::vector<std::string>& lines) {
    std::string out;
    for (const auto& l : lines) out += (out.empty() ? "" : "\n") + l;
    return out;
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::uint64_t parse_unsigned(const std::string& key, const std::string& text) {
    std::uint64_t v = 0;
    const auto* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || ptr != end) throw ConfigError({key + ": expected a non-negative integer, got '" + text + "'"});
    return v;
}

double parse_double(const std::string& key, const std::string& text) {
    char* end = nullptr;
    const double v = std::strtod(text.c_str(), &end);
    if (text.empty() || end != text.c_str() + text.size() || !std::isfinite(v))
        throw ConfigError({key + ": expected a finite number, got '" + text + "'"});
    return v;
}

struct Field {
    std::function<std::string(const ConfigBundle&)> get;
    std::function<void(ConfigBundle&, const std::string&)> set;
    bool architecture = false;
};

template <typename Member>
Field size_field(const std::string& key, Member member, bool arch = false) {
    return Field{[member](const ConfigBundle& b) { return std::to_string(member(const_cast<ConfigBundle&>(b))); },
                 [member, key](ConfigBundle& b, const std::string& v) {
                     member(b) = static_cast<std::remove_reference_t<decltype(member(b))>>(parse_unsigned(key, v));
                 },
                 arch};
}

template <typename Member>
Field double_field(const std::string& key, Member member, bool arch = false) {
    return Field{[member](const ConfigBundle& b) { return format_double(member(const_cast<ConfigBundle&>(b))); },
                 [member, key](ConfigBundle& b, const std::string& v) { member(b) = parse_double(key, v); }, arch};
}

const std::map<std::string, Field>& registry() {
    static const std::map<std::string, Field> fields = [] {
        std::map<std::string, Field> f;
#define FM_SIZE(sec, name, arch) \
    f[#sec "." #name] = size_field(#sec "." #name, [](ConfigBundle& b) -> auto& { return b.sec.name; }, arch)
#define FM_DBL(sec, name, arch) \
    f[#sec "." #name] = double_field(#sec "." #name, [](ConfigBundle& b) -> auto& { return b.sec.name; }, arch)
        FM_SIZE(model, image_resolution, true);
        FM_SIZE(model, channels, true);
        FM_SIZE(model, patch_size, true);
        FM_SIZE(model, width, true);
        FM_SIZE(model, width_factor, true);
        FM_SIZE(model, encoder_depth, true);
        FM_SIZE(model, decoder_depth, true);
        FM_SIZE(model, num_heads, true);
        FM_SIZE(model, mlp_ratio, true);
        FM_SIZE(model, latent_seq_len, true);
        FM_SIZE(model, token_bits, true);
        FM_SIZE(model, entropy_group_bits, true);
        FM_SIZE(model, fsq_levels, true);
        FM_DBL(model, latent_dropout_prob, false);
        f["model.quantizer_kind"] = Field{
            [](const ConfigBundle& b) { return std::string(b.model.quantizer_kind == QuantizerKind::LFQ ? "LFQ" : "FSQ"); },
            [](ConfigBundle& b, const std::string& v) {
                std::string u = v;
                std::transform(u.begin(), u.end(), u.begin(), [](unsigned char c) { return std::toupper(c); });
                if (u == "LFQ") b.model.quantizer_kind = QuantizerKind::LFQ;
                else if (u == "FSQ") b.model.quantizer_kind = QuantizerKind::FSQ;
                else throw ConfigError({"model.quantizer_kind: expected LFQ or FSQ, got '" + v + "'"});
            },
            true};

        FM_DBL(train, learning_rate, false);
        FM_SIZE(train, batch_size, false);
        FM_DBL(train, adam_beta1, false);
        FM_DBL(train, adam_beta2, false);
        FM_DBL(train, ema_rate, false);
        FM_SIZE(train, encoder_freeze_step, false);
        FM_DBL(train, lambda_perc, false);
        FM_DBL(train, lambda_commit, false);
        FM_DBL(train, lambda_ent, false);
        FM_DBL(train, lambda_sample, false);
        FM_DBL(train, uniform_mix_prob, false);
        FM_SIZE(train, stage1b_num_steps, false);
        FM_SIZE(train, max_steps, false);
        FM_SIZE(train, stage1b_max_steps, false);
        FM_SIZE(train, eval_interval, false);
        FM_SIZE(train, eval_sampler_steps, false);
        FM_SIZE(train, grad_accumulation, false);
        FM_SIZE(train, perceptual_seed_stage1a, false);
        FM_SIZE(train, perceptual_seed_stage1b, false);

        FM_SIZE(sampler, num_steps, false);
        FM_DBL(sampler, rho, false);
        FM_DBL(sampler, guidance_weight, false);
        FM_DBL(sampler, noise_scale, false);
        f["sampler.guidance_interval"] = Field{
            [](const ConfigBundle& b) { return format_double(b.sampler.guidance_lo) + "," + format_double(b.sampler.guidance_hi); },
            [](ConfigBundle& b, const std::string& v) {
                const auto comma = v.find(',');
                if (comma == std::string::npos)
                    throw ConfigError({"sampler.guidance_interval: expected 'lo,hi', got '" + v + "'"});
                b.sampler.guidance_lo = parse_double("sampler.guidance_interval", trim(v.substr(0, comma)));
                b.sampler.guidance_hi = parse_double("sampler.guidance_interval", trim(v.substr(comma + 1)));
            },
            false};

        FM_SIZE(stage2, width, false);
        FM_SIZE(stage2, depth, false);
        FM_SIZE(stage2, num_heads, false);
        FM_SIZE(stage2, mlp_ratio, false);
        FM_DBL(stage2, learning_rate, false);
        FM_SIZE(stage2, batch_size, false);
        FM_SIZE(stage2, max_steps, false);
        FM_SIZE(stage2, sample_steps, false);
        FM_DBL(stage2, temperature, false);
        FM_DBL(stage2, guidance_weight, false);
        FM_DBL(stage2, class_dropout_prob, false);
#undef FM_SIZE
#undef FM_DBL
        return f;
    }();
    return fields;
}

void set_field(ConfigBundle& bundle, const std::string& key, const std::string& value) {
    const auto& reg = registry();
    const auto it = reg.find(key);
    if (it == reg.end()) throw ConfigError({"unknown config key '" + key + "'"});
    it->second.set(bundle, value);
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> problems)
    : std::invalid_argument(join_lines(problems)), problems_(std::move(problems)) {}

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

double compute_bpp(std::uint64_t latent_seq_len, std::uint64_t vocab_size, std::uint64_t resolution) {
    if (latent_seq_len < 1) throw std::invalid_argument("compute_bpp: latent_seq_len must be >= 1");
    if (resolution < 1) throw std::invalid_argument("compute_bpp: resolution must be >= 1");
    if (vocab_size < 1 || !std::has_single_bit(vocab_size)) {
        throw std::invalid_argument("compute_bpp: vocab_size " + std::to_string(vocab_size) +
                                    " is not a power of two");
    }
    const double bits = static_cast<double>(std::countr_zero(vocab_size));
    return static_cast<double>(latent_seq_len) * bits / (static_cast<double>(resolution) * static_cast<double>(resolution));
}

ValidatedConfig validate_config(const ConfigBundle& b) {
    std::vector<std::string> p;
    auto at_least_one = [&p](const char* name, std::size_t v) {
        if (v < 1) p.push_back(std::string(name) + ": must be >= 1");
    };
    auto unit_interval = [&p](const char* name, double v) {
        if (!(v >= 0.0 && v <= 1.0)) p.push_back(std::string(name) + ": must lie in [0, 1], got " + format_double(v));
    };
    auto non_negative = [&p](const char* name, double v) {
        if (!(v >= 0.0)) p.push_back(std::string(name) + ": must be >= 0, got " + format_double(v));
    };

    const auto& m = b.model;
    at_least_one("model.image_resolution", m.image_resolution);
    at_least_one("model.channels", m.channels);
    at_least_one("model.patch_size", m.patch_size);
    at_least_one("model.width", m.width);
    at_least_one("model.width_factor", m.width_factor);
    at_least_one("model.encoder_depth", m.encoder_depth);
    at_least_one("model.decoder_depth", m.decoder_depth);
    at_least_one("model.num_heads", m.num_heads);
    at_least_one("model.mlp_ratio", m.mlp_ratio);
    at_least_one("model.latent_seq_len", m.latent_seq_len);
    at_least_one("model.token_bits", m.token_bits);
    at_least_one("model.entropy_group_bits", m.entropy_group_bits);
    if (m.patch_size >= 1 && m.image_resolution % m.patch_size != 0) {
        p.push_back("model.patch_size: " + std::to_string(m.patch_size) + " does not divide model.image_resolution " +
                    std::to_string(m.image_resolution));
    }
    if (m.entropy_group_bits >= 1 && m.token_bits % m.entropy_group_bits != 0) {
        p.push_back("model.token_bits: " + std::to_string(m.token_bits) +
                    " is not a multiple of model.entropy_group_bits " + std::to_string(m.entropy_group_bits));
    }
    if (m.entropy_group_bits > 16) p.push_back("model.entropy_group_bits: must be <= 16");
    if (m.num_heads >= 1 && m.hidden_size() % m.num_heads != 0)
        p.push_back("model.num_heads: must divide the hidden size " + std::to_string(m.hidden_size()));
    if (m.quantizer_kind == QuantizerKind::FSQ && (m.fsq_levels < 3 || m.fsq_levels % 2 == 0))
        p.push_back("model.fsq_levels: must be odd and >= 3, got " + std::to_string(m.fsq_levels));
    unit_interval("model.latent_dropout_prob", m.latent_dropout_prob);

    const auto& t = b.train;
    if (!(t.learning_rate > 0.0)) p.push_back("train.learning_rate: must be > 0");
    at_least_one("train.batch_size", t.batch_size);
    if (!(t.adam_beta1 >= 0.0 && t.adam_beta1 < 1.0)) p.push_back("train.adam_beta1: must lie in [0, 1)");
    if (!(t.adam_beta2 >= 0.0 && t.adam_beta2 < 1.0)) p.push_back("train.adam_beta2: must lie in [0, 1)");
    if (!(t.ema_rate >= 0.0 && t.ema_rate < 1.0))
        p.push_back("train.ema_rate: must lie in [0, 1), got " + format_double(t.ema_rate));
    non_negative("train.lambda_perc", t.lambda_perc);
    non_negative("train.lambda_commit", t.lambda_commit);
    non_negative("train.lambda_ent", t.lambda_ent);
    non_negative("train.lambda_sample", t.lambda_sample);
    unit_interval("train.uniform_mix_prob", t.uniform_mix_prob);
    at_least_one("train.stage1b_num_steps", t.stage1b_num_steps);
    at_least_one("train.eval_interval", t.eval_interval);
    at_least_one("train.eval_sampler_steps", t.eval_sampler_steps);
    at_least_one("train.grad_accumulation", t.grad_accumulation);

    const auto& s = b.sampler;
    at_least_one("sampler.num_steps", s.num_steps);
    if (!(s.rho >= 1.0)) p.push_back("sampler.rho: must be >= 1, got " + format_double(s.rho));
    non_negative("sampler.guidance_weight", s.guidance_weight);
    if (!(s.guidance_lo >= 0.0 && s.guidance_lo <= s.guidance_hi && s.guidance_hi <= 1.0))
        p.push_back("sampler.guidance_interval: need 0 <= lo <= hi <= 1");
    if (!(s.noise_scale > 0.0)) p.push_back("sampler.noise_scale: must be > 0");

    const auto& g = b.stage2;
    at_least_one("stage2.width", g.width);
    at_least_one("stage2.depth", g.depth);
    at_least_one("stage2.num_heads", g.num_heads);
    at_least_one("stage2.mlp_ratio", g.mlp_ratio);
    at_least_one("stage2.batch_size", g.batch_size);
    at_least_one("stage2.sample_steps", g.sample_steps);
    if (g.num_heads >= 1 && g.width % g.num_heads != 0) p.push_back("stage2.num_heads: must divide stage2.width");
    if (!(g.learning_rate > 0.0)) p.push_back("stage2.learning_rate: must be > 0");
    non_negative("stage2.temperature", g.temperature);
    non_negative("stage2.guidance_weight", g.guidance_weight);
    unit_interval("stage2.class_dropout_prob", g.class_dropout_prob);

    if (!p.empty()) throw ConfigError(std::move(p));

    ValidatedConfig out{b, 0, 0};
    const std::string all = to_config_text(b);
    const std::string arch = model_config_text(b.model);
    out.fingerprint = fnv1a64(all.data(), all.size());
    out.model_fingerprint = fnv1a64(arch.data(), arch.size());
    return out;
}

ConfigBundle parse_config_text(const std::string& text) {
    ConfigBundle bundle;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    std::vector<std::string> problems;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            problems.push_back("line " + std::to_string(lineno) + ": expected key=value");
            continue;
        }
        try {
            set_field(bundle, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        } catch (const ConfigError& e) {
            for (const auto& msg : e.problems()) problems.push_back("line " + std::to_string(lineno) + ": " + msg);
        }
    }
    if (!problems.empty()) throw ConfigError(std::move(problems));
    return bundle;
}

ConfigBundle load_config_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError({"cannot read config file " + path.string()});
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str());
}

void apply_override(ConfigBundle& bundle, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError({"override '" + assignment + "': expected key=value"});
    set_field(bundle, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

std::string to_config_text(const ConfigBundle& bundle) {
    std::string out;
    for (const auto& [key, field] : registry()) out += key + " = " + field.get(bundle) + "\n";
    return out;
}

std::string model_config_text(const ModelConfig& model) {
    ConfigBundle b;
    b.model = model;
    std::string out;
    for (const auto& [key, field] : registry())
        if (field.architecture) out += key + " = " + field.get(b) + "\n";
    return out;
}

std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& [key, field] : registry()) keys.push_back(key);
    return keys;
}

ConfigBundle default_config() { return ConfigBundle{}; }

ConfigBundle tiny_config() {
    ConfigBundle b;
    b.model.image_resolution = 16;
    b.model.patch_size = 4;
    b.model.width = 64;
    b.model.encoder_depth = 1;
    b.model.decoder_depth = 2;
    b.model.num_heads = 2;
    b.model.mlp_ratio = 2;
    b.model.latent_seq_len = 8;
    b.model.token_bits = 8;
    b.model.entropy_group_bits = 4;
    b.train.learning_rate = 2e-3;
    b.train.batch_size = 8;
    b.train.max_steps = 1000;
    b.train.stage1b_max_steps = 200;
    b.train.encoder_freeze_step = 100000;
    b.train.eval_interval = 50;
    b.train.ema_rate = 0.98;
    b.train.lambda_sample = 1.0;
    b.stage2.width = 32;
    b.stage2.depth = 2;
    b.stage2.num_heads = 2;
    b.stage2.mlp_ratio = 2;
    b.stage2.learning_rate = 2e-3;
    b.stage2.max_steps = 400;
    b.stage2.sample_steps = 8;
    return b;
}

}  // namespace flowmo
