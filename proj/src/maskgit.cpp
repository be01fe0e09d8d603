#include "flowmo/maskgit.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "flowmo/optim.hpp"
#include "flowmo/pipeline.hpp"

namespace flowmo::stage2 {

// ------------------------------------------------------------ tokenization

TokenDataset tokenize_dataset(const model::Tokenizer& tokenizer, const data::Dataset& images) {
    const auto& mc = tokenizer.config();
    if (images.empty()) throw std::invalid_argument("tokenize_dataset: no images");
    const Shape expected{mc.channels, mc.image_resolution, mc.image_resolution};
    for (const auto& r : images)
        if (r.pixels.shape() != expected)
            throw std::invalid_argument("tokenize_dataset: image " + r.source + " has shape " +
                                        shape_to_string(r.pixels.shape()) + ", tokenizer expects " +
                                        shape_to_string(expected));
    TokenDataset out;
    out.latent_seq_len = mc.latent_seq_len;
    out.token_bits = mc.token_bits;
    out.tokens = pipeline::encode_tokens(tokenizer, data::stack_all(images));
    const bool labelled = std::all_of(images.begin(), images.end(), [](const auto& r) { return r.label.has_value(); });
    if (labelled)
        for (const auto& r : images) out.labels.push_back(*r.label);
    return out;
}

TokenDataset tokenize_dataset(const ValidatedConfig& config, const ckpt::CheckpointState& tokenizer_checkpoint,
                              const data::Dataset& images) {
    ckpt::require_fingerprint(tokenizer_checkpoint, config.model_fingerprint);
    if (tokenizer_checkpoint.stage == ckpt::StageTag::Stage2)
        throw ckpt::StageError("tokenize_dataset needs a tokenizer (Stage 1A/1B) checkpoint");
    Rng rng(0);
    model::Tokenizer tok(config.bundle.model, rng);
    ckpt::restore(tok.params(), tokenizer_checkpoint, tokenizer_checkpoint.ema);
    return tokenize_dataset(tok, images);
}

void write_labels(const std::filesystem::path& path, const std::vector<int>& labels) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    for (int l : labels) os << l << '\n';
}

std::vector<int> read_labels(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    std::vector<int> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::size_t used = 0;
        const int v = std::stoi(line, &used);
        if (used != line.size()) throw std::runtime_error("bad label line '" + line + "' in " + path.string());
        out.push_back(v);
    }
    return out;
}

double mask_fraction(double s) {
    if (!(s >= 0.0 && s <= 1.0)) throw std::invalid_argument("mask_fraction: s outside [0, 1]");
    if (s == 1.0) return 0.0;
    return std::cos(M_PI * s / 2.0);
}

// ------------------------------------------------------------ loss

ad::Var masked_cross_entropy(const ad::Var& logits, const std::vector<std::uint16_t>& targets,
                             const std::vector<bool>& mask) {
    const std::size_t V = logits.shape().back();
    const std::size_t N = logits.numel() / V;
    if (targets.size() != N || mask.size() != N)
        throw std::invalid_argument("masked_cross_entropy: " + std::to_string(N) + " positions but " +
                                    std::to_string(targets.size()) + " targets and " + std::to_string(mask.size()) +
                                    " mask entries");
    const std::size_t count = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
    if (count == 0) throw std::invalid_argument("masked_cross_entropy: no masked positions");

    const double* l = logits.value().data();
    Tensor probs(Shape{N, V});
    double loss = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        if (!mask[i]) continue;
        if (targets[i] >= V) throw std::out_of_range("masked_cross_entropy: target id out of range");
        const double* row = l + i * V;
        const double mx = *std::max_element(row, row + V);
        double z = 0.0;
        for (std::size_t v = 0; v < V; ++v) z += std::exp(row[v] - mx);
        const double log_z = mx + std::log(z);
        for (std::size_t v = 0; v < V; ++v) probs[i * V + v] = std::exp(row[v] - log_z);
        loss -= row[targets[i]] - log_z;
    }
    loss /= static_cast<double>(count);

    return ad::make_result(Tensor::scalar(loss), {logits}, [probs = std::move(probs), targets, mask, V, N, count](ad::Node& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        auto& g = in.grad_buffer();
        const double scale = self.grad.item() / static_cast<double>(count);
        for (std::size_t i = 0; i < N; ++i) {
            if (!mask[i]) continue;
            for (std::size_t v = 0; v < V; ++v) g[i * V + v] += scale * probs[i * V + v];
            g[i * V + targets[i]] -= scale;
        }
    });
}

// ------------------------------------------------------------ model

MaskGit::MaskGit(const Stage2Config& config, std::size_t seq_len, std::size_t group_bits, std::size_t num_classes,
                 Rng& rng)
    : config_(config), seq_len_(seq_len), vocab_(std::size_t{1} << group_bits), num_classes_(num_classes) {
    if (seq_len == 0 || group_bits == 0 || group_bits > 15)
        throw std::invalid_argument("MaskGit: need seq_len >= 1 and 1 <= group bits <= 15");
    if (config.width % config.num_heads)
        throw std::invalid_argument("MaskGit: width " + std::to_string(config.width) + " not divisible by heads");
    const std::size_t W = config.width;
    model::InitContext ctx{store_, rng, 1.0};
    token_embed_ = model::make_embedding(ctx, "stage2.token_embed", Shape{vocab_ + 1, W}, 0.5);
    if (num_classes_ > 0)
        class_embed_ = model::make_embedding(ctx, "stage2.class_embed", Shape{num_classes_ + 1, W}, 0.5);
    pos_embed_ = model::make_embedding(ctx, "stage2.pos_embed", Shape{seq_len_ + (num_classes_ > 0), W}, 0.5);
    for (std::size_t d = 0; d < config.depth; ++d) {
        const std::string n = "stage2.block" + std::to_string(d);
        Block b;
        b.q = model::make_linear(ctx, n + ".q", W, W, ParamKind::Hidden);
        b.k = model::make_linear(ctx, n + ".k", W, W, ParamKind::Hidden);
        b.v = model::make_linear(ctx, n + ".v", W, W, ParamKind::Hidden);
        b.proj = model::make_linear(ctx, n + ".proj", W, W, ParamKind::Output);
        b.fc1 = model::make_linear(ctx, n + ".fc1", W, W * config.mlp_ratio, ParamKind::Hidden);
        b.fc2 = model::make_linear(ctx, n + ".fc2", W * config.mlp_ratio, W, ParamKind::Output);
        blocks_.push_back(std::move(b));
    }
    head_ = model::make_linear(ctx, "stage2.head", W, vocab_, ParamKind::Output);
}

ad::Var MaskGit::logits(const std::vector<std::uint16_t>& ids, std::size_t batch, const std::vector<int>& classes) const {
    if (ids.size() != batch * seq_len_) throw std::invalid_argument("MaskGit::logits: id count does not match batch");
    const std::size_t W = config_.width;
    std::vector<std::size_t> idx(ids.begin(), ids.end());
    ad::Var h = ad::reshape(ad::embedding(token_embed_, idx), Shape{batch, seq_len_, W});
    const bool cond = num_classes_ > 0;
    if (cond) {
        if (classes.size() != batch) throw std::invalid_argument("MaskGit::logits: one class per sequence required");
        std::vector<std::size_t> cls(batch);
        for (std::size_t b = 0; b < batch; ++b) {
            if (classes[b] < 0 || classes[b] > null_class())
                throw std::out_of_range("MaskGit::logits: class " + std::to_string(classes[b]) + " out of range");
            cls[b] = static_cast<std::size_t>(classes[b]);
        }
        h = ad::concat_seq(ad::reshape(ad::embedding(class_embed_, cls), Shape{batch, 1, W}), h);
    } else if (!classes.empty()) {
        throw std::invalid_argument("MaskGit::logits: unconditional model given class labels");
    }
    h = ad::add_position(h, pos_embed_);
    for (const auto& b : blocks_) {
        const ad::Var n1 = ad::layer_norm(h);
        h = ad::add(h, b.proj(ad::attention(b.q(n1), b.k(n1), b.v(n1), config_.num_heads)));
        const ad::Var n2 = ad::layer_norm(h);
        h = ad::add(h, b.fc2(ad::gelu(b.fc1(n2))));
    }
    if (cond) h = ad::slice_seq(h, 1, seq_len_);
    return head_(ad::layer_norm(h));
}

std::uint64_t MaskGit::fingerprint() const {
    std::ostringstream os;
    os << "maskgit width=" << config_.width << " depth=" << config_.depth << " heads=" << config_.num_heads
       << " mlp_ratio=" << config_.mlp_ratio << " seq_len=" << seq_len_ << " vocab=" << vocab_
       << " classes=" << num_classes_;
    const std::string s = os.str();
    return fnv1a64(s.data(), s.size());
}

// ------------------------------------------------------------ training

Stage2Result train_maskgit(const Stage2Config& config, const TokenDataset& dataset, std::uint64_t seed,
                           const std::function<void(const Stage2StepRecord&)>& on_step) {
    const auto& tokens = dataset.tokens;
    if (tokens.batch == 0 || tokens.length == 0) throw std::invalid_argument("train_maskgit: dataset is empty");
    const std::size_t vocab = std::size_t{1} << tokens.group_bits;
    for (auto id : tokens.ids)
        if (id >= vocab)
            throw std::out_of_range("train_maskgit: id " + std::to_string(id) + " overflows vocabulary " + std::to_string(vocab));
    std::size_t num_classes = 0;
    if (dataset.conditional()) {
        if (dataset.labels.size() != tokens.batch) throw std::invalid_argument("train_maskgit: label count mismatch");
        for (int l : dataset.labels) {
            if (l < 0) throw std::invalid_argument("train_maskgit: negative class label");
            num_classes = std::max(num_classes, static_cast<std::size_t>(l) + 1);
        }
    }

    Rng init_rng = derive_rng(seed, 0x6d67696e);  // "mgin"
    Rng rng = derive_rng(seed, 0x6d677472);       // "mgtr"
    MaskGit model(config, tokens.length, tokens.group_bits, num_classes, init_rng);
    auto& store = model.params();
    auto adam = optim::AdamState::zeros_like(store);
    const optim::AdamOptions opts{config.learning_rate, 0.9, 0.95};
    data::BatchSampler batches(tokens.batch, config.batch_size, seed);
    const std::size_t L = tokens.length;

    Stage2Result result;
    for (std::size_t step = 1; step <= config.max_steps; ++step) {
        const auto idx = batches.next();
        const std::size_t B = idx.size();
        std::vector<std::uint16_t> input(B * L), target(B * L);
        std::vector<bool> mask(B * L, false);
        std::vector<int> classes;
        std::vector<std::size_t> order(L);
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t i = 0; i < L; ++i) target[b * L + i] = tokens.at(idx[b], i);
            const double r = mask_fraction(uniform01(rng));
            const std::size_t n = std::clamp<std::size_t>(
                static_cast<std::size_t>(std::ceil(r * static_cast<double>(L))), 1, L);
            std::iota(order.begin(), order.end(), 0);
            std::shuffle(order.begin(), order.end(), rng);
            for (std::size_t i = 0; i < n; ++i) mask[b * L + order[i]] = true;
            for (std::size_t i = 0; i < L; ++i) input[b * L + i] = mask[b * L + i] ? model.mask_id() : target[b * L + i];
            if (num_classes > 0) {
                const bool drop = uniform01(rng) < config.class_dropout_prob;
                classes.push_back(drop ? model.null_class() : dataset.labels[idx[b]]);
            }
        }
        store.zero_grad();
        const ad::Var loss = masked_cross_entropy(model.logits(input, B, classes), target, mask);
        ad::backward(loss);
        optim::adam_step(store, adam, opts);
        const Stage2StepRecord rec{step, loss.value().item()};
        result.steps.push_back(rec);
        if (on_step) on_step(rec);
    }
    // Only the stage2 section is meaningful for this checkpoint.
    std::istringstream all(to_config_text(ConfigBundle{{}, {}, {}, config}));
    std::string text, line;
    while (std::getline(all, line))
        if (line.rfind("stage2.", 0) == 0) text += line + "\n";
    result.checkpoint = ckpt::capture(store, store.values(), adam, ckpt::StageTag::Stage2, config.max_steps,
                                      model.fingerprint(), text);
    return result;
}

MaskGit load_maskgit(const Stage2Config& config, const ckpt::CheckpointState& state) {
    if (state.stage != ckpt::StageTag::Stage2)
        throw ckpt::StageError("expected a Stage 2 checkpoint, got stage " + ckpt::stage_name(state.stage));
    std::size_t seq_len = 0, vocab = 0, classes = 0;
    for (std::size_t i = 0; i < state.names.size(); ++i) {
        const auto& n = state.names[i];
        const auto& s = state.params[i].shape();
        if (n == "stage2.head.weight") vocab = s.at(0);
        if (n == "stage2.class_embed") classes = s.at(0) - 1;
        if (n == "stage2.pos_embed") seq_len = s.at(0);
    }
    if (classes > 0) --seq_len;
    if (vocab == 0 || seq_len == 0 || (vocab & (vocab - 1)))
        throw ckpt::CorruptCheckpointError("Stage 2 checkpoint lacks a consistent head / position table");
    Rng rng(0);
    MaskGit model(config, seq_len, static_cast<std::size_t>(std::countr_zero(vocab)), classes, rng);
    ckpt::require_fingerprint(state, model.fingerprint());
    ckpt::restore(model.params(), state, state.params);
    return model;
}

// ------------------------------------------------------------ sampling

Tensor guide_logits(const Tensor& cond, const Tensor& uncond, double weight) {
    require_same_shape(cond, uncond, "guide_logits");
    if (weight == 1.0) return cond;
    Tensor out = cond;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = uncond[i] + weight * (cond[i] - uncond[i]);
    return out;
}

quant::TokenIds sample_maskgit(const MaskGit& model, std::size_t count, const SampleOptions& options,
                               std::vector<std::vector<std::uint16_t>>* trace) {
    if (options.steps == 0) throw std::invalid_argument("sample_maskgit: steps must be >= 1");
    if (count == 0) throw std::invalid_argument("sample_maskgit: count must be >= 1");
    if (options.temperature < 0.0) throw std::invalid_argument("sample_maskgit: negative temperature");
    const std::size_t L = model.seq_len(), V = model.vocab();
    const bool cond = model.num_classes() > 0;
    if (options.class_label && !cond) throw std::invalid_argument("sample_maskgit: model is unconditional");
    if (options.class_label && (*options.class_label < 0 || *options.class_label >= static_cast<int>(model.num_classes())))
        throw std::out_of_range("sample_maskgit: class label out of range");

    Rng rng = derive_rng(options.seed, 0x6d677361);  // "mgsa"
    ad::NoGradGuard guard;
    std::vector<std::uint16_t> ids(count * L, model.mask_id());
    std::vector<int> cls, null_cls;
    if (cond) {
        cls.assign(count, options.class_label.value_or(model.null_class()));
        null_cls.assign(count, model.null_class());
    }
    const bool guided = cond && options.class_label && options.guidance_weight != 1.0;

    std::vector<double> probs(V);
    for (std::size_t k = 0; k < options.steps; ++k) {
        const double progress = options.steps == 1 ? 0.0 : static_cast<double>(k) / static_cast<double>(options.steps - 1);
        const double tau = options.temperature * (1.0 - progress);
        Tensor logits = model.logits(ids, count, cls).value();
        if (guided) logits = guide_logits(logits, model.logits(ids, count, null_cls).value(), options.guidance_weight);

        const std::size_t keep_masked = static_cast<std::size_t>(
            std::floor(static_cast<double>(L) * mask_fraction(static_cast<double>(k + 1) / static_cast<double>(options.steps))));
        for (std::size_t b = 0; b < count; ++b) {
            std::vector<std::pair<double, std::size_t>> candidates;  // (confidence, position)
            std::vector<std::uint16_t> proposal(L);
            for (std::size_t i = 0; i < L; ++i) {
                if (ids[b * L + i] != model.mask_id()) continue;
                const double* row = logits.data() + (b * L + i) * V;
                const double mx = *std::max_element(row, row + V);
                double z = 0.0;
                for (std::size_t v = 0; v < V; ++v) z += std::exp(row[v] - mx);
                std::size_t pick;
                if (tau <= 0.0) {
                    pick = static_cast<std::size_t>(std::max_element(row, row + V) - row);
                } else {
                    double zt = 0.0;
                    for (std::size_t v = 0; v < V; ++v) zt += probs[v] = std::exp((row[v] - mx) / tau);
                    double u = uniform01(rng) * zt;
                    pick = V - 1;
                    for (std::size_t v = 0; v < V; ++v) {
                        u -= probs[v];
                        if (u < 0.0) {
                            pick = v;
                            break;
                        }
                    }
                }
                proposal[i] = static_cast<std::uint16_t>(pick);
                candidates.emplace_back(row[pick] - mx - std::log(z), i);
            }
            const std::size_t masked = candidates.size();
            std::size_t remain = std::min(keep_masked, masked);
            if (remain == masked && masked > 0) remain = masked - 1;  // always make progress
            std::stable_sort(candidates.begin(), candidates.end(),
                             [](const auto& a, const auto& c) { return a.first > c.first; });
            for (std::size_t j = 0; j < masked - remain; ++j) {
                const std::size_t i = candidates[j].second;
                ids[b * L + i] = proposal[i];
            }
        }
        if (trace) trace->push_back(ids);
    }
    quant::TokenIds out;
    out.batch = count;
    out.length = L;
    out.group_bits = static_cast<std::size_t>(std::countr_zero(V));
    out.ids = std::move(ids);
    return out;
}

}  // namespace flowmo::stage2
