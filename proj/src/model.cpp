#include "flowmo/model.hpp"

#include <cmath>
#include <stdexcept>

#include "flowmo/quantizer.hpp"

namespace flowmo::model {

Linear make_linear(InitContext& ctx, const std::string& name, std::size_t in, std::size_t out, ParamKind kind,
                   bool bias) {
    double stddev = 1.0 / std::sqrt(static_cast<double>(in));
    double lr_mult = 1.0;
    switch (kind) {
        case ParamKind::Hidden:
        case ParamKind::MlpWeight:
            lr_mult = 1.0 / ctx.width_factor;
            break;
        case ParamKind::Output:
            stddev /= ctx.width_factor;
            break;
        default:
            break;
    }
    Linear l;
    l.w = ctx.store.add(name + ".weight", normal_tensor(Shape{out, in}, ctx.rng, stddev), kind, lr_mult);
    if (bias) l.b = ctx.store.add(name + ".bias", Tensor(Shape{out}, 0.0), ParamKind::Bias, 1.0);
    return l;
}

ad::Var make_embedding(InitContext& ctx, const std::string& name, Shape shape, double stddev) {
    return ctx.store.add(name, normal_tensor(std::move(shape), ctx.rng, stddev), ParamKind::Embedding, 1.0);
}

namespace {

std::vector<std::size_t> patch_index(std::size_t B, std::size_t C, std::size_t H, std::size_t W, std::size_t p) {
    const std::size_t gh = H / p, gw = W / p, pd = p * p * C;
    std::vector<std::size_t> idx(B * gh * gw * pd);
    std::size_t o = 0;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t gy = 0; gy < gh; ++gy)
            for (std::size_t gx = 0; gx < gw; ++gx)
                for (std::size_t py = 0; py < p; ++py)
                    for (std::size_t px = 0; px < p; ++px)
                        for (std::size_t c = 0; c < C; ++c)
                            idx[o++] = ((b * C + c) * H + gy * p + py) * W + gx * p + px;
    return idx;
}

}  // namespace

ad::Var patchify(const ad::Var& x, std::size_t p) {
    if (x.shape().size() != 4) throw std::invalid_argument("patchify: expected [B, C, H, W]");
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (p == 0 || H % p || W % p) {
        throw std::invalid_argument("patchify: patch size " + std::to_string(p) + " does not divide " +
                                    std::to_string(H) + "x" + std::to_string(W));
    }
    return ad::gather(x, patch_index(B, C, H, W, p), Shape{B, (H / p) * (W / p), p * p * C});
}

ad::Var unpatchify(const ad::Var& seq, std::size_t p, std::size_t C, std::size_t H, std::size_t W) {
    if (p == 0 || H % p || W % p) throw std::invalid_argument("unpatchify: indivisible resolution");
    if (seq.shape().size() != 3 || seq.dim(1) != (H / p) * (W / p) || seq.dim(2) != p * p * C)
        throw std::invalid_argument("unpatchify: sequence shape " + shape_to_string(seq.shape()) + " incompatible");
    const std::size_t B = seq.dim(0);
    const auto fwd = patch_index(B, C, H, W, p);
    std::vector<std::size_t> inv(fwd.size());
    for (std::size_t i = 0; i < fwd.size(); ++i) inv[fwd[i]] = i;
    return ad::gather(seq, std::move(inv), Shape{B, C, H, W});
}

Tensor timestep_embedding(const std::vector<double>& t, std::size_t dim) {
    const std::size_t half = dim / 2;
    Tensor out(Shape{t.size(), dim});
    for (std::size_t b = 0; b < t.size(); ++b) {
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
            const double arg = 1000.0 * t[b] * freq;
            out[b * dim + i] = std::cos(arg);
            out[b * dim + half + i] = std::sin(arg);
        }
    }
    return out;
}

ad::Var apply_latent_dropout(const ad::Var& c, double prob, Rng& rng, std::vector<bool>* dropped) {
    if (!(prob >= 0.0 && prob <= 1.0)) throw std::invalid_argument("latent dropout probability outside [0, 1]");
    const std::size_t B = c.dim(0);
    std::vector<double> keep(B, 1.0);
    if (dropped) dropped->assign(B, false);
    bool any = false;
    for (std::size_t b = 0; b < B; ++b) {
        if (prob > 0.0 && uniform01(rng) < prob) {
            keep[b] = 0.0;
            any = true;
            if (dropped) (*dropped)[b] = true;
        }
    }
    return any ? ad::scale_samples(c, keep) : c;
}

void renormalize_weights(ParameterStore& store, const std::function<bool(const Param&)>& skip) {
    for (auto& p : store.all()) {
        if (p.kind != ParamKind::MlpWeight || (skip && skip(p))) continue;
        Tensor& w = p.var.mutable_value();
        const std::size_t rows = w.dim(0), cols = w.dim(1);
        for (std::size_t r = 0; r < rows; ++r) {
            double* row = w.data() + r * cols;
            double s = 0.0;
            for (std::size_t c = 0; c < cols; ++c) s += row[c] * row[c];
            const double norm = std::sqrt(s);
            if (norm < 1e-8) continue;
            for (std::size_t c = 0; c < cols; ++c) row[c] /= norm;
        }
    }
}

namespace {

StreamWeights make_stream(InitContext& ctx, const std::string& name, std::size_t width, std::size_t mlp_ratio,
                          bool pre_only, bool adaln) {
    StreamWeights s;
    s.pre_only = pre_only;
    if (!pre_only) s.q = make_linear(ctx, name + ".q", width, width, ParamKind::Hidden);
    s.k = make_linear(ctx, name + ".k", width, width, ParamKind::Hidden);
    s.v = make_linear(ctx, name + ".v", width, width, ParamKind::Hidden);
    if (!pre_only) {
        s.proj = make_linear(ctx, name + ".proj", width, width, ParamKind::Hidden);
        s.fc1 = make_linear(ctx, name + ".fc1", width, width * mlp_ratio, ParamKind::MlpWeight);
        s.fc2 = make_linear(ctx, name + ".fc2", width * mlp_ratio, width, ParamKind::MlpWeight);
    }
    if (adaln) s.modulation = make_linear(ctx, name + ".modulation", width, (pre_only ? 2 : 6) * width, ParamKind::Hidden);
    return s;
}

struct Modulation {
    ad::Var shift1, scale1, gate1, shift2, scale2, gate2;
};

Modulation split_modulation(const ad::Var& m, std::size_t width, bool pre_only) {
    Modulation out;
    out.shift1 = ad::slice_cols(m, 0, width);
    out.scale1 = ad::slice_cols(m, width, width);
    if (!pre_only) {
        out.gate1 = ad::slice_cols(m, 2 * width, width);
        out.shift2 = ad::slice_cols(m, 3 * width, width);
        out.scale2 = ad::slice_cols(m, 4 * width, width);
        out.gate2 = ad::slice_cols(m, 5 * width, width);
    }
    return out;
}

ad::Var broadcast_batch(const ad::Var& pos, std::size_t batch) {
    return ad::add_position(ad::constant(Tensor(Shape{batch, pos.dim(0), pos.dim(1)}, 0.0)), pos);
}

}  // namespace

Tokenizer::Tokenizer(const ModelConfig& config, Rng& rng) : config_(config) {
    const std::size_t W = config_.hidden_size();
    const std::size_t L = config_.image_tokens();
    const std::size_t S = config_.latent_seq_len;
    const std::size_t D = config_.token_bits;
    const std::size_t P = config_.patch_dim();
    if (config_.image_resolution % config_.patch_size) throw std::invalid_argument("patch size must divide resolution");
    if (W % config_.num_heads) throw std::invalid_argument("num_heads must divide hidden size");

    InitContext ctx{store_, rng, static_cast<double>(config_.width_factor)};
    constexpr double kPosStd = 0.5;

    enc_patch_in_ = make_linear(ctx, "encoder.patch_in", P, W, ParamKind::Embedding);
    enc_image_pos_ = make_embedding(ctx, "encoder.image_pos", Shape{L, W}, kPosStd);
    enc_latent_pos_ = make_embedding(ctx, "encoder.latent_pos", Shape{S, W}, kPosStd);
    for (std::size_t i = 0; i < config_.encoder_depth; ++i) {
        const std::string name = "encoder.block" + std::to_string(i);
        const bool last = i + 1 == config_.encoder_depth;
        enc_blocks_.push_back({make_stream(ctx, name + ".image", W, config_.mlp_ratio, last, false),
                               make_stream(ctx, name + ".latent", W, config_.mlp_ratio, false, false)});
    }
    enc_out_ = make_linear(ctx, "encoder.out", W, D, ParamKind::Output);

    dec_patch_in_ = make_linear(ctx, "decoder.patch_in", P, W, ParamKind::Embedding);
    dec_latent_in_ = make_linear(ctx, "decoder.latent_in", D, W, ParamKind::Embedding);
    dec_image_pos_ = make_embedding(ctx, "decoder.image_pos", Shape{L, W}, kPosStd);
    dec_latent_pos_ = make_embedding(ctx, "decoder.latent_pos", Shape{S, W}, kPosStd);
    time_in_ = make_linear(ctx, "decoder.time_in", kTimeEmbeddingDim, W, ParamKind::Embedding);
    time_hidden_ = make_linear(ctx, "decoder.time_hidden", W, W, ParamKind::Hidden);
    for (std::size_t i = 0; i < config_.decoder_depth; ++i) {
        const std::string name = "decoder.block" + std::to_string(i);
        const bool last = i + 1 == config_.decoder_depth;
        dec_blocks_.push_back({make_stream(ctx, name + ".image", W, config_.mlp_ratio, false, true),
                               make_stream(ctx, name + ".latent", W, config_.mlp_ratio, last, true)});
    }
    dec_final_mod_ = make_linear(ctx, "decoder.final_modulation", W, 2 * W, ParamKind::Hidden);
    dec_out_ = make_linear(ctx, "decoder.out", W, P, ParamKind::Output);
}

StreamPair Tokenizer::run_block(const DualStreamBlock& block, const ad::Var& image, const ad::Var& latent,
                                const ad::Var& temb) const {
    const std::size_t W = config_.hidden_size();
    const bool adaln = temb.defined();
    const ad::Var act = adaln ? ad::silu(temb) : ad::Var();

    struct Prepared {
        Modulation mod;
        ad::Var q, k, v;
    };
    auto prepare = [&](const StreamWeights& s, const ad::Var& x) {
        Prepared p;
        ad::Var h = ad::layer_norm(x);
        if (adaln) {
            p.mod = split_modulation(s.modulation(act), W, s.pre_only);
            h = ad::modulate(h, p.mod.shift1, p.mod.scale1);
        }
        if (!s.pre_only) p.q = s.q(h);
        p.k = s.k(h);
        p.v = s.v(h);
        return p;
    };
    const Prepared lat = prepare(block.latent, latent);
    const Prepared img = prepare(block.image, image);

    // Keys/values cover [latent, image]; queries only the streams that continue.
    const ad::Var keys = ad::concat_seq(lat.k, img.k);
    const ad::Var values = ad::concat_seq(lat.v, img.v);
    ad::Var queries;
    if (!block.latent.pre_only && !block.image.pre_only) queries = ad::concat_seq(lat.q, img.q);
    else queries = block.latent.pre_only ? img.q : lat.q;
    const ad::Var attended = ad::attention(queries, keys, values, config_.num_heads);

    auto finish = [&](const StreamWeights& s, const Prepared& p, const ad::Var& x, const ad::Var& a) {
        ad::Var out = adaln ? ad::gated_add(x, p.mod.gate1, s.proj(a)) : ad::add(x, s.proj(a));
        ad::Var h = ad::layer_norm(out);
        if (adaln) h = ad::modulate(h, p.mod.shift2, p.mod.scale2);
        const ad::Var m = s.fc2(ad::gelu(s.fc1(h)));
        return adaln ? ad::gated_add(out, p.mod.gate2, m) : ad::add(out, m);
    };

    StreamPair result;
    const std::size_t S = latent.dim(1);
    if (!block.latent.pre_only && !block.image.pre_only) {
        result.latent = finish(block.latent, lat, latent, ad::slice_seq(attended, 0, S));
        result.image = finish(block.image, img, image, ad::slice_seq(attended, S, image.dim(1)));
    } else if (block.image.pre_only) {
        result.latent = finish(block.latent, lat, latent, attended);
    } else {
        result.image = finish(block.image, img, image, attended);
    }
    return result;
}

void Tokenizer::check_image(const ad::Var& x, const char* what) const {
    const std::size_t R = config_.image_resolution;
    if (x.shape().size() != 4 || x.dim(1) != config_.channels || x.dim(2) != R || x.dim(3) != R) {
        throw std::invalid_argument(std::string(what) + ": expected [B, " + std::to_string(config_.channels) + ", " +
                                    std::to_string(R) + ", " + std::to_string(R) + "], got " +
                                    shape_to_string(x.shape()));
    }
}

ad::Var Tokenizer::encode(const ad::Var& x) const {
    check_image(x, "encode");
    const std::size_t B = x.dim(0);
    ad::Var image = ad::add_position(enc_patch_in_(patchify(x, config_.patch_size)), enc_image_pos_);
    ad::Var latent = broadcast_batch(enc_latent_pos_, B);  // c_0 = 0, so only the position term remains
    for (const auto& block : enc_blocks_) {
        StreamPair next = run_block(block, image, latent, ad::Var());
        image = next.image;
        latent = next.latent;
    }
    return enc_out_(ad::layer_norm(latent));
}

ad::Var Tokenizer::quantize(const ad::Var& c_hat) const {
    if (config_.quantizer_kind == QuantizerKind::FSQ) return quant::fsq_quantize(c_hat, config_.fsq_levels);
    return quant::binarize(c_hat);
}

ad::Var Tokenizer::decode(const ad::Var& x_t, const ad::Var& c, const std::vector<double>& t) const {
    check_image(x_t, "decode");
    const std::size_t B = x_t.dim(0);
    const Shape code_shape{B, config_.latent_seq_len, config_.token_bits};
    if (c.shape() != code_shape) {
        throw std::invalid_argument("decode: code shape " + shape_to_string(c.shape()) + " expected " +
                                    shape_to_string(code_shape));
    }
    if (t.size() != B) throw std::invalid_argument("decode: need one noise level per sample");
    for (double v : t)
        if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("decode: t outside [0, 1]");

    const ad::Var temb = time_hidden_(ad::silu(time_in_(ad::constant(timestep_embedding(t, kTimeEmbeddingDim)))));
    ad::Var image = ad::add_position(dec_patch_in_(patchify(x_t, config_.patch_size)), dec_image_pos_);
    ad::Var latent = ad::add_position(dec_latent_in_(c), dec_latent_pos_);
    for (const auto& block : dec_blocks_) {
        StreamPair next = run_block(block, image, latent, temb);
        image = next.image;
        latent = next.latent;
    }
    const std::size_t W = config_.hidden_size();
    const ad::Var fm = dec_final_mod_(ad::silu(temb));
    const ad::Var h = ad::modulate(ad::layer_norm(image), ad::slice_cols(fm, 0, W), ad::slice_cols(fm, W, W));
    return unpatchify(dec_out_(h), config_.patch_size, config_.channels, config_.image_resolution,
                      config_.image_resolution);
}

sampling::VelocityField Tokenizer::velocity_field() const {
    return [this](const ad::Var& x_t, const ad::Var& c, double t) {
        return decode(x_t, c, std::vector<double>(x_t.dim(0), t));
    };
}

}  // namespace flowmo::model
