#include "flowmo/quantizer.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace flowmo::quant {

namespace {

void require_finite(const Tensor& t, const char* what) {
    if (!all_finite(t.span())) throw std::invalid_argument(std::string(what) + ": input contains non-finite values");
}

void check_groups(std::size_t D, std::size_t g) {
    if (g == 0 || g > 16) throw std::invalid_argument("group bits must be in [1, 16], got " + std::to_string(g));
    if (D % g != 0) {
        throw std::invalid_argument("token size " + std::to_string(D) + " is not divisible by group bits " +
                                    std::to_string(g));
    }
}

// Sign of codebook entry k at bit i.
inline double code_sign(std::size_t k, std::size_t i) { return ((k >> i) & 1U) ? 1.0 : -1.0; }

struct EntropyForward {
    double loss = 0.0;
    std::vector<double> dlogits;  // [groups][rows][K], filled only when requested
};

EntropyForward entropy_forward(const Tensor& c, std::size_t g, bool want_grad) {
    if (c.rank() == 0) throw std::invalid_argument("entropy_loss: needs at least one axis");
    const std::size_t D = c.shape().back();
    check_groups(D, g);
    const std::size_t rows = c.numel() / D;
    const std::size_t groups = D / g;
    const std::size_t K = std::size_t{1} << g;
    const double inv_rows = 1.0 / static_cast<double>(rows);
    const double inv_groups = 1.0 / static_cast<double>(groups);

    EntropyForward out;
    if (want_grad) out.dlogits.assign(groups * rows * K, 0.0);
    std::vector<double> logp(rows * K), mean_p(K), row_entropy(rows);
    for (std::size_t j = 0; j < groups; ++j) {
        std::fill(mean_p.begin(), mean_p.end(), 0.0);
        double mean_entropy = 0.0;
        for (std::size_t n = 0; n < rows; ++n) {
            const double* x = c.data() + n * D + j * g;
            double* lp = logp.data() + n * K;
            double mx = -INFINITY;
            for (std::size_t k = 0; k < K; ++k) {
                double s = 0.0;
                for (std::size_t i = 0; i < g; ++i) s += x[i] * code_sign(k, i);
                lp[k] = s;
                mx = std::max(mx, s);
            }
            double z = 0.0;
            for (std::size_t k = 0; k < K; ++k) z += std::exp(lp[k] - mx);
            const double lse = mx + std::log(z);
            double h = 0.0;
            for (std::size_t k = 0; k < K; ++k) {
                lp[k] -= lse;
                const double p = std::exp(lp[k]);
                mean_p[k] += p * inv_rows;
                h -= p * lp[k];
            }
            row_entropy[n] = h;
            mean_entropy += h * inv_rows;
        }
        double pooled_entropy = 0.0;
        for (std::size_t k = 0; k < K; ++k)
            if (mean_p[k] > 0.0) pooled_entropy -= mean_p[k] * std::log(mean_p[k]);
        out.loss += (mean_entropy - pooled_entropy) * inv_groups;

        if (!want_grad) continue;
        for (std::size_t n = 0; n < rows; ++n) {
            const double* lp = logp.data() + n * K;
            double* dl = out.dlogits.data() + (j * rows + n) * K;
            // d(pooled)/d(mean_p_k) = -(log mean_p_k + 1); the constant cancels below.
            double avg = 0.0;
            for (std::size_t k = 0; k < K; ++k) {
                const double p = std::exp(lp[k]);
                const double gk = mean_p[k] > 0.0 ? -std::log(mean_p[k]) : 0.0;
                avg += p * gk;
            }
            for (std::size_t k = 0; k < K; ++k) {
                const double p = std::exp(lp[k]);
                const double gk = mean_p[k] > 0.0 ? -std::log(mean_p[k]) : 0.0;
                const double d_row = -p * (lp[k] + row_entropy[n]);
                const double d_pool = p * (gk - avg);
                dl[k] = inv_groups * inv_rows * (d_row - d_pool);
            }
        }
    }
    return out;
}

void put_u16(std::ostream& os, std::uint16_t v) {
    const std::array<char, 2> b{static_cast<char>(v & 0xFF), static_cast<char>(v >> 8)};
    os.write(b.data(), 2);
}
void put_u32(std::ostream& os, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}
std::uint16_t get_u16(std::istream& is) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}
std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

Tensor binarize_values(const Tensor& c_hat) {
    require_finite(c_hat, "binarize");
    Tensor out(c_hat.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = c_hat[i] >= 0.0 ? 1.0 : -1.0;
    return out;
}

ad::Var binarize(const ad::Var& c_hat) { return ad::straight_through(c_hat, binarize_values(c_hat.value())); }

ad::Var commitment_loss(const ad::Var& c_hat) {
    return ad::mse(c_hat, ad::constant(binarize_values(c_hat.value())));
}

double entropy_loss_value(const Tensor& c_hat, std::size_t group_bits) {
    require_finite(c_hat, "entropy_loss");
    return entropy_forward(c_hat, group_bits, false).loss;
}

ad::Var entropy_loss(const ad::Var& c_hat, std::size_t group_bits) {
    require_finite(c_hat.value(), "entropy_loss");
    auto fwd = entropy_forward(c_hat.value(), group_bits, c_hat.requires_grad() && ad::grad_enabled());
    const std::size_t D = c_hat.shape().back();
    auto dlogits = std::make_shared<std::vector<double>>(std::move(fwd.dlogits));
    return ad::make_result(Tensor::scalar(fwd.loss), {c_hat}, [dlogits, D, group_bits](ad::Node& self) {
        auto& grad = self.inputs[0]->grad_buffer();
        const std::size_t rows = grad.numel() / D;
        const std::size_t groups = D / group_bits;
        const std::size_t K = std::size_t{1} << group_bits;
        const double up = self.grad[0];
        for (std::size_t j = 0; j < groups; ++j)
            for (std::size_t n = 0; n < rows; ++n) {
                const double* dl = dlogits->data() + (j * rows + n) * K;
                double* gx = grad.data() + n * D + j * group_bits;
                for (std::size_t k = 0; k < K; ++k) {
                    if (dl[k] == 0.0) continue;
                    for (std::size_t i = 0; i < group_bits; ++i) gx[i] += up * dl[k] * code_sign(k, i);
                }
            }
    });
}

Tensor fsq_values(const Tensor& c_hat, std::size_t levels) {
    if (levels < 3 || levels % 2 == 0)
        throw std::invalid_argument("fsq: levels must be odd and >= 3, got " + std::to_string(levels));
    require_finite(c_hat, "fsq");
    const double half = static_cast<double>(levels - 1) / 2.0;
    Tensor out(c_hat.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::round(std::tanh(c_hat[i]) * half) / half;
    return out;
}

ad::Var fsq_quantize(const ad::Var& c_hat, std::size_t levels) {
    Tensor q = fsq_values(c_hat.value(), levels);
    return ad::straight_through(ad::tanh(c_hat), std::move(q));
}

TokenIds pack_tokens(const Tensor& code, std::size_t g) {
    if (code.rank() != 3) throw std::invalid_argument("pack_tokens: expected [batch, S, D]");
    const std::size_t B = code.dim(0), S = code.dim(1), D = code.dim(2);
    check_groups(D, g);
    TokenIds out{B, S * D / g, g, {}};
    out.ids.resize(B * out.length);
    for (std::size_t i = 0; i < out.ids.size(); ++i) {
        std::uint32_t id = 0;
        for (std::size_t j = 0; j < g; ++j) {
            const double v = code[i * g + j];
            if (v != 1.0 && v != -1.0) throw std::invalid_argument("pack_tokens: code entries must be exactly +-1");
            if (v > 0.0) id |= (1U << j);
        }
        out.ids[i] = static_cast<std::uint16_t>(id);
    }
    return out;
}

Tensor unpack_tokens(const TokenIds& tokens, std::size_t S, std::size_t D) {
    const std::size_t g = tokens.group_bits;
    check_groups(D, g);
    if (tokens.length != S * D / g) {
        throw std::invalid_argument("unpack_tokens: " + std::to_string(tokens.length) + " ids per image do not match S=" +
                                    std::to_string(S) + ", D=" + std::to_string(D) + ", g=" + std::to_string(g));
    }
    if (tokens.ids.size() != tokens.batch * tokens.length) throw std::invalid_argument("unpack_tokens: id count");
    Tensor out(Shape{tokens.batch, S, D});
    for (std::size_t i = 0; i < tokens.ids.size(); ++i) {
        const std::uint32_t id = tokens.ids[i];
        if (id >= (1U << g)) {
            throw std::out_of_range("unpack_tokens: id " + std::to_string(id) + " out of range for " +
                                    std::to_string(g) + " bits");
        }
        for (std::size_t j = 0; j < g; ++j) out[i * g + j] = ((id >> j) & 1U) ? 1.0 : -1.0;
    }
    return out;
}

void write_token_file(const std::filesystem::path& path, const TokenIds& tokens, std::size_t S, std::size_t D) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write token file " + path.string());
    os.write("FMTK", 4);
    put_u16(os, 1);
    put_u16(os, static_cast<std::uint16_t>(S));
    put_u16(os, static_cast<std::uint16_t>(D));
    put_u16(os, static_cast<std::uint16_t>(tokens.group_bits));
    put_u32(os, static_cast<std::uint32_t>(tokens.batch));
    for (auto id : tokens.ids) put_u16(os, id);
    if (!os) throw std::runtime_error("failed writing token file " + path.string());
}

TokenIds read_token_file(const std::filesystem::path& path, TokenFileHeader* header) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read token file " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "FMTK") throw std::runtime_error("not a token file: " + path.string());
    TokenFileHeader h;
    h.version = get_u16(is);
    h.latent_seq_len = get_u16(is);
    h.token_bits = get_u16(is);
    h.group_bits = get_u16(is);
    h.count = get_u32(is);
    if (!is) throw std::runtime_error("truncated token file header: " + path.string());
    if (h.version != 1) throw std::runtime_error("unsupported token file version " + std::to_string(h.version));
    check_groups(h.token_bits, h.group_bits);
    TokenIds t{h.count, static_cast<std::size_t>(h.latent_seq_len) * h.token_bits / h.group_bits, h.group_bits, {}};
    t.ids.resize(t.batch * t.length);
    for (auto& id : t.ids) {
        id = get_u16(is);
        if (id >= (1U << h.group_bits)) throw std::out_of_range("token file contains out-of-range id");
    }
    if (!is) throw std::runtime_error("truncated token file: " + path.string());
    if (header) *header = h;
    return t;
}

}  // namespace flowmo::quant
