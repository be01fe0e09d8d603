#include "flowmo/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "flowmo/kernels.hpp"

namespace flowmo {

bool all_finite(std::span<const double> values) noexcept {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace flowmo

namespace flowmo::ad {

namespace {

thread_local bool g_grad_enabled = true;

Tensor& gbuf(const std::shared_ptr<Node>& n) { return n->grad_buffer(); }

bool needs(const std::shared_ptr<Node>& n) { return n && n->requires_grad; }

std::size_t last_dim(const Shape& s) {
    if (s.empty()) throw std::invalid_argument("operation needs a tensor of rank >= 1");
    return s.back();
}

void require_rank(const Var& a, std::size_t rank, const char* what) {
    if (a.shape().size() != rank) {
        throw std::invalid_argument(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                                    shape_to_string(a.shape()));
    }
}

}  // namespace

Tensor& Node::grad_buffer() {
    if (grad.shape() != value.shape() || grad.numel() != value.numel()) grad = Tensor(value.shape(), 0.0);
    return grad;
}

Tensor Var::grad() const {
    if (node_->grad.numel() == node_->value.numel() && node_->grad.shape() == node_->value.shape()) return node_->grad;
    return Tensor(node_->value.shape(), 0.0);
}

void Var::zero_grad() { node_->grad = Tensor(); }

Var constant(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(std::move(n));
}

Var parameter(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (g_grad_enabled) {
        const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
        if (any) {
            n->requires_grad = true;
            n->inputs.reserve(inputs.size());
            for (auto& in : inputs) n->inputs.push_back(in.node());
            n->backward = std::move(backward_fn);
        }
    }
    return Var(std::move(n));
}

void backward(const Var& loss) {
    if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be a scalar, got " +
                                                       shape_to_string(loss.shape()));
    if (!loss.requires_grad()) return;

    // Iterative post-order DFS.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child && child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss.node()->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
    return make_result(std::move(out), {a, b}, [](Node& self) {
        for (auto& in : self.inputs) {
            if (!needs(in)) continue;
            auto& g = gbuf(in);
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
    return make_result(std::move(out), {a, b}, [](Node& self) {
        if (needs(self.inputs[0])) {
            auto& g = gbuf(self.inputs[0]);
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
        if (needs(self.inputs[1])) {
            auto& g = gbuf(self.inputs[1]);
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
    return make_result(std::move(out), {a, b}, [](Node& self) {
        const auto& av = self.inputs[0]->value;
        const auto& bv = self.inputs[1]->value;
        if (needs(self.inputs[0])) {
            auto& g = gbuf(self.inputs[0]);
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * bv[i];
        }
        if (needs(self.inputs[1])) {
            auto& g = gbuf(self.inputs[1]);
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * av[i];
        }
    });
}

Var scale(const Var& a, double s) {
    Tensor out = a.value();
    for (auto& v : out.vec()) v *= s;
    return make_result(std::move(out), {a}, [s](Node& self) {
        auto& g = gbuf(self.inputs[0]);
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += s * self.grad[i];
    });
}

Var add_scalar(const Var& a, double s) {
    Tensor out = a.value();
    for (auto& v : out.vec()) v += s;
    return make_result(std::move(out), {a}, [](Node& self) {
        auto& g = gbuf(self.inputs[0]);
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    });
}

Var square(const Var& a) { return mul(a, a); }

namespace {

template <typename Fwd, typename Deriv>
Var unary(const Var& a, Fwd fwd, Deriv deriv) {
    Tensor out = a.value();
    for (auto& v : out.vec()) v = fwd(v);
    return make_result(std::move(out), {a}, [deriv](Node& self) {
        const auto& x = self.inputs[0]->value;
        auto& g = gbuf(self.inputs[0]);
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * deriv(x[i]);
    });
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Var gelu(const Var& a) {
    return unary(
        a, [](double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); },
        [](double x) {
            const double th = std::tanh(kGeluC * (x + kGeluA * x * x * x));
            return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
        });
}

Var silu(const Var& a) {
    return unary(
        a, [](double x) { return x / (1.0 + std::exp(-x)); },
        [](double x) {
            const double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 + x * (1.0 - s));
        });
}

Var tanh(const Var& a) {
    return unary(
        a, [](double x) { return std::tanh(x); },
        [](double x) {
            const double t = std::tanh(x);
            return 1.0 - t * t;
        });
}

Var clamp(const Var& a, double lo, double hi) {
    return unary(
        a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
        [lo, hi](double x) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Var straight_through(const Var& a, Tensor forward_value) {
    require_same_shape(a.value(), forward_value, "straight_through");
    return make_result(std::move(forward_value), {a}, [](Node& self) {
        auto& g = gbuf(self.inputs[0]);
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    });
}

Var stop_gradient(const Var& a) { return constant(a.value()); }

// ----------------------------------------------------------------- reductions

Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a.value().vec()) s += v;
    return make_result(Tensor::scalar(s), {a}, [](Node& self) {
        auto& g = gbuf(self.inputs[0]);
        const double up = self.grad[0];
        for (auto& v : g.vec()) v += up;
    });
}

Var mean(const Var& a) {
    const double n = static_cast<double>(a.numel());
    double s = 0.0;
    for (double v : a.value().vec()) s += v;
    return make_result(Tensor::scalar(s / n), {a}, [n](Node& self) {
        auto& g = gbuf(self.inputs[0]);
        const double up = self.grad[0] / n;
        for (auto& v : g.vec()) v += up;
    });
}

Var mse(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "mse");
    const double n = static_cast<double>(a.numel());
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double d = a.value()[i] - b.value()[i];
        s += d * d;
    }
    return make_result(Tensor::scalar(s / n), {a, b}, [n](Node& self) {
        const auto& av = self.inputs[0]->value;
        const auto& bv = self.inputs[1]->value;
        const double up = 2.0 * self.grad[0] / n;
        if (needs(self.inputs[0])) {
            auto& g = gbuf(self.inputs[0]);
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += up * (av[i] - bv[i]);
        }
        if (needs(self.inputs[1])) {
            auto& g = gbuf(self.inputs[1]);
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= up * (av[i] - bv[i]);
        }
    });
}

// ---------------------------------------------------------------------- shape

Var reshape(const Var& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw std::invalid_argument("reshape: cannot view " + shape_to_string(a.shape()) + " as " +
                                    shape_to_string(shape));
    }
    return make_result(a.value().reshaped(std::move(shape)), {a}, [](Node& self) {
        auto& g = gbuf(self.inputs[0]);
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    });
}

Var gather(const Var& a, std::vector<std::size_t> index, Shape out_shape) {
    if (shape_numel(out_shape) != index.size()) throw std::invalid_argument("gather: index/shape size mismatch");
    Tensor out(std::move(out_shape));
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= a.numel()) throw std::out_of_range("gather: index out of range");
        out[i] = a.value()[index[i]];
    }
    return make_result(std::move(out), {a}, [index = std::move(index)](Node& self) {
        auto& g = gbuf(self.inputs[0]);
        for (std::size_t i = 0; i < index.size(); ++i) g[index[i]] += self.grad[i];
    });
}

Var concat_seq(const Var& a, const Var& b) {
    require_rank(a, 3, "concat_seq");
    require_rank(b, 3, "concat_seq");
    const std::size_t B = a.dim(0), La = a.dim(1), Lb = b.dim(1), W = a.dim(2);
    if (b.dim(0) != B || b.dim(2) != W) throw std::invalid_argument("concat_seq: batch/width mismatch");
    Tensor out(Shape{B, La + Lb, W});
    for (std::size_t bi = 0; bi < B; ++bi) {
        std::copy_n(a.value().data() + bi * La * W, La * W, out.data() + bi * (La + Lb) * W);
        std::copy_n(b.value().data() + bi * Lb * W, Lb * W, out.data() + bi * (La + Lb) * W + La * W);
    }
    return make_result(std::move(out), {a, b}, [B, La, Lb, W](Node& self) {
        if (needs(self.inputs[0])) {
            auto& g = gbuf(self.inputs[0]);
            for (std::size_t bi = 0; bi < B; ++bi)
                for (std::size_t i = 0; i < La * W; ++i) g[bi * La * W + i] += self.grad[bi * (La + Lb) * W + i];
        }
        if (needs(self.inputs[1])) {
            auto& g = gbuf(self.inputs[1]);
            for (std::size_t bi = 0; bi < B; ++bi)
                for (std::size_t i = 0; i < Lb * W; ++i)
                    g[bi * Lb * W + i] += self.grad[bi * (La + Lb) * W + La * W + i];
        }
    });
}

Var slice_seq(const Var& a, std::size_t start, std::size_t len) {
    require_rank(a, 3, "slice_seq");
    const std::size_t B = a.dim(0), L = a.dim(1), W = a.dim(2);
    if (start + len > L) throw std::out_of_range("slice_seq: range exceeds sequence length");
    Tensor out(Shape{B, len, W});
    for (std::size_t bi = 0; bi < B; ++bi)
        std::copy_n(a.value().data() + (bi * L + start) * W, len * W, out.data() + bi * len * W);
    return make_result(std::move(out), {a}, [B, L, W, start, len](Node& self) {
        auto& g = gbuf(self.inputs[0]);
        for (std::size_t bi = 0; bi < B; ++bi)
            for (std::size_t i = 0; i < len * W; ++i) g[(bi * L + start) * W + i] += self.grad[bi * len * W + i];
    });
}

Var slice_cols(const Var& a, std::size_t offset, std::size_t len) {
    const std::size_t cols = last_dim(a.shape());
    if (offset + len > cols) throw std::out_of_range("slice_cols: range exceeds width");
    const std::size_t rows = a.numel() / cols;
    Shape shape = a.shape();
    shape.back() = len;
    Tensor out(shape);
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(a.value().data() + r * cols + offset, len, out.data() + r * len);
    return make_result(std::move(out), {a}, [rows, cols, offset, len](Node& self) {
        auto& g = gbuf(self.inputs[0]);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < len; ++i) g[r * cols + offset + i] += self.grad[r * len + i];
    });
}

// ------------------------------------------------------------------ broadcast

Var scale_samples(const Var& a, const std::vector<double>& factors) {
    if (a.shape().empty() || a.dim(0) != factors.size())
        throw std::invalid_argument("scale_samples: need one factor per sample");
    const std::size_t per = a.numel() / factors.size();
    Tensor out = a.value();
    for (std::size_t b = 0; b < factors.size(); ++b)
        for (std::size_t i = 0; i < per; ++i) out[b * per + i] *= factors[b];
    return make_result(std::move(out), {a}, [factors, per](Node& self) {
        auto& g = gbuf(self.inputs[0]);
        for (std::size_t b = 0; b < factors.size(); ++b)
            for (std::size_t i = 0; i < per; ++i) g[b * per + i] += factors[b] * self.grad[b * per + i];
    });
}

Var add_position(const Var& x, const Var& pos) {
    require_rank(x, 3, "add_position");
    const std::size_t B = x.dim(0), LW = x.dim(1) * x.dim(2);
    if (pos.numel() != LW) throw std::invalid_argument("add_position: embedding shape mismatch");
    Tensor out = x.value();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < LW; ++i) out[b * LW + i] += pos.value()[i];
    return make_result(std::move(out), {x, pos}, [B, LW](Node& self) {
        if (needs(self.inputs[0])) {
            auto& g = gbuf(self.inputs[0]);
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
        if (needs(self.inputs[1])) {
            auto& g = gbuf(self.inputs[1]);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t i = 0; i < LW; ++i) g[i] += self.grad[b * LW + i];
        }
    });
}

Var modulate(const Var& x, const Var& shift, const Var& scale_) {
    require_rank(x, 3, "modulate");
    const std::size_t B = x.dim(0), L = x.dim(1), W = x.dim(2);
    if (shift.numel() != B * W || scale_.numel() != B * W) throw std::invalid_argument("modulate: expected [B, W]");
    Tensor out(x.shape());
    const auto& xv = x.value();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t w = 0; w < W; ++w) {
                const std::size_t i = (b * L + l) * W + w;
                out[i] = xv[i] * (1.0 + scale_.value()[b * W + w]) + shift.value()[b * W + w];
            }
    return make_result(std::move(out), {x, shift, scale_}, [B, L, W](Node& self) {
        const auto& xv = self.inputs[0]->value;
        const auto& sc = self.inputs[2]->value;
        const bool gx = needs(self.inputs[0]), gsh = needs(self.inputs[1]), gsc = needs(self.inputs[2]);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t l = 0; l < L; ++l)
                for (std::size_t w = 0; w < W; ++w) {
                    const std::size_t i = (b * L + l) * W + w;
                    const double up = self.grad[i];
                    if (gx) gbuf(self.inputs[0])[i] += up * (1.0 + sc[b * W + w]);
                    if (gsh) gbuf(self.inputs[1])[b * W + w] += up;
                    if (gsc) gbuf(self.inputs[2])[b * W + w] += up * xv[i];
                }
    });
}

Var gated_add(const Var& x, const Var& gate, const Var& y) {
    require_rank(x, 3, "gated_add");
    require_same_shape(x.value(), y.value(), "gated_add");
    const std::size_t B = x.dim(0), L = x.dim(1), W = x.dim(2);
    if (gate.numel() != B * W) throw std::invalid_argument("gated_add: expected gate [B, W]");
    Tensor out = x.value();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t w = 0; w < W; ++w) {
                const std::size_t i = (b * L + l) * W + w;
                out[i] += gate.value()[b * W + w] * y.value()[i];
            }
    return make_result(std::move(out), {x, gate, y}, [B, L, W](Node& self) {
        const auto& gv = self.inputs[1]->value;
        const auto& yv = self.inputs[2]->value;
        const bool gx = needs(self.inputs[0]), gg = needs(self.inputs[1]), gy = needs(self.inputs[2]);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t l = 0; l < L; ++l)
                for (std::size_t w = 0; w < W; ++w) {
                    const std::size_t i = (b * L + l) * W + w;
                    const double up = self.grad[i];
                    if (gx) gbuf(self.inputs[0])[i] += up;
                    if (gg) gbuf(self.inputs[1])[b * W + w] += up * yv[i];
                    if (gy) gbuf(self.inputs[2])[i] += up * gv[b * W + w];
                }
    });
}

// --------------------------------------------------------------------- layers

Var linear(const Var& x, const Var& w, const Var& b) {
    require_rank(w, 2, "linear weight");
    const std::size_t K = last_dim(x.shape());
    const std::size_t N = w.dim(0);
    if (w.dim(1) != K) {
        throw std::invalid_argument("linear: input width " + std::to_string(K) + " does not match weight " +
                                    shape_to_string(w.shape()));
    }
    if (b.defined() && b.numel() != N) throw std::invalid_argument("linear: bias size mismatch");
    const kernels::LinearDims dims{x.numel() / K, K, N};
    Shape shape = x.shape();
    shape.back() = N;
    Tensor out(shape);
    kernels::linear_forward(x.value().data(), w.value().data(), b.defined() ? b.value().data() : nullptr, out.data(),
                            dims);
    std::vector<Var> inputs{x, w};
    if (b.defined()) inputs.push_back(b);
    return make_result(std::move(out), std::move(inputs), [dims](Node& self) {
        const auto& xn = self.inputs[0];
        const auto& wn = self.inputs[1];
        if (needs(xn)) kernels::linear_backward_input(self.grad.data(), wn->value.data(), gbuf(xn).data(), dims);
        const bool has_b = self.inputs.size() > 2 && needs(self.inputs[2]);
        if (needs(wn) || has_b) {
            Tensor scratch;
            double* dw = nullptr;
            if (needs(wn)) {
                dw = gbuf(wn).data();
            } else {
                scratch = Tensor(wn->value.shape());
                dw = scratch.data();
            }
            kernels::linear_backward_weight(self.grad.data(), xn->value.data(), dw,
                                            has_b ? gbuf(self.inputs[2]).data() : nullptr, dims);
        }
    });
}

Var layer_norm(const Var& x, double eps) {
    const std::size_t W = last_dim(x.shape());
    const std::size_t rows = x.numel() / W;
    Tensor out(x.shape());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xi = x.value().data() + r * W;
        double mu = 0.0;
        for (std::size_t i = 0; i < W; ++i) mu += xi[i];
        mu /= static_cast<double>(W);
        double var = 0.0;
        for (std::size_t i = 0; i < W; ++i) var += (xi[i] - mu) * (xi[i] - mu);
        var /= static_cast<double>(W);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t i = 0; i < W; ++i) out[r * W + i] = (xi[i] - mu) * inv_std[r];
    }
    Tensor normalized = out;
    return make_result(std::move(out), {x}, [W, rows, inv_std = std::move(inv_std),
                                             normalized = std::move(normalized)](Node& self) {
        auto& g = gbuf(self.inputs[0]);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* dy = self.grad.data() + r * W;
            const double* y = normalized.data() + r * W;
            double mdy = 0.0, mdyy = 0.0;
            for (std::size_t i = 0; i < W; ++i) {
                mdy += dy[i];
                mdyy += dy[i] * y[i];
            }
            mdy /= static_cast<double>(W);
            mdyy /= static_cast<double>(W);
            for (std::size_t i = 0; i < W; ++i) g[r * W + i] += inv_std[r] * (dy[i] - mdy - y[i] * mdyy);
        }
    });
}

Var attention(const Var& q, const Var& k, const Var& v, std::size_t heads) {
    require_rank(q, 3, "attention q");
    require_rank(k, 3, "attention k");
    require_same_shape(k.value(), v.value(), "attention k/v");
    const kernels::AttentionDims dims{q.dim(0), q.dim(1), k.dim(1), q.dim(2), heads};
    if (k.dim(0) != dims.batch || k.dim(2) != dims.width) throw std::invalid_argument("attention: q/k shape mismatch");
    if (heads == 0 || dims.width % heads != 0) throw std::invalid_argument("attention: width not divisible by heads");
    Tensor out(q.shape());
    auto probs = std::make_shared<std::vector<double>>(dims.batch * heads * dims.q_len * dims.kv_len);
    kernels::attention_forward(q.value().data(), k.value().data(), v.value().data(), out.data(), probs->data(), dims);
    return make_result(std::move(out), {q, k, v}, [dims, probs](Node& self) {
        auto& qn = self.inputs[0];
        auto& kn = self.inputs[1];
        auto& vn = self.inputs[2];
        Tensor dq_s, dk_s, dv_s;
        auto target = [](const std::shared_ptr<Node>& n, Tensor& scratch) {
            if (needs(n)) return gbuf(n).data();
            scratch = Tensor(n->value.shape());
            return scratch.data();
        };
        double* dq = target(qn, dq_s);
        double* dk = target(kn, dk_s);
        double* dv = target(vn, dv_s);
        kernels::attention_backward(qn->value.data(), kn->value.data(), vn->value.data(), probs->data(),
                                    self.grad.data(), dq, dk, dv, dims);
    });
}

Var embedding(const Var& table, const std::vector<std::size_t>& ids) {
    require_rank(table, 2, "embedding");
    const std::size_t V = table.dim(0), W = table.dim(1);
    Tensor out(Shape{ids.size(), W});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= V) throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " >= vocab " +
                                                 std::to_string(V));
        std::copy_n(table.value().data() + ids[i] * W, W, out.data() + i * W);
    }
    return make_result(std::move(out), {table}, [ids, W](Node& self) {
        auto& g = gbuf(self.inputs[0]);
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t w = 0; w < W; ++w) g[ids[i] * W + w] += self.grad[i * W + w];
    });
}

Var conv3x3(const Var& x, const Var& w, const Var& b) {
    require_rank(x, 4, "conv3x3 input");
    require_rank(w, 4, "conv3x3 weight");
    const kernels::ConvDims dims{x.dim(0), x.dim(1), w.dim(0), x.dim(2), x.dim(3)};
    if (w.dim(1) != dims.in_channels || w.dim(2) != 3 || w.dim(3) != 3)
        throw std::invalid_argument("conv3x3: weight shape " + shape_to_string(w.shape()) + " incompatible");
    Tensor out(Shape{dims.batch, dims.out_channels, dims.height, dims.width});
    kernels::conv3x3_forward(x.value().data(), w.value().data(), b.defined() ? b.value().data() : nullptr, out.data(),
                             dims);
    std::vector<Var> inputs{x, w};
    if (b.defined()) inputs.push_back(b);
    return make_result(std::move(out), std::move(inputs), [dims](Node& self) {
        const auto& xn = self.inputs[0];
        const auto& wn = self.inputs[1];
        const bool has_b = self.inputs.size() > 2 && needs(self.inputs[2]);
        kernels::conv3x3_backward(xn->value.data(), wn->value.data(), self.grad.data(),
                                  needs(xn) ? gbuf(xn).data() : nullptr, needs(wn) ? gbuf(wn).data() : nullptr,
                                  has_b ? gbuf(self.inputs[2]).data() : nullptr, dims);
    });
}

Var avg_pool2(const Var& x) {
    require_rank(x, 4, "avg_pool2");
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % 2 || W % 2) throw std::invalid_argument("avg_pool2: spatial size must be even");
    const std::size_t Ho = H / 2, Wo = W / 2;
    Tensor out(Shape{B, C, Ho, Wo});
    const auto& xv = x.value();
    for (std::size_t p = 0; p < B * C; ++p)
        for (std::size_t y = 0; y < Ho; ++y)
            for (std::size_t xx = 0; xx < Wo; ++xx) {
                const double* s = xv.data() + p * H * W + 2 * y * W + 2 * xx;
                out[p * Ho * Wo + y * Wo + xx] = 0.25 * (s[0] + s[1] + s[W] + s[W + 1]);
            }
    return make_result(std::move(out), {x}, [B, C, H, W, Ho, Wo](Node& self) {
        auto& g = gbuf(self.inputs[0]);
        for (std::size_t p = 0; p < B * C; ++p)
            for (std::size_t y = 0; y < Ho; ++y)
                for (std::size_t xx = 0; xx < Wo; ++xx) {
                    const double up = 0.25 * self.grad[p * Ho * Wo + y * Wo + xx];
                    double* d = g.data() + p * H * W + 2 * y * W + 2 * xx;
                    d[0] += up;
                    d[1] += up;
                    d[W] += up;
                    d[W + 1] += up;
                }
    });
}

Var channel_normalize(const Var& x, double eps) {
    require_rank(x, 4, "channel_normalize");
    const std::size_t B = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
    Tensor out(x.shape());
    std::vector<double> inv_norm(B * P);
    const auto& xv = x.value();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t p = 0; p < P; ++p) {
            double s = eps;
            for (std::size_t c = 0; c < C; ++c) s += xv[(b * C + c) * P + p] * xv[(b * C + c) * P + p];
            const double inv = 1.0 / std::sqrt(s);
            inv_norm[b * P + p] = inv;
            for (std::size_t c = 0; c < C; ++c) out[(b * C + c) * P + p] = xv[(b * C + c) * P + p] * inv;
        }
    Tensor normalized = out;
    return make_result(std::move(out), {x}, [B, C, P, inv_norm = std::move(inv_norm),
                                             normalized = std::move(normalized)](Node& self) {
        auto& g = gbuf(self.inputs[0]);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t p = 0; p < P; ++p) {
                double dot = 0.0;
                for (std::size_t c = 0; c < C; ++c)
                    dot += self.grad[(b * C + c) * P + p] * normalized[(b * C + c) * P + p];
                const double inv = inv_norm[b * P + p];
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t i = (b * C + c) * P + p;
                    g[i] += inv * (self.grad[i] - normalized[i] * dot);
                }
            }
    });
}

}  // namespace flowmo::ad
