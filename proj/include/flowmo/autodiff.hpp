#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// A Var is a handle to a graph node. Operations record their inputs and a
// backward closure when at least one input requires a gradient and recording
// is enabled (see NoGradGuard). backward() runs the closures in reverse
// topological order and accumulates into Node::grad.

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include "flowmo/tensor.hpp"

namespace flowmo::ad {

struct Node {
    Tensor value;
    Tensor grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    Tensor& grad_buffer();  // allocates zeros on demand
    bool has_grad() const noexcept { return !grad.empty() || value.empty(); }
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t numel() const { return node_->value.numel(); }
    std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool defined() const noexcept { return static_cast<bool>(node_); }

    /// Gradient after backward(); zeros if the node was never reached.
    Tensor grad() const;
    void zero_grad();

    const std::shared_ptr<Node>& node() const noexcept { return node_; }

private:
    std::shared_ptr<Node> node_;
};

Var constant(Tensor value);
Var parameter(Tensor value);  // leaf that requires grad

bool grad_enabled() noexcept;

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Seeds d(loss)/d(loss) = 1 and propagates. `loss` must hold one element.
void backward(const Var& loss);

/// Builds a result node. `backward` receives the result node and must
/// accumulate into the grad buffers of inputs that require grad.
Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward);

// Elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var square(const Var& a);
Var gelu(const Var& a);  // tanh approximation
Var silu(const Var& a);
Var tanh(const Var& a);
Var clamp(const Var& a, double lo, double hi);

/// Value of `forward_value`, gradient passed unchanged to `a`.
Var straight_through(const Var& a, Tensor forward_value);
Var stop_gradient(const Var& a);

// Reductions
Var sum(const Var& a);
Var mean(const Var& a);
/// mean((a - b)^2) over all elements.
Var mse(const Var& a, const Var& b);

// Shape
Var reshape(const Var& a, Shape shape);
/// out.flat[i] = a.flat[index[i]]; backward scatters.
Var gather(const Var& a, std::vector<std::size_t> index, Shape out_shape);
/// Concatenates [B, La, W] and [B, Lb, W] along the sequence axis.
Var concat_seq(const Var& a, const Var& b);
/// x[:, start:start+len, :]
Var slice_seq(const Var& a, std::size_t start, std::size_t len);

// Per-sample / broadcast
/// Multiplies sample b (leading axis) by factors[b]. factors are constants.
Var scale_samples(const Var& a, const std::vector<double>& factors);
/// x [B, L, W] + pos [L, W]
Var add_position(const Var& x, const Var& pos);
/// x [B, L, W] * (1 + scale[B, W]) + shift[B, W]
Var modulate(const Var& x, const Var& shift, const Var& scale);
/// x + gate[B, W] * y, x and y [B, L, W]
Var gated_add(const Var& x, const Var& gate, const Var& y);
/// Columns [offset, offset+len) of a [rows, cols] (or [..., cols]) tensor.
Var slice_cols(const Var& a, std::size_t offset, std::size_t len);

// Layers
/// x [..., K] times w[N, K]^T plus b[N]; b may be undefined.
Var linear(const Var& x, const Var& w, const Var& b);
/// Normalises the last axis to zero mean / unit variance (no affine).
Var layer_norm(const Var& x, double eps = 1e-6);
/// Multi-head attention; q [B, Lq, W], k and v [B, Lk, W].
Var attention(const Var& q, const Var& k, const Var& v, std::size_t heads);
/// rows of table [V, W] selected by ids -> [ids.size(), W]
Var embedding(const Var& table, const std::vector<std::size_t>& ids);
/// 3x3 same-padding convolution; x [B, Ci, H, W], w [Co, Ci, 3, 3], b [Co].
Var conv3x3(const Var& x, const Var& w, const Var& b);
/// 2x2 average pooling with stride 2; H and W must be even.
Var avg_pool2(const Var& x);
/// Divides each pixel's channel vector by sqrt(sum of squares + eps); x [B, C, H, W].
Var channel_normalize(const Var& x, double eps = 1e-10);

}  // namespace flowmo::ad
