#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "flowmo/autodiff.hpp"

namespace flowmo {

enum class ParamKind {
    Embedding,   // input projections, positional and time embeddings
    Hidden,      // attention and modulation weights
    MlpWeight,   // MLP weights; rows renormalised after each step
    Output,      // final projections
    Bias,
};

struct Param {
    std::string name;
    ad::Var var;
    ParamKind kind = ParamKind::Hidden;
    double lr_mult = 1.0;  // per-parameter learning-rate multiplier (muP)
};

/// Named, ordered collection of trainable leaves.
class ParameterStore {
public:
    ad::Var add(std::string name, Tensor init, ParamKind kind, double lr_mult = 1.0);

    const Param* find(const std::string& name) const;
    Param* find(const std::string& name);
    const Param& at(const std::string& name) const;

    std::vector<Param>& all() noexcept { return params_; }
    const std::vector<Param>& all() const noexcept { return params_; }
    std::size_t size() const noexcept { return params_.size(); }
    std::size_t total_elements() const;

    void zero_grad();
    std::vector<Tensor> values() const;
    /// Overwrites every value; shapes must match.
    void set_values(const std::vector<Tensor>& values);

private:
    std::vector<Param> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace flowmo
