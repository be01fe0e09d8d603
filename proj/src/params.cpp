#include "flowmo/params.hpp"

#include <stdexcept>

namespace flowmo {

ad::Var ParameterStore::add(std::string name, Tensor init, ParamKind kind, double lr_mult) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter name " + name);
    index_[name] = params_.size();
    params_.push_back(Param{std::move(name), ad::parameter(std::move(init)), kind, lr_mult});
    return params_.back().var;
}

const Param* ParameterStore::find(const std::string& name) const {
    const auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
}

Param* ParameterStore::find(const std::string& name) {
    const auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
}

const Param& ParameterStore::at(const std::string& name) const {
    const Param* p = find(name);
    if (!p) throw std::out_of_range("no parameter named " + name);
    return *p;
}

std::size_t ParameterStore::total_elements() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.var.numel();
    return n;
}

void ParameterStore::zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
}

std::vector<Tensor> ParameterStore::values() const {
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.var.value());
    return out;
}

void ParameterStore::set_values(const std::vector<Tensor>& values) {
    if (values.size() != params_.size()) throw std::invalid_argument("set_values: parameter count mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) {
        require_same_shape(params_[i].var.value(), values[i], params_[i].name.c_str());
        params_[i].var.mutable_value() = values[i];
    }
}

}  // namespace flowmo
