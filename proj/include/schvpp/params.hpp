#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "schvpp/autograd.hpp"
#include "schvpp/config.hpp"
#include "schvpp/tensor.hpp"

namespace schvpp {

enum class InitKind {
    fan_in_uniform,  // U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    constant,
};

struct ParamSpec {
    std::string name;
    Shape shape;
    InitKind init = InitKind::fan_in_uniform;
    std::size_t fan_in = 1;
    float value = 0.0f;  // for InitKind::constant
};

/// Ordered list of every trainable array a model (or a single block) owns.
class ParamLayout {
public:
    void add(ParamSpec spec);
    void add_conv(const std::string& prefix, std::size_t cout, std::size_t cin, std::size_t k);
    void add_linear(const std::string& prefix, std::size_t out, std::size_t in);
    void add_prelu(const std::string& name);
    void add_layer_norm(const std::string& prefix, std::size_t c);

    const std::vector<ParamSpec>& specs() const { return specs_; }
    std::size_t element_count() const;

private:
    std::vector<ParamSpec> specs_;
};

/// Named float arrays plus the metadata a checkpoint carries.
struct ParameterStore {
    ModelConfig config;
    std::uint64_t step = 0;
    std::uint64_t seed = 0;
    std::vector<std::string> names;
    std::vector<Tensor<float>> arrays;

    static ParameterStore initialize(const ParamLayout& layout, std::uint64_t seed);

    std::size_t size() const { return arrays.size(); }
    std::size_t element_count() const;
    bool contains(std::string_view name) const;
    Tensor<float>& at(std::string_view name);
    const Tensor<float>& at(std::string_view name) const;

    /// Rebuilds the name lookup after names were edited directly.
    void reindex();

private:
    std::unordered_map<std::string, std::size_t> index_;
};

/// Graph leaves for every array of a ParameterStore in working precision T.
template <typename T>
class ParamBinding {
public:
    ParamBinding(const ParameterStore& store, bool requires_grad);
    /// Binds caller-owned leaves (used by gradient checks).
    ParamBinding(std::vector<std::string> names, std::vector<Var<T>> vars);

    const Var<T>& get(std::string_view name) const;
    std::size_t size() const { return vars_.size(); }
    const std::string& name(std::size_t i) const { return names_[i]; }
    const Var<T>& var(std::size_t i) const { return vars_[i]; }

private:
    std::vector<std::string> names_;
    std::vector<Var<T>> vars_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// A block's view onto a binding: names are looked up as `<prefix>.<name>`.
template <typename T>
class BlockParams {
public:
    BlockParams(const ParamBinding<T>& binding, std::string prefix)
        : binding_(&binding), prefix_(std::move(prefix)) {}

    const Var<T>& operator[](std::string_view name) const { return binding_->get(qualify(name)); }
    BlockParams sub(std::string_view name) const { return BlockParams(*binding_, qualify(name)); }
    const std::string& prefix() const { return prefix_; }

private:
    std::string qualify(std::string_view name) const {
        return prefix_.empty() ? std::string(name) : prefix_ + "." + std::string(name);
    }

    const ParamBinding<T>* binding_;
    std::string prefix_;
};

extern template class ParamBinding<float>;
extern template class ParamBinding<double>;

} // namespace schvpp
