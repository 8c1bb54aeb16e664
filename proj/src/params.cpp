#include "schvpp/params.hpp"

#include <cmath>
#include <random>

#include "schvpp/error.hpp"

namespace schvpp {

void ParamLayout::add(ParamSpec spec) {
    for (const auto& s : specs_)
        if (s.name == spec.name) throw InvalidArgument("duplicate parameter name '" + spec.name + "'");
    specs_.push_back(std::move(spec));
}

void ParamLayout::add_conv(const std::string& prefix, std::size_t cout, std::size_t cin, std::size_t k) {
    const std::size_t fan_in = cin * k * k;
    add({prefix + ".weight", {cout, cin, k, k}, InitKind::fan_in_uniform, fan_in});
    add({prefix + ".bias", {cout}, InitKind::constant, fan_in, 0.0f});
}

void ParamLayout::add_linear(const std::string& prefix, std::size_t out, std::size_t in) {
    add({prefix + ".weight", {out, in}, InitKind::fan_in_uniform, in});
    add({prefix + ".bias", {out}, InitKind::constant, in, 0.0f});
}

void ParamLayout::add_prelu(const std::string& name) {
    add({name, {1}, InitKind::constant, 1, 0.25f});
}

void ParamLayout::add_layer_norm(const std::string& prefix, std::size_t c) {
    add({prefix + ".gamma", {c}, InitKind::constant, 1, 1.0f});
    add({prefix + ".beta", {c}, InitKind::constant, 1, 0.0f});
}

std::size_t ParamLayout::element_count() const {
    std::size_t n = 0;
    for (const auto& s : specs_) n += shape_numel(s.shape);
    return n;
}

ParameterStore ParameterStore::initialize(const ParamLayout& layout, std::uint64_t seed) {
    ParameterStore store;
    store.seed = seed;
    std::mt19937_64 rng(seed);
    for (const auto& spec : layout.specs()) {
        Tensor<float> t(spec.shape);
        if (spec.init == InitKind::constant) {
            std::fill(t.data.begin(), t.data.end(), spec.value);
        } else {
            const double bound = 1.0 / std::sqrt(double(spec.fan_in));
            std::uniform_real_distribution<double> dist(-bound, bound);
            for (auto& v : t.data) v = float(dist(rng));
        }
        store.names.push_back(spec.name);
        store.arrays.push_back(std::move(t));
    }
    store.reindex();
    return store;
}

std::size_t ParameterStore::element_count() const {
    std::size_t n = 0;
    for (const auto& a : arrays) n += a.numel();
    return n;
}

void ParameterStore::reindex() {
    index_.clear();
    for (std::size_t i = 0; i < names.size(); ++i)
        if (!index_.emplace(names[i], i).second) throw FormatError("duplicate parameter name '" + names[i] + "'");
}

bool ParameterStore::contains(std::string_view name) const {
    return index_.count(std::string(name)) != 0;
}

Tensor<float>& ParameterStore::at(std::string_view name) {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw InvalidArgument("no parameter named '" + std::string(name) + "'");
    return arrays[it->second];
}

const Tensor<float>& ParameterStore::at(std::string_view name) const {
    return const_cast<ParameterStore*>(this)->at(name);
}

template <typename T>
ParamBinding<T>::ParamBinding(const ParameterStore& store, bool requires_grad) {
    names_ = store.names;
    vars_.reserve(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) {
        vars_.push_back(leaf(store.arrays[i].template cast<T>(), requires_grad));
        index_.emplace(names_[i], i);
    }
}

template <typename T>
ParamBinding<T>::ParamBinding(std::vector<std::string> names, std::vector<Var<T>> vars)
    : names_(std::move(names)), vars_(std::move(vars)) {
    if (names_.size() != vars_.size()) throw InvalidArgument("ParamBinding: names and vars differ in length");
    for (std::size_t i = 0; i < names_.size(); ++i)
        if (!index_.emplace(names_[i], i).second) throw InvalidArgument("ParamBinding: duplicate name '" + names_[i] + "'");
}

template <typename T>
const Var<T>& ParamBinding<T>::get(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw InvalidArgument("parameter '" + std::string(name) + "' is not bound");
    return vars_[it->second];
}

template class ParamBinding<float>;
template class ParamBinding<double>;

} // namespace schvpp
