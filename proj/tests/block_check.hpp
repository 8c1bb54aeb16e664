#pragma once

#include <random>
#include <string>
#include <vector>

#include "schvpp/network.hpp"
#include "schvpp/params.hpp"
#include "schvpp/training.hpp"

namespace schvpp::testing {

/// Initialized parameters with every array (biases, norms and PReLU slopes
/// included) jittered so no gradient path is trivially zero.
inline ParameterStore jittered_store(const ParamLayout& layout, std::uint64_t seed, double jitter = 0.1) {
    auto store = ParameterStore::initialize(layout, seed);
    std::mt19937_64 rng(seed ^ 0x5eedULL);
    std::uniform_real_distribution<double> d(-jitter, jitter);
    for (auto& a : store.arrays)
        for (auto& v : a.data) v += static_cast<float>(d(rng));
    return store;
}

enum class Precision { single, dual };

inline GradCheckOptions options_for(Precision p) {
    GradCheckOptions o;
    o.tolerance = p == Precision::single ? 1e-3 : 1e-5;
    return o;
}

inline GradCheckOptions single_precision() { return options_for(Precision::single); }
inline GradCheckOptions double_precision() { return options_for(Precision::dual); }

/// Wraps fn(ParamBinding<T>, inputs) as a function of inputs + parameters.
template <typename T, typename F>
GradCheckFn<T> bind_block(std::vector<std::string> param_names, std::size_t n_in, F fn) {
    return [=](const std::vector<Var<T>>& vars) {
        std::vector<Var<T>> in(vars.begin(), vars.begin() + long(n_in));
        const ParamBinding<T> binding(param_names, std::vector<Var<T>>(vars.begin() + long(n_in), vars.end()));
        return fn(binding, in);
    };
}

/// grad_check over the block's inputs and every parameter array of `store`.
/// `fn` is generic in the scalar type; single precision differentiates the
/// float instantiation against differences of the double one.
template <typename F>
GradCheckReport check_block(const std::string& name, const ParameterStore& store,
                            const std::vector<std::string>& input_names, const std::vector<Tensor<double>>& inputs,
                            F fn, Precision precision, GradCheckOptions options) {
    std::vector<std::string> names = input_names;
    for (const auto& n : store.names) names.push_back(n);
    const std::size_t n_in = inputs.size();
    if (precision == Precision::dual) {
        std::vector<Tensor<double>> values = inputs;
        for (const auto& a : store.arrays) values.push_back(a.cast<double>());
        return grad_check<double>(name, bind_block<double>(store.names, n_in, fn), names, values, options);
    }
    std::vector<Tensor<float>> values;
    for (const auto& t : inputs) values.push_back(t.cast<float>());
    for (const auto& a : store.arrays) values.push_back(a);
    return grad_check(name, bind_block<float>(store.names, n_in, fn), bind_block<double>(store.names, n_in, fn), names,
                      values, options);
}

template <typename F>
GradCheckReport check_block(const std::string& name, const ParameterStore& store,
                            const std::vector<std::string>& input_names, const std::vector<Tensor<double>>& inputs,
                            F fn, Precision precision) {
    return check_block(name, store, input_names, inputs, fn, precision, options_for(precision));
}

/// check_block in single and then double precision.
template <typename F>
std::vector<GradCheckReport> check_block_all(const std::string& name, const ParameterStore& store,
                                             const std::vector<std::string>& input_names,
                                             const std::vector<Tensor<double>>& inputs, F fn) {
    return {check_block(name + "/single", store, input_names, inputs, fn, Precision::single),
            check_block(name + "/double", store, input_names, inputs, fn, Precision::dual)};
}

/// grad_check of a parameter-free function, generic in the scalar type, in
/// single and then double precision.
template <typename F>
std::vector<GradCheckReport> check_fn_all(const std::string& name, const std::vector<std::string>& names,
                                          const std::vector<Tensor<double>>& inputs, F fn) {
    std::vector<Tensor<float>> single;
    for (const auto& t : inputs) single.push_back(t.cast<float>());
    return {grad_check(name + "/single", GradCheckFn<float>(fn), GradCheckFn<double>(fn), names, single,
                       single_precision()),
            grad_check<double>(name + "/double", GradCheckFn<double>(fn), names, inputs, double_precision())};
}

struct ModelFn {
    ModelConfig cfg;
    Tensor<float> plane;

    template <typename T>
    Var<T> operator()(const ParamBinding<T>& b, const std::vector<Var<T>>& in) const {
        return forward(in[0], plane.cast<T>(), b, cfg);
    }
};

/// grad_check of the whole network over its input and every parameter.
inline GradCheckReport check_model(const ParameterStore& store, const Tensor<double>& x_lr, int qp, Precision precision,
                                   GradCheckOptions options) {
    const ModelFn fn{store.config, make_qp_plane(qp, x_lr.dim(2), x_lr.dim(1)).plane};
    return check_block("forward", store, {"x_lr"}, {x_lr}, fn, precision, options);
}

} // namespace schvpp::testing
