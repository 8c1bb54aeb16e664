#pragma once

// Weighted Charbonnier loss, Adam with step-halving schedule, the training
// loop and the finite-difference gradient checker.

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "schvpp/network.hpp"

namespace schvpp {

struct TrainConfig {
    double lr0 = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t halve_every = 100000;
    std::uint64_t max_steps = 2000;
    std::size_t batch_size = 4;
    std::size_t patch_size = 256;
    double charbonnier_eps = 1e-3;
    std::array<double, 3> loss_weights{10.0, 1.0, 1.0};  // Y, U, V
    std::uint64_t seed = 0;
    std::uint64_t checkpoint_every = 0;  // 0: final checkpoint only
    std::uint64_t log_every = 1;
    std::size_t loader_threads = 1;  // producers feeding the batch queue; 0 samples inline
    bool deterministic = false;

    static TrainConfig desk_scale();
    void validate() const;
};

/// Consumes the training keys found in `kv` on top of `base`.
TrainConfig train_config_from(KeyValues& kv, TrainConfig base = {});

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
};

/// One key=value file holding model and training keys. `preset=desk`
/// selects the desk-scale defaults for both. Unknown keys are FormatErrors.
RunConfig parse_run_config(const KeyValues& kv);
RunConfig read_run_config(const std::string& path);

/// lr0 * 2^-floor(step / halve_every).
double scheduled_lr(const TrainConfig& cfg, std::uint64_t step);

struct LossParts {
    double total = 0.0;
    std::array<double, 3> component{};  // unweighted Y, U, V Charbonnier terms
};

/// mean(sqrt((x - x_hat)^2 + eps^2)) over all elements.
double charbonnier(std::span<const double> x, std::span<const double> x_hat, double eps);

/// sum_k w_k * charbonnier(plane k) on [3,H,W] frames.
template <typename T>
Var<T> weighted_yuv_loss(const Var<T>& x, const Var<T>& x_hat, T eps, const std::array<double, 3>& weights,
                         LossParts* parts = nullptr);

LossParts weighted_yuv_loss(const Frame444& x, const Frame444& x_hat, double eps,
                            const std::array<double, 3>& weights = {10.0, 1.0, 1.0});

/// Adam moments for every array of a ParameterStore.
struct AdamState {
    std::uint64_t step = 0;
    double lr = 0.0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;

    static AdamState for_params(const ParameterStore& params, const TrainConfig& cfg);
};

/// One bias-corrected Adam update at lr = scheduled_lr(cfg, state.step);
/// then state.step and params.step advance and state.lr is recomputed.
/// A non-finite gradient throws NumericError naming the array and leaves
/// everything unchanged.
void adam_step(ParameterStore& params, const std::vector<Tensor<float>>& grads, AdamState& state,
               const TrainConfig& cfg);

struct StepStats {
    std::uint64_t step = 0;  // index of the update just applied, from 0
    double lr = 0.0;
    LossParts loss;
};

/// Forward, loss, backward and Adam for one batch at a time.
class TrainSession {
public:
    TrainSession(ParameterStore params, TrainConfig cfg);

    /// Mean loss over the batch; gradients are averaged before the update.
    StepStats step(const std::vector<PatchPair>& batch);
    /// Loss of the batch under the current parameters, no update.
    LossParts evaluate(const std::vector<PatchPair>& batch) const;

    const ParameterStore& params() const { return params_; }
    const AdamState& optimizer() const { return adam_; }

private:
    ParameterStore params_;
    TrainConfig cfg_;
    AdamState adam_;
};

struct TrainResult {
    std::string checkpoint_path;
    std::string loss_log_path;
    std::vector<StepStats> history;
};

/// Trains on patches drawn from the manifest's sequence pairs (QPs mixed
/// within a batch). Writes <out_dir>/final.ckpt, periodic
/// <out_dir>/step_<n>.ckpt and <out_dir>/loss_log.csv. When `init` is
/// given it replaces the seeded initialization.
TrainResult train(const std::string& manifest_path, const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                  const std::string& out_dir, const ParameterStore* init = nullptr);

/// Outcome of a finite-difference comparison.
struct GradCheckReport {
    std::string name;
    double tolerance = 0.0;
    double max_rel_error = 0.0;
    std::string worst_array;
    std::vector<std::pair<std::string, double>> per_array;
    std::size_t evaluations = 0;
    std::size_t skipped = 0;   // coordinates whose stencil crossed a PReLU kink
    double abs_floor = 0.0;    // per-coordinate floor actually used

    bool passed() const { return max_rel_error < tolerance; }
};

template <typename T>
using GradCheckFn = std::function<Var<T>(const std::vector<Var<T>>&)>;

struct GradCheckOptions {
    double tolerance = 1e-3;
    double step = 0.0;                // 0: 1e-3 for float differences, 1e-5 for double
    std::size_t max_coords = 48;      // per array; larger arrays are sampled
    std::uint64_t seed = 1;
    /// Per-coordinate gradient magnitude below which differences count in
    /// absolute rather than relative terms (gradients that vanish
    /// identically cannot be resolved by finite differences). Negative:
    /// ten times the rounding resolution (of the central difference, or of
    /// the analytic gradient at its overall scale), divided by the tolerance.
    double abs_floor = -1.0;
};

/// Compares the reverse-mode gradient of L = sum_i r_i * f(inputs)_i (r a
/// fixed random projection) with central differences for every input array.
/// Per array the error is |g_analytic - g_fd| / max(|g_analytic|, |g_fd|)
/// over the checked coordinates, the denominator floored at
/// abs_floor * sqrt(coordinates); the report carries the maximum.
/// A coordinate whose +/- step changes the branch of any PReLU is retried
/// with steps 10 and 100 times smaller, then skipped and counted.
template <typename T>
GradCheckReport grad_check(const std::string& name, const GradCheckFn<T>& fn, const std::vector<std::string>& names,
                           const std::vector<Tensor<T>>& inputs, const GradCheckOptions& options = {});

/// Single-precision check: analytic gradients of the float function `fn`
/// against central differences of `reference`, the same function in double,
/// evaluated at the same (float) point with the double step. Float rounding
/// in the forward pass would otherwise swamp the differences.
GradCheckReport grad_check(const std::string& name, const GradCheckFn<float>& fn, const GradCheckFn<double>& reference,
                           const std::vector<std::string>& names, const std::vector<Tensor<float>>& inputs,
                           const GradCheckOptions& options = {});

} // namespace schvpp
