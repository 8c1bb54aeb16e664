#include "schvpp/training.hpp"

#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <numeric>
#include <random>
#include <thread>
#include <type_traits>

#include "schvpp/error.hpp"

namespace schvpp {

TrainConfig TrainConfig::desk_scale() {
    TrainConfig cfg;
    cfg.patch_size = 64;
    cfg.max_steps = 2000;
    return cfg;
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& msg) { throw InvalidArgument("train config: " + msg); };
    if (!(lr0 >= 0.0) || !std::isfinite(lr0)) fail("lr0 must be finite and non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
    if (halve_every == 0) fail("halve_every must be positive");
    if (batch_size == 0) fail("batch_size must be positive");
    if (patch_size == 0) fail("patch_size must be positive");
    if (!(charbonnier_eps > 0.0)) fail("charbonnier_eps must be positive");
    for (double w : loss_weights)
        if (!(w >= 0.0) || !std::isfinite(w)) fail("loss weights must be finite and non-negative");
    if (log_every == 0) fail("log_every must be positive");
}

TrainConfig train_config_from(KeyValues& kv, TrainConfig cfg) {
    auto take = [&kv](const char* key, auto&& apply) {
        auto it = kv.find(key);
        if (it == kv.end()) return;
        apply(key, it->second);
        kv.erase(it);
    };
    auto real = [&](const char* key, double& field) {
        take(key, [&](const char* k, const std::string& v) { field = detail::parse_double(k, v); });
    };
    auto u64 = [&](const char* key, std::uint64_t& field) {
        take(key, [&](const char* k, const std::string& v) { field = detail::parse_size(k, v); });
    };
    auto size = [&](const char* key, std::size_t& field) {
        take(key, [&](const char* k, const std::string& v) { field = detail::parse_size(k, v); });
    };
    real("lr0", cfg.lr0);
    real("beta1", cfg.beta1);
    real("beta2", cfg.beta2);
    real("adam_eps", cfg.adam_eps);
    u64("halve_every", cfg.halve_every);
    u64("max_steps", cfg.max_steps);
    size("batch_size", cfg.batch_size);
    size("patch_size", cfg.patch_size);
    real("charbonnier_eps", cfg.charbonnier_eps);
    real("weight_y", cfg.loss_weights[0]);
    real("weight_u", cfg.loss_weights[1]);
    real("weight_v", cfg.loss_weights[2]);
    u64("seed", cfg.seed);
    u64("checkpoint_every", cfg.checkpoint_every);
    u64("log_every", cfg.log_every);
    size("loader_threads", cfg.loader_threads);
    take("deterministic", [&](const char* k, const std::string& v) { cfg.deterministic = detail::parse_bool(k, v); });
    return cfg;
}

RunConfig parse_run_config(const KeyValues& input) {
    KeyValues kv = input;
    RunConfig run;
    if (auto it = kv.find("preset"); it != kv.end()) {
        if (it->second == "desk") {
            run.model = ModelConfig::desk_scale();
            run.train = TrainConfig::desk_scale();
        } else if (it->second != "full") {
            throw FormatError("key 'preset': expected desk or full, got '" + it->second + "'");
        }
        kv.erase(it);
    }
    run.model = model_config_from(kv, run.model);
    run.train = train_config_from(kv, run.train);
    if (!kv.empty()) throw FormatError("unknown config key '" + kv.begin()->first + "'");
    run.model.validate();
    run.train.validate();
    return run;
}

RunConfig read_run_config(const std::string& path) {
    try {
        return parse_run_config(read_key_value_file(path));
    } catch (const FormatError& e) {
        throw FormatError("config '" + path + "': " + e.what());
    }
}

double scheduled_lr(const TrainConfig& cfg, std::uint64_t step) {
    return std::ldexp(cfg.lr0, -static_cast<int>(std::min<std::uint64_t>(step / cfg.halve_every, 2000)));
}

double charbonnier(std::span<const double> x, std::span<const double> x_hat, double eps) {
    if (x.size() != x_hat.size()) throw InvalidArgument("charbonnier: size mismatch");
    if (x.empty()) throw InvalidArgument("charbonnier: empty input");
    if (!(eps > 0.0)) throw InvalidArgument("charbonnier: eps must be positive");
    double sum = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - x_hat[i];
        sum += std::sqrt(d * d + eps * eps);
    }
    return sum / double(x.size());
}

template <typename T>
Var<T> weighted_yuv_loss(const Var<T>& x, const Var<T>& x_hat, T eps, const std::array<double, 3>& weights,
                         LossParts* parts) {
    if (x.shape().size() != 3 || x.dim(0) != 3) throw InvalidArgument("weighted_yuv_loss: expected [3,H,W] frames");
    require_same_shape(x.shape(), x_hat.shape(), "weighted_yuv_loss");
    std::vector<Var<T>> terms;
    for (std::size_t c = 0; c < 3; ++c) {
        auto term = ops::charbonnier(ops::slice_channels(x, c, c + 1), ops::slice_channels(x_hat, c, c + 1), eps);
        if (parts) parts->component[c] = double(term.value()[0]);
        terms.push_back(ops::scale(term, T(weights[c])));
    }
    auto total = ops::sum_scalars<T>(terms);
    if (parts) parts->total = double(total.value()[0]);
    return total;
}

template Var<float> weighted_yuv_loss(const Var<float>&, const Var<float>&, float, const std::array<double, 3>&,
                                      LossParts*);
template Var<double> weighted_yuv_loss(const Var<double>&, const Var<double>&, double, const std::array<double, 3>&,
                                       LossParts*);

LossParts weighted_yuv_loss(const Frame444& x, const Frame444& x_hat, double eps, const std::array<double, 3>& weights) {
    require_same_shape(x.planes.shape, x_hat.planes.shape, "weighted_yuv_loss");
    if (x.planes.rank() != 3 || x.planes.dim(0) != 3) throw InvalidArgument("weighted_yuv_loss: expected [3,H,W] frames");
    const std::size_t plane = x.planes.numel() / 3;
    LossParts parts;
    std::vector<double> a(plane), b(plane);
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < plane; ++i) {
            a[i] = x.planes[c * plane + i];
            b[i] = x_hat.planes[c * plane + i];
        }
        parts.component[c] = charbonnier(a, b, eps);
        parts.total += weights[c] * parts.component[c];
    }
    return parts;
}

AdamState AdamState::for_params(const ParameterStore& params, const TrainConfig& cfg) {
    AdamState s;
    s.step = params.step;
    s.lr = scheduled_lr(cfg, s.step);
    for (const auto& a : params.arrays) {
        s.m.emplace_back(a.numel(), 0.0);
        s.v.emplace_back(a.numel(), 0.0);
    }
    return s;
}

void adam_step(ParameterStore& params, const std::vector<Tensor<float>>& grads, AdamState& state,
               const TrainConfig& cfg) {
    if (grads.size() != params.size() || state.m.size() != params.size())
        throw InvalidArgument("adam_step: gradient / moment count does not match the parameters");
    for (std::size_t i = 0; i < grads.size(); ++i) {
        require_same_shape(grads[i].shape, params.arrays[i].shape, "adam_step");
        if (!grads[i].all_finite()) throw NumericError("non-finite gradient in parameter '" + params.names[i] + "'");
    }
    const double lr = scheduled_lr(cfg, state.step);
    const double t = double(state.step + 1);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < grads.size(); ++i) {
        auto& p = params.arrays[i].data;
        auto& m = state.m[i];
        auto& v = state.v[i];
        const auto& g = grads[i].data;
        for (std::size_t k = 0; k < p.size(); ++k) {
            const double gk = g[k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            const double m_hat = m[k] / c1;
            const double v_hat = v[k] / c2;
            p[k] = float(double(p[k]) - lr * m_hat / (std::sqrt(v_hat) + cfg.adam_eps));
        }
    }
    ++state.step;
    params.step = state.step;
    state.lr = scheduled_lr(cfg, state.step);
}

TrainSession::TrainSession(ParameterStore params, TrainConfig cfg)
    : params_(std::move(params)), cfg_(std::move(cfg)), adam_(AdamState::for_params(params_, cfg_)) {
    cfg_.validate();
    params_.config.validate();
}

namespace {

Var<float> patch_loss(const PatchPair& pair, const ParamBinding<float>& binding, const ModelConfig& model,
                      const TrainConfig& cfg, LossParts& parts) {
    const QpPlane qp = make_qp_plane(pair.qp, pair.lossy.width, pair.lossy.height);
    auto out = forward(constant(pair.lossy.planes), qp.plane, binding, model);
    return weighted_yuv_loss(constant(pair.lossless.planes), out, float(cfg.charbonnier_eps), cfg.loss_weights, &parts);
}

void add_parts(LossParts& acc, const LossParts& p, double w) {
    acc.total += w * p.total;
    for (std::size_t c = 0; c < 3; ++c) acc.component[c] += w * p.component[c];
}

} // namespace

StepStats TrainSession::step(const std::vector<PatchPair>& batch) {
    if (batch.empty()) throw InvalidArgument("TrainSession::step: empty batch");
    const ParamBinding<float> binding(params_, true);
    const double w = 1.0 / double(batch.size());
    StepStats stats;
    stats.step = adam_.step;
    stats.lr = scheduled_lr(cfg_, adam_.step);
    for (const auto& pair : batch) {
        LossParts parts;
        auto loss = patch_loss(pair, binding, params_.config, cfg_, parts);
        if (!std::isfinite(parts.total)) throw NumericError("non-finite loss at step " + std::to_string(adam_.step));
        backward(loss, Tensor<float>(Shape{1}, float(w)));
        add_parts(stats.loss, parts, w);
    }
    std::vector<Tensor<float>> grads;
    grads.reserve(binding.size());
    for (std::size_t i = 0; i < binding.size(); ++i) grads.push_back(binding.var(i).grad());
    adam_step(params_, grads, adam_, cfg_);
    return stats;
}

LossParts TrainSession::evaluate(const std::vector<PatchPair>& batch) const {
    const ParamBinding<float> binding(params_, false);
    LossParts total;
    for (const auto& pair : batch) {
        LossParts parts;
        patch_loss(pair, binding, params_.config, cfg_, parts);
        add_parts(total, parts, 1.0 / double(batch.size()));
    }
    return total;
}

namespace {

class Dataset {
public:
    Dataset(const std::string& manifest, std::size_t patch) : manifest_(manifest) {
        records_ = read_manifest(manifest, false);
        if (records_.empty()) throw FormatError("manifest '" + manifest + "' has no records");
        for (const auto& r : records_) {
            guard(r, [&] {
                FrameSource lossy(r.lossy_path, r.width, r.height);
                FrameSource lossless(r.lossless_path, r.width, r.height);
                if (lossy.frame_count() == 0) throw FormatError("'" + r.lossy_path + "' holds no complete frame");
                if (lossy.frame_count() != lossless.frame_count())
                    throw FormatError("lossy and lossless frame counts differ (" + std::to_string(lossy.frame_count()) +
                                      " vs " + std::to_string(lossless.frame_count()) + ")");
                if (patch > std::min(r.width, r.height))
                    throw InvalidArgument("patch size " + std::to_string(patch) + " exceeds the frame size");
                (void)make_qp_plane(r.qp, 1, 1);
                lossy_.push_back(std::move(lossy));
                lossless_.push_back(std::move(lossless));
            });
        }
    }

    std::vector<PatchPair> batch(std::size_t n, std::size_t patch, std::mt19937_64& rng) const {
        std::uniform_int_distribution<std::size_t> pick(0, records_.size() - 1);
        std::vector<PatchPair> out;
        out.reserve(n);
        for (std::size_t b = 0; b < n; ++b) {
            const std::size_t i = pick(rng);
            guard(records_[i], [&] {
                out.push_back(sample_patch_pair(lossy_[i], lossless_[i], records_[i].qp, patch, rng));
                out.back().source_id = records_[i].lossless_path;
            });
        }
        return out;
    }

private:
    template <typename F>
    void guard(const ManifestRecord& r, F&& f) const {
        try {
            f();
        } catch (const Error& e) {
            throw FormatError("manifest '" + manifest_ + "' line " + std::to_string(r.line) + ": " + e.what());
        }
    }

    std::string manifest_;
    std::vector<ManifestRecord> records_;
    std::vector<FrameSource> lossy_, lossless_;
};

/// Bounded queue filled by background producers.
class BatchQueue {
public:
    BatchQueue(const Dataset& data, const TrainConfig& cfg, std::size_t capacity) : capacity_(capacity) {
        for (std::size_t k = 0; k < cfg.loader_threads; ++k)
            workers_.emplace_back([this, &data, cfg, k] {
                std::mt19937_64 rng(cfg.seed + 0x9e3779b97f4a7c15ULL * (k + 1));
                try {
                    while (true) {
                        auto b = data.batch(cfg.batch_size, cfg.patch_size, rng);
                        std::unique_lock lock(mutex_);
                        not_full_.wait(lock, [this] { return stop_ || queue_.size() < capacity_; });
                        if (stop_) return;
                        queue_.push_back(std::move(b));
                        not_empty_.notify_one();
                    }
                } catch (...) {
                    std::lock_guard lock(mutex_);
                    if (!failure_) failure_ = std::current_exception();
                    not_empty_.notify_all();
                }
            });
    }

    ~BatchQueue() {
        {
            std::lock_guard lock(mutex_);
            stop_ = true;
        }
        not_full_.notify_all();
        workers_.clear();
    }

    std::vector<PatchPair> pop() {
        std::unique_lock lock(mutex_);
        not_empty_.wait(lock, [this] { return failure_ || !queue_.empty(); });
        if (queue_.empty()) std::rethrow_exception(failure_);
        auto b = std::move(queue_.front());
        queue_.pop_front();
        not_full_.notify_one();
        return b;
    }

private:
    std::size_t capacity_;
    std::mutex mutex_;
    std::condition_variable not_full_, not_empty_;
    std::deque<std::vector<PatchPair>> queue_;
    std::exception_ptr failure_;
    bool stop_ = false;
    std::vector<std::jthread> workers_;
};

std::string format_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

} // namespace

TrainResult train(const std::string& manifest_path, const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                  const std::string& out_dir, const ParameterStore* init) {
    model_cfg.validate();
    train_cfg.validate();
    if (train_cfg.patch_size % model_cfg.alignment() != 0)
        throw InvalidArgument("patch_size " + std::to_string(train_cfg.patch_size) + " is not a multiple of " +
                              std::to_string(model_cfg.alignment()));
    if (init) check_layout(*init, model_cfg);

    const Dataset data(manifest_path, train_cfg.patch_size);
    std::filesystem::create_directories(out_dir);
    const std::filesystem::path dir(out_dir);

    ParameterStore params = init ? *init : init_model(model_cfg, train_cfg.seed);
    params.config = model_cfg;
    params.seed = train_cfg.seed;
    TrainSession session(std::move(params), train_cfg);

    TrainResult result;
    result.loss_log_path = (dir / "loss_log.csv").string();
    std::ofstream log(result.loss_log_path, std::ios::trunc);
    if (!log) throw IoError("cannot write '" + result.loss_log_path + "'");
    log << "step,lr,loss,loss_y,loss_u,loss_v\n";

    std::mt19937_64 rng(train_cfg.seed);
    std::unique_ptr<BatchQueue> queue;
    if (!train_cfg.deterministic && train_cfg.loader_threads > 0)
        queue = std::make_unique<BatchQueue>(data, train_cfg, 4);

    for (std::uint64_t s = 0; s < train_cfg.max_steps; ++s) {
        const auto batch = queue ? queue->pop() : data.batch(train_cfg.batch_size, train_cfg.patch_size, rng);
        const StepStats stats = session.step(batch);
        result.history.push_back(stats);
        if (stats.step % train_cfg.log_every == 0 || s + 1 == train_cfg.max_steps)
            log << stats.step << ',' << format_real(stats.lr) << ',' << format_real(stats.loss.total) << ','
                << format_real(stats.loss.component[0]) << ',' << format_real(stats.loss.component[1]) << ','
                << format_real(stats.loss.component[2]) << '\n';
        if (train_cfg.checkpoint_every && (s + 1) % train_cfg.checkpoint_every == 0 && s + 1 < train_cfg.max_steps)
            save_checkpoint(session.params(), (dir / ("step_" + std::to_string(session.params().step) + ".ckpt")).string());
    }
    queue.reset();
    log.flush();
    if (!log) throw IoError("write to '" + result.loss_log_path + "' failed");
    result.checkpoint_path = (dir / "final.ckpt").string();
    save_checkpoint(session.params(), result.checkpoint_path);
    return result;
}

namespace {

// Analytic gradients come from `fn` (precision T); the finite differences
// evaluate `reference` (precision R) at the same point.
template <typename T, typename R>
GradCheckReport grad_check_impl(const std::string& name, const GradCheckFn<T>& fn, const GradCheckFn<R>& reference,
                                const std::vector<std::string>& names, const std::vector<Tensor<T>>& inputs,
                                const GradCheckOptions& options) {
    if (names.size() != inputs.size()) throw InvalidArgument("grad_check: names and inputs differ in length");
    const double h = options.step > 0.0 ? options.step : (std::is_same_v<R, float> ? 1e-3 : 1e-5);
    GradCheckReport report;
    report.name = name;
    report.tolerance = options.tolerance;

    std::vector<Var<T>> leaves;
    for (const auto& t : inputs) leaves.push_back(leaf(t, true));
    const auto y = fn(leaves);
    std::mt19937_64 rng(options.seed);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    Tensor<T> r(y.shape());
    for (auto& v : r.data) v = T(unit(rng));
    backward(y, r);
    ++report.evaluations;

    // Each evaluation also reports its PReLU branch signature.
    KinkProbe probe;
    auto objective = [&](const std::vector<Tensor<R>>& values, std::uint64_t* signature) {
        std::vector<Var<R>> c;
        c.reserve(values.size());
        for (const auto& v : values) c.push_back(constant(v));
        probe.reset();
        const auto out = reference(c);
        *signature = probe.signature();
        ++report.evaluations;
        double s = 0.0;
        for (std::size_t k = 0; k < out.value().numel(); ++k) s += double(r[k]) * double(out.value()[k]);
        return s;
    };

    std::vector<Tensor<R>> work;
    for (const auto& t : inputs) work.push_back(t.template cast<R>());
    std::uint64_t base_signature = 0;
    objective(work, &base_signature);

    // Absolute resolution of a central difference: rounding of the output
    // values, relative eps of R, divided by the step.
    double floor_per_coord = options.abs_floor;
    if (floor_per_coord < 0.0) {
        std::vector<Var<R>> c;
        for (const auto& v : work) c.push_back(constant(v));
        const auto out = reference(c);
        double mag = 0.0;
        for (std::size_t k = 0; k < out.value().numel(); ++k) mag += std::pow(double(r[k]) * double(out.value()[k]), 2);
        double g2 = 0.0;
        std::size_t gn = 0;
        for (const auto& l : leaves) {
            for (T g : l.grad().data) g2 += double(g) * double(g);
            gn += l.value().numel();
        }
        // The analytic side resolves no better than eps(T) times the overall
        // gradient scale.
        const double resolution =
            std::max(std::numeric_limits<R>::epsilon() * std::max(1.0, std::sqrt(mag)) / h,
                     double(std::numeric_limits<T>::epsilon()) * std::sqrt(g2 / double(std::max<std::size_t>(gn, 1))));
        floor_per_coord = 10.0 * resolution / options.tolerance;
    }
    report.abs_floor = floor_per_coord;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Tensor<T> analytic = leaves[i].grad();
        std::vector<std::size_t> coords(inputs[i].numel());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (coords.size() > options.max_coords) {
            for (std::size_t k = 0; k < options.max_coords; ++k) {
                std::uniform_int_distribution<std::size_t> pick(k, coords.size() - 1);
                std::swap(coords[k], coords[pick(rng)]);
            }
            coords.resize(options.max_coords);
        }
        double na = 0.0, nf = 0.0, nd = 0.0;
        std::size_t used = 0;
        for (std::size_t k : coords) {
            // A step that flips a PReLU branch is retried smaller, then skipped.
            const R x0 = work[i][k];
            double fd = 0.0;
            bool smooth = false;
            for (double step = h; !smooth && step >= h * 1e-2; step *= 0.1) {
                const R xp = R(double(x0) + step);
                const R xm = R(double(x0) - step);
                std::uint64_t sp = 0, sm = 0;
                work[i][k] = xp;
                const double lp = objective(work, &sp);
                work[i][k] = xm;
                const double lm = objective(work, &sm);
                work[i][k] = x0;
                smooth = sp == base_signature && sm == base_signature;
                fd = (lp - lm) / (double(xp) - double(xm));
            }
            if (!smooth) {
                ++report.skipped;
                continue;
            }
            ++used;
            const double ga = double(analytic[k]);
            na += ga * ga;
            nf += fd * fd;
            nd += (ga - fd) * (ga - fd);
        }
        const double floor = floor_per_coord * std::sqrt(double(used));
        const double denom = std::max(std::sqrt(std::max(na, nf)), floor);
        double err = denom > 0.0 ? std::sqrt(nd) / denom : 0.0;
        if (used == 0 && !coords.empty()) err = std::numeric_limits<double>::infinity();  // nothing verified
        if (!std::isfinite(err)) err = std::numeric_limits<double>::infinity();
        report.per_array.emplace_back(names[i], err);
        if (err >= report.max_rel_error) {
            report.max_rel_error = err;
            report.worst_array = names[i];
        }
    }
    return report;
}

} // namespace

template <typename T>
GradCheckReport grad_check(const std::string& name, const GradCheckFn<T>& fn, const std::vector<std::string>& names,
                           const std::vector<Tensor<T>>& inputs, const GradCheckOptions& options) {
    return grad_check_impl<T, T>(name, fn, fn, names, inputs, options);
}

GradCheckReport grad_check(const std::string& name, const GradCheckFn<float>& fn, const GradCheckFn<double>& reference,
                           const std::vector<std::string>& names, const std::vector<Tensor<float>>& inputs,
                           const GradCheckOptions& options) {
    return grad_check_impl<float, double>(name, fn, reference, names, inputs, options);
}

template GradCheckReport grad_check(const std::string&, const GradCheckFn<float>&, const std::vector<std::string>&,
                                    const std::vector<Tensor<float>>&, const GradCheckOptions&);
template GradCheckReport grad_check(const std::string&, const GradCheckFn<double>&, const std::vector<std::string>&,
                                    const std::vector<Tensor<double>>&, const GradCheckOptions&);

} // namespace schvpp
