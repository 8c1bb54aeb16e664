#include "schvpp/schvpp.h"

#include <cstring>
#include <exception>
#include <new>
#include <string>

#include "schvpp/error.hpp"
#include "schvpp/evaluation.hpp"
#include "schvpp/network.hpp"
#include "schvpp/training.hpp"

struct schvpp_model {
    schvpp::ParameterStore params;
    schvpp::InferenceOptions options;
};

namespace {

thread_local std::string last_error;

schvpp_status fail(schvpp_status status, const char* message) {
    last_error = message;
    return status;
}

template <typename F>
schvpp_status guarded(F&& f) {
    try {
        f();
        last_error.clear();
        return SCHVPP_OK;
    } catch (const schvpp::InvalidArgument& e) {
        return fail(SCHVPP_ERR_INVALID_ARGUMENT, e.what());
    } catch (const schvpp::OutOfRange& e) {
        return fail(SCHVPP_ERR_OUT_OF_RANGE, e.what());
    } catch (const schvpp::IoError& e) {
        return fail(SCHVPP_ERR_IO, e.what());
    } catch (const schvpp::FormatError& e) {
        return fail(SCHVPP_ERR_FORMAT, e.what());
    } catch (const schvpp::DomainError& e) {
        return fail(SCHVPP_ERR_DOMAIN, e.what());
    } catch (const schvpp::NumericError& e) {
        return fail(SCHVPP_ERR_NUMERIC, e.what());
    } catch (const std::bad_alloc&) {
        return fail(SCHVPP_ERR_INTERNAL, "out of memory");
    } catch (const std::exception& e) {
        return fail(SCHVPP_ERR_INTERNAL, e.what());
    } catch (...) {
        return fail(SCHVPP_ERR_INTERNAL, "unknown error");
    }
}

void require(bool ok, const char* what) {
    if (!ok) throw schvpp::InvalidArgument(what);
}

schvpp::RdCurve curve(const double* rate, const double* quality, std::size_t n, const char* label) {
    require(n == 0 || (rate && quality), "bd_rate: NULL curve array");
    schvpp::RdCurve c;
    c.label = label;
    for (std::size_t i = 0; i < n; ++i) c.points.push_back({rate[i], quality[i]});
    return c;
}

} // namespace

extern "C" {

const char* schvpp_last_error(void) {
    return last_error.c_str();
}

const char* schvpp_version(void) {
    return "0.1.0";
}

schvpp_status schvpp_model_create(const char* config_text, uint64_t seed, schvpp_model** out) {
    return guarded([&] {
        require(out != nullptr, "model_create: out is NULL");
        *out = nullptr;
        auto kv = schvpp::parse_key_values(config_text ? config_text : "");
        schvpp::ModelConfig cfg;
        if (auto it = kv.find("preset"); it != kv.end()) {
            if (it->second == "desk")
                cfg = schvpp::ModelConfig::desk_scale();
            else if (it->second != "full")
                throw schvpp::FormatError("key 'preset': expected desk or full, got '" + it->second + "'");
            kv.erase(it);
        }
        cfg = schvpp::model_config_from(kv, cfg);
        if (!kv.empty()) throw schvpp::FormatError("unknown model key '" + kv.begin()->first + "'");
        auto model = std::make_unique<schvpp_model>();
        model->params = schvpp::init_model(cfg, seed);
        *out = model.release();
    });
}

schvpp_status schvpp_model_load(const char* path, schvpp_model** out) {
    return guarded([&] {
        require(path && out, "model_load: NULL argument");
        *out = nullptr;
        auto model = std::make_unique<schvpp_model>();
        model->params = schvpp::load_checkpoint(path);
        *out = model.release();
    });
}

schvpp_status schvpp_model_save(const schvpp_model* model, const char* path) {
    return guarded([&] {
        require(model && path, "model_save: NULL argument");
        schvpp::save_checkpoint(model->params, path);
    });
}

void schvpp_model_free(schvpp_model* model) {
    delete model;
}

schvpp_status schvpp_model_zero_reconstruction(schvpp_model* model) {
    return guarded([&] {
        require(model != nullptr, "model is NULL");
        schvpp::zero_reconstruction(model->params);
    });
}

schvpp_status schvpp_model_parameter_count(const schvpp_model* model, size_t* out) {
    return guarded([&] {
        require(model && out, "parameter_count: NULL argument");
        *out = model->params.element_count();
    });
}

schvpp_status schvpp_model_config(const schvpp_model* model, char* buf, size_t* len) {
    return guarded([&] {
        require(model && len, "model_config: NULL argument");
        const std::string text = schvpp::to_key_values(model->params.config);
        const std::size_t capacity = *len;
        *len = text.size() + 1;
        if (!buf) return;
        if (capacity < text.size() + 1) throw schvpp::OutOfRange("model_config: buffer too small");
        std::memcpy(buf, text.c_str(), text.size() + 1);
    });
}

schvpp_status schvpp_model_set_threads(schvpp_model* model, unsigned threads) {
    return guarded([&] {
        require(model != nullptr, "model is NULL");
        model->options.threads = threads ? threads : 1;
    });
}

schvpp_status schvpp_enhance_frame(const schvpp_model* model, const uint8_t* in, uint8_t* out, size_t width,
                                   size_t height, int qp) {
    return guarded([&] {
        require(model && in && out, "enhance_frame: NULL argument");
        schvpp::Yuv420Frame frame(width, height);
        frame.validate();
        const std::size_t luma = width * height, chroma = luma / 4;
        std::memcpy(frame.y.data(), in, luma);
        std::memcpy(frame.u.data(), in + luma, chroma);
        std::memcpy(frame.v.data(), in + luma + chroma, chroma);
        const auto result =
            schvpp::enhance_frame(frame, qp, model->params, model->params.config, model->options);
        std::memcpy(out, result.y.data(), luma);
        std::memcpy(out + luma, result.u.data(), chroma);
        std::memcpy(out + luma + chroma, result.v.data(), chroma);
    });
}

schvpp_status schvpp_enhance_file(const schvpp_model* model, const char* in_path, const char* out_path, size_t width,
                                  size_t height, int qp) {
    return guarded([&] {
        require(model && in_path && out_path, "enhance_file: NULL argument");
        (void)schvpp::make_qp_plane(qp, 1, 1);
        const schvpp::FrameSource source(in_path, width, height);
        if (source.frame_count() == 0) throw schvpp::FormatError(std::string("'") + in_path + "' holds no complete frame");
        for (std::size_t f = 0; f < source.frame_count(); ++f) {
            const auto result =
                schvpp::enhance_frame(source.read(f), qp, model->params, model->params.config, model->options);
            schvpp::write_yuv420(result, out_path, f > 0);
        }
    });
}

schvpp_status schvpp_train(const char* config_path, const char* manifest_path, const char* out_dir, int deterministic,
                           int64_t seed) {
    return guarded([&] {
        require(config_path && manifest_path && out_dir, "train: NULL argument");
        auto run = schvpp::read_run_config(config_path);
        if (seed >= 0) run.train.seed = static_cast<std::uint64_t>(seed);
        if (deterministic) run.train.deterministic = true;
        schvpp::train(manifest_path, run.model, run.train, out_dir);
    });
}

schvpp_status schvpp_evaluate(const schvpp_model* model, const char* manifest_path, const char* out_dir) {
    return guarded([&] {
        require(model && manifest_path && out_dir, "evaluate: NULL argument");
        const auto records = schvpp::read_manifest(manifest_path, true);
        const auto report = schvpp::evaluate_sequences(records, [&](const schvpp::Yuv420Frame& f, int qp) {
            return schvpp::enhance_frame(f, qp, model->params, model->params.config, model->options);
        });
        schvpp::write_eval_report(report, out_dir);
    });
}

schvpp_status schvpp_bd_rate(const double* anchor_rate, const double* anchor_quality, size_t anchor_n,
                             const double* test_rate, const double* test_quality, size_t test_n, double* out_percent) {
    return guarded([&] {
        require(out_percent != nullptr, "bd_rate: out is NULL");
        *out_percent = schvpp::bd_rate(curve(anchor_rate, anchor_quality, anchor_n, "anchor"),
                                       curve(test_rate, test_quality, test_n, "test"));
    });
}

schvpp_status schvpp_bd_rate_files(const char* anchor_path, const char* test_path, double* out_percent) {
    return guarded([&] {
        require(anchor_path && test_path && out_percent, "bd_rate_files: NULL argument");
        *out_percent = schvpp::bd_rate(schvpp::read_rd_curve(anchor_path), schvpp::read_rd_curve(test_path));
    });
}

} // extern "C"
