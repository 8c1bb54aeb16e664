// Command-line front end; uses only the C interface.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "schvpp/schvpp.h"

namespace {

int report(schvpp_status status, const char* what) {
    if (status == SCHVPP_OK) return 0;
    std::fprintf(stderr, "schvpp %s: %s\n", what, schvpp_last_error());
    return 10 + static_cast<int>(status);
}

bool parse_size(const std::string& text, size_t& w, size_t& h) {
    const auto x = text.find('x');
    if (x == std::string::npos) return false;
    try {
        std::size_t used = 0;
        w = std::stoul(text.substr(0, x), &used);
        if (used != x) return false;
        h = std::stoul(text.substr(x + 1), &used);
        return used == text.size() - x - 1;
    } catch (const std::exception&) {
        return false;
    }
}

struct ModelHandle {
    schvpp_model* ptr = nullptr;
    ~ModelHandle() { schvpp_model_free(ptr); }
};

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"SC-HVPPNet compressed-video post-processing"};
    app.require_subcommand(1);
    app.fallthrough();

    bool deterministic = false;
    std::int64_t seed = -1;
    app.add_flag("--deterministic", deterministic, "Single-threaded, bit-reproducible data path");
    app.add_option("--seed", seed, "Random seed (overrides config files)")->check(CLI::NonNegativeNumber);

    std::string config, manifest, out, ckpt, in, size, anchor, test;
    int qp = 0;
    unsigned threads = 1;
    bool identity = false;

    auto* train = app.add_subcommand("train", "Train a model");
    train->add_option("--config", config, "key=value training/model config")->required()->check(CLI::ExistingFile);
    train->add_option("--manifest", manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
    train->add_option("--out", out, "Output directory")->required();

    auto* enhance = app.add_subcommand("enhance", "Enhance a raw YUV 4:2:0 file");
    enhance->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    enhance->add_option("--in", in, "Input YUV file")->required()->check(CLI::ExistingFile);
    enhance->add_option("--size", size, "Frame size WxH")->required();
    enhance->add_option("--qp", qp, "Quantization parameter of the input")->required()->check(CLI::Range(0, 63));
    enhance->add_option("--out", out, "Output YUV file")->required();
    enhance->add_option("--threads", threads, "Tile worker threads")->check(CLI::PositiveNumber);

    auto* evaluate = app.add_subcommand("evaluate", "Evaluate a model on a manifest with bitrates");
    evaluate->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    evaluate->add_option("--manifest", manifest, "Evaluation manifest")->required()->check(CLI::ExistingFile);
    evaluate->add_option("--out", out, "Output directory")->required();
    evaluate->add_option("--threads", threads, "Tile worker threads")->check(CLI::PositiveNumber);

    auto* bdrate = app.add_subcommand("bdrate", "BD-rate of two RD curves (CSV bitrate,quality)");
    bdrate->add_option("--anchor", anchor, "Anchor curve")->required()->check(CLI::ExistingFile);
    bdrate->add_option("--test", test, "Test curve")->required()->check(CLI::ExistingFile);

    auto* init = app.add_subcommand("init", "Write a freshly initialized checkpoint");
    init->add_option("--config", config, "key=value model settings")->check(CLI::ExistingFile);
    init->add_option("--out", out, "Checkpoint path")->required();
    init->add_flag("--identity", identity, "Zero the reconstruction layer");

    CLI11_PARSE(app, argc, argv);

    if (*train) return report(schvpp_train(config.c_str(), manifest.c_str(), out.c_str(), deterministic, seed), "train");

    if (*enhance) {
        size_t w = 0, h = 0;
        if (!parse_size(size, w, h)) {
            std::fprintf(stderr, "schvpp enhance: --size must look like 416x240\n");
            return 2;
        }
        ModelHandle model;
        if (int rc = report(schvpp_model_load(ckpt.c_str(), &model.ptr), "enhance")) return rc;
        schvpp_model_set_threads(model.ptr, threads);
        return report(schvpp_enhance_file(model.ptr, in.c_str(), out.c_str(), w, h, qp), "enhance");
    }

    if (*evaluate) {
        ModelHandle model;
        if (int rc = report(schvpp_model_load(ckpt.c_str(), &model.ptr), "evaluate")) return rc;
        schvpp_model_set_threads(model.ptr, threads);
        return report(schvpp_evaluate(model.ptr, manifest.c_str(), out.c_str()), "evaluate");
    }

    if (*bdrate) {
        double percent = 0.0;
        if (int rc = report(schvpp_bd_rate_files(anchor.c_str(), test.c_str(), &percent), "bdrate")) return rc;
        std::printf("%.4f\n", percent);
        return 0;
    }

    if (*init) {
        std::string text;
        if (!config.empty()) {
            std::ifstream f(config);
            std::stringstream ss;
            ss << f.rdbuf();
            text = ss.str();
        }
        ModelHandle model;
        const auto s = static_cast<std::uint64_t>(seed < 0 ? 0 : seed);
        if (int rc = report(schvpp_model_create(text.c_str(), s, &model.ptr), "init")) return rc;
        if (identity)
            if (int rc = report(schvpp_model_zero_reconstruction(model.ptr), "init")) return rc;
        return report(schvpp_model_save(model.ptr, out.c_str()), "init");
    }
    return 0;
}
