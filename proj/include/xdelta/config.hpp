#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "xdelta/delta_train.hpp"
#include "xdelta/sparsity.hpp"
#include "xdelta/synthetic.hpp"

namespace xdelta {

using Json = nlohmann::json;

struct DatasetConfig {
    std::string type = "synthetic";  // synthetic | directory
    // synthetic
    long train_count = 4000;
    long test_count = 1000;
    std::uint64_t seed = 11;
    double pixel_noise = 0.06;
    long max_distractors = 3;
    // directory
    std::string train_dir;
    std::string test_dir;
    DatasetNorm norm;
};

struct ModelConfig {
    long base_width = 8;
    long edge_width = 2;
    long classes = 10;
    long epochs = 22;
    double lr = 0.02;
    double lr_decay = 0.93;
    long batch_size = 64;
    double label_smoothing = 0.1;
    std::string base_checkpoint;  // optional pre-trained stores
    std::string edge_checkpoint;
};

struct ExtractionConfig {
    SparsityCandidates candidates;
    SparsitySearchConfig search;
    long search_subset = 2000;    // images used for the coefficient search
    long budget_params = 0;       // explicit budget; 0 = use fractions below
    long budget_macs = 0;
    double budget_param_fraction = 0.35;
    double budget_mac_fraction = 0.6;
    long finetune_epochs = 6;
    double finetune_lr = 0.01;
    double finetune_lr_decay = 0.93;
    long finetune_batch = 64;
    double finetune_label_smoothing = 0.1;
    long finetune_subset = 0;  // 0 = full training set
};

struct AnalysisConfig {
    double tau = 0.5;
    CategorizeConfig categorize;
    double tau_sem = 0.2;
    long max_images = 50;
    long top_k = 10;
    long overlay_count = 6;
};

struct PipelineConfig {
    std::uint64_t seed = 1;
    std::string out_dir = "out";
    long threads = 0;  // 0 = library default
    DatasetConfig dataset;
    ModelConfig models;
    ExtractionConfig extraction;
    DeltaBuildConfig delta;
    DeltaTrainConfig training;
    AnalysisConfig analysis;
    Json raw;  // canonical parsed document, used for stage hashing

    void validate_paths() const {
        namespace fs = std::filesystem;
        if (dataset.type == "directory") {
            if (!fs::is_directory(dataset.train_dir))
                throw ConfigError("dataset.train_dir missing: " + dataset.train_dir);
            if (!fs::is_directory(dataset.test_dir))
                throw ConfigError("dataset.test_dir missing: " + dataset.test_dir);
        } else if (dataset.type != "synthetic") {
            throw ConfigError("dataset.type must be synthetic or directory");
        }
        if (!models.base_checkpoint.empty() && !fs::exists(models.base_checkpoint))
            throw ConfigError("models.base_checkpoint missing: " + models.base_checkpoint);
        if (!models.edge_checkpoint.empty() && !fs::exists(models.edge_checkpoint))
            throw ConfigError("models.edge_checkpoint missing: " + models.edge_checkpoint);
    }
};

namespace config_detail {

template <typename T>
T get(const Json& j, const std::string& key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const Json::exception& e) {
        throw ConfigError("config field '" + key + "': " + e.what());
    }
}

}  // namespace config_detail

inline PipelineConfig parse_config(const Json& j) {
    using config_detail::get;
    PipelineConfig c;
    c.raw = j;
    c.seed = get<std::uint64_t>(j, "seed", c.seed);
    c.out_dir = get<std::string>(j, "out_dir", c.out_dir);
    c.threads = get<long>(j, "threads", c.threads);

    Json d = j.value("dataset", Json::object());
    c.dataset.type = get<std::string>(d, "type", c.dataset.type);
    c.dataset.train_count = get<long>(d, "train_count", c.dataset.train_count);
    c.dataset.test_count = get<long>(d, "test_count", c.dataset.test_count);
    c.dataset.seed = get<std::uint64_t>(d, "seed", c.dataset.seed);
    c.dataset.pixel_noise = get<double>(d, "pixel_noise", c.dataset.pixel_noise);
    c.dataset.max_distractors = get<long>(d, "max_distractors", c.dataset.max_distractors);
    c.dataset.train_dir = get<std::string>(d, "train_dir", "");
    c.dataset.test_dir = get<std::string>(d, "test_dir", "");
    c.dataset.norm.mean = get<float>(d, "norm_mean", c.dataset.norm.mean);
    c.dataset.norm.stddev = get<float>(d, "norm_std", c.dataset.norm.stddev);

    Json m = j.value("models", Json::object());
    c.models.base_width = get<long>(m, "base_width", c.models.base_width);
    c.models.edge_width = get<long>(m, "edge_width", c.models.edge_width);
    c.models.classes = get<long>(m, "classes", c.models.classes);
    c.models.epochs = get<long>(m, "epochs", c.models.epochs);
    c.models.lr = get<double>(m, "lr", c.models.lr);
    c.models.lr_decay = get<double>(m, "lr_decay", c.models.lr_decay);
    c.models.batch_size = get<long>(m, "batch_size", c.models.batch_size);
    c.models.label_smoothing = get<double>(m, "label_smoothing", c.models.label_smoothing);
    c.models.base_checkpoint = get<std::string>(m, "base_checkpoint", "");
    c.models.edge_checkpoint = get<std::string>(m, "edge_checkpoint", "");

    Json e = j.value("extraction", Json::object());
    if (e.contains("conv_rates"))
        c.extraction.candidates.conv_rates = e.at("conv_rates").get<std::vector<double>>();
    if (e.contains("linear_rates"))
        c.extraction.candidates.linear_rates = e.at("linear_rates").get<std::vector<double>>();
    c.extraction.candidates.validate();
    c.extraction.search.K = get<long>(e, "K", c.extraction.search.K);
    c.extraction.search.lambda0 = get<double>(e, "lambda0", c.extraction.search.lambda0);
    c.extraction.search.lambda1 = get<double>(e, "lambda1", c.extraction.search.lambda1);
    c.extraction.search.alpha = get<double>(e, "alpha", c.extraction.search.alpha);
    c.extraction.search.beta = get<double>(e, "beta", c.extraction.search.beta);
    c.extraction.search.lr = get<double>(e, "lr", c.extraction.search.lr);
    c.extraction.search.lr_decay = get<double>(e, "lr_decay", c.extraction.search.lr_decay);
    c.extraction.search.batch_size = get<long>(e, "batch_size", c.extraction.search.batch_size);
    c.extraction.search.epochs = get<long>(e, "epochs", c.extraction.search.epochs);
    c.extraction.search_subset = get<long>(e, "search_subset", c.extraction.search_subset);
    c.extraction.budget_params = get<long>(e, "budget_params", 0);
    c.extraction.budget_macs = get<long>(e, "budget_macs", 0);
    c.extraction.budget_param_fraction =
        get<double>(e, "budget_param_fraction", c.extraction.budget_param_fraction);
    c.extraction.budget_mac_fraction =
        get<double>(e, "budget_mac_fraction", c.extraction.budget_mac_fraction);
    c.extraction.finetune_epochs = get<long>(e, "finetune_epochs", c.extraction.finetune_epochs);
    c.extraction.finetune_lr = get<double>(e, "finetune_lr", c.extraction.finetune_lr);
    c.extraction.finetune_lr_decay =
        get<double>(e, "finetune_lr_decay", c.extraction.finetune_lr_decay);
    c.extraction.finetune_batch = get<long>(e, "finetune_batch", c.extraction.finetune_batch);
    c.extraction.finetune_label_smoothing =
        get<double>(e, "finetune_label_smoothing", c.extraction.finetune_label_smoothing);
    c.extraction.finetune_subset = get<long>(e, "finetune_subset", c.extraction.finetune_subset);

    Json dl = j.value("delta", Json::object());
    c.delta.se_reduction = get<long>(dl, "se_reduction", c.delta.se_reduction);
    c.delta.reduced_dim = get<long>(dl, "reduced_dim", c.delta.reduced_dim);

    Json t = j.value("training", Json::object());
    c.training.epochs = get<long>(t, "epochs", c.training.epochs);
    c.training.batch_size = get<long>(t, "batch_size", c.training.batch_size);
    c.training.lr = get<double>(t, "lr", c.training.lr);
    c.training.momentum = get<double>(t, "momentum", c.training.momentum);
    c.training.lr_decay = get<double>(t, "lr_decay", c.training.lr_decay);
    c.training.eval_every = get<long>(t, "eval_every", c.training.eval_every);
    c.training.weights.lambda_fnc = get<double>(t, "lambda_fnc", c.training.weights.lambda_fnc);
    c.training.weights.lambda_sr = get<double>(t, "lambda_sr", c.training.weights.lambda_sr);
    c.training.weights.lambda = get<double>(t, "lambda", c.training.weights.lambda);
    c.training.weights.validate();

    Json a = j.value("analysis", Json::object());
    c.analysis.tau = get<double>(a, "tau", c.analysis.tau);
    c.analysis.categorize.s_lo = get<double>(a, "s_lo", c.analysis.categorize.s_lo);
    c.analysis.categorize.s_hi = get<double>(a, "s_hi", c.analysis.categorize.s_hi);
    c.analysis.categorize.tau_loc = get<double>(a, "tau_loc", c.analysis.categorize.tau_loc);
    c.analysis.categorize.box_dilation =
        get<double>(a, "box_dilation", c.analysis.categorize.box_dilation);
    c.analysis.tau_sem = get<double>(a, "tau_sem", c.analysis.tau_sem);
    c.analysis.max_images = get<long>(a, "max_images", c.analysis.max_images);
    c.analysis.top_k = get<long>(a, "top_k", c.analysis.top_k);
    c.analysis.overlay_count = get<long>(a, "overlay_count", c.analysis.overlay_count);
    return c;
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config " + path.string());
    Json j;
    try {
        f >> j;
    } catch (const Json::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    return parse_config(j);
}

// Applies one "dotted.path=value" override onto a raw config document.
inline void apply_override(Json& j, const std::string& spec) {
    auto eq = spec.find('=');
    if (eq == std::string::npos) throw ConfigError("override needs key=value: " + spec);
    std::string key = spec.substr(0, eq);
    std::string value = spec.substr(eq + 1);
    Json* cur = &j;
    std::size_t pos = 0;
    while (true) {
        auto dot = key.find('.', pos);
        std::string part = key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
        if (part.empty()) throw ConfigError("bad override key: " + key);
        if (dot == std::string::npos) {
            Json parsed;
            try {
                parsed = Json::parse(value);
            } catch (const Json::exception&) {
                parsed = value;  // plain string
            }
            (*cur)[part] = parsed;
            return;
        }
        cur = &(*cur)[part];
        pos = dot + 1;
    }
}

// Deterministic dataset materialization from the config.
inline LabeledDataset load_train_data(const PipelineConfig& c) {
    if (c.dataset.type == "directory") return load_dataset(c.dataset.train_dir, c.dataset.norm);
    SyntheticConfig sc;
    sc.count = c.dataset.train_count;
    sc.seed = c.dataset.seed;
    sc.pixel_noise = c.dataset.pixel_noise;
    sc.max_distractors = c.dataset.max_distractors;
    sc.norm = c.dataset.norm;
    return generate_synthetic(sc);
}

inline LabeledDataset load_test_data(const PipelineConfig& c) {
    if (c.dataset.type == "directory") return load_dataset(c.dataset.test_dir, c.dataset.norm);
    SyntheticConfig sc;
    sc.count = c.dataset.test_count;
    sc.seed = c.dataset.seed + 0x5eed;  // disjoint stream from the train split
    sc.pixel_noise = c.dataset.pixel_noise;
    sc.max_distractors = c.dataset.max_distractors;
    sc.norm = c.dataset.norm;
    return generate_synthetic(sc);
}

}  // namespace xdelta
