#pragma once

// Run configuration: flat `key = value` text with '#' comments, --key=value
// overrides, strict key checking and a canonical serialization.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "chartnet/data.hpp"
#include "chartnet/error.hpp"
#include "chartnet/train.hpp"

namespace chartnet {

struct DataConfig {
    enum class Kind { circle, torus, clusters, idx };

    Kind kind = Kind::circle;
    std::size_t size = 512;
    double noise = 0.0;
    double torus_major = 2.0;
    double torus_minor = 1.0;
    std::size_t cluster_classes = 8;
    double cluster_radius = 3.0;
    double cluster_spread = 0.3;
    std::uint64_t seed = 1;
    std::string idx_images;
    std::string idx_labels;
    std::size_t idx_limit = 0;
    // held-out split: same generator with its own seed, or a second IDX pair
    std::size_t eval_size = 512;
    std::uint64_t eval_seed = 2;
    std::string eval_idx_images;
    std::string eval_idx_labels;
};

struct RunConfig {
    TrainConfig train = TrainConfig::msimclr_preset();
    DataConfig data;
    std::string precision = "float64";
    std::vector<std::size_t> recall_ks{1, 2, 4, 8};
    bool probe = true;
    double probe_l2 = 1e-4;
    std::uint64_t diagnostics_seed = 7;
    std::string output_dir = "run";
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] inline void bad_value(const std::string& key, const std::string& value, const char* expected) {
    throw FormatError("config: key '" + key + "': expected " + expected + ", got '" + value + "'");
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || v.empty()) bad_value(key, v, "a non-negative integer");
    return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
    double out = 0.0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || v.empty()) bad_value(key, v, "a real number");
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    bad_value(key, v, "true or false");
}

inline std::vector<std::size_t> parse_uint_list(const std::string& key, const std::string& v) {
    std::vector<std::size_t> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_uint(key, trim(item)));
    return out;
}

template <typename E>
E parse_enum(const std::string& key, const std::string& v, const std::vector<std::pair<std::string, E>>& names) {
    for (const auto& [n, e] : names)
        if (n == v) return e;
    std::string expected = "one of";
    for (const auto& [n, _] : names) expected += " " + n;
    bad_value(key, v, expected.c_str());
}

template <typename E>
std::string enum_name(E e, const std::vector<std::pair<std::string, E>>& names) {
    for (const auto& [n, x] : names)
        if (x == e) return n;
    return "?";
}

// Shortest text that parses back to the same double.
inline std::string real_str(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline std::string list_str(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

inline const std::vector<std::pair<std::string, TrainConfig::Task>> kTasks{
    {"msimclr", TrainConfig::Task::msimclr}, {"mtriplet", TrainConfig::Task::mtriplet},
    {"regularizer", TrainConfig::Task::regularizer}};
inline const std::vector<std::pair<std::string, TrainConfig::Variant>> kVariants{
    {"manifold", TrainConfig::Variant::manifold}, {"vanilla", TrainConfig::Variant::vanilla}};
inline const std::vector<std::pair<std::string, BaseMetric>> kMetrics{
    {"euclidean", BaseMetric::euclidean}, {"squared_euclidean", BaseMetric::squared_euclidean}};
inline const std::vector<std::pair<std::string, OptimizerConfig::Kind>> kOptimizers{
    {"adam", OptimizerConfig::Kind::adam}, {"rmsprop", OptimizerConfig::Kind::rmsprop}};
inline const std::vector<std::pair<std::string, AugmentPolicy::Crop>> kCrops{
    {"none", AugmentPolicy::Crop::none}, {"random_resized", AugmentPolicy::Crop::random_resized}};
inline const std::vector<std::pair<std::string, DataConfig::Kind>> kDatasets{
    {"circle", DataConfig::Kind::circle}, {"torus", DataConfig::Kind::torus},
    {"clusters", DataConfig::Kind::clusters}, {"idx", DataConfig::Kind::idx}};
inline const std::vector<std::pair<std::string, std::string>> kPrecisions{{"float64", "float64"}, {"float32", "float32"}};

struct KeyHandler {
    std::string key;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

#define CHARTNET_UINT(name, field)                                                                     \
    KeyHandler{name, [](RunConfig& c, const std::string& v) { c.field = parse_uint(name, v); },        \
               [](const RunConfig& c) { return std::to_string(c.field); }}
#define CHARTNET_REAL(name, field)                                                                     \
    KeyHandler{name, [](RunConfig& c, const std::string& v) { c.field = parse_real(name, v); },        \
               [](const RunConfig& c) { return real_str(c.field); }}
#define CHARTNET_BOOL(name, field)                                                                     \
    KeyHandler{name, [](RunConfig& c, const std::string& v) { c.field = parse_bool(name, v); },        \
               [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); }}
#define CHARTNET_STR(name, field)                                                                      \
    KeyHandler{name, [](RunConfig& c, const std::string& v) { c.field = v; },                          \
               [](const RunConfig& c) { return c.field; }}
#define CHARTNET_ENUM(name, field, table)                                                              \
    KeyHandler{name, [](RunConfig& c, const std::string& v) { c.field = parse_enum(name, v, table); }, \
               [](const RunConfig& c) { return enum_name(c.field, table); }}

// Serialization order is the order of this table.
inline const std::vector<KeyHandler>& key_table() {
    static const std::vector<KeyHandler> table{
        CHARTNET_ENUM("task", train.task, kTasks),
        CHARTNET_ENUM("variant", train.variant, kVariants),
        KeyHandler{"backbone", [](RunConfig& c, const std::string& v) {
                       c.train.arch.backbone = v.empty() ? std::vector<std::size_t>{} : parse_uint_list("backbone", v);
                   },
                   [](const RunConfig& c) { return list_str(c.train.arch.backbone); }},
        CHARTNET_UINT("n_charts", train.arch.n_charts),
        CHARTNET_UINT("chart_dim", train.arch.chart_dim),
        CHARTNET_UINT("proj_dim", train.arch.proj_dim),
        CHARTNET_BOOL("normalize_embedding", train.arch.normalize_embedding),
        CHARTNET_REAL("lambda1", train.reg.lambda1),
        CHARTNET_REAL("lambda2", train.reg.lambda2),
        CHARTNET_REAL("temperature", train.temperature),
        CHARTNET_REAL("margin", train.margin),
        CHARTNET_ENUM("base_metric", train.base_metric, kMetrics),
        CHARTNET_ENUM("optimizer", train.optimizer.kind, kOptimizers),
        CHARTNET_REAL("lr", train.optimizer.lr),
        CHARTNET_REAL("beta1", train.optimizer.beta1),
        CHARTNET_REAL("beta2", train.optimizer.beta2),
        CHARTNET_REAL("alpha", train.optimizer.alpha),
        CHARTNET_REAL("eps", train.optimizer.eps),
        CHARTNET_UINT("batch_size", train.batch_size),
        CHARTNET_UINT("classes_per_batch", train.classes_per_batch),
        CHARTNET_UINT("samples_per_class", train.samples_per_class),
        CHARTNET_UINT("steps", train.steps),
        CHARTNET_UINT("seed", train.seed),
        CHARTNET_ENUM("precision", precision, kPrecisions),
        CHARTNET_ENUM("augment_crop", train.augment.crop, kCrops),
        CHARTNET_REAL("augment_crop_min_scale", train.augment.crop_min_scale),
        CHARTNET_REAL("augment_flip_prob", train.augment.flip_prob),
        CHARTNET_REAL("augment_jitter_sigma", train.augment.jitter_sigma),
        CHARTNET_BOOL("log_wall_ms", train.log_wall_ms),
        CHARTNET_ENUM("dataset", data.kind, kDatasets),
        CHARTNET_UINT("dataset_size", data.size),
        CHARTNET_REAL("dataset_noise", data.noise),
        CHARTNET_REAL("torus_major", data.torus_major),
        CHARTNET_REAL("torus_minor", data.torus_minor),
        CHARTNET_UINT("cluster_classes", data.cluster_classes),
        CHARTNET_REAL("cluster_radius", data.cluster_radius),
        CHARTNET_REAL("cluster_spread", data.cluster_spread),
        CHARTNET_UINT("data_seed", data.seed),
        CHARTNET_STR("idx_images", data.idx_images),
        CHARTNET_STR("idx_labels", data.idx_labels),
        CHARTNET_UINT("idx_limit", data.idx_limit),
        CHARTNET_UINT("eval_size", data.eval_size),
        CHARTNET_UINT("eval_seed", data.eval_seed),
        CHARTNET_STR("eval_idx_images", data.eval_idx_images),
        CHARTNET_STR("eval_idx_labels", data.eval_idx_labels),
        KeyHandler{"recall_ks", [](RunConfig& c, const std::string& v) { c.recall_ks = parse_uint_list("recall_ks", v); },
                   [](const RunConfig& c) { return list_str(c.recall_ks); }},
        CHARTNET_BOOL("probe", probe),
        CHARTNET_REAL("probe_l2", probe_l2),
        CHARTNET_UINT("diagnostics_seed", diagnostics_seed),
        CHARTNET_STR("output_dir", output_dir),
    };
    return table;
}

#undef CHARTNET_UINT
#undef CHARTNET_REAL
#undef CHARTNET_BOOL
#undef CHARTNET_STR
#undef CHARTNET_ENUM

} // namespace detail

/// Ordered (key, value) pairs as written; later entries win.
using ConfigEntries = std::vector<std::pair<std::string, std::string>>;

inline ConfigEntries parse_config_text(std::string_view text) {
    ConfigEntries out;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto nl = text.find('\n', pos);
        auto line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        const auto t = detail::trim(line);
        if (t.empty()) continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw FormatError("config: line " + std::to_string(line_no) + ": expected 'key = value'");
        }
        out.emplace_back(detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
    }
    return out;
}

/// Parses "--key=value" arguments.
inline ConfigEntries parse_overrides(const std::vector<std::string>& args) {
    ConfigEntries out;
    for (const auto& a : args) {
        if (a.rfind("--", 0) != 0 || a.find('=') == std::string::npos) {
            throw FormatError("config: override '" + a + "' is not of the form --key=value");
        }
        const auto eq = a.find('=');
        out.emplace_back(a.substr(2, eq - 2), a.substr(eq + 1));
    }
    return out;
}

/// Builds a RunConfig from entries. The task's preset supplies defaults, so
/// `task` is applied before every other key regardless of position.
inline RunConfig build_config(const ConfigEntries& entries) {
    const auto& table = detail::key_table();
    auto find = [&](const std::string& key) -> const detail::KeyHandler& {
        for (const auto& h : table)
            if (h.key == key) return h;
        throw FormatError("config: unknown key '" + key + "'");
    };
    RunConfig cfg;
    for (const auto& [k, v] : entries) {
        find(k);
        if (k == "task") {
            const auto task = detail::parse_enum("task", v, detail::kTasks);
            cfg.train = task == TrainConfig::Task::mtriplet ? TrainConfig::mtriplet_preset() : TrainConfig::msimclr_preset();
            cfg.train.task = task;
        }
    }
    for (const auto& [k, v] : entries) find(k).set(cfg, v);
    return cfg;
}

inline RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
    std::ifstream in(path);
    if (!in) throw Error("config: cannot read '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    auto entries = parse_config_text(ss.str());
    const auto extra = parse_overrides(overrides);
    entries.insert(entries.end(), extra.begin(), extra.end());
    return build_config(entries);
}

/// Every key, one per line, in table order. Parsing the result reproduces the config.
inline std::string serialize_config(const RunConfig& cfg) {
    std::string out;
    for (const auto& h : detail::key_table()) out += h.key + " = " + h.get(cfg) + "\n";
    return out;
}

inline std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& h : detail::key_table()) keys.push_back(h.key);
    return keys;
}

inline Dataset make_dataset(const DataConfig& dc, bool held_out) {
    const auto seed = held_out ? dc.eval_seed : dc.seed;
    const auto count = held_out ? dc.eval_size : dc.size;
    switch (dc.kind) {
    case DataConfig::Kind::circle: return gen_circle(count, dc.noise, seed);
    case DataConfig::Kind::torus: return gen_torus(count, dc.torus_major, dc.torus_minor, seed);
    case DataConfig::Kind::clusters: return gen_clusters(count, dc.cluster_classes, dc.cluster_radius, dc.cluster_spread, seed);
    case DataConfig::Kind::idx: {
        const auto& img = held_out ? dc.eval_idx_images : dc.idx_images;
        const auto& lab = held_out ? dc.eval_idx_labels : dc.idx_labels;
        if (img.empty() || lab.empty()) {
            throw DomainError(std::string("config: dataset = idx needs ") + (held_out ? "eval_idx_images and eval_idx_labels"
                                                                                      : "idx_images and idx_labels"));
        }
        return load_idx(img, lab, dc.idx_limit);
    }
    }
    throw DomainError("config: unknown dataset");
}

} // namespace chartnet
