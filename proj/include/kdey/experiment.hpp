#pragma once

// Experiment configuration, end-to-end runs and sensitivity sweeps.

#include "kdey/io.hpp"
#include "kdey/protocol.hpp"
#include "kdey/quantifiers.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace kdey {

inline constexpr const char* kVersion = "0.3.0";

using json = nlohmann::json;
using Grid = std::map<std::string, std::vector<double>>;

struct MethodSpec {
    std::string name;
    Grid grid; // missing keys take the default grid
};

struct DatasetSource {
    std::optional<SyntheticSpec> synthetic;
    std::string csv;
    std::string test_csv;       // empty = split the csv
    std::string label_column = "label";
    double test_fraction = 0.3; // used when test_csv is empty
    std::string id;
};

struct ExperimentConfig {
    DatasetSource dataset;
    std::vector<MethodSpec> methods;
    ProtocolConfig validation{100, 100, 0, 1};
    ProtocolConfig test{200, 500, 0, 1};
    Loss loss = Loss::MAE;
    std::uint64_t seed = 0;
    std::string out = "results";
    int jobs = 1;
    int cv_folds = 5;
    double validation_fraction = 0.4;
    bool extend_bandwidth = false;
    HistogramLayout layout = HistogramLayout::Averaged;

    void validate() const {
        if (methods.empty()) throw Error(ErrorCode::InvalidConfig, "method list is empty");
        const auto& names = method_names();
        for (const auto& m : methods) {
            if (std::find(names.begin(), names.end(), m.name) == names.end()) throw Error(ErrorCode::InvalidConfig, "unknown method " + m.name);
            const auto allowed = method_hyperparameters(m.name);
            for (const auto& [key, values] : m.grid) {
                if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
                    throw Error(ErrorCode::InvalidConfig, "method " + m.name + " does not take hyperparameter " + key);
                }
                if (values.empty()) throw Error(ErrorCode::InvalidConfig, "empty grid for " + m.name + "." + key);
                for (double v : values) {
                    if (!std::isfinite(v)) throw Error(ErrorCode::InvalidConfig, "non-finite grid value for " + key);
                    if ((key == "C" || key == "h") && !(v > 0.0)) throw Error(ErrorCode::InvalidConfig, key + " must be positive");
                    if (key == "b" && (v < 2 || v != std::floor(v))) throw Error(ErrorCode::InvalidConfig, "b must be an integer >= 2");
                    if (key == "t" && (v < 1 || v != std::floor(v))) throw Error(ErrorCode::InvalidConfig, "t must be a positive integer");
                    if (key == "class_weight" && v != 0.0 && v != 1.0) throw Error(ErrorCode::InvalidConfig, "class_weight must be 0 or 1");
                }
            }
        }
        if (!dataset.synthetic && dataset.csv.empty()) throw Error(ErrorCode::InvalidConfig, "dataset needs csv or synthetic");
        if (dataset.synthetic) dataset.synthetic->validate();
        if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) throw Error(ErrorCode::InvalidConfig, "validation_fraction must lie in (0,1)");
        if (!(dataset.test_fraction > 0.0 && dataset.test_fraction < 1.0)) throw Error(ErrorCode::InvalidConfig, "test_fraction must lie in (0,1)");
        if (jobs < 1) throw Error(ErrorCode::InvalidConfig, "jobs must be >= 1");
        if (cv_folds < 2) throw Error(ErrorCode::InvalidConfig, "cv_folds must be >= 2");
        validation.validate();
        test.validate();
    }
};

// ---------------------------------------------------------------------------
// Default grids

inline std::vector<double> default_values(const std::string& key) {
    if (key == "C") return {1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3};
    if (key == "class_weight") return {0.0, 1.0};
    if (key == "h") {
        std::vector<double> v;
        for (int i = 1; i <= 20; ++i) v.push_back(i / 100.0);
        return v;
    }
    if (key == "b") {
        std::vector<double> v;
        for (int b = 2; b <= 10; ++b) v.push_back(b);
        for (int b = 12; b <= 32; b += 2) v.push_back(b);
        v.push_back(64);
        return v;
    }
    if (key == "t") return {10000.0};
    throw Error(ErrorCode::InvalidConfig, "no default grid for " + key);
}

/// Cartesian product of the method's grid in key order, last key fastest.
inline std::vector<Hyperparameters> expand_grid(const MethodSpec& method) {
    Grid full;
    for (const auto& key : method_hyperparameters(method.name)) {
        auto it = method.grid.find(key);
        full[key] = it != method.grid.end() ? it->second : default_values(key);
    }
    std::vector<Hyperparameters> points{{}};
    for (const auto& [key, values] : full) {
        std::vector<Hyperparameters> next;
        for (const auto& p : points) {
            for (double v : values) {
                auto q = p;
                q[key] = v;
                next.push_back(std::move(q));
            }
        }
        points.swap(next);
    }
    return points;
}

// ---------------------------------------------------------------------------
// JSON config

inline std::string layout_name(HistogramLayout l) { return l == HistogramLayout::Averaged ? "averaged" : "concatenated"; }

inline json config_to_json(const ExperimentConfig& c) {
    json ds;
    if (c.dataset.synthetic) {
        ds["synthetic"] = *c.dataset.synthetic;
    } else {
        ds["csv"] = c.dataset.csv;
        ds["label_column"] = c.dataset.label_column;
        ds["test_csv"] = c.dataset.test_csv;
        ds["test_fraction"] = c.dataset.test_fraction;
    }
    if (!c.dataset.id.empty()) ds["id"] = c.dataset.id;
    json methods = json::array();
    for (const auto& m : c.methods) methods.push_back({{"name", m.name}, {"grid", m.grid}});
    return {{"dataset", ds},
            {"methods", methods},
            {"validation", {{"bag_count", c.validation.bag_count}, {"bag_size", c.validation.bag_size}}},
            {"test", {{"bag_count", c.test.bag_count}, {"bag_size", c.test.bag_size}}},
            {"loss", to_string(c.loss)},
            {"seed", c.seed},
            {"out", c.out},
            {"jobs", c.jobs},
            {"cv_folds", c.cv_folds},
            {"validation_fraction", c.validation_fraction},
            {"extend_bandwidth", c.extend_bandwidth},
            {"histogram_layout", layout_name(c.layout)}};
}

namespace detail {

inline void check_keys(const json& j, const std::vector<std::string>& known, const std::string& where) {
    if (!j.is_object()) throw Error(ErrorCode::InvalidConfig, where + " must be an object");
    for (const auto& [key, _] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) throw Error(ErrorCode::InvalidConfig, "unknown key " + where + "." + key);
    }
}

inline ProtocolConfig protocol_from_json(const json& j, ProtocolConfig p, const std::string& where) {
    check_keys(j, {"bag_count", "bag_size"}, where);
    const auto count = j.value("bag_count", static_cast<long long>(p.bag_count));
    const auto size = j.value("bag_size", static_cast<long long>(p.bag_size));
    if (count < 1 || size < 1) throw Error(ErrorCode::InvalidConfig, where + ": bag_count and bag_size must be >= 1");
    p.bag_count = static_cast<std::size_t>(count);
    p.bag_size = static_cast<std::size_t>(size);
    return p;
}

} // namespace detail

inline ExperimentConfig config_from_json(const json& j) {
    try {
        detail::check_keys(j, {"dataset", "methods", "validation", "test", "loss", "seed", "out", "jobs", "cv_folds",
                               "validation_fraction", "extend_bandwidth", "histogram_layout"},
                           "config");
        ExperimentConfig c;
        if (!j.contains("dataset")) throw Error(ErrorCode::InvalidConfig, "config needs a dataset");
        const auto& ds = j.at("dataset");
        detail::check_keys(ds, {"synthetic", "csv", "test_csv", "label_column", "test_fraction", "id"}, "dataset");
        if (ds.contains("synthetic")) c.dataset.synthetic = ds.at("synthetic").get<SyntheticSpec>();
        c.dataset.csv = ds.value("csv", std::string{});
        c.dataset.test_csv = ds.value("test_csv", std::string{});
        c.dataset.label_column = ds.value("label_column", std::string{"label"});
        c.dataset.test_fraction = ds.value("test_fraction", 0.3);
        c.dataset.id = ds.value("id", c.dataset.synthetic ? std::string{"synthetic"} : c.dataset.csv);

        if (!j.contains("methods") || !j.at("methods").is_array()) throw Error(ErrorCode::InvalidConfig, "methods must be a list");
        for (const auto& m : j.at("methods")) {
            MethodSpec spec;
            if (m.is_string()) {
                spec.name = m.get<std::string>();
            } else {
                detail::check_keys(m, {"name", "grid"}, "methods[]");
                spec.name = m.at("name").get<std::string>();
                if (m.contains("grid")) {
                    for (const auto& [key, values] : m.at("grid").items()) {
                        spec.grid[key] = values.is_array() ? values.get<std::vector<double>>() : std::vector<double>{values.get<double>()};
                    }
                }
            }
            c.methods.push_back(std::move(spec));
        }
        if (j.contains("validation")) c.validation = detail::protocol_from_json(j.at("validation"), c.validation, "validation");
        if (j.contains("test")) c.test = detail::protocol_from_json(j.at("test"), c.test, "test");
        c.loss = parse_loss(j.value("loss", std::string{"mae"}));
        c.seed = j.value("seed", std::uint64_t{0});
        c.out = j.value("out", c.out);
        c.jobs = j.value("jobs", c.jobs);
        c.cv_folds = j.value("cv_folds", c.cv_folds);
        c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
        c.extend_bandwidth = j.value("extend_bandwidth", c.extend_bandwidth);
        const auto layout = j.value("histogram_layout", std::string{"averaged"});
        if (layout == "averaged") {
            c.layout = HistogramLayout::Averaged;
        } else if (layout == "concatenated") {
            c.layout = HistogramLayout::Concatenated;
        } else {
            throw Error(ErrorCode::InvalidConfig, "histogram_layout must be averaged or concatenated");
        }
        c.validate();
        return c;
    } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidConfig, std::string("config: ") + e.what());
    }
}

/// Applies KDEY_<KEY> overrides: the key is a scalar config path with its
/// parts joined by '_' and matched case-insensitively (KDEY_TEST_BAG_SIZE
/// sets test.bag_size). Values are parsed as JSON, falling back to a string.
inline json apply_env_overrides(json config, const std::map<std::string, std::string>& env, const std::string& prefix = "KDEY_") {
    std::map<std::string, json::json_pointer> paths;
    std::function<void(const json&, const json::json_pointer&, const std::string&)> walk = [&](const json& node, const json::json_pointer& ptr,
                                                                                               const std::string& flat) {
        if (!node.is_object()) {
            paths.emplace(flat, ptr);
            return;
        }
        for (const auto& [key, child] : node.items()) {
            if (key == "methods") continue;
            walk(child, ptr / key, flat.empty() ? key : flat + "_" + key);
        }
    };
    walk(config, json::json_pointer{}, "");

    for (const auto& [name, raw] : env) {
        if (name.rfind(prefix, 0) != 0) continue;
        std::string key = name.substr(prefix.size());
        std::transform(key.begin(), key.end(), key.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
        auto it = paths.find(key);
        if (it == paths.end()) throw Error(ErrorCode::InvalidConfig, "environment override " + name + " matches no config key");
        json value = json::parse(raw, nullptr, false);
        if (value.is_discarded()) value = raw;
        config[it->second] = value;
    }
    return config;
}

/// Config with every default filled in, so that all keys can be overridden.
inline json complete_config(const json& user) {
    json merged = config_to_json(config_from_json(user));
    return merged;
}

inline ExperimentConfig load_config(const std::string& path, const std::map<std::string, std::string>& env = {}) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::InvalidConfig, "cannot open config " + path);
    json j = json::parse(in, nullptr, false, true);
    if (j.is_discarded()) throw Error(ErrorCode::ParseError, path + ": invalid JSON");
    // relative dataset paths are taken relative to the config file
    const auto base = std::filesystem::path(path).parent_path();
    for (const char* key : {"csv", "test_csv"}) {
        if (j.contains("dataset") && j["dataset"].contains(key) && j["dataset"][key].is_string()) {
            const std::filesystem::path p = j["dataset"][key].get<std::string>();
            if (!p.empty() && p.is_relative()) j["dataset"][key] = (base / p).lexically_normal().string();
        }
    }
    return config_from_json(apply_env_overrides(complete_config(j), env));
}

inline std::map<std::string, std::string> environment_with_prefix(char** envp, const std::string& prefix = "KDEY_") {
    std::map<std::string, std::string> out;
    for (char** e = envp; e && *e; ++e) {
        std::string entry(*e);
        const auto eq = entry.find('=');
        if (eq != std::string::npos && entry.rfind(prefix, 0) == 0) out[entry.substr(0, eq)] = entry.substr(eq + 1);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Data preparation

struct PreparedData {
    LabelledDataset train;      // classifier and aggregation fitting
    LabelledDataset validation; // pool for validation bags
    LabelledDataset test;       // pool for test bags
    std::vector<std::string> label_names;
};

inline PreparedData prepare_data(const ExperimentConfig& c) {
    PreparedData out;
    LabelledDataset full;
    if (c.dataset.synthetic) {
        auto [train, test] = generate_synthetic(*c.dataset.synthetic, c.seed);
        full = std::move(train);
        out.test = std::move(test);
        for (int i = 0; i < full.n_classes; ++i) out.label_names.push_back(std::to_string(i));
    } else {
        auto csv = load_csv(c.dataset.csv, c.dataset.label_column);
        out.label_names = csv.label_names;
        if (c.dataset.test_csv.empty()) {
            auto [tr, te] = stratified_split(csv.data, c.dataset.test_fraction, mix_seed(c.seed, 0x7E57));
            full = std::move(tr);
            out.test = std::move(te);
        } else {
            auto test = load_csv(c.dataset.test_csv, c.dataset.label_column);
            // re-encode test labels with the training mapping
            std::map<std::string, int> code;
            for (std::size_t i = 0; i < out.label_names.size(); ++i) code[out.label_names[i]] = static_cast<int>(i);
            for (auto& y : test.data.labels) {
                const auto& name = test.label_names[static_cast<std::size_t>(y)];
                auto it = code.find(name);
                if (it == code.end()) throw Error(ErrorCode::InvalidConfig, "test label " + name + " does not occur in training data");
                y = it->second;
            }
            test.data.n_classes = csv.data.n_classes;
            if (test.data.features.cols() != csv.data.features.cols()) throw Error(ErrorCode::DimensionMismatch, "train and test feature counts differ");
            full = std::move(csv.data);
            out.test = std::move(test.data);
        }
    }
    auto [tr, val] = stratified_split(full, c.validation_fraction, mix_seed(c.seed, 0x5A1));
    out.train = std::move(tr);
    out.validation = std::move(val);
    return out;
}

// ---------------------------------------------------------------------------
// Results

/// Schema of one line of results.jsonl.
inline json result_record_schema() {
    return json::parse(R"({
  "type": "object",
  "required": ["method", "bag_index", "true_prevalence", "estimated_prevalence", "ae", "rae"],
  "additionalProperties": false,
  "properties": {
    "method": {"type": "string"},
    "bag_index": {"type": "integer", "minimum": 0},
    "true_prevalence": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
    "estimated_prevalence": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
    "ae": {"type": "number", "minimum": 0},
    "rae": {"type": "number", "minimum": 0}
  }
})");
}

/// Checks a record against result_record_schema(); returns an empty string
/// when valid, otherwise the first violation.
inline std::string validate_result_record(const json& r) {
    if (!r.is_object()) return "record is not an object";
    const auto schema = result_record_schema();
    for (const auto& key : schema["required"]) {
        if (!r.contains(key.get<std::string>())) return "missing field " + key.get<std::string>();
    }
    for (const auto& [key, _] : r.items()) {
        if (!schema["properties"].contains(key)) return "unexpected field " + key;
    }
    if (!r["method"].is_string()) return "method must be a string";
    if (!r["bag_index"].is_number_integer() || r["bag_index"].get<long long>() < 0) return "bag_index must be a non-negative integer";
    for (const char* key : {"true_prevalence", "estimated_prevalence"}) {
        if (!r[key].is_array() || r[key].empty()) return std::string(key) + " must be a non-empty array";
        for (const auto& v : r[key]) {
            if (!v.is_number() || v.get<double>() < 0.0 || v.get<double>() > 1.0) return std::string(key) + " entries must lie in [0,1]";
        }
    }
    if (r["true_prevalence"].size() != r["estimated_prevalence"].size()) return "prevalence lengths differ";
    for (const char* key : {"ae", "rae"}) {
        if (!r[key].is_number() || r[key].get<double>() < 0.0) return std::string(key) + " must be a non-negative number";
    }
    return {};
}

struct MethodOutcome {
    std::string method;
    bool failed = false;
    std::string failure;
    Hyperparameters chosen;
    double validation_score = 0.0;
    bool boundary_bandwidth = false;
    std::vector<GridPointResult> grid;
    EvaluationReport report;
};

struct RunOutcome {
    std::vector<MethodOutcome> methods;
    std::optional<std::size_t> winner;
    int exit_code() const {
        for (const auto& m : methods) {
            if (!m.failed) return 0;
        }
        return 1;
    }
};

inline std::string format6(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

inline std::string format_hyperparameters(const Hyperparameters& hp) {
    std::string s;
    for (const auto& [k, v] : hp) {
        if (!s.empty()) s += ' ';
        s += k + "=" + format6(v);
    }
    return s;
}

inline std::string results_table(const RunOutcome& run, Loss loss) {
    std::ostringstream out;
    char line[256];
    std::snprintf(line, sizeof line, "  %-10s %12s %12s  %s\n", "method", "MAE", "MRAE", "hyperparameters");
    out << line;
    for (std::size_t i = 0; i < run.methods.size(); ++i) {
        const auto& m = run.methods[i];
        const char mark = run.winner && *run.winner == i ? '*' : ' ';
        if (m.failed) {
            std::snprintf(line, sizeof line, "%c %-10s %12s %12s  failed: %s\n", mark, m.method.c_str(), "-", "-", m.failure.c_str());
        } else {
            std::snprintf(line, sizeof line, "%c %-10s %12s %12s  %s\n", mark, m.method.c_str(), format6(m.report.mean_ae).c_str(),
                          format6(m.report.mean_rae).c_str(), format_hyperparameters(m.chosen).c_str());
        }
        out << line;
    }
    out << "(* = lowest " << (loss == Loss::MAE ? "MAE" : "MRAE") << ")\n";
    return out.str();
}

// ---------------------------------------------------------------------------
// Runs

inline MethodContext method_context(const ExperimentConfig& c, std::shared_ptr<ClassifierCache> cache) {
    MethodContext ctx;
    ctx.cache = std::move(cache);
    ctx.seed = c.seed;
    ctx.folds = c.cv_folds;
    ctx.layout = c.layout;
    return ctx;
}

inline ProtocolConfig validation_protocol(const ExperimentConfig& c) {
    ProtocolConfig p = c.validation;
    p.seed = c.seed;
    p.jobs = c.jobs;
    return p;
}

inline ProtocolConfig testing_protocol(const ExperimentConfig& c) {
    ProtocolConfig p = c.test;
    p.seed = c.seed;
    p.jobs = c.jobs;
    return test_protocol(p);
}

/// Model selection, refit and test evaluation of one method.
inline MethodOutcome run_method(const ExperimentConfig& c, const MethodSpec& spec, const PreparedData& data,
                                const std::vector<DrawnBag>& test_bags, const MethodContext& ctx, std::ostream* log = nullptr) {
    MethodOutcome outcome;
    outcome.method = spec.name;
    try {
        QuantifierBuilder builder = [&](const Hyperparameters& hp) -> std::unique_ptr<Quantifier> { return make_quantifier(spec.name, hp, ctx); };
        auto grid = expand_grid(spec);
        auto result = grid_search(builder, grid, data.train, data.validation, validation_protocol(c), c.loss);

        auto h_values = spec.grid.count("h") ? spec.grid.at("h") : (spec.name.rfind("KDEy-", 0) == 0 ? default_values("h") : std::vector<double>{});
        if (!h_values.empty() && h_values.size() > 1 && result.best.at("h") == *std::max_element(h_values.begin(), h_values.end())) {
            outcome.boundary_bandwidth = true;
            if (log) *log << "warning: " << spec.name << " selected the largest bandwidth h=" << format6(result.best.at("h")) << "\n";
            if (c.extend_bandwidth) {
                std::sort(h_values.begin(), h_values.end());
                const double hmax = h_values.back(), step = hmax - h_values[h_values.size() - 2];
                MethodSpec extended = spec;
                auto& hs = extended.grid["h"];
                hs = h_values;
                for (double h = hmax + step; h <= 1.5 * hmax + 1e-12; h += step) hs.push_back(h);
                if (log) *log << "  extending the bandwidth grid to h=" << format6(hs.back()) << "\n";
                result = grid_search(builder, expand_grid(extended), data.train, data.validation, validation_protocol(c), c.loss);
            }
        }
        outcome.chosen = result.best;
        outcome.validation_score = result.best_score;
        outcome.grid = std::move(result.points);
        outcome.report = evaluate_bags(*result.model, test_bags, c.jobs);
        outcome.report.dataset_id = c.dataset.id;
        outcome.report.method_id = spec.name;
    } catch (const std::exception& e) {
        outcome.failed = true;
        outcome.failure = e.what();
        if (log) *log << "method " << spec.name << " failed: " << e.what() << "\n";
    }
    return outcome;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::InvalidArgument, "cannot write " + path.string());
    out << text;
}

inline void write_outputs(const ExperimentConfig& c, const RunOutcome& run) {
    const std::filesystem::path dir(c.out);
    std::filesystem::create_directories(dir);

    std::ostringstream lines;
    json summary = {{"loss", to_string(c.loss)}, {"dataset", c.dataset.id}, {"methods", json::array()}};
    for (const auto& m : run.methods) {
        json entry = {{"method", m.method}, {"failed", m.failed}};
        if (m.failed) {
            entry["failure"] = m.failure;
        } else {
            entry["hyperparameters"] = m.chosen;
            entry["validation_score"] = m.validation_score;
            entry["mae"] = m.report.mean_ae;
            entry["mrae"] = m.report.mean_rae;
            entry["boundary_bandwidth"] = m.boundary_bandwidth;
            json grid = json::array();
            for (const auto& p : m.grid) {
                json g = {{"hyperparameters", p.point}};
                if (p.score) {
                    g["score"] = *p.score;
                } else {
                    g["failure"] = p.failure;
                }
                grid.push_back(std::move(g));
            }
            entry["grid"] = std::move(grid);
            for (std::size_t b = 0; b < m.report.per_bag.size(); ++b) {
                const auto& r = m.report.per_bag[b];
                json rec = {{"method", m.method},
                            {"bag_index", b},
                            {"true_prevalence", r.true_prevalence.vector()},
                            {"estimated_prevalence", r.estimated_prevalence.vector()},
                            {"ae", r.ae},
                            {"rae", r.rae}};
                if (auto err = validate_result_record(rec); !err.empty()) throw Error(ErrorCode::NonFinite, "result record invalid: " + err);
                lines << rec.dump() << '\n';
            }
        }
        summary["methods"].push_back(std::move(entry));
    }
    if (run.winner) summary["winner"] = run.methods[*run.winner].method;

    write_text(dir / "results.jsonl", lines.str());
    write_text(dir / "summary.json", summary.dump(2) + "\n");
    write_text(dir / "table.txt", results_table(run, c.loss));
    json manifest = {{"tool", "kdey"},
                     {"version", kVersion},
                     {"seed", c.seed},
                     {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." + std::to_string(EIGEN_MINOR_VERSION)},
                     {"compiler", __VERSION__},
                     {"config", config_to_json(c)}};
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline RunOutcome run_experiment(const ExperimentConfig& c, std::ostream* log = nullptr) {
    c.validate();
    const auto data = prepare_data(c);
    const auto test_bags = protocol_bags(data.test, testing_protocol(c));
    const auto ctx = method_context(c, std::make_shared<ClassifierCache>());
    RunOutcome run;
    for (const auto& spec : c.methods) {
        if (log) *log << "running " << spec.name << "\n";
        run.methods.push_back(run_method(c, spec, data, test_bags, ctx, log));
    }
    for (std::size_t i = 0; i < run.methods.size(); ++i) {
        const auto& m = run.methods[i];
        if (m.failed) continue;
        if (!run.winner || m.report.mean(c.loss) < run.methods[*run.winner].report.mean(c.loss)) run.winner = i;
    }
    write_outputs(c, run);
    return run;
}

struct SweepRow {
    double value = 0.0;
    double mae = 0.0;
    double mrae = 0.0;
    std::string failure; // non-empty when this value failed
};

/// Fits `method` at each value of `axis` ("h" or "b") on train + validation
/// and evaluates it on the test bags, which are the same for every value.
/// The remaining hyperparameters take the first value of the method's grid.
inline std::vector<SweepRow> sensitivity_sweep(const ExperimentConfig& c, const std::string& axis, const std::vector<double>& values,
                                               const std::string& method) {
    if (values.empty()) throw Error(ErrorCode::InvalidConfig, "sweep needs at least one value");
    if (axis != "h" && axis != "b") throw Error(ErrorCode::InvalidConfig, "sweep axis must be h or b");
    const auto allowed = method_hyperparameters(method);
    if (std::find(allowed.begin(), allowed.end(), axis) == allowed.end()) throw Error(ErrorCode::InvalidConfig, method + " has no hyperparameter " + axis);

    Hyperparameters base;
    MethodSpec spec{method, {}};
    for (const auto& m : c.methods) {
        if (m.name == method) spec = m;
    }
    for (const auto& key : allowed) {
        auto it = spec.grid.find(key);
        base[key] = it != spec.grid.end() ? it->second.front() : (key == "C" ? 1.0 : default_values(key).front());
    }

    const auto data = prepare_data(c);
    const auto fit_set = concatenate(data.train, data.validation);
    const auto bags = protocol_bags(data.test, testing_protocol(c));
    const auto ctx = method_context(c, std::make_shared<ClassifierCache>());
    std::vector<SweepRow> rows;
    for (double v : values) {
        SweepRow row{v, 0.0, 0.0, {}};
        try {
            auto hp = base;
            hp[axis] = v;
            auto q = make_quantifier(method, hp, ctx);
            q->fit(fit_set);
            const auto report = evaluate_bags(*q, bags, c.jobs);
            row.mae = report.mean_ae;
            row.mrae = report.mean_rae;
        } catch (const std::exception& e) {
            row.failure = e.what();
        }
        rows.push_back(row);
    }
    return rows;
}

/// Largest |MAE(v_{i+1}) - MAE(v_i)| over successive sweep values.
inline double max_adjacent_jump(const std::vector<SweepRow>& rows) {
    double jump = 0.0;
    for (std::size_t i = 1; i < rows.size(); ++i) jump = std::max(jump, std::abs(rows[i].mae - rows[i - 1].mae));
    return jump;
}

} // namespace kdey
