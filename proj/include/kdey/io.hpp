#pragma once

// CSV ingestion and export, and class-conditional Gaussian synthetic data.

#include "kdey/core.hpp"

#include <nlohmann/json.hpp>

#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace kdey {

struct CsvDataset {
    LabelledDataset data;
    std::vector<std::string> feature_names;
    std::vector<std::string> label_names; // index = encoded label
};

namespace detail {

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

// Comma split with double-quoted fields ("" escapes a quote).
inline std::vector<std::string> split_csv_line(std::string_view line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char ch = line[i];
        if (quoted) {
            if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (ch == '"') {
                quoted = false;
            } else {
                cur += ch;
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            out.emplace_back(trim(cur));
            cur.clear();
        } else {
            cur += ch;
        }
    }
    out.emplace_back(trim(cur));
    return out;
}

inline bool parse_double(std::string_view s, double& out) {
    s = trim(s);
    if (s.empty()) return false;
    if (s.front() == '+') s.remove_prefix(1);
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && ptr == s.data() + s.size() && std::isfinite(out);
}

} // namespace detail

/// Reads a comma-separated file with a header row. Every column except
/// `label_column` must be numeric. Labels are encoded 0..n-1 in order of
/// first appearance. Rows are numbered as file lines (the header is row 1).
inline CsvDataset load_csv(const std::string& path, const std::string& label_column = "label") {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::ParseError, "cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorCode::ParseError, path + ": missing header row");
    if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    const auto header = detail::split_csv_line(line);

    std::size_t label_idx = header.size();
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == label_column) label_idx = i;
    }
    if (label_idx == header.size()) throw Error(ErrorCode::MissingLabelColumn, path + ": no column named '" + label_column + "'");

    CsvDataset out;
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (i != label_idx) out.feature_names.push_back(header[i]);
    }
    const std::size_t d = out.feature_names.size();
    std::map<std::string, int> codes;
    std::vector<double> values;
    std::vector<int> labels;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (detail::trim(line).empty()) continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size()) {
            throw Error(ErrorCode::ParseError, path + ": row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                                                   " fields, header has " + std::to_string(header.size()));
        }
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i == label_idx) continue;
            double v = 0.0;
            if (!detail::parse_double(cells[i], v)) {
                throw Error(ErrorCode::ParseError,
                            path + ": row " + std::to_string(row) + ", column " + header[i] + ": not a number: '" + cells[i] + "'");
            }
            values.push_back(v);
        }
        const auto& name = cells[label_idx];
        if (name.empty()) throw Error(ErrorCode::ParseError, path + ": row " + std::to_string(row) + ", column " + label_column + ": empty label");
        auto [it, inserted] = codes.emplace(name, static_cast<int>(out.label_names.size()));
        if (inserted) out.label_names.push_back(name);
        labels.push_back(it->second);
    }
    if (labels.empty()) throw Error(ErrorCode::ParseError, path + ": no data rows");

    out.data.n_classes = static_cast<int>(out.label_names.size());
    out.data.labels = std::move(labels);
    out.data.features = Eigen::Map<RowMatrix>(values.data(), static_cast<Eigen::Index>(out.data.labels.size()), static_cast<Eigen::Index>(d));
    return out;
}

/// Writes features at full precision (round-trips exactly) and the label
/// column last. Without names, labels are written as integers.
inline void write_csv(const std::string& path, const LabelledDataset& data, const std::vector<std::string>& label_names = {}) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::InvalidArgument, "cannot write " + path);
    for (Eigen::Index k = 0; k < data.features.cols(); ++k) out << 'f' << (k + 1) << ',';
    out << "label\n";
    char buf[32];
    for (std::size_t r = 0; r < data.size(); ++r) {
        for (Eigen::Index k = 0; k < data.features.cols(); ++k) {
            std::snprintf(buf, sizeof buf, "%.17g", data.features(static_cast<Eigen::Index>(r), k));
            out << buf << ',';
        }
        const int y = data.labels[r];
        if (label_names.empty()) {
            out << y;
        } else {
            out << label_names.at(static_cast<std::size_t>(y));
        }
        out << '\n';
    }
}

// ---------------------------------------------------------------------------
// Synthetic label-shift data

struct SyntheticSpec {
    int n_classes = 3;
    int dimension = 2;
    std::vector<std::vector<double>> means; // n x d; empty = points on a circle
    std::vector<double> scales;             // per class; empty = all 1
    double separation = 3.0;                // radius of the default means
    std::size_t train_size = 1000;
    std::size_t test_pool_size = 3000;
    std::vector<double> train_prior;        // empty = uniform

    void validate() const {
        if (n_classes < 2) throw Error(ErrorCode::InvalidConfig, "synthetic data needs n >= 2 classes");
        if (dimension < 1) throw Error(ErrorCode::InvalidConfig, "dimension must be >= 1");
        const auto n = static_cast<std::size_t>(n_classes);
        if (train_size < n || test_pool_size < n) throw Error(ErrorCode::InvalidConfig, "sizes must be at least n");
        if (!means.empty()) {
            if (means.size() != n) throw Error(ErrorCode::InvalidConfig, "need one mean per class");
            for (const auto& m : means) {
                if (m.size() != static_cast<std::size_t>(dimension)) throw Error(ErrorCode::InvalidConfig, "mean has wrong dimension");
            }
        }
        if (!scales.empty()) {
            if (scales.size() != n) throw Error(ErrorCode::InvalidConfig, "need one scale per class");
            for (double s : scales) {
                if (!(s > 0.0)) throw Error(ErrorCode::InvalidConfig, "scales must be positive");
            }
        }
        if (!train_prior.empty()) {
            if (train_prior.size() != n) throw Error(ErrorCode::InvalidConfig, "train_prior length");
            try {
                validate_prevalence(train_prior);
            } catch (const Error& e) {
                throw Error(ErrorCode::InvalidConfig, std::string("train_prior: ") + e.what());
            }
        }
    }

    std::vector<double> mean_of(int c) const {
        if (!means.empty()) return means[static_cast<std::size_t>(c)];
        std::vector<double> m(static_cast<std::size_t>(dimension), 0.0);
        const double angle = 2.0 * std::numbers::pi * c / n_classes;
        m[0] = separation * std::cos(angle);
        if (dimension > 1) {
            m[1] = separation * std::sin(angle);
        } else {
            m[0] = separation * (2.0 * c / (n_classes - 1) - 1.0); // evenly spaced on a line
        }
        return m;
    }
};

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
    j = {{"n_classes", s.n_classes}, {"dimension", s.dimension}, {"separation", s.separation},
         {"train_size", s.train_size}, {"test_pool_size", s.test_pool_size}};
    if (!s.means.empty()) j["means"] = s.means;
    if (!s.scales.empty()) j["scales"] = s.scales;
    if (!s.train_prior.empty()) j["train_prior"] = s.train_prior;
}

inline void from_json(const nlohmann::json& j, SyntheticSpec& s) {
    static const std::vector<std::string> known = {"n_classes", "dimension", "means", "scales", "separation",
                                                   "train_size", "test_pool_size", "train_prior"};
    for (const auto& [key, _] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) throw Error(ErrorCode::InvalidConfig, "unknown synthetic key " + key);
    }
    s = SyntheticSpec{};
    s.n_classes = j.value("n_classes", s.n_classes);
    s.dimension = j.value("dimension", s.dimension);
    s.separation = j.value("separation", s.separation);
    s.train_size = j.value("train_size", s.train_size);
    s.test_pool_size = j.value("test_pool_size", s.test_pool_size);
    if (j.contains("means")) s.means = j.at("means").get<std::vector<std::vector<double>>>();
    if (j.contains("scales")) s.scales = j.at("scales").get<std::vector<double>>();
    if (j.contains("train_prior")) s.train_prior = j.at("train_prior").get<std::vector<double>>();
}

namespace detail {

inline std::vector<std::size_t> largest_remainder(const std::vector<double>& p, std::size_t total) {
    std::vector<std::size_t> counts(p.size());
    std::vector<std::pair<double, std::size_t>> rem;
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double exact = p[i] * static_cast<double>(total);
        counts[i] = static_cast<std::size_t>(std::floor(exact));
        assigned += counts[i];
        rem.emplace_back(-(exact - std::floor(exact)), i);
    }
    std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (std::size_t k = 0; assigned < total; ++k, ++assigned) ++counts[rem[k % rem.size()].second];
    return counts;
}

inline LabelledDataset gaussian_draws(const SyntheticSpec& spec, const std::vector<std::size_t>& counts, Rng& rng) {
    LabelledDataset out;
    out.n_classes = spec.n_classes;
    std::size_t total = 0;
    for (auto c : counts) total += c;
    out.features.resize(static_cast<Eigen::Index>(total), spec.dimension);
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::Index row = 0;
    for (int c = 0; c < spec.n_classes; ++c) {
        const auto mean = spec.mean_of(c);
        const double scale = spec.scales.empty() ? 1.0 : spec.scales[static_cast<std::size_t>(c)];
        for (std::size_t i = 0; i < counts[static_cast<std::size_t>(c)]; ++i, ++row) {
            for (int k = 0; k < spec.dimension; ++k) out.features(row, k) = mean[static_cast<std::size_t>(k)] + scale * normal(rng);
            out.labels.push_back(c);
        }
    }
    return out;
}

} // namespace detail

/// Training labels follow the training prior (largest-remainder counts);
/// the test pool is balanced across classes.
inline std::pair<LabelledDataset, LabelledDataset> generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
    spec.validate();
    const auto n = static_cast<std::size_t>(spec.n_classes);
    const std::vector<double> prior = spec.train_prior.empty() ? std::vector<double>(n, 1.0 / static_cast<double>(n)) : spec.train_prior;
    auto rng_train = make_rng(seed, 0x7A);
    auto rng_test = make_rng(seed, 0x7E);
    auto train = detail::gaussian_draws(spec, detail::largest_remainder(prior, spec.train_size), rng_train);
    auto test = detail::gaussian_draws(spec, detail::largest_remainder(std::vector<double>(n, 1.0 / static_cast<double>(n)), spec.test_pool_size), rng_test);
    return {std::move(train), std::move(test)};
}

} // namespace kdey
