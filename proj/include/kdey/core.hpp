#pragma once

// Domain types shared by the whole library: simplex points, labelled
// datasets, unlabelled bags and posterior matrices.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace kdey {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class ErrorCode {
    NotASimplexPoint,
    EmptyClass,
    NonFinite,
    DimensionMismatch,
    TooFewExamples,
    EmptyReferenceSet,
    NonPositiveBandwidth,
    LengthMismatch,
    ShapeMismatch,
    DegenerateGram,
    NonFiniteObjective,
    ImpossibleTarget,
    ParseError,
    MissingLabelColumn,
    InvalidConfig,
    InvalidArgument,
};

inline const char* to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::NotASimplexPoint: return "NotASimplexPoint";
        case ErrorCode::EmptyClass: return "EmptyClass";
        case ErrorCode::NonFinite: return "NonFinite";
        case ErrorCode::DimensionMismatch: return "DimensionMismatch";
        case ErrorCode::TooFewExamples: return "TooFewExamples";
        case ErrorCode::EmptyReferenceSet: return "EmptyReferenceSet";
        case ErrorCode::NonPositiveBandwidth: return "NonPositiveBandwidth";
        case ErrorCode::LengthMismatch: return "LengthMismatch";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::DegenerateGram: return "DegenerateGram";
        case ErrorCode::NonFiniteObjective: return "NonFiniteObjective";
        case ErrorCode::ImpossibleTarget: return "ImpossibleTarget";
        case ErrorCode::ParseError: return "ParseError";
        case ErrorCode::MissingLabelColumn: return "MissingLabelColumn";
        case ErrorCode::InvalidConfig: return "InvalidConfig";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
    }
    return "Unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

/// Tolerance on the simplex invariants for values produced internally.
inline constexpr double kSimplexTolerance = 1e-9;
/// Tolerance on |sum - 1| accepted from callers before renormalisation.
inline constexpr double kInputSumTolerance = 1e-6;

/// A point on the unit (n-1)-simplex.
class PrevalenceVector {
public:
    PrevalenceVector() = default;

    /// Validates `values`: entries in [-1e-9, 0) are clamped to zero and the
    /// vector renormalised; anything further from the simplex throws
    /// NotASimplexPoint.
    explicit PrevalenceVector(std::vector<double> values) : values_(std::move(values)) {
        if (values_.empty()) {
            throw Error(ErrorCode::NotASimplexPoint, "empty prevalence vector");
        }
        double sum = 0.0;
        bool clamped = false;
        for (double& v : values_) {
            if (!std::isfinite(v) || v < -kSimplexTolerance) {
                throw Error(ErrorCode::NotASimplexPoint, "entry outside [0, 1]: " + std::to_string(v));
            }
            if (v < 0.0) {
                v = 0.0;
                clamped = true;
            }
            sum += v;
        }
        if (std::abs(sum - 1.0) > kInputSumTolerance) {
            throw Error(ErrorCode::NotASimplexPoint, "entries sum to " + std::to_string(sum));
        }
        if (clamped || std::abs(sum - 1.0) > kSimplexTolerance) {
            for (double& v : values_) v /= sum;
        }
    }

    static PrevalenceVector uniform(std::size_t n) {
        return PrevalenceVector(std::vector<double>(n, 1.0 / static_cast<double>(n)));
    }

    /// Unit vector on vertex `i`.
    static PrevalenceVector vertex(std::size_t n, std::size_t i) {
        std::vector<double> v(n, 0.0);
        v.at(i) = 1.0;
        return PrevalenceVector(std::move(v));
    }

    std::size_t size() const noexcept { return values_.size(); }
    double operator[](std::size_t i) const { return values_[i]; }
    std::span<const double> values() const noexcept { return values_; }
    const std::vector<double>& vector() const noexcept { return values_; }

    friend bool operator==(const PrevalenceVector&, const PrevalenceVector&) = default;

private:
    std::vector<double> values_;
};

inline PrevalenceVector validate_prevalence(std::vector<double> values) {
    return PrevalenceVector(std::move(values));
}

/// Clips negatives to zero and L1-normalises; an all-zero input maps to the
/// uniform vector.
inline PrevalenceVector normalize_l1(std::vector<double> values) {
    double sum = 0.0;
    for (double& v : values) {
        if (!(v > 0.0)) v = 0.0;
        sum += v;
    }
    if (!(sum > 0.0) || !std::isfinite(sum)) return PrevalenceVector::uniform(values.size());
    for (double& v : values) v /= sum;
    return PrevalenceVector(std::move(values));
}

struct LabelledDataset {
    RowMatrix features;      // N x d
    std::vector<int> labels; // values in [0, n)
    int n_classes = 0;

    std::size_t size() const noexcept { return labels.size(); }
    Eigen::Index dimension() const noexcept { return features.cols(); }

    void validate() const {
        if (n_classes < 1) throw Error(ErrorCode::InvalidArgument, "dataset needs at least one class");
        if (static_cast<Eigen::Index>(labels.size()) != features.rows()) {
            throw Error(ErrorCode::LengthMismatch, "labels and feature rows differ in length");
        }
        for (int y : labels) {
            if (y < 0 || y >= n_classes) {
                throw Error(ErrorCode::InvalidArgument, "label " + std::to_string(y) + " out of range");
            }
        }
    }

    std::vector<std::size_t> class_counts() const {
        std::vector<std::size_t> counts(static_cast<std::size_t>(n_classes), 0);
        for (int y : labels) ++counts[static_cast<std::size_t>(y)];
        return counts;
    }

    PrevalenceVector prevalence() const {
        auto counts = class_counts();
        std::vector<double> p(counts.size());
        for (std::size_t i = 0; i < counts.size(); ++i) {
            p[i] = static_cast<double>(counts[i]) / static_cast<double>(labels.size());
        }
        return PrevalenceVector(std::move(p));
    }

    LabelledDataset subset(std::span<const std::size_t> rows) const {
        LabelledDataset out;
        out.n_classes = n_classes;
        out.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
        out.labels.reserve(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            out.features.row(static_cast<Eigen::Index>(r)) = features.row(static_cast<Eigen::Index>(rows[r]));
            out.labels.push_back(labels[rows[r]]);
        }
        return out;
    }
};

/// Row-wise concatenation; both datasets must agree on d and n.
inline LabelledDataset concatenate(const LabelledDataset& a, const LabelledDataset& b) {
    if (a.n_classes != b.n_classes || a.features.cols() != b.features.cols()) {
        throw Error(ErrorCode::ShapeMismatch, "cannot concatenate datasets of different shape");
    }
    LabelledDataset out;
    out.n_classes = a.n_classes;
    out.features.resize(a.features.rows() + b.features.rows(), a.features.cols());
    out.features.topRows(a.features.rows()) = a.features;
    out.features.bottomRows(b.features.rows()) = b.features;
    out.labels = a.labels;
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
    return out;
}

struct Bag {
    RowMatrix features; // M x d

    Bag() = default;
    explicit Bag(RowMatrix f) : features(std::move(f)) {
        if (features.rows() < 1) throw Error(ErrorCode::InvalidArgument, "a bag needs at least one row");
    }
    std::size_t size() const noexcept { return static_cast<std::size_t>(features.rows()); }
};

/// Matrix of per-example class posteriors; every row lies on the simplex.
class PosteriorMatrix {
public:
    PosteriorMatrix() = default;

    explicit PosteriorMatrix(RowMatrix rows) : rows_(std::move(rows)) {
        for (Eigen::Index r = 0; r < rows_.rows(); ++r) {
            double sum = 0.0;
            for (Eigen::Index c = 0; c < rows_.cols(); ++c) {
                const double v = rows_(r, c);
                if (!std::isfinite(v) || v < 0.0) {
                    throw Error(ErrorCode::NotASimplexPoint, "posterior row " + std::to_string(r) + " has an invalid entry");
                }
                sum += v;
            }
            if (std::abs(sum - 1.0) > kSimplexTolerance) {
                throw Error(ErrorCode::NotASimplexPoint, "posterior row " + std::to_string(r) + " sums to " + std::to_string(sum));
            }
        }
    }

    Eigen::Index rows() const noexcept { return rows_.rows(); }
    Eigen::Index classes() const noexcept { return rows_.cols(); }
    const RowMatrix& matrix() const noexcept { return rows_; }
    double operator()(Eigen::Index r, Eigen::Index c) const { return rows_(r, c); }
    std::span<const double> row(Eigen::Index r) const {
        return {rows_.data() + r * rows_.cols(), static_cast<std::size_t>(rows_.cols())};
    }

    PosteriorMatrix select_rows(std::span<const std::size_t> idx) const {
        RowMatrix out(static_cast<Eigen::Index>(idx.size()), rows_.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = rows_.row(static_cast<Eigen::Index>(idx[i]));
        PosteriorMatrix p;
        p.rows_ = std::move(out);
        return p;
    }

private:
    RowMatrix rows_;
};

/// Row indices of each class, in increasing order.
inline std::vector<std::vector<std::size_t>> class_split(std::span<const int> labels, int n_classes) {
    std::vector<std::vector<std::size_t>> sets(static_cast<std::size_t>(n_classes));
    for (std::size_t i = 0; i < labels.size(); ++i) sets.at(static_cast<std::size_t>(labels[i])).push_back(i);
    return sets;
}

inline std::vector<std::vector<std::size_t>> class_split(const LabelledDataset& dataset) {
    return class_split(dataset.labels, dataset.n_classes);
}

// splitmix64 finaliser; used to derive independent seeds for sub-streams.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) { return Rng(mix_seed(seed, stream)); }

/// Uniform draw from the simplex: sorted uniforms on [0,1] and their
/// consecutive differences against the endpoints 0 and 1.
inline PrevalenceVector sample_uniform_simplex(std::size_t n, Rng& rng) {
    if (n == 0) throw Error(ErrorCode::InvalidArgument, "simplex dimension must be at least 1");
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<double> cuts(n + 1);
    cuts[0] = 0.0;
    cuts[n] = 1.0;
    for (std::size_t i = 1; i < n; ++i) cuts[i] = unif(rng);
    std::sort(cuts.begin() + 1, cuts.end() - 1);
    std::vector<double> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = cuts[i + 1] - cuts[i];
    return PrevalenceVector(std::move(p));
}

/// Numerically stable log(sum(exp(x))) accumulated one term at a time.
class LogSumExp {
public:
    void add(double x) {
        if (x == -std::numeric_limits<double>::infinity()) return;
        if (x <= max_) {
            sum_ += std::exp(x - max_);
        } else {
            sum_ = sum_ * std::exp(max_ - x) + 1.0;
            max_ = x;
        }
    }
    double value() const {
        if (sum_ == 0.0) return -std::numeric_limits<double>::infinity();
        return max_ + std::log(sum_);
    }

private:
    double max_ = -std::numeric_limits<double>::infinity();
    double sum_ = 0.0;
};

} // namespace kdey
