#pragma once

// Representations of a bag of posteriors: Gaussian kernel density
// estimates on the simplex and class-wise histograms.

#include "kdey/core.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <span>
#include <vector>

namespace kdey {

/// Densities below this value are floored to keep logs finite.
inline constexpr double kDensityFloor = 1e-300;
inline const double kLogDensityFloor = std::log(kDensityFloor);

/// Gaussian KDE with isotropic covariance h^2 I over a set of reference
/// points. Fitting only stores the points.
class KdeModel {
public:
    KdeModel(RowMatrix references, double bandwidth) : refs_(std::move(references)), h_(bandwidth) {
        if (refs_.rows() < 1) throw Error(ErrorCode::EmptyReferenceSet, "KDE needs at least one reference point");
        if (!(h_ > 0.0) || !std::isfinite(h_)) throw Error(ErrorCode::NonPositiveBandwidth, "bandwidth must be positive");
        const double D = static_cast<double>(refs_.cols());
        log_norm_ = -0.5 * D * std::log(2.0 * std::numbers::pi) - D * std::log(h_) - std::log(static_cast<double>(refs_.rows()));
        inv_two_h2_ = 1.0 / (2.0 * h_ * h_);
    }

    double bandwidth() const noexcept { return h_; }
    Eigen::Index dimension() const noexcept { return refs_.cols(); }
    Eigen::Index size() const noexcept { return refs_.rows(); }
    const RowMatrix& references() const noexcept { return refs_; }

    /// log((1/|X|) sum_i N(query | x_i, h^2 I)), floored at log(1e-300).
    double log_density(std::span<const double> query) const {
        const auto D = static_cast<std::size_t>(refs_.cols());
        if (query.size() != D) throw Error(ErrorCode::DimensionMismatch, "query has the wrong dimension");
        LogSumExp acc;
        const double* base = refs_.data();
        for (Eigen::Index i = 0; i < refs_.rows(); ++i) {
            const double* x = base + static_cast<std::size_t>(i) * D;
            double d2 = 0.0;
            for (std::size_t k = 0; k < D; ++k) {
                const double diff = query[k] - x[k];
                d2 += diff * diff;
            }
            acc.add(-d2 * inv_two_h2_);
        }
        return std::max(acc.value() + log_norm_, kLogDensityFloor);
    }

    double density(std::span<const double> query) const { return std::exp(log_density(query)); }

    /// Log-density at every row of `queries`.
    Eigen::VectorXd log_density_rows(const RowMatrix& queries) const {
        Eigen::VectorXd out(queries.rows());
        const auto D = static_cast<std::size_t>(queries.cols());
        for (Eigen::Index r = 0; r < queries.rows(); ++r) {
            out[r] = log_density({queries.data() + static_cast<std::size_t>(r) * D, D});
        }
        return out;
    }

private:
    RowMatrix refs_;
    double h_;
    double log_norm_ = 0.0;
    double inv_two_h2_ = 0.0;
};

inline KdeModel kde_fit(RowMatrix points, double h) { return KdeModel(std::move(points), h); }
inline KdeModel kde_fit(const PosteriorMatrix& points, double h) { return KdeModel(points.matrix(), h); }

inline double kde_log_density(const KdeModel& model, std::span<const double> query) { return model.log_density(query); }

/// Convex combination of class-conditional KDEs sharing h and D.
class KdeMixture {
public:
    KdeMixture(std::vector<KdeModel> components, PrevalenceVector weights)
        : components_(std::move(components)), weights_(std::move(weights)) {
        if (components_.empty() || components_.size() != weights_.size()) {
            throw Error(ErrorCode::ShapeMismatch, "mixture needs one weight per component");
        }
        for (const auto& c : components_) {
            if (c.dimension() != components_.front().dimension() || c.bandwidth() != components_.front().bandwidth()) {
                throw Error(ErrorCode::ShapeMismatch, "mixture components must share bandwidth and dimension");
            }
        }
    }

    const std::vector<KdeModel>& components() const noexcept { return components_; }
    const PrevalenceVector& weights() const noexcept { return weights_; }
    Eigen::Index dimension() const noexcept { return components_.front().dimension(); }
    double bandwidth() const noexcept { return components_.front().bandwidth(); }

    double density(std::span<const double> x) const {
        double p = 0.0;
        for (std::size_t i = 0; i < components_.size(); ++i) {
            if (weights_[i] > 0.0) p += weights_[i] * components_[i].density(x);
        }
        return p;
    }

    double log_density(std::span<const double> x) const {
        LogSumExp acc;
        for (std::size_t i = 0; i < components_.size(); ++i) {
            if (weights_[i] > 0.0) acc.add(std::log(weights_[i]) + components_[i].log_density(x));
        }
        return std::max(acc.value(), kLogDensityFloor);
    }

private:
    std::vector<KdeModel> components_;
    PrevalenceVector weights_;
};

/// i.i.d. draws: component by weight, reference point uniformly within
/// it, then isotropic Gaussian noise of scale h.
inline RowMatrix kde_sample(const KdeMixture& mixture, std::size_t count, Rng& rng) {
    const auto D = mixture.dimension();
    RowMatrix out(static_cast<Eigen::Index>(count), D);
    const auto& w = mixture.weights().vector();
    std::discrete_distribution<std::size_t> pick_component(w.begin(), w.end());
    std::normal_distribution<double> noise(0.0, mixture.bandwidth());
    for (std::size_t s = 0; s < count; ++s) {
        const auto& comp = mixture.components()[pick_component(rng)];
        std::uniform_int_distribution<Eigen::Index> pick_ref(0, comp.size() - 1);
        const Eigen::Index r = pick_ref(rng);
        for (Eigen::Index k = 0; k < D; ++k) out(static_cast<Eigen::Index>(s), k) = comp.references()(r, k) + noise(rng);
    }
    return out;
}

inline RowMatrix kde_sample(const KdeMixture& mixture, std::size_t count, std::uint64_t seed) {
    auto rng = make_rng(seed, 7);
    return kde_sample(mixture, count, rng);
}

enum class HistogramLayout { Concatenated, Averaged };

/// One b-bin histogram per class column of a bag of posteriors.
struct HistogramRepresentation {
    std::vector<std::vector<double>> per_class;
    int bins = 0;
    HistogramLayout layout = HistogramLayout::Averaged;

    std::size_t n_classes() const noexcept { return per_class.size(); }
    friend bool operator==(const HistogramRepresentation&, const HistogramRepresentation&) = default;
};

/// Bin of a value in [0,1] for b equal-width bins [i/b, (i+1)/b), last bin
/// closed.
inline int histogram_bin(double value, int bins) {
    if (!(value > 0.0)) return 0;
    const int idx = static_cast<int>(std::floor(value * bins));
    return std::min(idx, bins - 1);
}

inline HistogramRepresentation histogram_of_bag(const RowMatrix& posteriors, int bins, HistogramLayout layout) {
    if (bins < 2) throw Error(ErrorCode::InvalidArgument, "histograms need at least 2 bins");
    if (posteriors.rows() < 1) throw Error(ErrorCode::EmptyReferenceSet, "cannot histogram an empty bag");
    HistogramRepresentation rep;
    rep.bins = bins;
    rep.layout = layout;
    const auto n = static_cast<std::size_t>(posteriors.cols());
    std::vector<std::vector<std::size_t>> counts(n, std::vector<std::size_t>(static_cast<std::size_t>(bins), 0));
    for (Eigen::Index r = 0; r < posteriors.rows(); ++r) {
        for (std::size_t c = 0; c < n; ++c) {
            ++counts[c][static_cast<std::size_t>(histogram_bin(posteriors(r, static_cast<Eigen::Index>(c)), bins))];
        }
    }
    const double total = static_cast<double>(posteriors.rows());
    rep.per_class.resize(n);
    for (std::size_t c = 0; c < n; ++c) {
        rep.per_class[c].resize(static_cast<std::size_t>(bins));
        for (std::size_t k = 0; k < counts[c].size(); ++k) rep.per_class[c][k] = static_cast<double>(counts[c][k]) / total;
    }
    return rep;
}

inline HistogramRepresentation histogram_of_bag(const PosteriorMatrix& posteriors, int bins, HistogramLayout layout) {
    return histogram_of_bag(posteriors.matrix(), bins, layout);
}

} // namespace kdey
