#pragma once

// Dissimilarity functions: discrete histogram divergences, importance
// sampled f-divergences, and the closed-form Cauchy-Schwarz divergence
// between Gaussian KDE mixtures.

#include "kdey/core.hpp"
#include "kdey/densities.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

namespace kdey {

enum class GeneratorKind { ReverseKld, SquaredHellinger, JensenShannon };

/// Convex generator f with f(1) = 0.
struct GeneratorFunction {
    GeneratorKind tag = GeneratorKind::SquaredHellinger;

    double operator()(double u) const {
        switch (tag) {
            case GeneratorKind::ReverseKld: return xlogx(u);
            case GeneratorKind::SquaredHellinger: {
                const double s = std::sqrt(u) - 1.0;
                return s * s;
            }
            case GeneratorKind::JensenShannon: return -(u + 1.0) * std::log((u + 1.0) / 2.0) + xlogx(u);
        }
        return 0.0;
    }

private:
    static double xlogx(double u) { return u > 0.0 ? u * std::log(u) : 0.0; }
};

namespace detail {

inline void check_distributions(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw Error(ErrorCode::LengthMismatch, "distributions differ in length");
    auto check = [](std::span<const double> v) {
        double s = 0.0;
        for (double x : v) s += x;
        if (std::abs(s - 1.0) > kInputSumTolerance) throw Error(ErrorCode::NotASimplexPoint, "distribution does not sum to 1");
    };
    check(p);
    check(q);
}

inline double bhattacharyya(std::span<const double> p, std::span<const double> q) {
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += std::sqrt(p[i] * q[i]);
    return s;
}

inline double topsoe(std::span<const double> p, std::span<const double> q) {
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double m = p[i] + q[i];
        if (p[i] > 0.0) s += p[i] * std::log(2.0 * p[i] / m);
        if (q[i] > 0.0) s += q[i] * std::log(2.0 * q[i] / m);
    }
    return s;
}

inline double cauchy_schwarz(std::span<const double> p, std::span<const double> q) {
    double pq = 0.0, pp = 0.0, qq = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        pq += p[i] * q[i];
        pp += p[i] * p[i];
        qq += q[i] * q[i];
    }
    const double ratio = pq / std::sqrt(pp * qq);
    return -std::log(std::max(ratio, kDensityFloor));
}

} // namespace detail

/// Squared Hellinger distance 1 - sum sqrt(p_i q_i).
inline double hd2_discrete(std::span<const double> p, std::span<const double> q) {
    detail::check_distributions(p, q);
    return std::max(0.0, 1.0 - detail::bhattacharyya(p, q));
}

/// Topsoe distance (twice the Jensen-Shannon divergence), in nats.
inline double topsoe_discrete(std::span<const double> p, std::span<const double> q) {
    detail::check_distributions(p, q);
    return std::max(0.0, detail::topsoe(p, q));
}

/// -log of the normalised inner product of two discrete vectors.
inline double cs_discrete(std::span<const double> p, std::span<const double> q) {
    detail::check_distributions(p, q);
    return std::max(0.0, detail::cauchy_schwarz(p, q));
}

enum class DiscreteDivergence { HD2, Topsoe, CS };

namespace detail {

inline double discrete_divergence(DiscreteDivergence div, std::span<const double> p, std::span<const double> q) {
    switch (div) {
        case DiscreteDivergence::HD2: return 1.0 - bhattacharyya(p, q);
        case DiscreteDivergence::Topsoe: return topsoe(p, q);
        case DiscreteDivergence::CS: return cauchy_schwarz(p, q);
    }
    return 0.0;
}

} // namespace detail

/// Divergence between the alpha-mixture of per-class training histograms
/// and the test histograms. Concatenated compares one vector of n*b
/// entries scaled by 1/n; Averaged takes the mean of n per-column
/// divergences.
inline double dm_loss(std::span<const HistogramRepresentation> train, const HistogramRepresentation& test,
                      std::span<const double> alpha, DiscreteDivergence divergence) {
    const std::size_t n = test.n_classes();
    if (train.size() != alpha.size() || train.size() != n) throw Error(ErrorCode::ShapeMismatch, "one training histogram per class required");
    for (const auto& t : train) {
        if (t.bins != test.bins || t.n_classes() != n || t.layout != test.layout) {
            throw Error(ErrorCode::ShapeMismatch, "histogram representations disagree on bins, classes or layout");
        }
    }
    const auto b = static_cast<std::size_t>(test.bins);

    std::vector<double> mix(n * b, 0.0), tst(n * b, 0.0);
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t k = 0; k < b; ++k) {
            double m = 0.0;
            for (std::size_t i = 0; i < n; ++i) m += alpha[i] * train[i].per_class[c][k];
            mix[c * b + k] = m;
            tst[c * b + k] = test.per_class[c][k];
        }
    }
    if (test.layout == HistogramLayout::Concatenated) {
        const double scale = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < mix.size(); ++i) {
            mix[i] *= scale;
            tst[i] *= scale;
        }
        return detail::discrete_divergence(divergence, mix, tst);
    }
    double total = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
        total += detail::discrete_divergence(divergence, std::span<const double>(mix).subspan(c * b, b),
                                             std::span<const double>(tst).subspan(c * b, b));
    }
    return total / static_cast<double>(n);
}

/// Log-density ratios are clamped to this magnitude before exponentiation.
inline constexpr double kLogRatioClamp = 700.0;

/// Importance-sampled f-divergence from precomputed log-densities at the
/// reference samples: (1/t) sum f(p/q) q/r.
inline double mc_f_divergence_from_logs(std::span<const double> log_p, std::span<const double> log_q,
                                        std::span<const double> r_densities, const GeneratorFunction& f) {
    const std::size_t t = r_densities.size();
    if (t == 0 || log_p.size() != t || log_q.size() != t) throw Error(ErrorCode::LengthMismatch, "sample arrays disagree");
    double total = 0.0;
    for (std::size_t i = 0; i < t; ++i) {
        if (!(r_densities[i] > 0.0)) throw Error(ErrorCode::InvalidArgument, "reference densities must be positive");
        const double u = std::exp(std::clamp(log_p[i] - log_q[i], -kLogRatioClamp, kLogRatioClamp));
        const double w = std::exp(std::clamp(log_q[i] - std::log(r_densities[i]), -kLogRatioClamp, kLogRatioClamp));
        total += f(u) * w;
    }
    return total / static_cast<double>(t);
}

/// Importance-sampled f-divergence D_f(p || q) with samples drawn from r.
/// The evaluators map a point (span of length D) to a log-density.
template <class LogDensityP, class LogDensityQ>
double mc_f_divergence(const LogDensityP& log_p, const LogDensityQ& log_q, const RowMatrix& r_samples,
                       std::span<const double> r_densities, const GeneratorFunction& f) {
    const auto t = static_cast<std::size_t>(r_samples.rows());
    if (t != r_densities.size()) throw Error(ErrorCode::LengthMismatch, "one reference density per sample required");
    const auto D = static_cast<std::size_t>(r_samples.cols());
    std::vector<double> lp(t), lq(t);
    for (std::size_t i = 0; i < t; ++i) {
        std::span<const double> x(r_samples.data() + i * D, D);
        lp[i] = log_p(x);
        lq[i] = log_q(x);
    }
    return mc_f_divergence_from_logs(lp, lq, r_densities, f);
}

/// log N(x | y, 2 h^2 I): the Gaussian product integral of two kernels with
/// covariance h^2 I centred at x and y.
inline double log_pairwise_kernel(std::span<const double> x, std::span<const double> y, double h) {
    const double D = static_cast<double>(x.size());
    double d2 = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double diff = x[k] - y[k];
        d2 += diff * diff;
    }
    return -0.5 * D * std::log(4.0 * std::numbers::pi * h * h) - d2 / (4.0 * h * h);
}

inline double pairwise_kernel(std::span<const double> x, std::span<const double> y, double h) {
    return std::exp(log_pairwise_kernel(x, y, h));
}

/// Reduced Gram statistics for the Cauchy-Schwarz objective. Sums are also
/// kept in log space so that tiny bandwidths do not underflow.
struct CsPrecomputation {
    Eigen::VectorXd log_a_bar;   // log sum of train(class i)-test kernels
    Eigen::MatrixXd log_B_bar;   // log sum of train(class i)-train(class i') kernels
    Eigen::VectorXd class_sizes; // |L_i|
    double t_scalar = 0.0;       // 1 / |U|

    Eigen::VectorXd a_bar() const { return log_a_bar.array().exp(); }
    Eigen::MatrixXd B_bar() const { return log_B_bar.array().exp(); }
    Eigen::Index n_classes() const noexcept { return class_sizes.size(); }
};

namespace detail {

inline double log_gram_sum(const RowMatrix& X, const RowMatrix& Y, double h) {
    const auto D = static_cast<std::size_t>(X.cols());
    if (static_cast<std::size_t>(Y.cols()) != D) throw Error(ErrorCode::DimensionMismatch, "point sets differ in dimension");
    LogSumExp acc;
    for (Eigen::Index j = 0; j < X.rows(); ++j) {
        std::span<const double> x(X.data() + static_cast<std::size_t>(j) * D, D);
        for (Eigen::Index k = 0; k < Y.rows(); ++k) {
            acc.add(log_pairwise_kernel(x, {Y.data() + static_cast<std::size_t>(k) * D, D}, h));
        }
    }
    return acc.value();
}

// Within-set Gram sum visiting only j <= j' and doubling the off-diagonal.
inline double log_self_gram_sum(const RowMatrix& X, double h) {
    const auto D = static_cast<std::size_t>(X.cols());
    const double log2 = std::log(2.0);
    LogSumExp acc;
    for (Eigen::Index j = 0; j < X.rows(); ++j) {
        std::span<const double> x(X.data() + static_cast<std::size_t>(j) * D, D);
        acc.add(log_pairwise_kernel(x, x, h));
        for (Eigen::Index k = j + 1; k < X.rows(); ++k) {
            acc.add(log2 + log_pairwise_kernel(x, {X.data() + static_cast<std::size_t>(k) * D, D}, h));
        }
    }
    return acc.value();
}

} // namespace detail

/// Train-train part of the precomputation (upper triangle, mirrored).
inline CsPrecomputation cs_train_statistics(std::span<const RowMatrix> class_points, double h) {
    if (!(h > 0.0)) throw Error(ErrorCode::NonPositiveBandwidth, "bandwidth must be positive");
    const auto n = static_cast<Eigen::Index>(class_points.size());
    CsPrecomputation pre;
    pre.class_sizes.resize(n);
    pre.log_B_bar.resize(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (class_points[static_cast<std::size_t>(i)].rows() < 1) {
            throw Error(ErrorCode::EmptyClass, "class " + std::to_string(i) + " has no reference points");
        }
        pre.class_sizes[i] = static_cast<double>(class_points[static_cast<std::size_t>(i)].rows());
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        pre.log_B_bar(i, i) = detail::log_self_gram_sum(class_points[static_cast<std::size_t>(i)], h);
        for (Eigen::Index j = i + 1; j < n; ++j) {
            pre.log_B_bar(i, j) = detail::log_gram_sum(class_points[static_cast<std::size_t>(i)], class_points[static_cast<std::size_t>(j)], h);
            pre.log_B_bar(j, i) = pre.log_B_bar(i, j);
        }
    }
    return pre;
}

/// Completes a train-side precomputation with the train-test sums.
inline CsPrecomputation cs_with_test(CsPrecomputation train_stats, std::span<const RowMatrix> class_points,
                                     const RowMatrix& test_points, double h) {
    if (test_points.rows() < 1) throw Error(ErrorCode::EmptyReferenceSet, "test set is empty");
    const auto n = static_cast<Eigen::Index>(class_points.size());
    if (n != train_stats.n_classes()) throw Error(ErrorCode::ShapeMismatch, "class count mismatch");
    train_stats.log_a_bar.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        train_stats.log_a_bar[i] = detail::log_gram_sum(class_points[static_cast<std::size_t>(i)], test_points, h);
    }
    train_stats.t_scalar = 1.0 / static_cast<double>(test_points.rows());
    return train_stats;
}

inline CsPrecomputation cs_precompute(std::span<const RowMatrix> class_points, const RowMatrix& test_points, double h) {
    return cs_with_test(cs_train_statistics(class_points, h), class_points, test_points, h);
}

namespace detail {

// Objective value, or +inf if a log argument is not positive.
inline double cs_objective_unchecked(const CsPrecomputation& pre, std::span<const double> alpha) {
    const auto n = pre.n_classes();
    std::vector<double> log_r(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        const double a = alpha[static_cast<std::size_t>(i)];
        log_r[static_cast<std::size_t>(i)] = a > 0.0 ? std::log(a) - std::log(pre.class_sizes[i]) : -std::numeric_limits<double>::infinity();
    }
    LogSumExp ra, rBr;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double li = log_r[static_cast<std::size_t>(i)];
        if (!std::isfinite(li)) continue;
        ra.add(li + pre.log_a_bar[i]);
        for (Eigen::Index j = 0; j < n; ++j) {
            const double lj = log_r[static_cast<std::size_t>(j)];
            if (std::isfinite(lj)) rBr.add(li + lj + pre.log_B_bar(i, j));
        }
    }
    const double value = -(ra.value() + std::log(pre.t_scalar)) + 0.5 * rBr.value();
    return std::isfinite(value) ? value : std::numeric_limits<double>::infinity();
}

} // namespace detail

/// -log(r^T a t) + 1/2 log(r^T B r) with r_i = alpha_i / |L_i|. The
/// alpha-independent test-test term is omitted.
inline double cs_objective(const CsPrecomputation& pre, std::span<const double> alpha) {
    if (static_cast<Eigen::Index>(alpha.size()) != pre.n_classes()) throw Error(ErrorCode::LengthMismatch, "alpha length");
    const double v = detail::cs_objective_unchecked(pre, alpha);
    if (!std::isfinite(v)) throw Error(ErrorCode::DegenerateGram, "Gram sums vanish; bandwidth is likely far too small");
    return v;
}

inline double cs_objective(const CsPrecomputation& pre, const PrevalenceVector& alpha) { return cs_objective(pre, alpha.values()); }

/// The omitted constant 1/2 log(t^2 c), c being the test-test Gram sum.
inline double cs_constant_term(const RowMatrix& test_points, double h) {
    const double t = 1.0 / static_cast<double>(test_points.rows());
    return 0.5 * (2.0 * std::log(t) + detail::log_self_gram_sum(test_points, h));
}

} // namespace kdey
