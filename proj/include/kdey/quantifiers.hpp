#pragma once

// Quantification methods. Every method here is aggregative: a logistic
// regression maps covariates to posteriors, and the method aggregates the
// posteriors of a bag into a prevalence estimate. Training-side statistics
// are computed from cross-validated posteriors.

#include "kdey/classifier.hpp"
#include "kdey/core.hpp"
#include "kdey/densities.hpp"
#include "kdey/divergences.hpp"
#include "kdey/simplex_opt.hpp"

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

namespace kdey {

// ---------------------------------------------------------------------------
// Classify and count, and the adjusted variants

/// Fraction of rows whose argmax is each class; ties go to the lowest index.
inline PrevalenceVector cc_quantify(const PosteriorMatrix& posteriors) {
    if (posteriors.rows() < 1) throw Error(ErrorCode::InvalidArgument, "empty bag");
    std::vector<double> counts(static_cast<std::size_t>(posteriors.classes()), 0.0);
    for (Eigen::Index r = 0; r < posteriors.rows(); ++r) {
        Eigen::Index arg = 0;
        posteriors.matrix().row(r).maxCoeff(&arg); // first maximum
        counts[static_cast<std::size_t>(arg)] += 1.0;
    }
    for (double& c : counts) c /= static_cast<double>(posteriors.rows());
    return PrevalenceVector(std::move(counts));
}

/// entry(i, j) estimates P(Yhat = i | Y = j) (hard) or E[s(X)_i | Y = j]
/// (soft). Columns are distributions.
class MisclassificationMatrix {
public:
    explicit MisclassificationMatrix(Eigen::MatrixXd entries) : m_(std::move(entries)) {
        if (m_.rows() != m_.cols() || m_.rows() < 1) throw Error(ErrorCode::ShapeMismatch, "confusion matrix must be square");
        for (Eigen::Index j = 0; j < m_.cols(); ++j) {
            if ((m_.col(j).array() < 0.0).any() || std::abs(m_.col(j).sum() - 1.0) > kSimplexTolerance) {
                throw Error(ErrorCode::NotASimplexPoint, "confusion column " + std::to_string(j) + " is not a distribution");
            }
        }
    }
    const Eigen::MatrixXd& entries() const noexcept { return m_; }
    Eigen::Index size() const noexcept { return m_.rows(); }

private:
    Eigen::MatrixXd m_;
};

struct AdjustedPrevalence {
    PrevalenceVector prevalence;
    bool singular = false; // the system was rank deficient; prevalence holds the observed rates
};

/// Least-squares solve of confusion * alpha = observed, clipped to the
/// simplex.
inline AdjustedPrevalence acc_quantify(const MisclassificationMatrix& confusion, const PrevalenceVector& observed) {
    const auto n = confusion.size();
    if (static_cast<Eigen::Index>(observed.size()) != n) throw Error(ErrorCode::LengthMismatch, "observed rates length");
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(confusion.entries());
    if (qr.rank() < n) return {observed, true};
    const Eigen::VectorXd obs = Eigen::Map<const Eigen::VectorXd>(observed.values().data(), n);
    const Eigen::VectorXd x = qr.solve(obs);
    return {normalize_l1(std::vector<double>(x.data(), x.data() + n)), false};
}

inline MisclassificationMatrix hard_confusion(const PosteriorMatrix& posteriors, std::span<const int> labels, int n_classes) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n_classes, n_classes);
    Eigen::VectorXd count = Eigen::VectorXd::Zero(n_classes);
    for (Eigen::Index r = 0; r < posteriors.rows(); ++r) {
        Eigen::Index arg = 0;
        posteriors.matrix().row(r).maxCoeff(&arg);
        m(arg, labels[static_cast<std::size_t>(r)]) += 1.0;
        count[labels[static_cast<std::size_t>(r)]] += 1.0;
    }
    for (Eigen::Index j = 0; j < n_classes; ++j) {
        if (count[j] == 0.0) throw Error(ErrorCode::EmptyClass, "class " + std::to_string(j) + " has no validation rows");
        m.col(j) /= count[j];
    }
    return MisclassificationMatrix(std::move(m));
}

inline MisclassificationMatrix soft_confusion(const PosteriorMatrix& posteriors, std::span<const int> labels, int n_classes) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n_classes, n_classes);
    Eigen::VectorXd count = Eigen::VectorXd::Zero(n_classes);
    for (Eigen::Index r = 0; r < posteriors.rows(); ++r) {
        const int y = labels[static_cast<std::size_t>(r)];
        m.col(y) += posteriors.matrix().row(r).transpose();
        count[y] += 1.0;
    }
    for (Eigen::Index j = 0; j < n_classes; ++j) {
        if (count[j] == 0.0) throw Error(ErrorCode::EmptyClass, "class " + std::to_string(j) + " has no validation rows");
        m.col(j) /= count[j];
        m.col(j) /= m.col(j).sum();
    }
    return MisclassificationMatrix(std::move(m));
}

inline PrevalenceVector mean_posterior(const PosteriorMatrix& posteriors) {
    Eigen::VectorXd mean = posteriors.matrix().colwise().mean().transpose();
    return normalize_l1(std::vector<double>(mean.data(), mean.data() + mean.size()));
}

// ---------------------------------------------------------------------------
// Expectation maximisation (Saerens et al.)

struct EmqSettings {
    int max_iterations = 1000;
    double tolerance = 1e-6;
    double prior_floor = 1e-12;
};

inline PrevalenceVector emq_quantify(const PrevalenceVector& training_prior, const PosteriorMatrix& posteriors,
                                     const EmqSettings& settings = {}) {
    const auto n = posteriors.classes();
    if (static_cast<Eigen::Index>(training_prior.size()) != n) throw Error(ErrorCode::LengthMismatch, "prior length");
    if (posteriors.rows() < 1) throw Error(ErrorCode::InvalidArgument, "empty bag");
    std::vector<double> beta(training_prior.vector());
    for (double& b : beta) b = std::max(b, settings.prior_floor);
    const double bs = std::accumulate(beta.begin(), beta.end(), 0.0);
    for (double& b : beta) b /= bs;

    std::vector<double> alpha = beta, next(static_cast<std::size_t>(n)), row(static_cast<std::size_t>(n));
    const RowMatrix& P = posteriors.matrix();
    for (int it = 0; it < settings.max_iterations; ++it) {
        std::fill(next.begin(), next.end(), 0.0);
        for (Eigen::Index r = 0; r < P.rows(); ++r) {
            double z = 0.0;
            for (Eigen::Index c = 0; c < n; ++c) {
                const auto k = static_cast<std::size_t>(c);
                row[k] = P(r, c) * alpha[k] / beta[k];
                z += row[k];
            }
            if (!(z > 0.0)) continue;
            for (std::size_t k = 0; k < row.size(); ++k) next[k] += row[k] / z;
        }
        double change = 0.0, total = 0.0;
        for (double v : next) total += v;
        for (std::size_t k = 0; k < next.size(); ++k) {
            next[k] /= total;
            change = std::max(change, std::abs(next[k] - alpha[k]));
        }
        alpha.swap(next);
        if (change < settings.tolerance) break;
    }
    return normalize_l1(std::move(alpha));
}

// ---------------------------------------------------------------------------
// HDy (binary) and its one-vs-all extension

namespace detail {

inline std::vector<double> histogram_1d(std::span<const double> values, int bins) {
    std::vector<double> h(static_cast<std::size_t>(bins), 0.0);
    for (double v : values) h[static_cast<std::size_t>(histogram_bin(v, bins))] += 1.0;
    for (double& x : h) x /= static_cast<double>(values.size());
    return h;
}

inline double hdy_loss(double a, std::span<const double> pos, std::span<const double> neg, std::span<const double> test) {
    double s = 0.0;
    for (std::size_t k = 0; k < test.size(); ++k) s += std::sqrt((a * pos[k] + (1.0 - a) * neg[k]) * test[k]);
    return 1.0 - s;
}

} // namespace detail

/// Median over b = 10, 20, ..., 110 of the HD^2-minimising mixture weight
/// of the positive class. Each per-b search scans a 0.001 grid (first
/// minimum wins) and refines it by golden-section search.
inline double hdy_binary_quantify(std::span<const double> positives, std::span<const double> negatives,
                                  std::span<const double> test) {
    if (positives.empty() || negatives.empty()) throw Error(ErrorCode::EmptyClass, "HDy needs both training classes");
    if (test.empty()) throw Error(ErrorCode::InvalidArgument, "empty bag");
    std::vector<double> estimates;
    for (int bins = 10; bins <= 110; bins += 10) {
        const auto hp = detail::histogram_1d(positives, bins);
        const auto hn = detail::histogram_1d(negatives, bins);
        const auto ht = detail::histogram_1d(test, bins);
        auto loss = [&](double a) { return detail::hdy_loss(a, hp, hn, ht); };

        int best_i = 0;
        double best = loss(0.0);
        for (int i = 1; i <= 1000; ++i) {
            const double v = loss(i / 1000.0);
            if (v < best) {
                best = v;
                best_i = i;
            }
        }
        double a_best = best_i / 1000.0;
        double lo = std::max(0.0, a_best - 0.001), hi = std::min(1.0, a_best + 0.001);
        const double g = (std::sqrt(5.0) - 1.0) / 2.0;
        double x1 = hi - g * (hi - lo), x2 = lo + g * (hi - lo);
        double f1 = loss(x1), f2 = loss(x2);
        for (int it = 0; it < 40; ++it) {
            if (f1 <= f2) {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - g * (hi - lo);
                f1 = loss(x1);
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + g * (hi - lo);
                f2 = loss(x2);
            }
        }
        const double a_ref = 0.5 * (lo + hi);
        if (loss(a_ref) < best) a_best = a_ref;
        estimates.push_back(a_best);
    }
    std::sort(estimates.begin(), estimates.end());
    return estimates[estimates.size() / 2];
}

/// L1 normalisation of independent per-class estimates; all zeros map to
/// the uniform vector.
inline PrevalenceVector hdy_ova_quantify(std::span<const double> per_class_estimates) {
    for (double v : per_class_estimates) {
        if (v < 0.0) throw Error(ErrorCode::InvalidArgument, "binary estimates must be non-negative");
    }
    return normalize_l1(std::vector<double>(per_class_estimates.begin(), per_class_estimates.end()));
}

// ---------------------------------------------------------------------------
// Distribution matching on class-wise histograms

inline PrevalenceVector dm_quantify(std::span<const HistogramRepresentation> train, const HistogramRepresentation& test,
                                    DiscreteDivergence divergence, const OptimizerConfig& config = {}) {
    auto objective = [&](std::span<const double> a) { return dm_loss(train, test, a, divergence); };
    return minimize_on_simplex(objective, test.n_classes(), config).alpha;
}

// ---------------------------------------------------------------------------
// KDEy-HD: Monte Carlo HD^2 with importance sampling from the uniform mixture

/// Samples drawn once from the uniform-prevalence mixture with the class
/// densities at each sample: densities(i, j) = p_j(x_i), and
/// reference(i) = mean_j densities(i, j).
struct MonteCarloReference {
    RowMatrix samples;
    RowMatrix densities;
    Eigen::VectorXd reference;
};

inline MonteCarloReference kdey_presample(const std::vector<KdeModel>& class_kdes, std::size_t t, std::uint64_t seed) {
    if (t < 1) throw Error(ErrorCode::InvalidArgument, "need at least one Monte Carlo trial");
    const std::size_t n = class_kdes.size();
    KdeMixture uniform(class_kdes, PrevalenceVector::uniform(n));
    MonteCarloReference ref;
    ref.samples = kde_sample(uniform, t, seed);
    ref.densities.resize(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(n));
    const auto D = static_cast<std::size_t>(ref.samples.cols());
    for (std::size_t i = 0; i < t; ++i) {
        std::span<const double> x(ref.samples.data() + i * D, D);
        for (std::size_t j = 0; j < n; ++j) ref.densities(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = class_kdes[j].density(x);
    }
    ref.reference = ref.densities.rowwise().mean();
    return ref;
}

/// HD^2(p_alpha || q) estimated on the presampled points. With u = p/q the
/// integrand f(u) q / r equals (sqrt(p) - sqrt(q))^2 / r.
inline double kdey_hd_objective(const MonteCarloReference& ref, const Eigen::VectorXd& test_densities, std::span<const double> alpha) {
    const Eigen::Map<const Eigen::VectorXd> a(alpha.data(), static_cast<Eigen::Index>(alpha.size()));
    const Eigen::VectorXd p = ref.densities * a;
    double total = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        const double d = std::sqrt(p[i]) - std::sqrt(test_densities[i]);
        total += d * d / ref.reference[i];
    }
    return total / static_cast<double>(p.size());
}

inline PrevalenceVector kdey_hd_quantify(const MonteCarloReference& ref, const PosteriorMatrix& test_posteriors, double h,
                                         const OptimizerConfig& config = {}) {
    const auto n = static_cast<std::size_t>(ref.densities.cols());
    if (n == 1) return PrevalenceVector::uniform(1);
    const KdeModel q(test_posteriors.matrix(), h);
    Eigen::VectorXd qv(ref.samples.rows());
    const auto D = static_cast<std::size_t>(ref.samples.cols());
    for (Eigen::Index i = 0; i < qv.size(); ++i) qv[i] = q.density({ref.samples.data() + static_cast<std::size_t>(i) * D, D});
    auto objective = [&](std::span<const double> a) { return kdey_hd_objective(ref, qv, a); };
    return minimize_on_simplex(objective, n, config).alpha;
}

inline PrevalenceVector kdey_hd_quantify(const std::vector<KdeModel>& class_kdes, const PosteriorMatrix& test_posteriors,
                                         std::size_t t, std::uint64_t seed, const OptimizerConfig& config = {}) {
    if (class_kdes.empty()) throw Error(ErrorCode::EmptyClass, "no class densities");
    if (class_kdes.size() == 1) return PrevalenceVector::uniform(1);
    const auto ref = kdey_presample(class_kdes, t, seed);
    return kdey_hd_quantify(ref, test_posteriors, class_kdes.front().bandwidth(), config);
}

// ---------------------------------------------------------------------------
// KDEy-CS: closed-form Cauchy-Schwarz divergence

inline PrevalenceVector kdey_cs_quantify(const CsPrecomputation& pre, const OptimizerConfig& config = {}) {
    const auto n = static_cast<std::size_t>(pre.n_classes());
    if (n == 1) return PrevalenceVector::uniform(1);
    // every alpha gives a vanishing train-test sum: nothing to match
    if (!(pre.log_a_bar.array() > -std::numeric_limits<double>::infinity()).any()) {
        throw Error(ErrorCode::DegenerateGram, "train-test Gram sums vanish; bandwidth is likely far too small");
    }
    auto objective = [&](std::span<const double> a) { return detail::cs_objective_unchecked(pre, a); };
    const auto uniform = PrevalenceVector::uniform(n);
    if (!std::isfinite(objective(uniform.values()))) throw Error(ErrorCode::DegenerateGram, "objective undefined at uniform");
    return minimize_on_simplex(objective, n, config).alpha;
}

// ---------------------------------------------------------------------------
// Maximum likelihood with precomputed class densities (KDEy-ML, DIR)

/// Per-row class log-densities, stored shifted by the row maximum so the
/// negative log-likelihood only needs one matrix-vector product.
class MixtureLikelihood {
public:
    explicit MixtureLikelihood(const RowMatrix& log_densities) : scaled_(log_densities.rows(), log_densities.cols()), offset_(0.0) {
        for (Eigen::Index r = 0; r < log_densities.rows(); ++r) {
            const double m = log_densities.row(r).maxCoeff();
            if (!std::isfinite(m)) throw Error(ErrorCode::NonFinite, "log-density row " + std::to_string(r) + " is not finite");
            offset_ += m;
            scaled_.row(r) = (log_densities.row(r).array() - m).exp();
        }
    }

    /// -sum_x log sum_i alpha_i p_i(x)
    double negative_log_likelihood(std::span<const double> alpha) const {
        const Eigen::Map<const Eigen::VectorXd> a(alpha.data(), static_cast<Eigen::Index>(alpha.size()));
        const Eigen::VectorXd mix = scaled_ * a;
        double s = 0.0;
        for (Eigen::Index r = 0; r < mix.size(); ++r) {
            if (!(mix[r] > 0.0)) return std::numeric_limits<double>::infinity();
            s += std::log(mix[r]);
        }
        return -(s + offset_);
    }

    Eigen::Index n_classes() const noexcept { return scaled_.cols(); }

private:
    RowMatrix scaled_;
    double offset_;
};

inline PrevalenceVector ml_quantify(const MixtureLikelihood& likelihood, const OptimizerConfig& config = {}) {
    const auto n = static_cast<std::size_t>(likelihood.n_classes());
    if (n == 1) return PrevalenceVector::uniform(1);
    auto objective = [&](std::span<const double> a) { return likelihood.negative_log_likelihood(a); };
    return minimize_on_simplex(objective, n, config).alpha;
}

inline RowMatrix class_log_densities(const std::vector<KdeModel>& class_kdes, const RowMatrix& points) {
    RowMatrix out(points.rows(), static_cast<Eigen::Index>(class_kdes.size()));
    for (std::size_t j = 0; j < class_kdes.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = class_kdes[j].log_density_rows(points);
    return out;
}

inline PrevalenceVector kdey_ml_quantify(const std::vector<KdeModel>& class_kdes, const PosteriorMatrix& test_posteriors,
                                         const OptimizerConfig& config = {}) {
    if (class_kdes.empty()) throw Error(ErrorCode::EmptyClass, "no class densities");
    if (!test_posteriors.matrix().allFinite()) throw Error(ErrorCode::NonFinite, "test posteriors must be finite");
    return ml_quantify(MixtureLikelihood(class_log_densities(class_kdes, test_posteriors.matrix())), config);
}

// ---------------------------------------------------------------------------
// Dirichlet densities (DIR)

inline constexpr double kDirichletClip = 1e-4;

/// Clips every coordinate into [1e-4, 1 - 1e-4] and renormalises rows.
inline RowMatrix clip_for_dirichlet(const RowMatrix& rows) {
    RowMatrix out = rows.cwiseMax(kDirichletClip).cwiseMin(1.0 - kDirichletClip);
    for (Eigen::Index r = 0; r < out.rows(); ++r) out.row(r) /= out.row(r).sum();
    return out;
}

struct DirichletFit {
    Eigen::VectorXd alpha;
    bool converged = true; // false: method-of-moments estimate returned
    int iterations = 0;
};

inline double dirichlet_log_density(const Eigen::VectorXd& alpha, std::span<const double> x) {
    double v = std::lgamma(alpha.sum());
    for (Eigen::Index k = 0; k < alpha.size(); ++k) v += (alpha[k] - 1.0) * std::log(x[static_cast<std::size_t>(k)]) - std::lgamma(alpha[k]);
    return v;
}

/// Mean log-likelihood of the rows of `x` (already clipped) under Dirichlet(alpha).
inline double dirichlet_mean_log_likelihood(const Eigen::VectorXd& alpha, const RowMatrix& x) {
    double s = 0.0;
    for (Eigen::Index r = 0; r < x.rows(); ++r) s += dirichlet_log_density(alpha, {x.data() + r * x.cols(), static_cast<std::size_t>(x.cols())});
    return s / static_cast<double>(x.rows());
}

namespace detail {

inline double inverse_digamma(double y) {
    double x = y >= -2.22 ? std::exp(y) + 0.5 : -1.0 / (y + 0.5772156649015329);
    for (int i = 0; i < 8; ++i) x -= (boost::math::digamma(x) - y) / boost::math::trigamma(x);
    return x;
}

} // namespace detail

/// Method-of-moments Dirichlet estimate from clipped rows.
inline Eigen::VectorXd dirichlet_moments(const RowMatrix& x) {
    const Eigen::VectorXd m = x.colwise().mean().transpose();
    const Eigen::VectorXd m2 = x.array().square().colwise().mean().transpose();
    double s_sum = 0.0;
    int used = 0;
    for (Eigen::Index k = 0; k < m.size(); ++k) {
        const double var = m2[k] - m[k] * m[k];
        if (var > 0.0) {
            const double s = (m[k] - m2[k]) / var;
            if (s > 0.0 && std::isfinite(s)) {
                s_sum += s;
                ++used;
            }
        }
    }
    const double precision = used > 0 ? s_sum / used : 1.0;
    return m * precision;
}

/// Maximum-likelihood Dirichlet parameters via Minka's fixed point
/// psi(a_k) = psi(sum a) + mean log x_k.
inline DirichletFit dir_fit_class(const PosteriorMatrix& posteriors, int max_iterations = 10000, double tolerance = 1e-10) {
    if (posteriors.rows() < 2) throw Error(ErrorCode::TooFewExamples, "Dirichlet fit needs at least 2 rows");
    const RowMatrix x = clip_for_dirichlet(posteriors.matrix());
    const Eigen::VectorXd mean_log = x.array().log().colwise().mean().transpose();
    const Eigen::VectorXd start = dirichlet_moments(x);
    Eigen::VectorXd a = start;
    for (int it = 1; it <= max_iterations; ++it) {
        const double psi_sum = boost::math::digamma(a.sum());
        Eigen::VectorXd next(a.size());
        for (Eigen::Index k = 0; k < a.size(); ++k) next[k] = detail::inverse_digamma(psi_sum + mean_log[k]);
        if (!next.allFinite() || (next.array() <= 0.0).any()) break;
        const double change = ((next - a).array().abs() / a.array()).maxCoeff();
        a = next;
        if (change < tolerance) return {a, true, it};
    }
    return {start, false, max_iterations};
}

inline RowMatrix dirichlet_log_densities(const std::vector<Eigen::VectorXd>& params, const RowMatrix& posteriors) {
    const RowMatrix x = clip_for_dirichlet(posteriors);
    RowMatrix out(x.rows(), static_cast<Eigen::Index>(params.size()));
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        std::span<const double> row(x.data() + r * x.cols(), static_cast<std::size_t>(x.cols()));
        for (std::size_t j = 0; j < params.size(); ++j) out(r, static_cast<Eigen::Index>(j)) = dirichlet_log_density(params[j], row);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Quantifier objects

using Hyperparameters = std::map<std::string, double>;

class Quantifier {
public:
    virtual ~Quantifier() = default;
    virtual std::string name() const = 0;
    virtual void fit(const LabelledDataset& train) = 0;
    virtual PrevalenceVector quantify(const Bag& bag) const = 0;
};

struct ClassifierSettings {
    double C = 1.0;
    ClassWeighting weighting = ClassWeighting::None;
    int folds = 5;
    std::uint64_t seed = 0;
};

/// The classifier fitted on the full training set plus its out-of-fold
/// posteriors on that same set.
struct PosteriorStage {
    LogisticModel model;
    PosteriorMatrix cv_posteriors;
    std::vector<int> labels;
    int n_classes = 0;
};

inline PosteriorStage fit_posterior_stage(const LabelledDataset& train, const ClassifierSettings& s) {
    train.validate();
    PosteriorStage stage;
    stage.labels = train.labels;
    stage.n_classes = train.n_classes;
    stage.model = fit_logistic(train, s.C, s.weighting, s.seed);
    if (train.n_classes == 1) {
        stage.cv_posteriors = PosteriorMatrix(RowMatrix::Ones(static_cast<Eigen::Index>(train.size()), 1));
    } else {
        stage.cv_posteriors = cross_val_posteriors(train, s.folds, s.C, s.weighting, s.seed);
    }
    return stage;
}

/// Memoises posterior stages so that methods sharing a classifier
/// configuration and training set train it only once. Thread-safe.
class ClassifierCache {
public:
    std::shared_ptr<const PosteriorStage> get(const LabelledDataset& train, const ClassifierSettings& s) {
        const Key key{fingerprint(train), s.C, static_cast<int>(s.weighting), s.folds, s.seed};
        {
            std::lock_guard lock(mutex_);
            if (auto it = cache_.find(key); it != cache_.end()) return it->second;
        }
        auto stage = std::make_shared<const PosteriorStage>(fit_posterior_stage(train, s));
        std::lock_guard lock(mutex_);
        return cache_.emplace(key, std::move(stage)).first->second;
    }

    std::size_t size() const {
        std::lock_guard lock(mutex_);
        return cache_.size();
    }

    static std::uint64_t fingerprint(const LabelledDataset& d) {
        std::uint64_t h = 1469598103934665603ULL;
        auto feed = [&h](const void* p, std::size_t len) {
            const auto* b = static_cast<const unsigned char*>(p);
            for (std::size_t i = 0; i < len; ++i) {
                h ^= b[i];
                h *= 1099511628211ULL;
            }
        };
        const std::int64_t shape[3] = {d.features.rows(), d.features.cols(), d.n_classes};
        feed(shape, sizeof(shape));
        feed(d.features.data(), static_cast<std::size_t>(d.features.size()) * sizeof(double));
        feed(d.labels.data(), d.labels.size() * sizeof(int));
        return h;
    }

private:
    using Key = std::tuple<std::uint64_t, double, int, int, std::uint64_t>;
    mutable std::mutex mutex_;
    std::map<Key, std::shared_ptr<const PosteriorStage>> cache_;
};

/// Base for methods that aggregate classifier posteriors.
class AggregativeQuantifier : public Quantifier {
public:
    explicit AggregativeQuantifier(ClassifierSettings settings, std::shared_ptr<ClassifierCache> cache = nullptr)
        : settings_(settings), cache_(std::move(cache)) {}

    void fit(const LabelledDataset& train) override {
        stage_ = cache_ ? cache_->get(train, settings_) : std::make_shared<const PosteriorStage>(fit_posterior_stage(train, settings_));
        fit_posteriors(stage_->cv_posteriors, stage_->labels, stage_->n_classes);
    }

    PrevalenceVector quantify(const Bag& bag) const override {
        if (!stage_) throw Error(ErrorCode::InvalidArgument, name() + " has no fitted classifier");
        return aggregate(predict_posteriors(stage_->model, bag));
    }

    /// Fits the aggregation stage directly from training posteriors.
    void fit_posteriors(const PosteriorMatrix& posteriors, std::span<const int> labels, int n_classes) {
        if (static_cast<std::size_t>(posteriors.rows()) != labels.size()) throw Error(ErrorCode::LengthMismatch, "posteriors vs labels");
        if (posteriors.classes() != n_classes) throw Error(ErrorCode::ShapeMismatch, "posterior columns vs class count");
        n_classes_ = n_classes;
        fit_aggregation(posteriors, labels, n_classes);
    }

    virtual PrevalenceVector aggregate(const PosteriorMatrix& posteriors) const = 0;

    const ClassifierSettings& classifier_settings() const noexcept { return settings_; }
    std::shared_ptr<const PosteriorStage> posterior_stage() const noexcept { return stage_; }
    int n_classes() const noexcept { return n_classes_; }

protected:
    virtual void fit_aggregation(const PosteriorMatrix& posteriors, std::span<const int> labels, int n_classes) = 0;

    OptimizerConfig optimizer() const {
        OptimizerConfig cfg;
        cfg.seed = settings_.seed;
        return cfg;
    }

    static std::vector<PosteriorMatrix> split_by_class(const PosteriorMatrix& posteriors, std::span<const int> labels, int n_classes) {
        auto sets = class_split(labels, n_classes);
        std::vector<PosteriorMatrix> out;
        for (std::size_t c = 0; c < sets.size(); ++c) {
            if (sets[c].empty()) throw Error(ErrorCode::EmptyClass, "class " + std::to_string(c) + " has no training rows");
            out.push_back(posteriors.select_rows(sets[c]));
        }
        return out;
    }

private:
    ClassifierSettings settings_;
    std::shared_ptr<ClassifierCache> cache_;
    std::shared_ptr<const PosteriorStage> stage_;
    int n_classes_ = 0;
};

class CCQuantifier final : public AggregativeQuantifier {
public:
    using AggregativeQuantifier::AggregativeQuantifier;
    std::string name() const override { return "CC"; }
    PrevalenceVector aggregate(const PosteriorMatrix& p) const override { return cc_quantify(p); }

protected:
    void fit_aggregation(const PosteriorMatrix&, std::span<const int>, int) override {}
};

class ACCQuantifier final : public AggregativeQuantifier {
public:
    using AggregativeQuantifier::AggregativeQuantifier;
    std::string name() const override { return "ACC"; }
    PrevalenceVector aggregate(const PosteriorMatrix& p) const override {
        return acc_quantify(*confusion_, cc_quantify(p)).prevalence;
    }

protected:
    void fit_aggregation(const PosteriorMatrix& p, std::span<const int> labels, int n) override {
        confusion_ = hard_confusion(p, labels, n);
    }

private:
    std::optional<MisclassificationMatrix> confusion_;
};

class PACCQuantifier final : public AggregativeQuantifier {
public:
    using AggregativeQuantifier::AggregativeQuantifier;
    std::string name() const override { return "PACC"; }
    PrevalenceVector aggregate(const PosteriorMatrix& p) const override {
        return acc_quantify(*confusion_, mean_posterior(p)).prevalence;
    }

protected:
    void fit_aggregation(const PosteriorMatrix& p, std::span<const int> labels, int n) override {
        confusion_ = soft_confusion(p, labels, n);
    }

private:
    std::optional<MisclassificationMatrix> confusion_;
};

class EMQQuantifier final : public AggregativeQuantifier {
public:
    using AggregativeQuantifier::AggregativeQuantifier;
    std::string name() const override { return "EMQ"; }
    PrevalenceVector aggregate(const PosteriorMatrix& p) const override { return emq_quantify(*prior_, p); }

protected:
    void fit_aggregation(const PosteriorMatrix&, std::span<const int> labels, int n) override {
        std::vector<double> counts(static_cast<std::size_t>(n), 0.0);
        for (int y : labels) counts[static_cast<std::size_t>(y)] += 1.0;
        prior_ = normalize_l1(std::move(counts));
    }

private:
    std::optional<PrevalenceVector> prior_;
};

class HDyOvAQuantifier final : public AggregativeQuantifier {
public:
    using AggregativeQuantifier::AggregativeQuantifier;
    std::string name() const override { return "HDy-OvA"; }

    PrevalenceVector aggregate(const PosteriorMatrix& p) const override {
        const auto n = static_cast<std::size_t>(p.classes());
        if (n == 1) return PrevalenceVector::uniform(1);
        std::vector<double> est(n);
        std::vector<double> column(static_cast<std::size_t>(p.rows()));
        for (std::size_t c = 0; c < n; ++c) {
            for (Eigen::Index r = 0; r < p.rows(); ++r) column[static_cast<std::size_t>(r)] = p(r, static_cast<Eigen::Index>(c));
            est[c] = hdy_binary_quantify(positives_[c], negatives_[c], column);
        }
        return hdy_ova_quantify(est);
    }

protected:
    void fit_aggregation(const PosteriorMatrix& p, std::span<const int> labels, int n) override {
        positives_.assign(static_cast<std::size_t>(n), {});
        negatives_.assign(static_cast<std::size_t>(n), {});
        for (Eigen::Index r = 0; r < p.rows(); ++r) {
            const int y = labels[static_cast<std::size_t>(r)];
            for (int c = 0; c < n; ++c) (y == c ? positives_ : negatives_)[static_cast<std::size_t>(c)].push_back(p(r, c));
        }
        if (n > 1) {
            for (int c = 0; c < n; ++c) {
                if (positives_[static_cast<std::size_t>(c)].empty()) throw Error(ErrorCode::EmptyClass, "class " + std::to_string(c) + " has no rows");
            }
        }
    }

private:
    std::vector<std::vector<double>> positives_, negatives_;
};

struct DmSettings {
    DiscreteDivergence divergence = DiscreteDivergence::HD2;
    int bins = 8;
    HistogramLayout layout = HistogramLayout::Averaged;
};

class DMQuantifier final : public AggregativeQuantifier {
public:
    DMQuantifier(DmSettings dm, ClassifierSettings settings, std::shared_ptr<ClassifierCache> cache = nullptr)
        : AggregativeQuantifier(settings, std::move(cache)), dm_(dm) {}

    std::string name() const override {
        switch (dm_.divergence) {
            case DiscreteDivergence::HD2: return "DM-HD";
            case DiscreteDivergence::Topsoe: return "DM-T";
            case DiscreteDivergence::CS: return "DM-CS";
        }
        return "DM";
    }

    PrevalenceVector aggregate(const PosteriorMatrix& p) const override {
        if (p.classes() == 1) return PrevalenceVector::uniform(1);
        return dm_quantify(train_, histogram_of_bag(p, dm_.bins, dm_.layout), dm_.divergence, optimizer());
    }

    const std::vector<HistogramRepresentation>& training_histograms() const noexcept { return train_; }

protected:
    void fit_aggregation(const PosteriorMatrix& p, std::span<const int> labels, int n) override {
        train_.clear();
        for (const auto& cls : split_by_class(p, labels, n)) train_.push_back(histogram_of_bag(cls, dm_.bins, dm_.layout));
    }

private:
    DmSettings dm_;
    std::vector<HistogramRepresentation> train_;
};

/// Shared state of the KDE-based methods: one KDE per class.
class KdeQuantifierBase : public AggregativeQuantifier {
public:
    KdeQuantifierBase(double bandwidth, ClassifierSettings settings, std::shared_ptr<ClassifierCache> cache)
        : AggregativeQuantifier(settings, std::move(cache)), h_(bandwidth) {
        if (!(h_ > 0.0)) throw Error(ErrorCode::NonPositiveBandwidth, "bandwidth must be positive");
    }
    double bandwidth() const noexcept { return h_; }
    const std::vector<KdeModel>& class_kdes() const noexcept { return kdes_; }

protected:
    void fit_aggregation(const PosteriorMatrix& p, std::span<const int> labels, int n) override {
        kdes_.clear();
        class_points_.clear();
        for (auto& cls : split_by_class(p, labels, n)) {
            class_points_.push_back(cls.matrix());
            kdes_.emplace_back(cls.matrix(), h_);
        }
        fit_kde_stage();
    }
    virtual void fit_kde_stage() {}

    double h_;
    std::vector<KdeModel> kdes_;
    std::vector<RowMatrix> class_points_;
};

class KDEyHDQuantifier final : public KdeQuantifierBase {
public:
    KDEyHDQuantifier(double bandwidth, std::size_t trials, ClassifierSettings settings, std::shared_ptr<ClassifierCache> cache = nullptr)
        : KdeQuantifierBase(bandwidth, settings, std::move(cache)), trials_(trials) {}

    std::string name() const override { return "KDEy-HD"; }

    PrevalenceVector aggregate(const PosteriorMatrix& p) const override {
        if (kdes_.size() == 1) return PrevalenceVector::uniform(1);
        return kdey_hd_quantify(reference_, p, h_, optimizer());
    }

    const MonteCarloReference& reference() const noexcept { return reference_; }

protected:
    // presampling happens here so that quantify only evaluates the test KDE
    void fit_kde_stage() override {
        if (kdes_.size() > 1) reference_ = kdey_presample(kdes_, trials_, mix_seed(classifier_settings().seed, 0x4D43));
    }

private:
    std::size_t trials_;
    MonteCarloReference reference_;
};

class KDEyCSQuantifier final : public KdeQuantifierBase {
public:
    KDEyCSQuantifier(double bandwidth, ClassifierSettings settings, std::shared_ptr<ClassifierCache> cache = nullptr)
        : KdeQuantifierBase(bandwidth, settings, std::move(cache)) {}

    std::string name() const override { return "KDEy-CS"; }

    PrevalenceVector aggregate(const PosteriorMatrix& p) const override {
        if (kdes_.size() == 1) return PrevalenceVector::uniform(1);
        return kdey_cs_quantify(cs_with_test(train_stats_, class_points_, p.matrix(), h_), optimizer());
    }

protected:
    void fit_kde_stage() override { train_stats_ = cs_train_statistics(class_points_, h_); }

private:
    CsPrecomputation train_stats_;
};

class KDEyMLQuantifier final : public KdeQuantifierBase {
public:
    KDEyMLQuantifier(double bandwidth, ClassifierSettings settings, std::shared_ptr<ClassifierCache> cache = nullptr)
        : KdeQuantifierBase(bandwidth, settings, std::move(cache)) {}

    std::string name() const override { return "KDEy-ML"; }

    PrevalenceVector aggregate(const PosteriorMatrix& p) const override { return kdey_ml_quantify(kdes_, p, optimizer()); }

    MixtureLikelihood likelihood(const PosteriorMatrix& p) const { return MixtureLikelihood(class_log_densities(kdes_, p.matrix())); }
};

class DIRQuantifier final : public AggregativeQuantifier {
public:
    using AggregativeQuantifier::AggregativeQuantifier;
    std::string name() const override { return "DIR"; }

    PrevalenceVector aggregate(const PosteriorMatrix& p) const override {
        if (params_.size() == 1) return PrevalenceVector::uniform(1);
        return ml_quantify(MixtureLikelihood(dirichlet_log_densities(params_, p.matrix())), optimizer());
    }

    const std::vector<Eigen::VectorXd>& parameters() const noexcept { return params_; }
    bool all_converged() const noexcept { return converged_; }

protected:
    void fit_aggregation(const PosteriorMatrix& p, std::span<const int> labels, int n) override {
        params_.clear();
        converged_ = true;
        if (n == 1) {
            params_.push_back(Eigen::VectorXd::Ones(1));
            return;
        }
        for (const auto& cls : split_by_class(p, labels, n)) {
            auto fit = dir_fit_class(cls);
            converged_ = converged_ && fit.converged;
            params_.push_back(std::move(fit.alpha));
        }
    }

private:
    std::vector<Eigen::VectorXd> params_;
    bool converged_ = true;
};

// ---------------------------------------------------------------------------
// Registry

inline const std::vector<std::string>& method_names() {
    static const std::vector<std::string> names = {"CC", "ACC", "PACC", "EMQ", "HDy-OvA", "DM-T",
                                                   "DM-HD", "DM-CS", "KDEy-HD", "KDEy-CS", "KDEy-ML", "DIR"};
    return names;
}

/// Hyperparameters each method accepts. Every method takes the
/// classifier's C and class_weight (0 = none, 1 = balanced).
inline std::vector<std::string> method_hyperparameters(const std::string& method) {
    std::vector<std::string> keys = {"C", "class_weight"};
    if (method.rfind("DM-", 0) == 0) keys.push_back("b");
    if (method.rfind("KDEy-", 0) == 0) keys.push_back("h");
    if (method == "KDEy-HD") keys.push_back("t");
    return keys;
}

struct MethodContext {
    std::shared_ptr<ClassifierCache> cache;
    std::uint64_t seed = 0;
    int folds = 5;
    HistogramLayout layout = HistogramLayout::Averaged;
};

inline std::unique_ptr<AggregativeQuantifier> make_quantifier(const std::string& method, const Hyperparameters& hp,
                                                              const MethodContext& ctx = {}) {
    const auto& names = method_names();
    if (std::find(names.begin(), names.end(), method) == names.end()) throw Error(ErrorCode::InvalidConfig, "unknown method " + method);
    const auto allowed = method_hyperparameters(method);
    for (const auto& [key, value] : hp) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            throw Error(ErrorCode::InvalidConfig, "method " + method + " does not take hyperparameter " + key);
        }
    }
    auto get = [&hp](const std::string& key, double fallback) {
        auto it = hp.find(key);
        return it == hp.end() ? fallback : it->second;
    };
    ClassifierSettings cs;
    cs.C = get("C", 1.0);
    cs.weighting = get("class_weight", 0.0) != 0.0 ? ClassWeighting::Balanced : ClassWeighting::None;
    cs.folds = ctx.folds;
    cs.seed = ctx.seed;
    const double h = get("h", 0.1);
    const int bins = static_cast<int>(get("b", 8.0));

    if (method == "CC") return std::make_unique<CCQuantifier>(cs, ctx.cache);
    if (method == "ACC") return std::make_unique<ACCQuantifier>(cs, ctx.cache);
    if (method == "PACC") return std::make_unique<PACCQuantifier>(cs, ctx.cache);
    if (method == "EMQ") return std::make_unique<EMQQuantifier>(cs, ctx.cache);
    if (method == "HDy-OvA") return std::make_unique<HDyOvAQuantifier>(cs, ctx.cache);
    if (method == "DM-T") return std::make_unique<DMQuantifier>(DmSettings{DiscreteDivergence::Topsoe, bins, ctx.layout}, cs, ctx.cache);
    if (method == "DM-HD") return std::make_unique<DMQuantifier>(DmSettings{DiscreteDivergence::HD2, bins, ctx.layout}, cs, ctx.cache);
    if (method == "DM-CS") return std::make_unique<DMQuantifier>(DmSettings{DiscreteDivergence::CS, bins, ctx.layout}, cs, ctx.cache);
    if (method == "KDEy-HD") return std::make_unique<KDEyHDQuantifier>(h, static_cast<std::size_t>(get("t", 10000.0)), cs, ctx.cache);
    if (method == "KDEy-CS") return std::make_unique<KDEyCSQuantifier>(h, cs, ctx.cache);
    if (method == "KDEy-ML") return std::make_unique<KDEyMLQuantifier>(h, cs, ctx.cache);
    return std::make_unique<DIRQuantifier>(cs, ctx.cache);
}

} // namespace kdey
