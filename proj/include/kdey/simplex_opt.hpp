#pragma once

// Derivative-free minimisation over the probability simplex.
//
// The simplex is parameterised as alpha = softmax(0, z_1, ..., z_{n-1}) so
// every iterate is feasible, and Nelder-Mead runs in z-space. Several
// starts are used: the uniform vector plus seeded random simplex points.

#include "kdey/core.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

namespace kdey {

struct OptimizerConfig {
    int max_iterations = 2000;          // per start
    double tolerance = 1e-8;            // on alpha movement (inf-norm)
    double objective_tolerance = 1e-10; // on objective spread, relative to 1 + |f|
    int restarts = 5;                   // uniform start + (restarts - 1) random starts
    std::uint64_t seed = 0;
    double initial_step = 1.0;          // z-space edge of the initial simplex
    double snap_threshold = 1e-12;

    void validate() const {
        if (max_iterations < 1) throw Error(ErrorCode::InvalidArgument, "max_iterations must be >= 1");
        if (!(tolerance > 0.0) || !(objective_tolerance > 0.0)) throw Error(ErrorCode::InvalidArgument, "tolerances must be positive");
        if (restarts < 1) throw Error(ErrorCode::InvalidArgument, "need at least one start");
    }
};

struct SimplexOptimum {
    PrevalenceVector alpha;
    double value = 0.0;
    int evaluations = 0;
};

namespace detail {

inline void softmax_pinned(std::span<const double> z, std::vector<double>& alpha) {
    const std::size_t n = z.size() + 1;
    alpha.resize(n);
    double m = 0.0;
    for (double v : z) m = std::max(m, v);
    double s = std::exp(-m);
    alpha[0] = s;
    for (std::size_t i = 1; i < n; ++i) {
        alpha[i] = std::exp(z[i - 1] - m);
        s += alpha[i];
    }
    for (double& a : alpha) a /= s;
}

template <class F>
class SimplexObjective {
public:
    explicit SimplexObjective(F& f) : f_(f) {}

    double at_alpha(std::span<const double> alpha) {
        ++evaluations;
        const double v = f_(alpha);
        return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
    }

    double at_z(std::span<const double> z, std::vector<double>& alpha) {
        softmax_pinned(z, alpha);
        return at_alpha(alpha);
    }

    int evaluations = 0;

private:
    F& f_;
};

struct Vertex {
    std::vector<double> z;
    std::vector<double> alpha;
    double value = 0.0;
};

template <class F>
Vertex nelder_mead(SimplexObjective<F>& obj, std::vector<double> start, const OptimizerConfig& cfg) {
    const std::size_t m = start.size();
    std::vector<Vertex> simplex(m + 1);
    simplex[0].z = start;
    simplex[0].value = obj.at_z(simplex[0].z, simplex[0].alpha);
    for (std::size_t k = 0; k < m; ++k) {
        simplex[k + 1].z = start;
        simplex[k + 1].z[k] += cfg.initial_step;
        simplex[k + 1].value = obj.at_z(simplex[k + 1].z, simplex[k + 1].alpha);
    }

    auto by_value = [](const Vertex& a, const Vertex& b) { return a.value < b.value; };
    std::vector<double> centroid(m), trial(m), trial_alpha;
    auto point = [&](double coef, const std::vector<double>& worst) {
        for (std::size_t k = 0; k < m; ++k) trial[k] = centroid[k] + coef * (worst[k] - centroid[k]);
    };

    for (int iter = 0; iter < cfg.max_iterations; ++iter) {
        std::stable_sort(simplex.begin(), simplex.end(), by_value);
        const Vertex& best = simplex.front();
        const Vertex& worst = simplex.back();

        double spread_alpha = 0.0;
        for (std::size_t v = 1; v <= m; ++v) {
            for (std::size_t k = 0; k < best.alpha.size(); ++k) {
                spread_alpha = std::max(spread_alpha, std::abs(simplex[v].alpha[k] - best.alpha[k]));
            }
        }
        const double spread_f = worst.value - best.value;
        const bool f_converged = std::isfinite(spread_f) && spread_f <= cfg.objective_tolerance * (1.0 + std::abs(best.value));
        if (f_converged && spread_alpha <= cfg.tolerance) break;
        if (spread_alpha <= cfg.tolerance * 1e-3) break; // collapsed simplex

        std::fill(centroid.begin(), centroid.end(), 0.0);
        for (std::size_t v = 0; v < m; ++v) {
            for (std::size_t k = 0; k < m; ++k) centroid[k] += simplex[v].z[k];
        }
        for (double& c : centroid) c /= static_cast<double>(m);

        point(-1.0, worst.z);
        const std::vector<double> reflected = trial;
        const double f_r = obj.at_z(reflected, trial_alpha);
        const std::vector<double> reflected_alpha = trial_alpha;

        if (f_r < best.value) {
            point(-2.0, worst.z);
            const double f_e = obj.at_z(trial, trial_alpha);
            if (f_e < f_r) {
                simplex.back() = {trial, trial_alpha, f_e};
            } else {
                simplex.back() = {reflected, reflected_alpha, f_r};
            }
            continue;
        }
        if (f_r < simplex[m - 1].value) {
            simplex.back() = {reflected, reflected_alpha, f_r};
            continue;
        }
        // contraction: outside when the reflection beats the worst vertex
        const bool outside = f_r < worst.value;
        point(outside ? -0.5 : 0.5, worst.z);
        const double f_c = obj.at_z(trial, trial_alpha);
        if (f_c < (outside ? f_r : worst.value)) {
            simplex.back() = {trial, trial_alpha, f_c};
            continue;
        }
        // shrink towards the best vertex
        for (std::size_t v = 1; v <= m; ++v) {
            for (std::size_t k = 0; k < m; ++k) simplex[v].z[k] = simplex[0].z[k] + 0.5 * (simplex[v].z[k] - simplex[0].z[k]);
            simplex[v].value = obj.at_z(simplex[v].z, simplex[v].alpha);
        }
    }
    std::stable_sort(simplex.begin(), simplex.end(), by_value);
    return simplex.front();
}

inline std::vector<double> to_z(std::span<const double> alpha) {
    constexpr double kFloor = 1e-6;
    std::vector<double> z(alpha.size() - 1);
    const double l0 = std::log(std::max(alpha[0], kFloor));
    for (std::size_t k = 1; k < alpha.size(); ++k) z[k - 1] = std::log(std::max(alpha[k], kFloor)) - l0;
    return z;
}

} // namespace detail

/// Minimises `objective` (called with a span of n simplex coordinates) over
/// the unit simplex. Non-finite values are treated as +inf; a non-finite
/// value at the uniform start throws NonFiniteObjective.
template <class F>
SimplexOptimum minimize_on_simplex(F&& objective, std::size_t n, const OptimizerConfig& config = {}) {
    config.validate();
    if (n == 0) throw Error(ErrorCode::InvalidArgument, "simplex dimension must be at least 1");
    detail::SimplexObjective<std::remove_reference_t<F>> obj(objective);

    const std::vector<double> uniform(n, 1.0 / static_cast<double>(n));
    const double f_uniform = obj.at_alpha(uniform);
    if (!std::isfinite(f_uniform)) throw Error(ErrorCode::NonFiniteObjective, "objective is not finite at the uniform prevalence");
    if (n == 1) return {PrevalenceVector(uniform), f_uniform, obj.evaluations};

    detail::Vertex best{std::vector<double>(n - 1, 0.0), uniform, f_uniform};
    bool best_is_uniform = true;
    auto rng = make_rng(config.seed, 0x51);
    for (int r = 0; r < config.restarts; ++r) {
        std::vector<double> z0(n - 1, 0.0);
        if (r > 0) z0 = detail::to_z(sample_uniform_simplex(n, rng).values());

        detail::Vertex local = detail::nelder_mead(obj, z0, config);
        // re-seed Nelder-Mead from its own optimum until it stops improving
        for (int polish = 0; polish < 3; ++polish) {
            detail::Vertex again = detail::nelder_mead(obj, local.z, config);
            const bool improved = again.value < local.value - config.objective_tolerance * (1.0 + std::abs(local.value));
            if (again.value < local.value) local = std::move(again);
            if (!improved) break;
        }
        // leaving the uniform start needs a real improvement, not rounding noise
        const double margin = best_is_uniform ? config.objective_tolerance * (1.0 + std::abs(best.value)) : 0.0;
        if (local.value < best.value - margin) {
            best = std::move(local);
            best_is_uniform = false;
        }
    }

    std::vector<double> alpha = best.alpha;
    double value = best.value;
    bool snapped = false;
    for (double& a : alpha) {
        if (a < config.snap_threshold) {
            a = 0.0;
            snapped = true;
        }
    }
    if (snapped) {
        const double s = std::accumulate(alpha.begin(), alpha.end(), 0.0);
        for (double& a : alpha) a /= s;
        const double v = obj.at_alpha(alpha);
        if (v <= value + config.objective_tolerance * (1.0 + std::abs(value))) {
            value = v;
        } else {
            alpha = best.alpha;
        }
    }
    return {normalize_l1(std::move(alpha)), value, obj.evaluations};
}

} // namespace kdey
