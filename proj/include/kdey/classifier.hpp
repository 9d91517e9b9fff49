#pragma once

// L2-regularised multinomial logistic regression and cross-validated
// posterior probabilities.

#include "kdey/core.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace kdey {

enum class ClassWeighting { None, Balanced };

struct LogisticModel {
    Eigen::MatrixXd weights; // n x d
    Eigen::VectorXd biases;  // n
    double C = 1.0;

    Eigen::Index n_classes() const noexcept { return weights.rows(); }
    Eigen::Index dimension() const noexcept { return weights.cols(); }
};

struct SolverSettings {
    int max_iterations = 5000;
    double gradient_tolerance = 1e-6;
};

/// Per-example loss multipliers. Balanced gives N / (n * |L_y|).
inline std::vector<double> sample_weights(std::span<const int> labels, int n_classes, ClassWeighting weighting) {
    std::vector<double> w(labels.size(), 1.0);
    if (weighting == ClassWeighting::None) return w;
    std::vector<std::size_t> counts(static_cast<std::size_t>(n_classes), 0);
    for (int y : labels) ++counts[static_cast<std::size_t>(y)];
    const double N = static_cast<double>(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        w[i] = N / (static_cast<double>(n_classes) * static_cast<double>(counts[static_cast<std::size_t>(labels[i])]));
    }
    return w;
}

/// Mean weighted cross-entropy plus ||W||^2 / (2 C N); biases are not
/// penalised. Fills the gradient when the output pointers are non-null.
inline double logistic_loss(const RowMatrix& X, std::span<const int> labels, std::span<const double> weights, double C,
                            const Eigen::MatrixXd& W, const Eigen::VectorXd& b, Eigen::MatrixXd* grad_W = nullptr,
                            Eigen::VectorXd* grad_b = nullptr) {
    const Eigen::Index N = X.rows();
    const Eigen::Index n = W.rows();
    const double invN = 1.0 / static_cast<double>(N);
    Eigen::MatrixXd scores = X * W.transpose();
    scores.rowwise() += b.transpose();

    const bool want_grad = grad_W != nullptr || grad_b != nullptr;
    Eigen::MatrixXd residual;
    if (want_grad) residual.resize(N, n);

    double loss = 0.0;
    for (Eigen::Index i = 0; i < N; ++i) {
        const double m = scores.row(i).maxCoeff();
        double z = 0.0;
        for (Eigen::Index c = 0; c < n; ++c) z += std::exp(scores(i, c) - m);
        const double lse = m + std::log(z);
        const int y = labels[static_cast<std::size_t>(i)];
        const double w = weights[static_cast<std::size_t>(i)];
        loss += w * (lse - scores(i, y));
        if (want_grad) {
            for (Eigen::Index c = 0; c < n; ++c) {
                const double p = std::exp(scores(i, c) - lse);
                residual(i, c) = w * (p - (c == y ? 1.0 : 0.0)) * invN;
            }
        }
    }
    loss = loss * invN + W.squaredNorm() / (2.0 * C * static_cast<double>(N));
    if (grad_W) *grad_W = residual.transpose() * X + W / (C * static_cast<double>(N));
    if (grad_b) *grad_b = residual.colwise().sum().transpose();
    return loss;
}

/// Full-batch gradient descent with a Barzilai-Borwein trial step and
/// Armijo backtracking. The objective is convex, so the zero start is
/// only ever improved upon. `seed` is accepted for API symmetry; the
/// solver itself is deterministic.
inline LogisticModel fit_logistic(const LabelledDataset& train, double C, ClassWeighting weighting,
                                  [[maybe_unused]] std::uint64_t seed = 0, const SolverSettings& settings = {}) {
    train.validate();
    if (!(C > 0.0)) throw Error(ErrorCode::InvalidArgument, "C must be positive");
    const int n = train.n_classes;
    const Eigen::Index d = train.features.cols();
    LogisticModel model{Eigen::MatrixXd::Zero(n, d), Eigen::VectorXd::Zero(n), C};
    if (n == 1) return model;
    if (train.size() < static_cast<std::size_t>(n)) {
        throw Error(ErrorCode::TooFewExamples, "fewer training rows than classes");
    }
    const auto counts = train.class_counts();
    for (std::size_t c = 0; c < counts.size(); ++c) {
        if (counts[c] == 0) throw Error(ErrorCode::EmptyClass, "class " + std::to_string(c) + " has no training rows");
    }

    const auto w = sample_weights(train.labels, n, weighting);
    Eigen::MatrixXd W = model.weights, gW, newW, new_gW;
    Eigen::VectorXd b = model.biases, gb, newb, new_gb;
    double loss = logistic_loss(train.features, train.labels, w, C, W, b, &gW, &gb);
    double step = 1.0;

    for (int iter = 0; iter < settings.max_iterations; ++iter) {
        if (!std::isfinite(loss)) throw Error(ErrorCode::NonFinite, "logistic loss diverged");
        const double gmax = std::max(gW.cwiseAbs().maxCoeff(), gb.cwiseAbs().maxCoeff());
        if (gmax < settings.gradient_tolerance) break;
        const double gnorm2 = gW.squaredNorm() + gb.squaredNorm();

        double new_loss = 0.0;
        bool accepted = false;
        for (int bt = 0; bt < 60; ++bt) {
            newW = W - step * gW;
            newb = b - step * gb;
            new_loss = logistic_loss(train.features, train.labels, w, C, newW, newb);
            if (std::isfinite(new_loss) && new_loss <= loss - 1e-4 * step * gnorm2) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break; // no descent possible at machine precision

        logistic_loss(train.features, train.labels, w, C, newW, newb, &new_gW, &new_gb);
        const double sy = (newW - W).cwiseProduct(new_gW - gW).sum() + (newb - b).dot(new_gb - gb);
        const double ss = (newW - W).squaredNorm() + (newb - b).squaredNorm();
        step = sy > 0.0 ? std::clamp(ss / sy, 1e-10, 1e10) : 1.0;

        W.swap(newW);
        b.swap(newb);
        gW.swap(new_gW);
        gb.swap(new_gb);
        loss = new_loss;
    }
    if (!std::isfinite(loss) || !W.allFinite() || !b.allFinite()) {
        throw Error(ErrorCode::NonFinite, "logistic fit produced non-finite parameters");
    }
    model.weights = std::move(W);
    model.biases = std::move(b);
    return model;
}

inline PosteriorMatrix predict_posteriors(const LogisticModel& model, const RowMatrix& features) {
    if (features.cols() != model.dimension()) {
        throw Error(ErrorCode::DimensionMismatch, "expected " + std::to_string(model.dimension()) + " features, got " +
                                                      std::to_string(features.cols()));
    }
    RowMatrix scores = features * model.weights.transpose();
    scores.rowwise() += model.biases.transpose();
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        const double m = scores.row(i).maxCoeff();
        double z = 0.0;
        for (Eigen::Index c = 0; c < scores.cols(); ++c) {
            scores(i, c) = std::exp(scores(i, c) - m);
            z += scores(i, c);
        }
        scores.row(i) /= z;
    }
    return PosteriorMatrix(std::move(scores));
}

inline PosteriorMatrix predict_posteriors(const LogisticModel& model, const Bag& bag) {
    return predict_posteriors(model, bag.features);
}

/// Stratified fold index for every row: within each class the rows are
/// shuffled and dealt round-robin, continuing the rotation across classes.
inline std::vector<int> stratified_folds(std::span<const int> labels, int n_classes, int k, std::uint64_t seed) {
    if (k < 2) throw Error(ErrorCode::InvalidArgument, "k-fold cross-validation needs k >= 2");
    auto sets = class_split(labels, n_classes);
    std::vector<int> fold(labels.size(), 0);
    std::size_t offset = 0;
    for (std::size_t c = 0; c < sets.size(); ++c) {
        auto& idx = sets[c];
        if (idx.empty()) continue;
        if (idx.size() < static_cast<std::size_t>(k)) {
            throw Error(ErrorCode::TooFewExamples,
                        "class " + std::to_string(c) + " has " + std::to_string(idx.size()) + " rows, fewer than k=" + std::to_string(k));
        }
        auto rng = make_rng(seed, 1000 + c);
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::size_t p = 0; p < idx.size(); ++p) fold[idx[p]] = static_cast<int>((offset + p) % static_cast<std::size_t>(k));
        offset += idx.size();
    }
    return fold;
}

/// Out-of-fold posteriors aligned with the rows of `train`.
inline PosteriorMatrix cross_val_posteriors(const LabelledDataset& train, int k, double C, ClassWeighting weighting,
                                            std::uint64_t seed, const SolverSettings& settings = {}) {
    train.validate();
    const auto folds = stratified_folds(train.labels, train.n_classes, k, seed);
    const auto counts = train.class_counts();
    for (std::size_t c = 0; c < counts.size(); ++c) {
        if (counts[c] == 0) throw Error(ErrorCode::EmptyClass, "class " + std::to_string(c) + " has no training rows");
    }
    RowMatrix out(static_cast<Eigen::Index>(train.size()), train.n_classes);
    for (int f = 0; f < k; ++f) {
        std::vector<std::size_t> fit_rows, held_rows;
        for (std::size_t i = 0; i < folds.size(); ++i) (folds[i] == f ? held_rows : fit_rows).push_back(i);
        if (held_rows.empty()) continue;
        const auto model = fit_logistic(train.subset(fit_rows), C, weighting, seed, settings);
        const auto held = train.subset(held_rows);
        const auto post = predict_posteriors(model, held.features);
        for (std::size_t r = 0; r < held_rows.size(); ++r) {
            out.row(static_cast<Eigen::Index>(held_rows[r])) = post.matrix().row(static_cast<Eigen::Index>(r));
        }
    }
    return PosteriorMatrix(std::move(out));
}

} // namespace kdey
