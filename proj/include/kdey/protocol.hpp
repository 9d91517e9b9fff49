#pragma once

// Artificial-prevalence evaluation: bags drawn at uniformly sampled
// prevalence vectors, scored with AE and RAE, plus grid-search model
// selection on validation bags.

#include "kdey/core.hpp"
#include "kdey/quantifiers.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

namespace kdey {

inline PrevalenceVector kraemer_sample(std::size_t n, std::uint64_t seed) {
    auto rng = make_rng(seed, 0x4B52);
    return sample_uniform_simplex(n, rng);
}

/// Largest-remainder rounding of z * target; ties go to the lower index.
inline std::vector<std::size_t> bag_counts(const PrevalenceVector& target, std::size_t z) {
    const std::size_t n = target.size();
    std::vector<std::size_t> counts(n);
    std::vector<double> rem(n);
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double exact = target[i] * static_cast<double>(z);
        const double fl = std::floor(exact + 1e-9);
        counts[i] = static_cast<std::size_t>(fl);
        // snap to a 1e-9 grid so that equal shares compare equal
        rem[i] = std::round((exact - fl) * 1e9) / 1e9;
        assigned += counts[i];
    }
    while (assigned > z) { // only possible through the +1e-9 guard
        auto it = std::max_element(counts.begin(), counts.end());
        --*it;
        --assigned;
    }
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
    for (std::size_t k = 0; assigned < z; ++k, ++assigned) ++counts[order[k % n]];
    return counts;
}

struct DrawnBag {
    Bag bag;
    PrevalenceVector prevalence; // realised, count-based
    std::vector<int> labels;
};

inline DrawnBag draw_bag(const LabelledDataset& pool, const PrevalenceVector& target, std::size_t z, std::uint64_t seed) {
    if (z < 1) throw Error(ErrorCode::InvalidArgument, "bag size must be at least 1");
    if (target.size() != static_cast<std::size_t>(pool.n_classes)) throw Error(ErrorCode::LengthMismatch, "target vs pool classes");
    const auto counts = bag_counts(target, z);
    auto by_class = class_split(pool);
    auto rng = make_rng(seed, 0xBA6);

    DrawnBag out;
    RowMatrix features(static_cast<Eigen::Index>(z), pool.features.cols());
    out.labels.reserve(z);
    Eigen::Index row = 0;
    for (std::size_t c = 0; c < counts.size(); ++c) {
        const std::size_t k = counts[c];
        if (k == 0) continue;
        auto& idx = by_class[c];
        if (idx.empty()) throw Error(ErrorCode::ImpossibleTarget, "class " + std::to_string(c) + " has positive target but an empty pool");
        if (k <= idx.size()) {
            for (std::size_t i = 0; i < k; ++i) { // partial Fisher-Yates
                std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
                std::swap(idx[i], idx[pick(rng)]);
                features.row(row++) = pool.features.row(static_cast<Eigen::Index>(idx[i]));
            }
        } else {
            std::uniform_int_distribution<std::size_t> pick(0, idx.size() - 1);
            for (std::size_t i = 0; i < k; ++i) features.row(row++) = pool.features.row(static_cast<Eigen::Index>(idx[pick(rng)]));
        }
        out.labels.insert(out.labels.end(), k, static_cast<int>(c));
    }
    std::vector<double> p(counts.size());
    for (std::size_t c = 0; c < counts.size(); ++c) p[c] = static_cast<double>(counts[c]) / static_cast<double>(z);
    out.bag = Bag(std::move(features));
    out.prevalence = PrevalenceVector(std::move(p));
    return out;
}

inline double absolute_error(const PrevalenceVector& truth, const PrevalenceVector& estimate) {
    if (truth.size() != estimate.size()) throw Error(ErrorCode::LengthMismatch, "prevalence vectors differ in length");
    double s = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) s += std::abs(truth[i] - estimate[i]);
    return s / static_cast<double>(truth.size());
}

inline double relative_absolute_error(const PrevalenceVector& truth, const PrevalenceVector& estimate, std::size_t z) {
    if (truth.size() != estimate.size()) throw Error(ErrorCode::LengthMismatch, "prevalence vectors differ in length");
    if (z < 1) throw Error(ErrorCode::InvalidArgument, "bag size must be at least 1");
    const double eps = 0.5 / static_cast<double>(z);
    double s = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) s += std::abs(truth[i] - estimate[i]) / (truth[i] + eps);
    return s / static_cast<double>(truth.size());
}

enum class Loss { MAE, MRAE };

inline Loss parse_loss(const std::string& s) {
    if (s == "mae" || s == "MAE") return Loss::MAE;
    if (s == "mrae" || s == "MRAE") return Loss::MRAE;
    throw Error(ErrorCode::InvalidConfig, "loss must be mae or mrae, got " + s);
}

inline std::string to_string(Loss l) { return l == Loss::MAE ? "mae" : "mrae"; }

struct ProtocolConfig {
    std::size_t bag_count = 100;
    std::size_t bag_size = 100;
    std::uint64_t seed = 0;
    int jobs = 1;

    void validate() const {
        if (bag_count < 1) throw Error(ErrorCode::InvalidConfig, "bag_count must be >= 1");
        if (bag_size < 1) throw Error(ErrorCode::InvalidConfig, "bag_size must be >= 1");
        if (jobs < 1) throw Error(ErrorCode::InvalidConfig, "jobs must be >= 1");
    }
};

struct BagResult {
    PrevalenceVector true_prevalence;
    PrevalenceVector estimated_prevalence;
    double ae = 0.0;
    double rae = 0.0;
};

struct EvaluationReport {
    std::string method_id;
    std::string dataset_id;
    std::vector<BagResult> per_bag;
    double mean_ae = 0.0;
    double mean_rae = 0.0;

    double mean(Loss loss) const { return loss == Loss::MAE ? mean_ae : mean_rae; }
};

/// The bag sequence depends only on (pool, config).
inline std::vector<DrawnBag> protocol_bags(const LabelledDataset& pool, const ProtocolConfig& config) {
    config.validate();
    std::vector<DrawnBag> bags;
    bags.reserve(config.bag_count);
    const auto n = static_cast<std::size_t>(pool.n_classes);
    for (std::size_t b = 0; b < config.bag_count; ++b) {
        const std::uint64_t bag_seed = mix_seed(config.seed, b);
        bags.push_back(draw_bag(pool, kraemer_sample(n, bag_seed), config.bag_size, bag_seed));
    }
    return bags;
}

/// Runs `task(i)` for i in [0, count) on up to `jobs` threads; the first
/// exception is rethrown.
inline void parallel_for(std::size_t count, int jobs, const std::function<void(std::size_t)>& task) {
    const auto workers = static_cast<std::size_t>(std::max(1, std::min<int>(jobs, static_cast<int>(count))));
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) task(i);
        return;
    }
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < workers; ++w) {
        threads.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < count; i += workers) task(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : threads) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

inline EvaluationReport evaluate_bags(const Quantifier& quantifier, const std::vector<DrawnBag>& bags, int jobs = 1) {
    EvaluationReport report;
    report.method_id = quantifier.name();
    report.per_bag.resize(bags.size());
    parallel_for(bags.size(), jobs, [&](std::size_t b) {
        const auto& drawn = bags[b];
        auto est = quantifier.quantify(drawn.bag);
        auto& r = report.per_bag[b];
        r.ae = absolute_error(drawn.prevalence, est);
        r.rae = relative_absolute_error(drawn.prevalence, est, drawn.bag.size());
        r.true_prevalence = drawn.prevalence;
        r.estimated_prevalence = std::move(est);
    });
    for (const auto& r : report.per_bag) {
        report.mean_ae += r.ae;
        report.mean_rae += r.rae;
    }
    report.mean_ae /= static_cast<double>(bags.size());
    report.mean_rae /= static_cast<double>(bags.size());
    return report;
}

inline EvaluationReport evaluate_protocol(const Quantifier& quantifier, const LabelledDataset& pool, const ProtocolConfig& config) {
    return evaluate_bags(quantifier, protocol_bags(pool, config), config.jobs);
}

/// Test bags use a seed stream disjoint from the validation one.
inline ProtocolConfig test_protocol(ProtocolConfig config) {
    config.seed ^= 0x5EED;
    return config;
}

/// Stratified split: `fraction` of each class goes to the second part.
inline std::pair<LabelledDataset, LabelledDataset> stratified_split(const LabelledDataset& data, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw Error(ErrorCode::InvalidArgument, "split fraction must lie in (0,1)");
    auto sets = class_split(data);
    std::vector<std::size_t> first, second;
    for (std::size_t c = 0; c < sets.size(); ++c) {
        auto& idx = sets[c];
        auto rng = make_rng(seed, 0x5B + c);
        std::shuffle(idx.begin(), idx.end(), rng);
        const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
        second.insert(second.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
        first.insert(first.end(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end());
    }
    std::sort(first.begin(), first.end());
    std::sort(second.begin(), second.end());
    return {data.subset(first), data.subset(second)};
}

using QuantifierBuilder = std::function<std::unique_ptr<Quantifier>(const Hyperparameters&)>;

struct GridPointResult {
    Hyperparameters point;
    std::optional<double> score; // empty when the point failed
    std::string failure;
};

struct GridSearchResult {
    Hyperparameters best;
    std::size_t best_index = 0;
    double best_score = 0.0;
    std::vector<GridPointResult> points;
    std::unique_ptr<Quantifier> model; // refitted on train + validation pool
};

/// Every point is scored on the same validation bags; the first minimiser
/// wins and is refitted on the union of train and validation pool.
inline GridSearchResult grid_search(const QuantifierBuilder& builder, const std::vector<Hyperparameters>& grid,
                                    const LabelledDataset& train, const LabelledDataset& val_pool, const ProtocolConfig& config,
                                    Loss loss) {
    if (grid.empty()) throw Error(ErrorCode::InvalidConfig, "grid must not be empty");
    const auto bags = protocol_bags(val_pool, config);
    GridSearchResult result;
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        GridPointResult pr{grid[i], std::nullopt, {}};
        try {
            auto q = builder(grid[i]);
            q->fit(train);
            pr.score = evaluate_bags(*q, bags, config.jobs).mean(loss);
            if (!best || *pr.score < result.best_score) {
                best = i;
                result.best_score = *pr.score;
            }
        } catch (const std::exception& e) {
            pr.failure = e.what();
        }
        result.points.push_back(std::move(pr));
    }
    if (!best) throw Error(ErrorCode::InvalidConfig, "every grid point failed; first error: " + result.points.front().failure);
    result.best_index = *best;
    result.best = grid[*best];
    result.model = builder(result.best);
    result.model->fit(concatenate(train, val_pool));
    return result;
}

} // namespace kdey
