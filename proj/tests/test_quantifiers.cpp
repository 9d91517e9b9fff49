#include "kdey/quantifiers.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace kdey;

namespace {

RowMatrix rows(std::initializer_list<std::initializer_list<double>> r) {
    RowMatrix m(static_cast<Eigen::Index>(r.size()), static_cast<Eigen::Index>(r.begin()->size()));
    Eigen::Index i = 0;
    for (const auto& row : r) {
        Eigen::Index j = 0;
        for (double v : row) m(i, j++) = v;
        ++i;
    }
    return m;
}

// Dirichlet rows via normalised gammas.
RowMatrix dirichlet_rows(Eigen::Index count, const std::vector<double>& a, Rng& rng) {
    RowMatrix m(count, static_cast<Eigen::Index>(a.size()));
    for (Eigen::Index i = 0; i < count; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < a.size(); ++k) {
            m(i, static_cast<Eigen::Index>(k)) = std::gamma_distribution<double>(a[k], 1.0)(rng);
            s += m(i, static_cast<Eigen::Index>(k));
        }
        m.row(i) /= s;
    }
    return m;
}

// Concentration `peak` on the own class, 1 elsewhere.
std::vector<double> peaked(std::size_t n, std::size_t cls, double peak) {
    std::vector<double> a(n, 1.0);
    a[cls] = peak;
    return a;
}

struct Labelled {
    RowMatrix P;
    std::vector<int> labels;
};

Labelled class_posteriors(const std::vector<Eigen::Index>& counts, double peak, Rng& rng) {
    Labelled out;
    const std::size_t n = counts.size();
    Eigen::Index total = 0;
    for (auto c : counts) total += c;
    out.P.resize(total, static_cast<Eigen::Index>(n));
    Eigen::Index r = 0;
    for (std::size_t c = 0; c < n; ++c) {
        out.P.middleRows(r, counts[c]) = dirichlet_rows(counts[c], peaked(n, c, peak), rng);
        for (Eigen::Index i = 0; i < counts[c]; ++i) out.labels.push_back(static_cast<int>(c));
        r += counts[c];
    }
    return out;
}

RowMatrix repeat_rows(const RowMatrix& m, int times) {
    RowMatrix out(m.rows() * times, m.cols());
    for (int t = 0; t < times; ++t) out.middleRows(t * m.rows(), m.rows()) = m;
    return out;
}

std::vector<KdeModel> kdes_of(const Labelled& d, int n, double h) {
    std::vector<KdeModel> out;
    for (const auto& idx : class_split(d.labels, n)) {
        RowMatrix pts(static_cast<Eigen::Index>(idx.size()), d.P.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) pts.row(static_cast<Eigen::Index>(i)) = d.P.row(static_cast<Eigen::Index>(idx[i]));
        out.emplace_back(pts, h);
    }
    return out;
}

double l1(const PrevalenceVector& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t k = 0; k < b.size(); ++k) s += std::abs(a[k] - b[k]);
    return s;
}

LabelledDataset gaussian_dataset(std::size_t per_class, int n, double separation, std::uint64_t seed) {
    auto rng = make_rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    LabelledDataset d{RowMatrix(static_cast<Eigen::Index>(per_class) * n, 2), {}, n};
    Eigen::Index r = 0;
    for (int c = 0; c < n; ++c) {
        const double angle = 2.0 * std::numbers::pi * c / n;
        for (std::size_t i = 0; i < per_class; ++i, ++r) {
            d.features(r, 0) = separation * std::cos(angle) + g(rng);
            d.features(r, 1) = separation * std::sin(angle) + g(rng);
            d.labels.push_back(c);
        }
    }
    return d;
}

} // namespace

// ---------------------------------------------------------------------------
// CC / ACC / PACC

TEST(CC, Examples) {
    EXPECT_EQ(cc_quantify(PosteriorMatrix(rows({{.9, .1}, {.8, .2}, {.1, .9}}))), PrevalenceVector({2.0 / 3.0, 1.0 / 3.0}));
    EXPECT_EQ(cc_quantify(PosteriorMatrix(rows({{.5, .5}, {.5, .5}}))), PrevalenceVector({1.0, 0.0}));
    EXPECT_EQ(cc_quantify(PosteriorMatrix(rows({{.1, .2, .6, .1}}))), PrevalenceVector({0.0, 0.0, 1.0, 0.0}));
}

TEST(ACC, Examples) {
    const MisclassificationMatrix identity(Eigen::MatrixXd::Identity(2, 2));
    auto r = acc_quantify(identity, PrevalenceVector({0.3, 0.7}));
    EXPECT_NEAR(r.prevalence[0], 0.3, 1e-12);
    EXPECT_FALSE(r.singular);

    Eigen::MatrixXd m(2, 2);
    m << 0.9, 0.1, 0.1, 0.9;
    const MisclassificationMatrix conf(m);
    EXPECT_NEAR(acc_quantify(conf, PrevalenceVector({0.5, 0.5})).prevalence[0], 0.5, 1e-12);
    EXPECT_NEAR(acc_quantify(conf, PrevalenceVector({0.42, 0.58})).prevalence[0], 0.4, 1e-12);
    // outside the reachable range: clipped to a vertex
    const auto clipped = acc_quantify(conf, PrevalenceVector({0.95, 0.05})).prevalence;
    EXPECT_EQ(clipped[0], 1.0);
    EXPECT_EQ(clipped[1], 0.0);
}

TEST(ACC, SingularSystemFallsBackToObservedRates) {
    Eigen::MatrixXd m(2, 2);
    m << 0.5, 0.5, 0.5, 0.5;
    const auto r = acc_quantify(MisclassificationMatrix(m), PrevalenceVector({0.3, 0.7}));
    EXPECT_TRUE(r.singular);
    EXPECT_EQ(r.prevalence, PrevalenceVector({0.3, 0.7}));
}

TEST(ACC, ConfusionMatrixValidation) {
    Eigen::MatrixXd m(2, 2);
    m << 0.9, 0.2, 0.2, 0.9;
    EXPECT_THROW(MisclassificationMatrix{m}, Error);
    EXPECT_THROW(MisclassificationMatrix{Eigen::MatrixXd::Identity(2, 3)}, Error);
}

TEST(ACC, ConfusionMatricesFromPosteriors) {
    const PosteriorMatrix P(rows({{.9, .1}, {.4, .6}, {.2, .8}, {.3, .7}}));
    const std::vector<int> y{0, 0, 1, 1};
    const auto hard = hard_confusion(P, y, 2).entries();
    EXPECT_DOUBLE_EQ(hard(0, 0), 0.5);
    EXPECT_DOUBLE_EQ(hard(1, 0), 0.5);
    EXPECT_DOUBLE_EQ(hard(1, 1), 1.0);
    const auto soft = soft_confusion(P, y, 2).entries();
    EXPECT_NEAR(soft(0, 0), 0.65, 1e-15);
    EXPECT_NEAR(soft(1, 1), 0.75, 1e-15);
    const std::vector<int> missing{0, 0, 0, 0};
    EXPECT_THROW(hard_confusion(P, missing, 2), Error);
}

TEST(Aggregative, OracleClassifierIsExact) {
    auto rng = make_rng(31);
    const int n = 4;
    auto one_hot = [&](const std::vector<int>& labels) {
        RowMatrix m = RowMatrix::Zero(static_cast<Eigen::Index>(labels.size()), n);
        for (std::size_t i = 0; i < labels.size(); ++i) m(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
        return PosteriorMatrix(m);
    };
    std::vector<int> train;
    for (int i = 0; i < 200; ++i) train.push_back(i % n);
    const auto train_p = one_hot(train);
    std::uniform_int_distribution<int> lab(0, n - 1);
    for (const std::string& name : {"CC", "ACC", "PACC"}) {
        auto q = make_quantifier(name, {});
        q->fit_posteriors(train_p, train, n);
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<int> bag(37);
            for (auto& y : bag) y = lab(rng);
            std::vector<double> truth(n, 0.0);
            for (int y : bag) truth[static_cast<std::size_t>(y)] += 1.0 / 37.0;
            const auto est = q->aggregate(one_hot(bag));
            for (int k = 0; k < n; ++k) EXPECT_NEAR(est[static_cast<std::size_t>(k)], truth[static_cast<std::size_t>(k)], 1e-12) << name;
        }
    }
}

// ---------------------------------------------------------------------------
// EMQ

TEST(EMQ, TrainingPriorIsAFixedPoint) {
    const PrevalenceVector prior({0.2, 0.5, 0.3});
    RowMatrix P(50, 3);
    for (Eigen::Index i = 0; i < 50; ++i) P.row(i) << 0.2, 0.5, 0.3;
    const auto est = emq_quantify(prior, PosteriorMatrix(P));
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(est[k], prior[k], 1e-15);
}

TEST(EMQ, RecoversShiftedPriorFromBayesPosteriors) {
    auto rng = make_rng(32);
    std::normal_distribution<double> c0(1.0, 1.0), c1(-1.0, 1.0);
    std::bernoulli_distribution pick0(0.8);
    RowMatrix P(10000, 2);
    for (Eigen::Index i = 0; i < P.rows(); ++i) {
        const double x = pick0(rng) ? c0(rng) : c1(rng);
        const double d0 = oracle::gauss({x}, {1.0}, 1.0), d1 = oracle::gauss({x}, {-1.0}, 1.0);
        P(i, 0) = d0 / (d0 + d1);
        P(i, 1) = 1.0 - P(i, 0);
    }
    const auto est = emq_quantify(PrevalenceVector::uniform(2), PosteriorMatrix(P));
    EXPECT_NEAR(est[0], 0.8, 0.02);
}

TEST(EMQ, OutputIsOnTheSimplex) {
    auto rng = make_rng(33);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 2 + static_cast<std::size_t>(trial % 4);
        const auto P = dirichlet_rows(20, std::vector<double>(n, 0.5), rng);
        const auto est = emq_quantify(sample_uniform_simplex(n, rng), PosteriorMatrix(P));
        double s = 0.0;
        for (double v : est.values()) {
            EXPECT_GE(v, 0.0);
            s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

// ---------------------------------------------------------------------------
// HDy

TEST(HDy, TestEqualToPositivesGivesOne) {
    auto rng = make_rng(34);
    std::uniform_real_distribution<double> hi(0.5, 1.0), lo(0.0, 0.5);
    std::vector<double> pos(100), neg(100);
    for (auto& v : pos) v = hi(rng);
    for (auto& v : neg) v = lo(rng);
    EXPECT_DOUBLE_EQ(hdy_binary_quantify(pos, neg, pos), 1.0);
}

TEST(HDy, EvenMixtureOfSeparableScores) {
    auto rng = make_rng(35);
    std::uniform_real_distribution<double> hi(0.7, 0.95), lo(0.05, 0.3);
    std::vector<double> pos(200), neg(200);
    for (auto& v : pos) v = hi(rng);
    for (auto& v : neg) v = lo(rng);
    std::vector<double> test(pos);
    test.insert(test.end(), neg.begin(), neg.end());
    EXPECT_NEAR(hdy_binary_quantify(pos, neg, test), 0.5, 0.02);
}

TEST(HDy, IdenticalClassesReturnLowestGridPoint) {
    const std::vector<double> s{0.1, 0.4, 0.45, 0.8};
    EXPECT_EQ(hdy_binary_quantify(s, s, s), 0.0);
}

TEST(HDy, EmptyClass) {
    const std::vector<double> s{0.3}, none;
    try {
        hdy_binary_quantify(s, none, s);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::EmptyClass);
    }
}

TEST(HDy, OneVsAllNormalisation) {
    const std::vector<double> a{0.2, 0.2, 0.6}, b{1, 1}, c{0, 0, 0};
    EXPECT_EQ(hdy_ova_quantify(a), PrevalenceVector({0.2, 0.2, 0.6}));
    EXPECT_EQ(hdy_ova_quantify(b), PrevalenceVector({0.5, 0.5}));
    const auto u = hdy_ova_quantify(c);
    for (double v : u.values()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

// ---------------------------------------------------------------------------
// DM

namespace {

std::vector<HistogramRepresentation> class_histograms(const Labelled& d, int n, int bins, HistogramLayout layout) {
    std::vector<HistogramRepresentation> out;
    for (const auto& idx : class_split(d.labels, n)) {
        RowMatrix pts(static_cast<Eigen::Index>(idx.size()), d.P.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) pts.row(static_cast<Eigen::Index>(i)) = d.P.row(static_cast<Eigen::Index>(idx[i]));
        out.push_back(histogram_of_bag(pts, bins, layout));
    }
    return out;
}

HistogramRepresentation exact_mixture(const std::vector<HistogramRepresentation>& train, const std::vector<double>& alpha) {
    HistogramRepresentation out = train[0];
    for (std::size_t c = 0; c < out.per_class.size(); ++c) {
        for (std::size_t k = 0; k < out.per_class[c].size(); ++k) {
            out.per_class[c][k] = 0.0;
            for (std::size_t i = 0; i < train.size(); ++i) out.per_class[c][k] += alpha[i] * train[i].per_class[c][k];
        }
    }
    return out;
}

} // namespace

TEST(DM, TestEqualToOneClassGivesVertex) {
    auto rng = make_rng(36);
    const auto d = class_posteriors({200, 200, 200}, 5.0, rng);
    const auto train = class_histograms(d, 3, 8, HistogramLayout::Averaged);
    for (auto div : {DiscreteDivergence::HD2, DiscreteDivergence::Topsoe, DiscreteDivergence::CS}) {
        const auto est = dm_quantify(train, train[0], div);
        EXPECT_NEAR(est[0], 1.0, 1e-3);
    }
}

TEST(DM, RecoversExactMixture) {
    auto rng = make_rng(37);
    const auto d = class_posteriors({300, 300, 300}, 4.0, rng);
    const std::vector<double> star{0.5, 0.3, 0.2};
    for (auto layout : {HistogramLayout::Averaged, HistogramLayout::Concatenated}) {
        const auto train = class_histograms(d, 3, 8, layout);
        const auto test = exact_mixture(train, star);
        for (auto div : {DiscreteDivergence::HD2, DiscreteDivergence::Topsoe, DiscreteDivergence::CS}) {
            const auto est = dm_quantify(train, test, div);
            for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(est[k], star[k], 1e-3);
        }
    }
}

TEST(DM, HellingerAndTopsoeAgreeOnSmoothInstance) {
    auto rng = make_rng(38);
    const auto d = class_posteriors({500, 500, 500}, 4.0, rng);
    const auto train = class_histograms(d, 3, 8, HistogramLayout::Averaged);
    const auto bag = class_posteriors({500, 300, 200}, 4.0, rng);
    const auto test = histogram_of_bag(bag.P, 8, HistogramLayout::Averaged);
    const auto hd = dm_quantify(train, test, DiscreteDivergence::HD2);
    const auto ts = dm_quantify(train, test, DiscreteDivergence::Topsoe);
    EXPECT_LT(l1(hd, ts.vector()), 0.05);
}

// ---------------------------------------------------------------------------
// KDEy-HD

TEST(KDEyHD, BagCopiedFromOneClass) {
    auto rng = make_rng(39);
    const auto d = class_posteriors({150, 150, 150}, 30.0, rng);
    const auto kdes = kdes_of(d, 3, 0.05);
    const auto ref = kdey_presample(kdes, 10000, 7);
    for (std::size_t c = 0; c < 3; ++c) {
        const auto est = kdey_hd_quantify(ref, PosteriorMatrix(kdes[c].references()), 0.05);
        EXPECT_GE(est[c], 0.95);
    }
}

TEST(KDEyHD, SingleClass) {
    const std::vector<KdeModel> kdes{KdeModel(rows({{1.0}, {1.0}}), 0.1)};
    EXPECT_EQ(kdey_hd_quantify(kdes, PosteriorMatrix(rows({{1.0}})), 100, 1)[0], 1.0);
}

TEST(KDEyHD, PresampledMatrixReproducesMixtureDensity) {
    auto rng = make_rng(40);
    const auto d = class_posteriors({40, 30, 50}, 3.0, rng);
    const auto kdes = kdes_of(d, 3, 0.1);
    const auto ref = kdey_presample(kdes, 500, 3);
    for (int trial = 0; trial < 10; ++trial) {
        const auto alpha = sample_uniform_simplex(3, rng);
        const Eigen::Map<const Eigen::VectorXd> a(alpha.values().data(), 3);
        const Eigen::VectorXd via_matrix = ref.densities * a;
        const KdeMixture mix(kdes, alpha);
        for (Eigen::Index i = 0; i < ref.samples.rows(); ++i) {
            const double direct = mix.density({ref.samples.row(i).data(), 3});
            EXPECT_NEAR(via_matrix[i], direct, 1e-10 * std::max(1.0, direct));
        }
    }
    for (Eigen::Index i = 0; i < ref.samples.rows(); ++i) EXPECT_NEAR(ref.reference[i], ref.densities.row(i).mean(), 1e-12);
}

TEST(KDEyHD, FitTimePresampleIsReusedAcrossBags) {
    auto rng = make_rng(41);
    const auto d = class_posteriors({100, 100}, 10.0, rng);
    KDEyHDQuantifier q(0.05, 2000, ClassifierSettings{});
    q.fit_posteriors(PosteriorMatrix(d.P), d.labels, 2);
    const RowMatrix first = q.reference().samples;
    const auto bag = class_posteriors({60, 40}, 10.0, rng);
    const auto a = q.aggregate(PosteriorMatrix(bag.P));
    EXPECT_TRUE(first == q.reference().samples);
    EXPECT_EQ(a, q.aggregate(PosteriorMatrix(bag.P)));
    EXPECT_NEAR(a[0], 0.6, 0.1);
}

// ---------------------------------------------------------------------------
// KDEy-CS

namespace {

double quadrature_cs_1d(const RowMatrix& c0, const RowMatrix& c1, double a, const RowMatrix& test, double h) {
    auto to_vec = [](const RowMatrix& m) {
        std::vector<std::vector<double>> v;
        for (Eigen::Index i = 0; i < m.rows(); ++i) v.push_back({m(i, 0)});
        return v;
    };
    const auto v0 = to_vec(c0), v1 = to_vec(c1), vt = to_vec(test);
    auto p = [&](double x) { return a * oracle::kde(v0, {x}, h) + (1 - a) * oracle::kde(v1, {x}, h); };
    auto q = [&](double x) { return oracle::kde(vt, {x}, h); };
    const double lo = -1.0, hi = 2.0;
    const int nodes = 6000;
    const double pq = oracle::trapezoid([&](double x) { return p(x) * q(x); }, lo, hi, nodes);
    const double pp = oracle::trapezoid([&](double x) { return p(x) * p(x); }, lo, hi, nodes);
    const double qq = oracle::trapezoid([&](double x) { return q(x) * q(x); }, lo, hi, nodes);
    return -std::log(pq) + 0.5 * std::log(pp) + 0.5 * std::log(qq);
}

} // namespace

TEST(KDEyCS, TestEqualToOneClassGivesVertex) {
    auto rng = make_rng(42);
    const auto d = class_posteriors({80, 80}, 20.0, rng);
    const auto split = class_split(d.labels, 2);
    std::vector<RowMatrix> classes;
    for (const auto& idx : split) {
        RowMatrix m(static_cast<Eigen::Index>(idx.size()), 2);
        for (std::size_t i = 0; i < idx.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = d.P.row(static_cast<Eigen::Index>(idx[i]));
        classes.push_back(m);
    }
    const auto est = kdey_cs_quantify(cs_precompute(classes, classes[0], 0.1));
    EXPECT_NEAR(est[0], 1.0, 1e-2);
}

TEST(KDEyCS, SymmetricConstruction) {
    const RowMatrix left = rows({{0.05}, {0.1}, {0.2}, {0.3}});
    const RowMatrix right = (1.0 - left.array()).matrix();
    RowMatrix test(8, 1);
    test << left, right;
    const std::vector<RowMatrix> classes{left, right};
    const auto est = kdey_cs_quantify(cs_precompute(classes, test, 0.1));
    EXPECT_NEAR(est[0], 0.5, 1e-3);
}

TEST(KDEyCS, GridArgminMatchesQuadrature) {
    auto rng = make_rng(43);
    std::uniform_real_distribution<double> u0(0.0, 0.5), u1(0.4, 1.0), ut(0.0, 1.0);
    RowMatrix c0(6, 1), c1(7, 1), test(9, 1);
    for (Eigen::Index i = 0; i < c0.rows(); ++i) c0(i, 0) = u0(rng);
    for (Eigen::Index i = 0; i < c1.rows(); ++i) c1(i, 0) = u1(rng);
    for (Eigen::Index i = 0; i < test.rows(); ++i) test(i, 0) = ut(rng);
    const double h = 0.1;
    const std::vector<RowMatrix> classes{c0, c1};
    const auto pre = cs_precompute(classes, test, h);
    int arg_closed = 0, arg_quad = 0;
    double best_closed = 1e300, best_quad = 1e300;
    for (int i = 0; i <= 100; ++i) {
        const double a = i / 100.0;
        const std::vector<double> alpha{a, 1 - a};
        const double vc = cs_objective(pre, alpha);
        const double vq = quadrature_cs_1d(c0, c1, a, test, h);
        if (vc < best_closed) best_closed = vc, arg_closed = i;
        if (vq < best_quad) best_quad = vq, arg_quad = i;
    }
    EXPECT_EQ(arg_closed, arg_quad);
}

// ---------------------------------------------------------------------------
// KDEy-ML

TEST(KDEyML, SingleClass) {
    const std::vector<KdeModel> kdes{KdeModel(rows({{1.0}, {1.0}}), 0.1)};
    EXPECT_EQ(kdey_ml_quantify(kdes, PosteriorMatrix(rows({{1.0}})))[0], 1.0);
}

TEST(KDEyML, IdenticalDensitiesReturnUniform) {
    const RowMatrix pts = rows({{0.2, 0.8}, {0.6, 0.4}});
    const std::vector<KdeModel> kdes{KdeModel(pts, 0.1), KdeModel(pts, 0.1), KdeModel(pts, 0.1)};
    const auto est = kdey_ml_quantify(kdes, PosteriorMatrix(rows({{0.5, 0.5}, {0.3, 0.7}})));
    for (double v : est.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-12);
}

TEST(KDEyML, SeparableThreeClassBag) {
    auto rng = make_rng(44);
    const auto train = class_posteriors({300, 300, 300}, 10.0, rng);
    const auto kdes = kdes_of(train, 3, 0.1);
    const auto bag = class_posteriors({350, 100, 50}, 10.0, rng);
    const auto est = kdey_ml_quantify(kdes, PosteriorMatrix(bag.P));
    EXPECT_LT(l1(est, {0.7, 0.2, 0.1}), 0.05);
}

TEST(KDEyML, OptimalityCertificateOnEveryBag) {
    auto rng = make_rng(45);
    const auto train = class_posteriors({200, 200, 200}, 4.0, rng);
    KDEyMLQuantifier q(0.1, ClassifierSettings{});
    q.fit_posteriors(PosteriorMatrix(train.P), train.labels, 3);
    const OptimizerConfig cfg;
    for (int b = 0; b < 30; ++b) {
        const auto truth = sample_uniform_simplex(3, rng);
        std::vector<Eigen::Index> counts(3);
        for (std::size_t k = 0; k < 3; ++k) counts[k] = static_cast<Eigen::Index>(std::round(truth[k] * 200));
        const auto bag = class_posteriors(counts, 4.0, rng);
        std::vector<double> realised(3);
        for (std::size_t k = 0; k < 3; ++k) realised[k] = static_cast<double>(counts[k]) / static_cast<double>(bag.P.rows());
        const PosteriorMatrix P(bag.P);
        const auto est = q.aggregate(P);
        const auto lik = q.likelihood(P);
        const double at_est = lik.negative_log_likelihood(est.values());
        const std::vector<double> u(3, 1.0 / 3.0);
        const double slack = cfg.objective_tolerance * (1.0 + std::abs(at_est));
        EXPECT_LE(at_est, lik.negative_log_likelihood(u) + slack);
        EXPECT_LE(at_est, lik.negative_log_likelihood(realised) + slack);
    }
}

TEST(MixtureLikelihood, MatchesDirectLogSum) {
    auto rng = make_rng(46);
    std::normal_distribution<double> g(-3.0, 4.0);
    RowMatrix L(20, 3);
    for (Eigen::Index i = 0; i < L.size(); ++i) L.data()[i] = g(rng);
    const MixtureLikelihood lik(L);
    const auto a = sample_uniform_simplex(3, rng);
    double expected = 0.0;
    for (Eigen::Index r = 0; r < 20; ++r) {
        double s = 0.0;
        for (Eigen::Index k = 0; k < 3; ++k) s += a[static_cast<std::size_t>(k)] * std::exp(L(r, k));
        expected -= std::log(s);
    }
    EXPECT_NEAR(lik.negative_log_likelihood(a.values()), expected, 1e-10 * std::abs(expected));
}

TEST(HistogramBlindness, DmCannotSeparateWhatKdeCan) {
    // the four-class pattern, each row repeated
    const RowMatrix a = repeat_rows(rows({{.1, .2, .3, .4}, {.2, .3, .4, .1}, {.3, .4, .1, .2}}), 30);
    const RowMatrix b = repeat_rows(rows({{.1, .3, .4, .2}, {.3, .2, .1, .4}, {.2, .4, .3, .1}}), 30);
    auto rng = make_rng(47);
    const auto train = class_posteriors({100, 100, 100, 100}, 3.0, rng);
    const auto kdes = kdes_of(train, 4, 0.05);
    const MixtureLikelihood la(class_log_densities(kdes, a)), lb(class_log_densities(kdes, b));
    for (int bins : {4, 8, 10}) {
        const auto hist = class_histograms(train, 4, bins, HistogramLayout::Averaged);
        const auto ha = histogram_of_bag(a, bins, HistogramLayout::Averaged);
        const auto hb = histogram_of_bag(b, bins, HistogramLayout::Averaged);
        for (int trial = 0; trial < 10; ++trial) {
            const auto alpha = sample_uniform_simplex(4, rng);
            EXPECT_NEAR(dm_loss(hist, ha, alpha.values(), DiscreteDivergence::HD2), dm_loss(hist, hb, alpha.values(), DiscreteDivergence::HD2),
                        1e-12);
            EXPECT_GT(std::abs(la.negative_log_likelihood(alpha.values()) - lb.negative_log_likelihood(alpha.values())), 1e-6);
        }
    }
}

// ---------------------------------------------------------------------------
// DIR

TEST(DIR, RecoversKnownParameters) {
    auto rng = make_rng(48);
    const std::vector<double> truth{2.0, 5.0, 3.0};
    const auto fit = dir_fit_class(PosteriorMatrix(dirichlet_rows(10000, truth, rng)));
    EXPECT_TRUE(fit.converged);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(fit.alpha[static_cast<Eigen::Index>(k)], truth[k], 0.1 * truth[k]);
}

TEST(DIR, SymmetricDataGivesSymmetricParameters) {
    auto rng = make_rng(49);
    std::uniform_real_distribution<double> noise(-1e-3, 1e-3);
    RowMatrix P(400, 3);
    for (Eigen::Index i = 0; i < 200; ++i) {
        const double e = noise(rng);
        // mirrored pairs keep the sample symmetric across coordinates
        P.row(2 * i) << 1.0 / 3 + e, 1.0 / 3 - e, 1.0 / 3;
        P.row(2 * i + 1) << 1.0 / 3 - e, 1.0 / 3 + e, 1.0 / 3;
    }
    const auto fit = dir_fit_class(PosteriorMatrix(P));
    EXPECT_NEAR(fit.alpha[0] / fit.alpha[1], 1.0, 1e-6);
}

TEST(DIR, LikelihoodImprovesOnMomentStart) {
    auto rng = make_rng(50);
    for (int trial = 0; trial < 5; ++trial) {
        const auto P = dirichlet_rows(500, {0.8 + trial, 2.0, 0.6}, rng);
        const auto fit = dir_fit_class(PosteriorMatrix(P));
        const RowMatrix x = clip_for_dirichlet(P);
        EXPECT_GE(dirichlet_mean_log_likelihood(fit.alpha, x), dirichlet_mean_log_likelihood(dirichlet_moments(x), x) - 1e-12);
    }
}

TEST(DIR, DensityIntegratesToOneOnTheLine) {
    Eigen::VectorXd a(2);
    a << 2.5, 1.5;
    const double total = oracle::trapezoid(
        [&](double x) {
            if (x <= 0.0 || x >= 1.0) return 0.0;
            const std::vector<double> p{x, 1 - x};
            return std::exp(dirichlet_log_density(a, p));
        },
        0.0, 1.0, 20000);
    EXPECT_NEAR(total, 1.0, 1e-6);
}

TEST(DIR, TooFewRows) { EXPECT_THROW(dir_fit_class(PosteriorMatrix(rows({{0.5, 0.5}}))), Error); }

// ---------------------------------------------------------------------------
// Quantifier objects and registry

TEST(Registry, NamesAndHyperparameters) {
    EXPECT_EQ(method_names().size(), 12u);
    for (const auto& name : method_names()) {
        auto q = make_quantifier(name, {});
        EXPECT_EQ(q->name(), name);
    }
    EXPECT_EQ(method_hyperparameters("KDEy-HD"), (std::vector<std::string>{"C", "class_weight", "h", "t"}));
    EXPECT_EQ(method_hyperparameters("DM-T"), (std::vector<std::string>{"C", "class_weight", "b"}));
    try {
        make_quantifier("HDx", {});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InvalidConfig);
    }
    EXPECT_THROW(make_quantifier("CC", {{"h", 0.1}}), Error);
    EXPECT_THROW(make_quantifier("KDEy-ML", {{"h", 0.0}}), Error);
}

TEST(Quantifiers, FuzzedBagsAlwaysGiveValidPrevalences) {
    auto rng = make_rng(51);
    int cases = 0;
    for (const auto& name : method_names()) {
        for (std::size_t n : {2u, 3u, 5u}) {
            const auto train = class_posteriors(std::vector<Eigen::Index>(n, 30), 1.0 + static_cast<double>(n), rng);
            Hyperparameters hp;
            if (name == "KDEy-HD") hp["t"] = 500;
            auto q = make_quantifier(name, hp);
            q->fit_posteriors(PosteriorMatrix(train.P), train.labels, static_cast<int>(n));
            std::uniform_int_distribution<int> size(1, 40);
            std::uniform_real_distribution<double> conc(0.05, 3.0);
            for (int b = 0; b < 28; ++b, ++cases) {
                RowMatrix bag = dirichlet_rows(size(rng), std::vector<double>(n, conc(rng)), rng);
                if (b % 7 == 0) bag.row(0).setZero(), bag(0, 0) = 1.0; // a vertex row
                const auto est = q->aggregate(PosteriorMatrix(bag));
                ASSERT_EQ(est.size(), n);
                double s = 0.0;
                for (double v : est.values()) {
                    EXPECT_GE(v, 0.0) << name;
                    EXPECT_TRUE(std::isfinite(v)) << name;
                    s += v;
                }
                EXPECT_NEAR(s, 1.0, 1e-9) << name;
            }
        }
    }
    EXPECT_GE(cases, 1000);
}

TEST(Quantifiers, FitAndQuantifyAreDeterministic) {
    const auto train = gaussian_dataset(80, 3, 2.5, 52);
    const auto test = gaussian_dataset(30, 3, 2.5, 53);
    const Bag bag(test.features);
    MethodContext ctx;
    ctx.seed = 9;
    for (const auto& name : method_names()) {
        Hyperparameters hp;
        if (name == "KDEy-HD") hp["t"] = 1000;
        auto a = make_quantifier(name, hp, ctx);
        auto b = make_quantifier(name, hp, ctx);
        a->fit(train);
        b->fit(train);
        const auto ea = a->quantify(bag);
        EXPECT_EQ(ea, b->quantify(bag)) << name;
        EXPECT_EQ(ea, a->quantify(bag)) << name;
    }
}

TEST(Quantifiers, EndToEndOnSeparableData) {
    const auto train = gaussian_dataset(150, 3, 4.0, 54);
    auto rng = make_rng(55);
    // bag with prevalence (0.6, 0.3, 0.1)
    const auto pool = gaussian_dataset(200, 3, 4.0, 56);
    std::vector<std::size_t> pick;
    const std::size_t want[3] = {120, 60, 20};
    for (int c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < want[c]; ++i) pick.push_back(static_cast<std::size_t>(c) * 200 + i);
    }
    const Bag bag(pool.subset(pick).features);
    const std::vector<double> truth{0.6, 0.3, 0.1};
    for (const auto& name : method_names()) {
        Hyperparameters hp;
        if (name == "KDEy-HD") hp["t"] = 2000;
        auto q = make_quantifier(name, hp);
        q->fit(train);
        EXPECT_LT(l1(q->quantify(bag), truth), 0.15) << name;
    }
}

TEST(Quantifiers, SharedClassifierCache) {
    const auto train = gaussian_dataset(50, 2, 3.0, 57);
    MethodContext ctx;
    ctx.cache = std::make_shared<ClassifierCache>();
    auto a = make_quantifier("KDEy-ML", {{"h", 0.05}}, ctx);
    auto b = make_quantifier("DM-HD", {{"b", 4}}, ctx);
    auto c = make_quantifier("CC", {{"C", 10}}, ctx);
    a->fit(train);
    b->fit(train);
    c->fit(train);
    EXPECT_EQ(ctx.cache->size(), 2u);
    EXPECT_EQ(a->posterior_stage(), b->posterior_stage());
    EXPECT_NE(a->posterior_stage(), c->posterior_stage());
}

TEST(Quantifiers, QuantifyBeforeFitThrows) {
    auto q = make_quantifier("CC", {});
    EXPECT_THROW(q->quantify(Bag(RowMatrix::Zero(2, 2))), Error);
}
