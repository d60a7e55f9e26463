#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <utility>

#include "oracles.hpp"
#include "support.hpp"
#include "xmk/error.hpp"
#include "xmk/model.hpp"
#include "xmk/rng.hpp"

using namespace xmk;

namespace {

ArchSpec tiny_arch() {
    ArchSpec a;
    a.patch_size = 16;
    a.widths = {4, 4, 8};
    a.strides = {1, 2, 2};
    a.descriptor_dim = 8;
    return a;
}

template <class T>
std::vector<T> random_patches(int n, int size, std::uint64_t seed, double scale = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, scale);
    std::vector<T> v(static_cast<std::size_t>(n) * size * size);
    for (auto& x : v) x = T(g(rng));
    return v;
}

DescriptorMat random_unit_columns(int dim, int n, std::mt19937_64& rng) {
    std::normal_distribution<float> g;
    DescriptorMat m(dim, n);
    for (int j = 0; j < n; ++j) {
        for (int i = 0; i < dim; ++i) m(i, j) = g(rng);
        m.col(j).normalize();
    }
    return m;
}

const TrainingSet& tiny_dataset() {
    static const TrainingSet ts = [] {
        PhantomSpec spec;
        spec.shape = {64, 64, 3};
        spec.n_structures = 25;
        const auto ph = generate_phantom(spec);
        VariantSetOptions o;
        o.samples_per_combo = 1;
        const auto set = generate_variant_set(ph.renderings, ph.labels, all_modality_combos(), o);
        DetectorConfig det;
        det.border_margin_px = 8;
        return build_training_set(set.reference, set, det, {}, 16);
    }();
    return ts;
}

TrainConfig tiny_train(int epochs) {
    TrainConfig c;
    c.batch_size = 32;
    c.epochs = epochs;
    c.seed = 5;
    return c;
}

}  // namespace

TEST(Net, UnitNormOutputs) {
    DescriptorNet net;
    net.init(1);
    for (double scale : {0.01, 1.0, 100.0}) {
        const auto x = random_patches<float>(6, 64, 2, scale);
        const auto d = net.infer(x, 6);
        ASSERT_EQ(d.rows(), 128);
        for (int j = 0; j < 6; ++j) EXPECT_NEAR(d.col(j).norm(), 1.0f, 1e-5f);
    }
}

TEST(Net, BatchedEqualsSingle) {
    DescriptorNet net;
    net.init(3);
    const auto x = random_patches<float>(2, 64, 4);
    const auto both = net.infer(x, 2);
    for (int j = 0; j < 2; ++j) {
        const auto one = net.infer(std::span(x).subspan(std::size_t(j) * 64 * 64, 64 * 64), 1);
        for (int i = 0; i < both.rows(); ++i) EXPECT_NEAR(both(i, j), one(i, 0), 1e-6);
    }
}

TEST(Net, SharedWeightsGiveIdenticalDescriptors) {
    DescriptorNet net(tiny_arch());
    net.init(3);
    auto x = random_patches<float>(1, 16, 7);
    auto twice = x;
    twice.insert(twice.end(), x.begin(), x.end());
    const auto d = net.infer(twice, 2);
    EXPECT_EQ(d.col(0), d.col(1));
    // A lone patch takes a different GEMM path; agreement is to rounding.
    const auto single = net.infer(x, 1);
    for (int i = 0; i < single.rows(); ++i) EXPECT_NEAR(single(i, 0), d(i, 0), 1e-6f);
}

TEST(Net, WrongInputSizeIsAnError) {
    DescriptorNet net(tiny_arch());
    net.init(1);
    std::vector<float> x(15 * 15);
    EXPECT_THROW(net.infer(x, 1), Error);
}

TEST(Net, DefaultArchitectureShape) {
    const ArchSpec a;
    const auto g = build_geometry(a);
    ASSERT_EQ(g.size(), 7u);
    EXPECT_EQ(g.back().k, 8);
    EXPECT_EQ(g.back().cout, 128);
    EXPECT_EQ(g[5].cout, 128);
}

TEST(TripletLoss, Examples) {
    const std::vector<float> a{0.6f, 0.8f};
    EXPECT_EQ(triplet_loss(a, a, a, 1.0), 1.0);
    EXPECT_EQ(triplet_loss(a, a, std::vector<float>{-0.6f, 0.2f}, 1.0), 0.0);  // |a-n|^2 = 1.8
    EXPECT_EQ(triplet_loss(std::vector<float>{1, 0}, std::vector<float>{0, 1}, std::vector<float>{-1, 0}, 1.0), 0.0);
    EXPECT_EQ(triplet_loss(std::vector<float>{1, 0}, std::vector<float>{0, 1}, std::vector<float>{0, -1}, 1.0), 1.0);
    EXPECT_THROW(triplet_loss(a, a, std::vector<float>{1}, 1.0), Error);
}

TEST(TripletLoss, NonNegativeAndZeroIffSatisfied) {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 200; ++t) {
        const auto m = random_unit_columns(5, 3, rng);
        // Columns of a row-major matrix are strided; copy element by element.
        std::vector<float> a(5), p(5), n(5);
        for (int i = 0; i < 5; ++i) {
            a[i] = m(i, 0);
            p[i] = m(i, 1);
            n[i] = m(i, 2);
        }
        const double l = triplet_loss(a, p, n, 0.5);
        const double dap = (m.col(0) - m.col(1)).squaredNorm(), dan = (m.col(0) - m.col(2)).squaredNorm();
        EXPECT_GE(l, 0.0);
        if (std::abs(dan - dap - 0.5) > 1e-5) EXPECT_EQ(l == 0.0, dan > dap + 0.5);
        EXPECT_NEAR(l, std::max(0.0, dap - dan + 0.5), 1e-5);
    }
}

TEST(Mining, TwoColumns) {
    std::mt19937_64 rng(1);
    const auto a = random_unit_columns(4, 2, rng), p = random_unit_columns(4, 2, rng);
    EXPECT_EQ(mine_hard_negatives(a, p), (std::vector<int>{1, 0}));
    EXPECT_THROW(mine_hard_negatives(a.leftCols(1), p.leftCols(1)), Error);
}

TEST(Mining, NearDuplicateIsChosen) {
    std::mt19937_64 rng(9);
    auto a = random_unit_columns(16, 8, rng);
    auto p = random_unit_columns(16, 8, rng);
    p.col(5) = a.col(2) * 0.999f + p.col(5) * 0.001f;
    p.col(5).normalize();
    const auto neg = mine_hard_negatives(a, p);
    EXPECT_EQ(neg[2], 5);
    EXPECT_EQ(neg, oracle::hardest_negatives(a, p));
    for (int k = 0; k < 8; ++k) EXPECT_NE(neg[k], k);
}

TEST(Mining, TiesGoToLowestIndex) {
    DescriptorMat a = DescriptorMat::Zero(2, 4), p = DescriptorMat::Zero(2, 4);
    a(0, 0) = 1;
    for (int j = 0; j < 4; ++j) p(1, j) = 1;  // all equidistant
    const auto neg = mine_hard_negatives(a, p);
    EXPECT_EQ(neg[0], 1);
    EXPECT_EQ(neg[1], 0);
}

TEST(BatchLoss, InactiveBatchHasZeroGradient) {
    DescriptorMat a(2, 2), p(2, 2);
    a << 1, -1, 0, 0;
    p = a;
    DescriptorMat da, dp;
    const std::vector<int> neg{1, 0};
    EXPECT_EQ(batch_triplet_loss(a, p, neg, 1.0, &da, &dp), 0.0);  // |a-n|^2 = 4
    EXPECT_TRUE(da.isZero(0));
    EXPECT_TRUE(dp.isZero(0));
}

TEST(BatchLoss, MarginShiftOnActiveBatch) {
    std::mt19937_64 rng(4);
    const auto a = random_unit_columns(8, 6, rng), p = random_unit_columns(8, 6, rng);
    const auto neg = mine_hard_negatives(a, p);
    DescriptorMat da1, dp1, da2, dp2;
    const double l1 = batch_triplet_loss(a, p, neg, 5.0, &da1, &dp1);
    const double l2 = batch_triplet_loss(a, p, neg, 10.0, &da2, &dp2);
    EXPECT_NEAR(l2 - l1, 6 * 5.0, 1e-9);
    EXPECT_EQ(da1, da2);
    EXPECT_EQ(dp1, dp2);
}

TEST(GradientCheck, AnalyticMatchesFiniteDifferences) {
    DescriptorNetT<double> net(tiny_arch());
    net.init(11);
    const auto a = random_patches<double>(6, 16, 1), p = random_patches<double>(6, 16, 2);
    EXPECT_LT(gradient_check(net, a, p, 6, 4.0, 50, 3), 1e-3);
}

TEST(Train, ZeroLearningRateKeepsParameters) {
    auto cfg = tiny_train(1);
    cfg.learning_rate = 0.0;
    const auto res = train(tiny_dataset(), cfg, tiny_arch());
    DescriptorNet fresh(tiny_arch());
    fresh.init(derive_seed({cfg.seed, 1}));
    const auto a = res.model.net.parameters();
    const auto b = std::as_const(fresh).parameters();
    ASSERT_EQ(a.size(), b.size());
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
}

TEST(Train, DeterministicAndDescending) {
    const auto& ds = tiny_dataset();
    const auto r1 = train(ds, tiny_train(10), tiny_arch());
    const auto r2 = train(ds, tiny_train(10), tiny_arch());
    EXPECT_EQ(r1.loss_history, r2.loss_history);
    const auto p1 = r1.model.net.parameters(), p2 = r2.model.net.parameters();
    ASSERT_EQ(p1.size(), p2.size());
    for (std::size_t i = 0; i < p1.size(); ++i)
        if (p1[i] != p2[i]) { ADD_FAILURE() << i << " " << p1[i] << " " << p2[i]; break; }
    ASSERT_EQ(r1.loss_history.size(), 10u);
    for (double l : r1.loss_history) EXPECT_TRUE(std::isfinite(l));
    EXPECT_LT(r1.loss_history[9], r1.loss_history[0]);
    EXPECT_EQ(r1.model.norm_stats, ds.norm_stats);
}

TEST(Train, ConfigValidation) {
    TrainConfig c;
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(c.learning_rate, 1e-3);
    EXPECT_EQ(c.batch_size, 256);
    EXPECT_EQ(c.margin, 1.0);
    c.batch_size = 255;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.margin = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Checkpoint, RoundTrip) {
    Model m{DescriptorNet(tiny_arch()), NormStats{0.25, 1.5, 12, false}, 7, 3};
    m.net.init(5);
    TempDir dir;
    save_checkpoint(m, dir / "m.ckpt");
    const auto arch = tiny_arch();
    const auto back = load_checkpoint(dir / "m.ckpt", &arch);
    EXPECT_EQ(back.norm_stats, m.norm_stats);
    EXPECT_EQ(back.seed, 7u);
    EXPECT_EQ(back.epoch, 3);
    const auto x = random_patches<float>(3, 16, 1);
    EXPECT_EQ(back.net.infer(x, 3), m.net.infer(x, 3));
}

TEST(Checkpoint, ArchitectureMismatch) {
    Model m{DescriptorNet(tiny_arch()), {}, 0, 0};
    m.net.init(5);
    TempDir dir;
    save_checkpoint(m, dir / "m.ckpt");
    auto other = tiny_arch();
    other.descriptor_dim = 16;
    EXPECT_THROW(load_checkpoint(dir / "m.ckpt", &other), ConfigError);
    EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), MissingArtifact);
}

TEST(Checkpoint, TamperedDescriptorDimIsRejected) {
    Model m{DescriptorNet(tiny_arch()), {}, 0, 0};
    m.net.init(5);
    TempDir dir;
    save_checkpoint(m, dir / "m.ckpt");
    std::ifstream in(dir / "m.ckpt", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    const auto pos = bytes.find("\"descriptor_dim\":8");
    ASSERT_NE(pos, std::string::npos);
    bytes.replace(pos, 18, "\"descriptor_dim\":9");
    std::ofstream(dir / "bad.ckpt", std::ios::binary) << bytes;
    EXPECT_THROW(load_checkpoint(dir / "bad.ckpt"), FormatError);
}
