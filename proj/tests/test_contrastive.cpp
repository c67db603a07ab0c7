#include "llava_slt/contrastive/losses.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

using namespace slt;
using namespace slt::contrastive;
using slt::testing::random_matrix;

namespace {

Matrix<double> unit_rows(Matrix<double> m) {
    for (Index r = 0; r < m.rows(); ++r) m.row(r).normalize();
    return m;
}

Matrix<double> log_tau(double tau) { return Matrix<double>::Constant(1, 1, std::log(tau)); }

double clip_value(const Matrix<double>& v, const Matrix<double>& t, double tau) {
    Tape<double> tape;
    return clip_loss(tape.constant(v), tape.constant(t), tape.constant(log_tau(tau))).scalar();
}

// Independent recomputation of the SignCL sums.
double signcl_oracle(const Matrix<double>& w, double margin, int offset) {
    double pull = 0, push = 0;
    const Index n = w.rows();
    for (Index i = 0; i + 1 < n; ++i) {
        double d2 = 0;
        for (Index c = 0; c < w.cols(); ++c) d2 += (w(i, c) - w(i + 1, c)) * (w(i, c) - w(i + 1, c));
        pull += std::sqrt(d2);
    }
    for (Index i = 0; i + offset < n; ++i) {
        double d2 = 0;
        for (Index c = 0; c < w.cols(); ++c) d2 += (w(i, c) - w(i + offset, c)) * (w(i, c) - w(i + offset, c));
        push += std::max(0.0, margin - std::sqrt(d2));
    }
    return pull / static_cast<double>(n - 1) + push / static_cast<double>(n - offset);
}

double signcl_value(const Matrix<double>& w, const ContrastiveConfig& cfg) {
    Tape<double> t;
    return signcl_loss(t.constant(w), cfg).loss.scalar();
}

}  // namespace

TEST(Clip, SingleElementBatchIsZero) {
    const Matrix<double> v = unit_rows(random_matrix(1, 4, 1)), t = unit_rows(random_matrix(1, 4, 2));
    EXPECT_EQ(clip_value(v, t, 0.07), 0.0);
}

TEST(Clip, OrthogonalPairClosedForm) {
    const Matrix<double> e = Matrix<double>::Identity(2, 2);
    EXPECT_NEAR(clip_value(e, e, 1.0), -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0)), 1e-12);
    EXPECT_NEAR(clip_value(e, e, 1.0), 0.3133, 5e-5);
}

TEST(Clip, JointPermutationInvariance) {
    const Matrix<double> v = unit_rows(random_matrix(5, 6, 3)), t = unit_rows(random_matrix(5, 6, 4));
    const std::vector<int> perm{2, 4, 0, 1, 3};
    Matrix<double> pv(5, 6), pt(5, 6);
    for (int i = 0; i < 5; ++i) {
        pv.row(i) = v.row(perm[static_cast<std::size_t>(i)]);
        pt.row(i) = t.row(perm[static_cast<std::size_t>(i)]);
    }
    EXPECT_NEAR(clip_value(v, t, 0.1), clip_value(pv, pt, 0.1), 1e-12);
}

TEST(Clip, SwappingMatchesIncreasesLoss) {
    const Matrix<double> e = Matrix<double>::Identity(3, 3);
    Matrix<double> swapped = e;
    swapped.row(0) = e.row(1);
    swapped.row(1) = e.row(0);
    EXPECT_LT(clip_value(e, e, 0.5), clip_value(e, swapped, 0.5));
    EXPECT_GE(clip_value(e, e, 0.5), 0.0);
}

TEST(Clip, NormViolationRejected) {
    Matrix<double> v = unit_rows(random_matrix(2, 3, 5));
    v(1, 0) += 0.01;
    EXPECT_THROW(clip_value(v, unit_rows(random_matrix(2, 3, 6)), 0.07), std::invalid_argument);
    EXPECT_THROW(clip_value(unit_rows(random_matrix(2, 3, 5)), unit_rows(random_matrix(3, 3, 6)), 0.07),
                 std::invalid_argument);
}

TEST(Clip, GradientMatchesFiniteDifferences) {
    // parameters feed the embeddings through a normalisation so rows stay unit-norm
    ParamStore<double> ps;
    ps.add("v", random_matrix(4, 5, 7));
    ps.add("t", random_matrix(4, 5, 8));
    ps.add("log_tau", log_tau(0.3));
    const auto loss = [&](Tape<double>& t) {
        return clip_loss(ops::l2_normalize_rows(t.param(ps.at("v"))), ops::l2_normalize_rows(t.param(ps.at("t"))),
                         t.param(ps.at("log_tau")));
    };
    const auto r = slt::testing::check_params(ps, loss);
    EXPECT_LE(r.max_rel, slt::testing::kFdTol) << r.worst;
}

TEST(Signcl, IdenticalRowsGiveMargin) {
    ContrastiveConfig cfg;
    Matrix<double> w(6, 4);
    w.rowwise() = random_matrix(1, 4, 9).row(0);
    EXPECT_DOUBLE_EQ(signcl_value(w, cfg), cfg.margin);
    cfg.margin = 2.5;
    EXPECT_DOUBLE_EQ(signcl_value(w, cfg), 2.5);
}

TEST(Signcl, SatisfiedHingeLeavesOnlyBoundaryPull) {
    // blocks of identical rows, offset-2 rows 3 apart: every hinge is satisfied
    ContrastiveConfig cfg;
    Matrix<double> w(6, 1);
    w << 0, 0, 3, 3, 6, 6;
    EXPECT_DOUBLE_EQ(signcl_value(w, cfg), (3.0 + 3.0) / 5.0);
    // with m > 0 a zero loss needs equal neighbours and distant offset rows at
    // once, which cannot happen; the minimum over a constant sequence is m
    Matrix<double> c = Matrix<double>::Constant(6, 1, 2.0);
    EXPECT_DOUBLE_EQ(signcl_value(c, cfg), 1.0);
}

TEST(Signcl, MatchesBruteForceOracle) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const Matrix<double> w = random_matrix(6, 4, seed, seed % 2 ? 0.2 : 1.0);
        ContrastiveConfig cfg;
        cfg.margin = 1.0;
        cfg.push_offset = 2;
        EXPECT_NEAR(signcl_value(w, cfg), signcl_oracle(w, 1.0, 2), 1e-12) << seed;
        cfg.push_offset = 3;
        cfg.margin = 1.7;
        EXPECT_NEAR(signcl_value(w, cfg), signcl_oracle(w, 1.7, 3), 1e-12) << seed;
    }
}

TEST(Signcl, ShortSequenceIsSkipped) {
    ContrastiveConfig cfg;
    Tape<double> t;
    const auto r = signcl_loss(t.constant(random_matrix(2, 3, 1)), cfg);
    EXPECT_TRUE(r.skipped);
    EXPECT_EQ(r.loss.scalar(), 0.0);
    EXPECT_FALSE(signcl_loss(t.constant(random_matrix(3, 3, 1)), cfg).skipped);
}

TEST(Signcl, NonNegativeAndMonotoneInPushDistance) {
    ContrastiveConfig cfg;
    Matrix<double> w(3, 1);
    double prev = 1e9;
    for (double d : {0.0, 0.2, 0.5, 0.9, 1.2}) {
        // rows 0 and 2 at distance d, row 1 midway
        w << 0, d / 2, d;
        const double v = signcl_value(w, cfg);
        EXPECT_GE(v, 0.0);
        const double push = std::max(0.0, 1.0 - d);
        EXPECT_NEAR(v - d / 2, push, 1e-12);
        EXPECT_LE(push, prev);
        prev = push;
    }
}

TEST(Signcl, GradientMatchesFiniteDifferences) {
    ContrastiveConfig cfg;
    const auto r = slt::testing::check_input(random_matrix(6, 4, 3, 0.3), [&](Tape<double>&, Var<double> x) {
        return signcl_loss(x, cfg).loss;
    });
    EXPECT_LE(r.max_rel, slt::testing::kFdTol) << r.worst;
}

TEST(TotalLoss, LambdaZeroIsClip) {
    ContrastiveConfig cfg;
    cfg.lambda = 0;
    const Matrix<double> v = unit_rows(random_matrix(3, 4, 1)), tx = unit_rows(random_matrix(3, 4, 2));
    Tape<double> t;
    std::vector<Var<double>> words{t.constant(random_matrix(5, 4, 3)), t.constant(random_matrix(4, 4, 4)),
                                   t.constant(random_matrix(6, 4, 5))};
    const auto r = total_cl_loss(t.constant(v), t.constant(tx), words, t.constant(log_tau(0.07)), cfg);
    EXPECT_EQ(r.total.scalar(), clip_value(v, tx, 0.07));
}

TEST(TotalLoss, SingleSampleComposition) {
    ContrastiveConfig cfg;
    cfg.lambda = 1.0;
    cfg.margin = 1.0;
    Matrix<double> w(5, 3);
    w.rowwise() = random_matrix(1, 3, 2).row(0);
    Tape<double> t;
    const auto r = total_cl_loss(t.constant(unit_rows(random_matrix(1, 3, 3))), t.constant(unit_rows(random_matrix(1, 3, 4))),
                                 {t.constant(w)}, t.constant(log_tau(0.07)), cfg);
    EXPECT_DOUBLE_EQ(r.total.scalar(), 1.0);
    EXPECT_DOUBLE_EQ(ContrastiveConfig{}.lambda, 1e-2);
}

TEST(TotalLoss, MeanOverBatchAndSkips) {
    ContrastiveConfig cfg;
    cfg.lambda = 0.5;
    const Matrix<double> v = unit_rows(random_matrix(3, 4, 1)), tx = unit_rows(random_matrix(3, 4, 2));
    const Matrix<double> a = random_matrix(5, 4, 3), b = random_matrix(6, 4, 5);
    Tape<double> t;
    const auto r = total_cl_loss(t.constant(v), t.constant(tx), {t.constant(a), t.constant(random_matrix(2, 4, 9)), t.constant(b)},
                                 t.constant(log_tau(0.07)), cfg);
    EXPECT_EQ(r.skipped, 1);
    const double expected = clip_value(v, tx, 0.07) + 0.5 * (signcl_oracle(a, 1.0, 2) + signcl_oracle(b, 1.0, 2)) / 2;
    EXPECT_NEAR(r.total.scalar(), expected, 1e-12);
}

TEST(TotalLoss, GradientMatchesFiniteDifferences) {
    ContrastiveConfig cfg;
    cfg.lambda = 0.3;
    ParamStore<double> ps;
    ps.add("v", random_matrix(3, 4, 7));
    ps.add("t", random_matrix(3, 4, 8));
    ps.add("w0", random_matrix(5, 4, 9, 0.3));
    ps.add("w1", random_matrix(4, 4, 10, 0.3));
    ps.add("log_tau", log_tau(0.2));
    const auto loss = [&](Tape<double>& t) {
        return total_cl_loss(ops::l2_normalize_rows(t.param(ps.at("v"))), ops::l2_normalize_rows(t.param(ps.at("t"))),
                             {t.param(ps.at("w0")), t.param(ps.at("w1"))}, t.param(ps.at("log_tau")), cfg)
            .total;
    };
    const auto r = slt::testing::check_params(ps, loss);
    EXPECT_LE(r.max_rel, slt::testing::kFdTol) << r.worst;
}

TEST(TextEncoder, UnitNormAndDeterministic) {
    TextEncoderConfig c;
    c.vocab = 10;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_co = 4;
    c.max_len = 8;
    Rng rng = Rng::derive({1});
    auto e = TextEncoder<double>::init(c, rng);
    Tape<double> t;
    const Matrix<double> a = text_encode(t, e, {1, 2, 3}).value();
    EXPECT_NEAR(a.norm(), 1.0, 1e-6);
    EXPECT_TRUE(a == text_encode(t, e, {1, 2, 3}).value());
    EXPECT_FALSE(a == text_encode(t, e, {3, 2, 1}).value());
    EXPECT_THROW(text_encode(t, e, {}), std::invalid_argument);
    EXPECT_THROW(text_encode(t, e, std::vector<int>(9, 1)), std::invalid_argument);
    c.causal = true;
    auto ec = TextEncoder<double>::init(c, rng);
    EXPECT_NEAR(text_encode(t, ec, {4, 5}).value().norm(), 1.0, 1e-6);
}

TEST(ContrastiveConfig, Validation) {
    ContrastiveConfig c;
    EXPECT_NO_THROW(c.validate());
    c.lambda = -1;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = {};
    c.temperature_init = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = {};
    c.margin = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = {};
    c.push_offset = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
}
