#include "llava_slt/visual/encoder.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <numeric>

using namespace slt;
using namespace slt::visual;
using slt::testing::random_matrix;

namespace {

VisualConfig toy_config() {
    VisualConfig c;
    c.d_raw = 6;
    c.d_model = 8;
    c.n_heads = 2;
    c.local_depth = 2;
    c.full_depth = 1;
    c.window = 2;
    c.step = 4;
    c.d_co = 4;
    c.max_words = 32;
    return c;
}

VisualEncoder<double> toy_encoder(std::uint64_t seed, VisualConfig c = toy_config()) {
    Rng rng = Rng::derive({seed});
    return VisualEncoder<double>::init(c, rng);
}

}  // namespace

TEST(LocalMask, TridiagonalBand) {
    const auto m = local_attention_mask(5, 1);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) EXPECT_EQ(m(i, j), std::abs(i - j) <= 1) << i << "," << j;
}

TEST(LocalMask, WideWindowIsFull) {
    EXPECT_TRUE(local_attention_mask(6, 5).all());
    EXPECT_TRUE(local_attention_mask(6, 50).all());
    EXPECT_FALSE(local_attention_mask(6, 4).all());
}

TEST(LocalMask, RowSums) {
    for (int T : {1, 2, 7, 20})
        for (int w : {1, 2, 3, 8}) {
            const auto m = local_attention_mask(T, w);
            for (int i = 0; i < T; ++i)
                EXPECT_EQ(m.row(i).count(), std::min(i, w) + std::min(T - 1 - i, w) + 1) << T << " " << w << " " << i;
        }
}

TEST(Rotary, KnownRotation) {
    Matrix<double> q(2, 2), k = Matrix<double>::Zero(2, 2);
    q << 1, 0, 1, 0;
    const std::vector<int> pos{0, 1};
    const auto [rq, rk] = rotary_apply(q, k, 2, std::span<const int>(pos));
    EXPECT_DOUBLE_EQ(rq(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(rq(0, 1), 0.0);
    EXPECT_NEAR(rq(1, 0), std::cos(1.0), 1e-15);
    EXPECT_NEAR(rq(1, 1), std::sin(1.0), 1e-15);
    EXPECT_NEAR(rq(1, 0), 0.5403, 1e-4);
    EXPECT_NEAR(rq(1, 1), 0.8415, 1e-4);
}

TEST(Rotary, ShiftInvariantLogits) {
    const Matrix<double> q = random_matrix(9, 8, 1), k = random_matrix(9, 8, 2);
    std::vector<int> pos(9);
    std::iota(pos.begin(), pos.end(), 0);
    const auto [q0, k0] = rotary_apply(q, k, 4, std::span<const int>(pos));
    for (int delta : {1, 7, 123, 5000}) {
        std::vector<int> shifted = pos;
        for (auto& p : shifted) p += delta;
        const auto [q1, k1] = rotary_apply(q, k, 4, std::span<const int>(shifted));
        for (int h = 0; h < 2; ++h) {
            const Matrix<double> a = q0.middleCols(h * 4, 4) * k0.middleCols(h * 4, 4).transpose();
            const Matrix<double> b = q1.middleCols(h * 4, 4) * k1.middleCols(h * 4, 4).transpose();
            EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-6) << delta;
        }
    }
}

TEST(Rotary, OddHeadWidthRejected) {
    const Matrix<double> q = random_matrix(2, 3, 1);
    const std::vector<int> pos{0, 1};
    EXPECT_THROW(rotary_apply(q, q, 3, std::span<const int>(pos)), std::invalid_argument);
}

TEST(Rotary, InverseUndoesRotation) {
    Matrix<double> q = random_matrix(5, 4, 3);
    const Matrix<double> orig = q;
    const std::vector<int> pos{3, 1, 4, 1, 5};
    rotate_heads(q, 4, std::span<const int>(pos));
    rotate_heads(q, 4, std::span<const int>(pos), kRotaryBase, true);
    EXPECT_LE((q - orig).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Downsample, LengthLaw) {
    for (int T = 1; T <= 100; ++T)
        for (int s : {1, 2, 4, 8}) {
            const auto idx = downsample_indices(T, s);
            ASSERT_EQ(static_cast<int>(idx.size()), (T + s - 1) / s) << T << " " << s;
            for (std::size_t j = 0; j < idx.size(); ++j) ASSERT_EQ(idx[j], std::min(static_cast<int>(j) * s, T - 1));
        }
}

TEST(Downsample, Examples) {
    EXPECT_EQ(downsample_indices(8, 4), (std::vector<int>{0, 4}));
    EXPECT_EQ(downsample_indices(10, 4), (std::vector<int>{0, 4, 8}));
    EXPECT_EQ(downsample_indices(16, 4).size(), 4u);
    EXPECT_EQ(downsample_indices(17, 4), (std::vector<int>{0, 4, 8, 12, 16}));
    const Matrix<double> x = random_matrix(7, 3, 4);
    EXPECT_TRUE(nn_downsample(x, 1) == x);
    const Matrix<double> y = nn_downsample(x, 4);
    EXPECT_TRUE(y.row(1) == x.row(4));
    EXPECT_THROW(downsample_indices(5, 0), std::invalid_argument);
}

TEST(FrameEncoder, RowwiseUnderPermutation) {
    auto e = toy_encoder(1);
    const Matrix<double> x = random_matrix(6, 6, 5);
    std::vector<int> perm{3, 0, 5, 1, 4, 2};
    Matrix<double> px(6, 6);
    for (int i = 0; i < 6; ++i) px.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
    Tape<double> t;
    const Matrix<double> a = frame_encode(t, e, t.constant(x)).value();
    const Matrix<double> b = frame_encode(t, e, t.constant(px)).value();
    for (int i = 0; i < 6; ++i) EXPECT_LE((b.row(i) - a.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(FrameEncoder, ZeroInZeroOut) {
    auto e = toy_encoder(2);
    Tape<double> t;
    EXPECT_TRUE(frame_encode(t, e, t.constant(Matrix<double>::Zero(3, 6))).value().isZero(0.0));
}

TEST(FrameEncoder, WidthMismatch) {
    auto e = toy_encoder(2);
    Tape<double> t;
    EXPECT_THROW(frame_encode(t, e, t.constant(Matrix<double>::Zero(3, 5))), std::invalid_argument);
    EXPECT_THROW(frame_encode(t, e, t.constant(Matrix<double>::Zero(0, 6))), std::invalid_argument);
}

TEST(FrameEncoder, JacobianMatchesFiniteDifferences) {
    VisualConfig c = toy_config();
    c.d_raw = 4;
    auto e = toy_encoder(3, c);
    const Matrix<double> w = random_matrix(8, 1, 11);
    const auto r = slt::testing::check_input(random_matrix(3, 4, 6), [&](Tape<double>& t, Var<double> x) {
        return ops::sum(ops::matmul(frame_encode(t, e, x), t.constant(w)));
    });
    EXPECT_LE(r.max_rel, slt::testing::kFdTol) << r.worst;
}

TEST(WordEncoder, ReceptiveFieldIsExact) {
    auto e = toy_encoder(4);
    const int T = 24, reach = e.cfg.local_depth * e.cfg.window;
    const Matrix<double> x = random_matrix(T, 8, 7);
    Tape<double> t;
    const Matrix<double> base = word_encode_full_rate(t, e, t.constant(x)).value();
    for (int j : {0, 5, 12, 23}) {
        Matrix<double> y = x;
        y.row(j) += random_matrix(1, 8, 50 + static_cast<std::uint64_t>(j));
        const Matrix<double> out = word_encode_full_rate(t, e, t.constant(y)).value();
        for (int i = 0; i < T; ++i) {
            if (std::abs(i - j) > reach)
                EXPECT_TRUE(out.row(i) == base.row(i)) << "i=" << i << " j=" << j;
            else
                EXPECT_FALSE(out.row(i) == base.row(i)) << "i=" << i << " j=" << j;
        }
    }
}

TEST(WordEncoder, OutputLength) {
    auto e = toy_encoder(4);
    Tape<double> t;
    EXPECT_EQ(word_encode(t, e, t.constant(random_matrix(16, 8, 1))).rows(), 4);
    const Var<double> full = word_encode_full_rate(t, e, t.constant(random_matrix(17, 8, 2)));
    const Var<double> w = nn_downsample(full, 4);
    ASSERT_EQ(w.rows(), 5);
    EXPECT_TRUE(w.value().row(4) == full.value().row(16));
}

TEST(SentenceEncoder, UnitNorm) {
    auto e = toy_encoder(5);
    for (int n : {1, 2, 5, 13}) {
        Tape<double> t;
        const auto v = sentence_encode(t, e, t.constant(random_matrix(n, 8, static_cast<std::uint64_t>(n))));
        ASSERT_EQ(v.cols(), 4);
        EXPECT_NEAR(v.value().norm(), 1.0, 1e-6);
        EXPECT_TRUE(v.value().allFinite());
    }
    auto ef = e.cast<float>();
    Tape<float> tf;
    EXPECT_NEAR(sentence_encode(tf, ef, tf.constant(random_matrix(6, 8, 9).cast<float>())).value().norm(), 1.0f, 1e-6f);
}

TEST(SentenceEncoder, WordOrderMatters) {
    auto e = toy_encoder(6);
    const Matrix<double> w = random_matrix(5, 8, 3);
    Matrix<double> rev = w.colwise().reverse();
    Tape<double> t;
    const Matrix<double> a = sentence_encode(t, e, t.constant(w)).value();
    const Matrix<double> b = sentence_encode(t, e, t.constant(rev)).value();
    EXPECT_GT((a - b).norm(), 1e-6);
}

TEST(SentenceEncoder, TooManyWordsRejected) {
    auto e = toy_encoder(6);
    Tape<double> t;
    EXPECT_THROW(sentence_encode(t, e, t.constant(random_matrix(33, 8, 3))), std::invalid_argument);
}

TEST(VisualChain, GradientMatchesFiniteDifferences) {
    auto e = toy_encoder(7);
    const Matrix<double> frames = random_matrix(9, 6, 8);
    const Matrix<double> probe = random_matrix(1, 4, 9);
    const auto loss = [&](Tape<double>& t) {
        const auto out = encode(t, e, t.constant(frames));
        // touch both outputs so every parameter group is exercised
        Var<double> s = ops::sum(ops::mul_scalar(out.sentence, t.constant(Matrix<double>::Ones(1, 1))));
        Var<double> a = ops::matmul_nt(out.sentence, t.constant(probe));
        Var<double> b = ops::sum(ops::mul_scalar(ops::gelu(out.words), t.constant(Matrix<double>::Constant(1, 1, 0.1))));
        return ops::add(ops::add(a, b), ops::scale(s, 0.5));
    };
    const auto r = slt::testing::check_params(e.params, loss);
    EXPECT_LE(r.max_rel, slt::testing::kFdTol) << r.worst;
    const auto ri = slt::testing::check_input(frames, [&](Tape<double>& t, Var<double> x) {
        const auto out = encode(t, e, x);
        return ops::matmul_nt(out.sentence, t.constant(probe));
    });
    EXPECT_LE(ri.max_rel, slt::testing::kFdTol) << ri.worst;
}

TEST(VisualConfig, Validation) {
    VisualConfig c = toy_config();
    c.window = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = toy_config();
    c.step = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = toy_config();
    c.full_depth = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = toy_config();
    c.d_model = 6;
    c.n_heads = 2;  // head width 3 is odd
    EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(FrameEncoder, CoarseInputUsesStridedColumns) {
    VisualConfig c = toy_config();
    c.raw_stride = 2;
    c.frame_hidden = 4;
    auto e = toy_encoder(9, c);
    EXPECT_EQ(e.params.at("frame.fc1.w").value.rows(), 3);
    EXPECT_EQ(e.params.at("frame.fc1.w").value.cols(), 4);
    Matrix<double> x = random_matrix(2, 6, 3), y = x;
    y.col(1).setConstant(9);  // odd columns are not read
    Tape<double> t;
    EXPECT_TRUE(frame_encode(t, e, t.constant(x)).value() == frame_encode(t, e, t.constant(y)).value());
}
