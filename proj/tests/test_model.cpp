#include <gtest/gtest.h>

#include "cos2p/model.hpp"
#include "cos2p/submodel.hpp"
#include "testutil.hpp"

using namespace cos2p;

namespace {

ModelConfig small_cfg() {
    ModelConfig c;
    c.input_dim = 6;
    c.hidden = 8;
    c.heads = 2;
    c.mlp_ratio = 2;
    c.classes = 3;
    c.blocks = 2;
    return c;
}

}  // namespace

TEST(Layout, SegmentRangesPartitionParameterSpace) {
    ModelLayout L(small_cfg());
    std::vector<int> hits(L.n_params, 0);
    for (const auto& s : L.segments)
        for (const auto& r : s.ranges)
            for (size_t i = r.offset; i < r.offset + r.length; ++i) hits[i]++;
    for (size_t i = 0; i < L.n_params; ++i) ASSERT_EQ(hits[i], 1) << "param " << i;
}

TEST(Layout, SegmentSizesAndKinds) {
    ModelConfig c = small_cfg();
    ModelLayout L(c);
    // 2 blocks * (2 heads + bias_o + 4 fc1 groups + 2 fc2 groups) + embed + 2 classifiers
    EXPECT_EQ(L.n_segments(), 2 * (2 + 1 + 4 + 2) + 1 + 2);
    const Segment& head = L.segments[L.layer_segments(0, SegKind::MsaHead)[1]];
    EXPECT_EQ(head.matrix_entries, 4 * c.head_dim() * c.hidden);
    EXPECT_EQ(head.size, 4 * c.head_dim() * c.hidden + 3 * c.head_dim());
}

TEST(Forward, IdentityMaskMatchesUnmasked) {
    ModelConfig c = small_cfg();
    ModelLayout L(c);
    auto params = init_params(L, 5);
    Rng rng(9);
    Tensor x{4, c.input_dim};
    for (auto& v : x.data) v = rng.normal();

    const DepthWindow win = DepthWindow::full(c.blocks);
    std::map<size_t, ClassifierRef> heads{{c.blocks, classifier_ref(L, params.data(), c.blocks)}};

    ForwardCache plain;
    forward(L, params.data(), x, win, heads, plain);

    std::map<size_t, BlockMaskState> ones;
    for (size_t b = 0; b < c.blocks; ++b) ones.emplace(b, init_importance(c, 20.0));
    for (auto& [b, s] : ones) {
        std::fill(s.msa.bits.begin(), s.msa.bits.end(), 1);
        std::fill(s.fc1.bits.begin(), s.fc1.bits.end(), 1);
        std::fill(s.fc2.bits.begin(), s.fc2.bits.end(), 1);
    }
    auto view = build_submodel(L, params, win, ones);
    ForwardCache masked;
    forward(L, view.data(), x, win, heads, masked);

    for (size_t i = 0; i < plain.logits.at(c.blocks).size(); ++i)
        EXPECT_EQ(plain.logits.at(c.blocks).data[i], masked.logits.at(c.blocks).data[i]);
}

// All segments masked out: the block reduces to x + bias_o, so the logits
// equal classifier(embed(x) + bo), evaluated directly on a 1-block model.
TEST(Forward, AllZeroWidthMaskLeavesEmbeddingPath) {
    ModelConfig c;
    c.input_dim = 3;
    c.hidden = 4;
    c.heads = 2;
    c.mlp_ratio = 2;
    c.classes = 3;
    c.blocks = 1;
    ModelLayout L(c);
    auto params = init_params(L, 17);
    for (size_t i = 0; i < c.hidden; ++i) params[L.block[0].bo + i] = 0.3 * (i + 1);
    Rng rng(2);
    Tensor x{2, c.input_dim};
    for (auto& v : x.data) v = rng.normal();

    std::map<size_t, BlockMaskState> zeros;
    zeros.emplace(0, init_importance(c, -20.0));
    for (auto* lm : {&zeros.at(0).msa, &zeros.at(0).fc1, &zeros.at(0).fc2})
        std::fill(lm->bits.begin(), lm->bits.end(), 0);

    const DepthWindow win = DepthWindow::full(1);
    auto view = build_submodel(L, params, win, zeros);
    std::map<size_t, ClassifierRef> heads{{1, classifier_ref(L, params.data(), 1)}};
    ForwardCache cache;
    forward(L, view.data(), x, win, heads, cache);

    Tensor emb;
    linear_forward(x, params.data() + L.embed_w, params.data() + L.embed_b, c.hidden,
                   c.input_dim, emb);
    for (size_t i = 0; i < 2; ++i)
        for (size_t k = 0; k < c.hidden; ++k) emb.at(i, k) += params[L.block[0].bo + k];
    Tensor expect;
    auto head = classifier_ref(L, params.data(), 1);
    linear_forward(emb, head.w, head.b, c.classes, c.hidden, expect);

    for (size_t i = 0; i < expect.size(); ++i)
        EXPECT_NEAR(cache.logits.at(1).data[i], expect.data[i], 1e-12);
}

// Window [2,6) on L=8: classifiers at depths <= 6 can emit, and blocks 6,7
// are never read (poisoned weights stay inert).
TEST(Forward, PrunedBlocksNeverTouched) {
    ModelConfig c = small_cfg();
    c.blocks = 8;
    ModelLayout L(c);
    auto params = init_params(L, 3);
    const DepthWindow win{2, 6, 8};
    for (size_t b = 6; b < 8; ++b) {
        const auto& o = L.block[b];
        for (size_t i = o.wq; i < o.b2 + c.hidden; ++i)
            params[i] = std::numeric_limits<double>::quiet_NaN();
    }
    Rng rng(4);
    Tensor x{3, c.input_dim};
    for (auto& v : x.data) v = rng.normal();

    std::map<size_t, ClassifierRef> heads;
    for (size_t d = 1; d <= 6; ++d) heads[d] = classifier_ref(L, params.data(), d);
    ForwardCache cache;
    forward(L, params.data(), x, win, heads, cache);
    EXPECT_EQ(cache.logits.size(), 6u);
    for (const auto& [d, z] : cache.logits) EXPECT_TRUE(z.finite()) << "depth " << d;

    auto exit_above_window = [&] {
        std::map<size_t, ClassifierRef> bad{{7, classifier_ref(L, params.data(), 7)}};
        ForwardCache c2;
        forward(L, params.data(), x, win, bad, c2);
    };
    EXPECT_THROW(exit_above_window(), std::runtime_error);
}

TEST(Backward, ZeroLossGradientGivesZeroGradStore) {
    ModelConfig c = small_cfg();
    ModelLayout L(c);
    auto params = init_params(L, 5);
    Rng rng(1);
    Tensor x{2, c.input_dim};
    for (auto& v : x.data) v = rng.normal();
    const DepthWindow win = DepthWindow::full(c.blocks);
    auto head = classifier_ref(L, params.data(), c.blocks);
    std::map<size_t, ClassifierRef> heads{{c.blocks, head}};
    ForwardCache cache;
    forward(L, params.data(), x, win, heads, cache);

    Tensor dz{2, c.classes};  // all zeros
    std::vector<double> grad;
    std::map<size_t, ExitGrad> eg{{c.blocks, {head, &dz, nullptr, nullptr}}};
    backward(L, params.data(), cache, eg, grad);
    for (double g : grad) ASSERT_EQ(g, 0.0);
}

TEST(Backward, FrozenBlockParametersGetExactlyZeroGradient) {
    ModelConfig c = small_cfg();
    c.blocks = 4;
    testutil::Scenario s(c, 123, 3, DepthWindow{2, 4, 4}, false);
    auto grad = s.analytic_grad();
    for (size_t i = 0; i < s.layout.n_params; ++i)
        if (s.param_in_frozen[i]) ASSERT_EQ(grad[i], 0.0) << "param " << i;
}

TEST(Backward, FiniteDifferenceFullWindow) {
    ModelConfig c = small_cfg();
    testutil::Scenario s(c, 77, 3, DepthWindow::full(c.blocks), false);
    EXPECT_LE(testutil::max_grad_err(s), 1e-4);
}

TEST(Backward, FiniteDifferenceMaskedAndRolled) {
    ModelConfig c = small_cfg();
    c.blocks = 3;
    testutil::Scenario s(c, 78, 3, DepthWindow{1, 3, 3}, true);
    EXPECT_LE(testutil::max_grad_err(s), 1e-4);
}

// Masked-zero property: perturbing a masked-out segment's weights leaves the
// logits bit-identical.
TEST(Forward, MaskedSegmentPerturbationInvisible) {
    ModelConfig c = small_cfg();
    ModelLayout L(c);
    auto params = init_params(L, 21);
    const DepthWindow win = DepthWindow::full(c.blocks);
    std::map<size_t, BlockMaskState> masks;
    auto st = init_importance(c);
    st.msa.bits = {1, 0};
    st.fc1.bits = {1, 0, 1, 0};
    st.fc2.bits = {0, 1};
    masks.emplace(1, st);

    Rng rng(8);
    Tensor x{2, c.input_dim};
    for (auto& v : x.data) v = rng.normal();
    std::map<size_t, ClassifierRef> heads{{c.blocks, classifier_ref(L, params.data(), c.blocks)}};

    auto run = [&](const std::vector<double>& p) {
        auto view = build_submodel(L, p, win, masks);
        ForwardCache cache;
        std::map<size_t, ClassifierRef> h{{c.blocks, classifier_ref(L, p.data(), c.blocks)}};
        forward(L, view.data(), x, win, h, cache);
        return cache.logits.at(c.blocks);
    };
    const Tensor base = run(params);

    auto poke = params;
    const auto& seg = L.segment(L.layer_segments(1, SegKind::MsaHead)[1]);
    for (const auto& r : seg.ranges)
        for (size_t i = r.offset; i < r.offset + r.length; ++i) poke[i] += 123.0;
    const Tensor after = run(poke);
    for (size_t i = 0; i < base.size(); ++i) ASSERT_EQ(base.data[i], after.data[i]);
}

TEST(Sgd, StepAndMomentum) {
    double w = 1.0, g = 2.0;
    sgd_step(&w, &g, 1, 0.1);
    EXPECT_DOUBLE_EQ(w, 0.8);

    // g = 0 leaves parameters unchanged.
    double w2 = 3.0, g2 = 0.0;
    sgd_step(&w2, &g2, 1, 0.5);
    EXPECT_DOUBLE_EQ(w2, 3.0);

    // Two zero-momentum steps equal one step with summed gradients.
    double a = 1.0, ga1 = 0.3, ga2 = -0.7;
    sgd_step(&a, &ga1, 1, 0.1);
    sgd_step(&a, &ga2, 1, 0.1);
    double b = 1.0, gsum = 0.3 - 0.7;
    sgd_step(&b, &gsum, 1, 0.1);
    EXPECT_NEAR(a, b, 1e-15);

    EXPECT_THROW(sgd_step(&w, &g, 1, 0.0), std::runtime_error);
}

TEST(Forward, DeterministicAcrossRuns) {
    ModelConfig c = small_cfg();
    testutil::Scenario s1(c, 99, 4, DepthWindow::full(c.blocks), true);
    testutil::Scenario s2(c, 99, 4, DepthWindow::full(c.blocks), true);
    EXPECT_EQ(s1.loss(), s2.loss());
    EXPECT_EQ(s1.analytic_grad(), s2.analytic_grad());
}
