#include <gtest/gtest.h>

#include "cos2p/loss.hpp"
#include "cos2p/rng.hpp"
#include "testutil.hpp"

using namespace cos2p;

TEST(CeLoss, CertainPredictionIsZero) {
    Tensor z{1, 3};
    z.data = {100.0, 0.0, 0.0};
    EXPECT_NEAR(ce_loss(z, {0}).value, 0.0, 1e-12);
}

TEST(CeLoss, UniformLogitsGiveLnC) {
    for (size_t C : {2u, 5u, 10u}) {
        Tensor z{1, C};
        EXPECT_NEAR(ce_loss(z, {1}).value, std::log(static_cast<double>(C)), 1e-12);
    }
}

TEST(CeLoss, TwoClassExample) {
    Tensor z{1, 2};
    z.data = {2.0, 0.0};
    EXPECT_NEAR(ce_loss(z, {0}).value, std::log(1.0 + std::exp(-2.0)), 1e-12);
}

TEST(CeLoss, RejectsBadLabels) {
    Tensor z{1, 2};
    EXPECT_THROW(ce_loss(z, {2}), std::runtime_error);
    EXPECT_THROW(ce_loss(z, {-1}), std::runtime_error);
}

TEST(CeLoss, GradientMatchesFiniteDifference) {
    Rng rng(5);
    Tensor z{3, 4};
    for (auto& v : z.data) v = rng.normal();
    std::vector<int> y{1, 3, 0};
    LossGrad lg = ce_loss(z, y);
    for (size_t i = 0; i < z.size(); ++i) {
        const double fd =
            testutil::central_diff([&] { return ce_loss(z, y).value; }, z.data[i]);
        EXPECT_LE(testutil::rel_err(lg.dlogits.data[i], fd), 1e-6);
    }
}

TEST(KlDistill, MatchesHandComputedExample) {
    // student (0,0), teacher (2,0), t=1:
    // 0.5 ln(0.5/0.8808) + 0.5 ln(0.5/0.1192) ~= 0.4338
    Tensor zs{1, 2}, zt{1, 2};
    zt.data = {2.0, 0.0};
    const double e2 = std::exp(2.0);
    const double q0 = e2 / (e2 + 1.0), q1 = 1.0 / (e2 + 1.0);
    const double expect = 0.5 * std::log(0.5 / q0) + 0.5 * std::log(0.5 / q1);
    EXPECT_NEAR(kl_distill(zs, zt, 1.0).value, expect, 1e-12);
    EXPECT_NEAR(kl_distill(zs, zt, 1.0).value, 0.4338, 5e-5);
}

TEST(KlDistill, NonNegativeAndZeroIffEqual) {
    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor zs{2, 5}, zt{2, 5};
        for (auto& v : zs.data) v = rng.normal(0, 3);
        for (auto& v : zt.data) v = rng.normal(0, 3);
        EXPECT_GE(kl_distill(zs, zt, 2.0).value, 0.0);
    }
    Tensor z{2, 5};
    for (auto& v : z.data) v = rng.normal();
    EXPECT_NEAR(kl_distill(z, z, 3.0).value, 0.0, 1e-12);
}

TEST(KlDistill, TemperatureMustBePositive) {
    Tensor z{1, 2};
    EXPECT_THROW(kl_distill(z, z, 0.0), std::runtime_error);
    EXPECT_THROW(kl_distill(z, z, -1.0), std::runtime_error);
}

TEST(KlDistill, StudentGradientMatchesFiniteDifference) {
    Rng rng(7);
    for (bool reverse : {false, true}) {
        Tensor zs{2, 4}, zt{2, 4};
        for (auto& v : zs.data) v = rng.normal();
        for (auto& v : zt.data) v = rng.normal();
        LossGrad lg = kl_distill(zs, zt, 3.0, reverse);
        for (size_t i = 0; i < zs.size(); ++i) {
            const double fd = testutil::central_diff(
                [&] { return kl_distill(zs, zt, 3.0, reverse).value; }, zs.data[i]);
            EXPECT_LE(testutil::rel_err(lg.dlogits.data[i], fd), 1e-5) << "reverse=" << reverse;
        }
    }
}

TEST(SelfDistill, EqualLogitsReduceToPureCe) {
    Rng rng(8);
    Tensor z{3, 4};
    for (auto& v : z.data) v = rng.normal();
    std::vector<int> y{0, 2, 1};
    const double lambda2 = 0.3;
    DistillResult r = self_distill_loss({&z, &z, &z}, y, lambda2, 2.0);
    EXPECT_NEAR(r.value, 3.0 * (1.0 - lambda2) * ce_loss(z, y).value, 1e-12);
}

TEST(SelfDistill, SingleExitIsScaledCe) {
    Rng rng(9);
    Tensor z{2, 5};
    for (auto& v : z.data) v = rng.normal();
    std::vector<int> y{4, 2};
    DistillResult r = self_distill_loss({&z}, y, 0.2, 3.0);
    EXPECT_NEAR(r.value, 0.8 * ce_loss(z, y).value, 1e-12);
}

// Teacher logits are detached: the teacher's dlogits carry only its CE term.
TEST(SelfDistill, TeacherDetached) {
    Rng rng(10);
    Tensor zs{2, 4}, zt{2, 4};
    for (auto& v : zs.data) v = rng.normal();
    for (auto& v : zt.data) v = rng.normal();
    std::vector<int> y{1, 3};
    const double lambda2 = 0.4;
    DistillResult r = self_distill_loss({&zs, &zt}, y, lambda2, 2.0);
    LossGrad tce = ce_loss(zt, y);
    for (size_t i = 0; i < zt.size(); ++i)
        EXPECT_NEAR(r.dlogits[1].data[i], (1.0 - lambda2) * tce.dlogits.data[i], 1e-15);
}

TEST(SelfDistill, CompositeGradientMatchesFiniteDifference) {
    Rng rng(11);
    Tensor z1{2, 4}, z2{2, 4};
    for (auto& v : z1.data) v = rng.normal();
    for (auto& v : z2.data) v = rng.normal();
    std::vector<int> y{0, 3};
    DistillResult r = self_distill_loss({&z1, &z2}, y, 0.2, 3.0);
    // Student entries: the full live value.
    auto value = [&] { return self_distill_loss({&z1, &z2}, y, 0.2, 3.0).value; };
    for (size_t i = 0; i < z1.size(); ++i) {
        const double fd = testutil::central_diff(value, z1.data[i]);
        EXPECT_LE(testutil::rel_err(r.dlogits[0].data[i], fd), 1e-5);
    }
    // Teacher entries: its targets are detached, so the oracle freezes the
    // KL's second argument at the base point.
    const Tensor frozen = z2;
    auto detached = [&] {
        return 0.8 * (ce_loss(z1, y).value + ce_loss(z2, y).value) +
               0.2 * kl_distill(z1, frozen, 3.0).value;
    };
    for (size_t i = 0; i < z2.size(); ++i) {
        const double fd = testutil::central_diff(detached, z2.data[i]);
        EXPECT_LE(testutil::rel_err(r.dlogits[1].data[i], fd), 1e-5);
    }
}
