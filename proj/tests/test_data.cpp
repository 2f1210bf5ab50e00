#include <gtest/gtest.h>

#include <filesystem>

#include "cos2p/dataset.hpp"

using namespace cos2p;

namespace {

// Closed-form nearest-mean classifier (isotropic clusters): fit class means
// on one half, score the other.
double lda_accuracy(const LabeledDataset& d) {
    const size_t n = d.size(), half = n / 2;
    std::vector<std::vector<double>> mean(d.classes, std::vector<double>(d.dim(), 0.0));
    std::vector<size_t> cnt(d.classes, 0);
    for (size_t i = 0; i < half; ++i) {
        for (size_t k = 0; k < d.dim(); ++k) mean[d.labels[i]][k] += d.features.at(i, k);
        cnt[d.labels[i]]++;
    }
    for (size_t c = 0; c < d.classes; ++c)
        for (auto& v : mean[c]) v /= std::max<size_t>(1, cnt[c]);
    size_t hit = 0;
    for (size_t i = half; i < n; ++i) {
        double best = 1e300;
        int arg = 0;
        for (size_t c = 0; c < d.classes; ++c) {
            double dist = 0.0;
            for (size_t k = 0; k < d.dim(); ++k) {
                const double t = d.features.at(i, k) - mean[c][k];
                dist += t * t;
            }
            if (dist < best) {
                best = dist;
                arg = static_cast<int>(c);
            }
        }
        if (arg == d.labels[i]) ++hit;
    }
    return static_cast<double>(hit) / static_cast<double>(n - half);
}

}  // namespace

TEST(GenSynthetic, DeterministicAndShaped) {
    LabeledDataset a = gen_synthetic(4, 8, 25, 3.0, 9);
    LabeledDataset b = gen_synthetic(4, 8, 25, 3.0, 9);
    EXPECT_EQ(a.features.data, b.features.data);
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_EQ(a.size(), 100u);
    EXPECT_EQ(a.dim(), 8u);
    EXPECT_THROW(gen_synthetic(1, 8, 10, 1.0, 0), std::runtime_error);
    EXPECT_THROW(gen_synthetic(3, 0, 10, 1.0, 0), std::runtime_error);
}

TEST(GenSynthetic, ZeroSeparationIsChance) {
    // Indistinguishable classes: a linear probe sits at 1/C give or take.
    // Classes are laid out contiguously, so interleave before the half split.
    LabeledDataset d = gen_synthetic(4, 16, 250, 0.0, 31);
    std::vector<size_t> inter;
    for (size_t i = 0; i < 250; ++i)
        for (size_t c = 0; c < 4; ++c) inter.push_back(c * 250 + i);
    EXPECT_NEAR(lda_accuracy(d.subset(inter)), 0.25, 0.05);
}

TEST(GenSynthetic, WideSeparationIsLinearlySeparable) {
    LabeledDataset d = gen_synthetic(5, 16, 100, 10.0, 12);
    std::vector<size_t> inter;
    for (size_t i = 0; i < 100; ++i)
        for (size_t c = 0; c < 5; ++c) inter.push_back(c * 100 + i);
    EXPECT_GE(lda_accuracy(d.subset(inter)), 0.95);
}

TEST(Dirichlet, PartitionCompleteAndDisjoint) {
    for (double alpha : {0.1, 1.5, 100.0}) {
        LabeledDataset d = gen_synthetic(5, 4, 60, 2.0, 7);
        auto shards = dirichlet_partition(d.labels, 6, alpha, 21);
        std::vector<int> seen(d.size(), 0);
        size_t total = 0;
        for (const auto& s : shards) {
            total += s.size();
            for (size_t i : s) seen[i]++;
        }
        EXPECT_EQ(total, d.size());
        for (int v : seen) ASSERT_EQ(v, 1);
    }
}

TEST(Dirichlet, HighAlphaIsNearUniform) {
    LabeledDataset d = gen_synthetic(4, 4, 400, 2.0, 8);
    auto shards = dirichlet_partition(d.labels, 4, 1e6, 22);
    for (const auto& s : shards) {
        std::vector<double> frac(4, 0.0);
        for (size_t i : s) frac[d.labels[i]] += 1.0;
        for (auto& f : frac) f /= static_cast<double>(s.size());
        for (double f : frac) EXPECT_NEAR(f, 0.25, 0.05);
    }
}

// alpha = 0.1 is strongly skewed: over 20 seeds, most runs put > 60% of some
// client's mass on a single class.
TEST(Dirichlet, LowAlphaSkews) {
    LabeledDataset d = gen_synthetic(5, 4, 100, 2.0, 9);
    size_t skewed_runs = 0;
    for (uint64_t seed = 0; seed < 20; ++seed) {
        auto shards = dirichlet_partition(d.labels, 5, 0.1, seed);
        bool found = false;
        for (const auto& s : shards) {
            if (s.empty()) continue;
            std::vector<double> frac(5, 0.0);
            for (size_t i : s) frac[d.labels[i]] += 1.0;
            for (double f : frac) found = found || f / s.size() > 0.6;
        }
        skewed_runs += found;
    }
    EXPECT_GE(skewed_runs, 15u);
}

TEST(Dirichlet, RejectsBadArguments) {
    std::vector<int> labels{0, 1, 0, 1};
    EXPECT_THROW(dirichlet_partition(labels, 2, 0.0, 1), std::runtime_error);
    EXPECT_THROW(dirichlet_partition(labels, 0, 1.0, 1), std::runtime_error);
}

TEST(Evaluate, PerfectAndConstantPredictors) {
    const size_t C = 4, n = 40;
    Tensor perfect{n, C};
    std::vector<int> labels(n);
    for (size_t i = 0; i < n; ++i) {
        labels[i] = static_cast<int>(i % C);
        perfect.at(i, labels[i]) = 10.0;
    }
    Metrics m = evaluate_logits(perfect, labels, C);
    EXPECT_DOUBLE_EQ(m.top1, 1.0);
    EXPECT_DOUBLE_EQ(m.top5, 1.0);
    EXPECT_DOUBLE_EQ(m.macro_f1, 1.0);

    // Constant predictor on a balanced 4-class set: top1 = 0.25, macro-F1 =
    // F1 of the predicted class / 4 = 0.4 / 4 = 0.1.
    Tensor constant{n, C};
    for (size_t i = 0; i < n; ++i) constant.at(i, 2) = 5.0;
    Metrics mc = evaluate_logits(constant, labels, C);
    EXPECT_DOUBLE_EQ(mc.top1, 0.25);
    EXPECT_DOUBLE_EQ(mc.macro_f1, 0.1);
}

TEST(Evaluate, TopKClippedToClassCount) {
    const size_t C = 3, n = 12;
    Tensor z{n, C};
    std::vector<int> labels(n);
    Rng rng(5);
    for (size_t i = 0; i < n; ++i) {
        labels[i] = static_cast<int>(rng.below(C));
        for (size_t k = 0; k < C; ++k) z.at(i, k) = rng.normal();
    }
    EXPECT_DOUBLE_EQ(evaluate_logits(z, labels, C).top5, 1.0);
}

// Macro-F1 equals a brute-force confusion-matrix computation on random data.
TEST(Evaluate, MacroF1MatchesBruteForce) {
    Rng rng(6);
    for (int trial = 0; trial < 25; ++trial) {
        const size_t C = 2 + rng.below(5), n = 30 + rng.below(40);
        Tensor z{n, C};
        std::vector<int> labels(n);
        for (size_t i = 0; i < n; ++i) {
            labels[i] = static_cast<int>(rng.below(C));
            for (size_t k = 0; k < C; ++k) z.at(i, k) = rng.normal();
        }
        Metrics m = evaluate_logits(z, labels, C);

        std::vector<std::vector<size_t>> conf(C, std::vector<size_t>(C, 0));
        for (size_t i = 0; i < n; ++i) {
            size_t arg = 0;
            for (size_t k = 1; k < C; ++k)
                if (z.at(i, k) > z.at(i, arg)) arg = k;
            conf[labels[i]][arg]++;
        }
        double f1 = 0.0;
        for (size_t c = 0; c < C; ++c) {
            size_t tp = conf[c][c], fp = 0, fn = 0;
            for (size_t o = 0; o < C; ++o) {
                if (o != c) {
                    fp += conf[o][c];
                    fn += conf[c][o];
                }
            }
            const double denom = static_cast<double>(2 * tp + fp + fn);
            f1 += denom > 0 ? 2.0 * tp / denom : 0.0;
        }
        EXPECT_NEAR(m.macro_f1, f1 / C, 1e-12);
        for (double v : {m.top1, m.top5, m.macro_f1}) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
    }
}

TEST(ClientAverage, WeightedExamples) {
    std::vector<Metrics> ms(2);
    ms[0].top1 = 0.0;
    ms[1].top1 = 1.0;
    EXPECT_DOUBLE_EQ(client_average(ms, {1, 3}).top1, 0.75);
    EXPECT_DOUBLE_EQ(client_average(ms, {2, 2}).top1, 0.5);
    EXPECT_DOUBLE_EQ(client_average({ms[1]}, {5}).top1, 1.0);
    EXPECT_THROW(client_average(ms, {0, 1}), std::runtime_error);
}

TEST(DatasetDir, SaveLoadRoundTrip) {
    LabeledDataset d = gen_synthetic(3, 6, 15, 2.0, 44);
    const auto dir = std::filesystem::temp_directory_path() / "cos2p_ds_test";
    std::filesystem::remove_all(dir);
    save_dataset(d, dir);
    LabeledDataset r = load_dataset(dir);
    EXPECT_EQ(r.features.data, d.features.data);
    EXPECT_EQ(r.labels, d.labels);
    EXPECT_EQ(r.classes, d.classes);
    std::filesystem::remove_all(dir);
}
