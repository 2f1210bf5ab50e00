// Synthetic data, Dirichlet non-IID partitioning, and evaluation metrics.
#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <vector>

#include <nlohmann/json.hpp>

#include "cos2p/rng.hpp"
#include "cos2p/tensor.hpp"

namespace cos2p {

struct LabeledDataset {
    Tensor features;          // (n, dim)
    std::vector<int> labels;  // values in [0, classes)
    size_t classes = 0;

    size_t size() const { return labels.size(); }
    size_t dim() const { return features.cols(); }

    LabeledDataset subset(const std::vector<size_t>& idx) const {
        LabeledDataset out;
        out.classes = classes;
        out.features = Tensor{idx.size(), dim()};
        out.labels.resize(idx.size());
        for (size_t i = 0; i < idx.size(); ++i) {
            std::copy(features.row(idx[i]), features.row(idx[i]) + dim(), out.features.row(i));
            out.labels[i] = labels[idx[i]];
        }
        return out;
    }
};

// Gaussian clusters: class c sits at separation * u_c with unit covariance.
// Directions are orthonormalized when the dimension allows.
inline LabeledDataset gen_synthetic(size_t classes, size_t dim, size_t n_per_class,
                                    double separation, uint64_t seed) {
    require(classes >= 2, "gen_synthetic: need at least two classes");
    require(dim >= 1, "gen_synthetic: dim must be >= 1");
    Rng rng(seed);
    std::vector<std::vector<double>> centers(classes, std::vector<double>(dim));
    for (size_t c = 0; c < classes; ++c) {
        auto& u = centers[c];
        for (double& v : u) v = rng.normal();
        for (size_t p = 0; p < c && p < dim; ++p) {  // Gram-Schmidt while it fits
            double dot = 0.0;
            for (size_t k = 0; k < dim; ++k) dot += u[k] * centers[p][k];
            for (size_t k = 0; k < dim; ++k) u[k] -= dot * centers[p][k];
        }
        double norm = 0.0;
        for (double v : u) norm += v * v;
        norm = std::sqrt(std::max(norm, 1e-12));
        for (double& v : u) v = v / norm;
    }
    LabeledDataset d;
    d.classes = classes;
    d.features = Tensor{classes * n_per_class, dim};
    d.labels.resize(classes * n_per_class);
    size_t row = 0;
    for (size_t c = 0; c < classes; ++c) {
        for (size_t i = 0; i < n_per_class; ++i, ++row) {
            double* x = d.features.row(row);
            for (size_t k = 0; k < dim; ++k) x[k] = separation * centers[c][k] + rng.normal();
            d.labels[row] = static_cast<int>(c);
        }
    }
    return d;
}

// Per class, proportions ~ Dir(alpha * 1_N); samples are assigned to clients
// by largest-remainder counts over a seeded shuffle. Shards partition the
// dataset. An empty shard triggers one reseeded retry, then an error.
inline std::vector<std::vector<size_t>> dirichlet_partition(const std::vector<int>& labels,
                                                            size_t n_clients, double alpha,
                                                            uint64_t seed) {
    require(alpha > 0.0, "dirichlet_partition: alpha must be positive");
    require(n_clients >= 1, "dirichlet_partition: need at least one client");
    int classes = 0;
    for (int y : labels) classes = std::max(classes, y + 1);

    auto attempt = [&](uint64_t s) {
        Rng rng(s);
        std::vector<std::vector<size_t>> shards(n_clients);
        for (int c = 0; c < classes; ++c) {
            std::vector<size_t> idx;
            for (size_t i = 0; i < labels.size(); ++i)
                if (labels[i] == c) idx.push_back(i);
            if (idx.empty()) continue;
            rng.shuffle(idx);
            std::vector<double> prop(n_clients);
            double total = 0.0;
            for (double& p : prop) {
                p = rng.gamma(alpha);
                total += p;
            }
            for (double& p : prop) p /= total;
            // Largest-remainder rounding so counts sum exactly to |idx|.
            std::vector<size_t> cnt(n_clients);
            std::vector<std::pair<double, size_t>> rem(n_clients);
            size_t assigned = 0;
            for (size_t n = 0; n < n_clients; ++n) {
                const double exact = prop[n] * static_cast<double>(idx.size());
                cnt[n] = static_cast<size_t>(std::floor(exact));
                rem[n] = {exact - std::floor(exact), n};
                assigned += cnt[n];
            }
            std::stable_sort(rem.begin(), rem.end(),
                             [](const auto& a, const auto& b) { return a.first > b.first; });
            for (size_t k = 0; assigned < idx.size(); ++k, ++assigned) cnt[rem[k].second]++;
            size_t pos = 0;
            for (size_t n = 0; n < n_clients; ++n)
                for (size_t k = 0; k < cnt[n]; ++k) shards[n].push_back(idx[pos++]);
        }
        return shards;
    };

    auto shards = attempt(seed);
    auto empty = [](const std::vector<std::vector<size_t>>& s) {
        return std::any_of(s.begin(), s.end(), [](const auto& v) { return v.empty(); });
    };
    if (empty(shards)) shards = attempt(splitmix64(seed ^ 0x5eedULL));
    require(!empty(shards), "dirichlet_partition: a client received zero samples");
    for (auto& s : shards) std::sort(s.begin(), s.end());
    return shards;
}

struct Metrics {
    double top1 = 0.0;
    double top5 = 0.0;
    double macro_f1 = 0.0;
};

// Top-k accuracy (k clipped to the class count, ties to the lower index) and
// macro-F1 with empty classes scored 0.
inline Metrics evaluate_logits(const Tensor& logits, const std::vector<int>& labels,
                               size_t classes) {
    const size_t n = labels.size();
    require(n > 0, "evaluate: empty test set");
    const size_t k5 = std::min<size_t>(5, classes);
    size_t hit1 = 0, hit5 = 0;
    std::vector<size_t> tp(classes, 0), fp(classes, 0), fn(classes, 0);
    std::vector<size_t> order(classes);
    for (size_t i = 0; i < n; ++i) {
        const double* z = logits.row(i);
        std::iota(order.begin(), order.end(), size_t{0});
        std::stable_sort(order.begin(), order.end(),
                         [&](size_t a, size_t b) { return z[a] > z[b]; });
        const int y = labels[i];
        const int pred = static_cast<int>(order[0]);
        if (pred == y) {
            ++hit1;
            ++tp[y];
        } else {
            ++fp[pred];
            ++fn[y];
        }
        for (size_t k = 0; k < k5; ++k)
            if (static_cast<int>(order[k]) == y) {
                ++hit5;
                break;
            }
    }
    Metrics m;
    m.top1 = static_cast<double>(hit1) / static_cast<double>(n);
    m.top5 = static_cast<double>(hit5) / static_cast<double>(n);
    double f1_sum = 0.0;
    for (size_t c = 0; c < classes; ++c) {
        const double denom = static_cast<double>(2 * tp[c] + fp[c] + fn[c]);
        f1_sum += denom > 0.0 ? 2.0 * static_cast<double>(tp[c]) / denom : 0.0;
    }
    m.macro_f1 = f1_sum / static_cast<double>(classes);
    return m;
}

// Dataset-size weighted average of per-client metrics.
inline Metrics client_average(const std::vector<Metrics>& per_client,
                              const std::vector<size_t>& sizes) {
    require(per_client.size() == sizes.size() && !sizes.empty(), "client_average: bad input");
    double total = 0.0;
    Metrics avg;
    for (size_t i = 0; i < sizes.size(); ++i) {
        require(sizes[i] > 0, "client_average: sizes must be positive");
        const double w = static_cast<double>(sizes[i]);
        avg.top1 += w * per_client[i].top1;
        avg.top5 += w * per_client[i].top5;
        avg.macro_f1 += w * per_client[i].macro_f1;
        total += w;
    }
    avg.top1 /= total;
    avg.top5 /= total;
    avg.macro_f1 /= total;
    return avg;
}

// On-disk dataset directory: features.f64 (raw little-endian doubles),
// labels.u32, manifest.json with {"n", "dim", "classes"}.
inline void save_dataset(const LabeledDataset& d, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream f(dir / "features.f64", std::ios::binary);
        f.write(reinterpret_cast<const char*>(d.features.data.data()),
                static_cast<std::streamsize>(d.features.data.size() * sizeof(double)));
    }
    {
        std::ofstream f(dir / "labels.u32", std::ios::binary);
        for (int y : d.labels) {
            const uint32_t v = static_cast<uint32_t>(y);
            f.write(reinterpret_cast<const char*>(&v), sizeof(v));
        }
    }
    nlohmann::json manifest{{"n", d.size()}, {"dim", d.dim()}, {"classes", d.classes}};
    std::ofstream f(dir / "manifest.json");
    f << manifest.dump(2) << "\n";
}

inline LabeledDataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    require(mf.good(), "load_dataset: missing manifest.json in " + dir.string());
    nlohmann::json manifest = nlohmann::json::parse(mf);
    LabeledDataset d;
    const size_t n = manifest.at("n").get<size_t>();
    const size_t dim = manifest.at("dim").get<size_t>();
    d.classes = manifest.at("classes").get<size_t>();
    d.features = Tensor{n, dim};
    {
        std::ifstream f(dir / "features.f64", std::ios::binary);
        require(f.good(), "load_dataset: missing features.f64");
        f.read(reinterpret_cast<char*>(d.features.data.data()),
               static_cast<std::streamsize>(n * dim * sizeof(double)));
        require(static_cast<size_t>(f.gcount()) == n * dim * sizeof(double),
                "load_dataset: features.f64 truncated");
    }
    {
        std::ifstream f(dir / "labels.u32", std::ios::binary);
        require(f.good(), "load_dataset: missing labels.u32");
        d.labels.resize(n);
        for (size_t i = 0; i < n; ++i) {
            uint32_t v = 0;
            f.read(reinterpret_cast<char*>(&v), sizeof(v));
            d.labels[i] = static_cast<int>(v);
        }
        require(f.good(), "load_dataset: labels.u32 truncated");
    }
    return d;
}

}  // namespace cos2p
