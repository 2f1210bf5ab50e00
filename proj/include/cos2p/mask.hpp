// Trainable segment-wise width masks: real importance I, probability
// P = sigmoid(I), Bernoulli-sampled binary M, and its block-row extension to
// the weight matrices. Gradients reach I through a straight-through estimator.
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "cos2p/model.hpp"
#include "cos2p/rng.hpp"

namespace cos2p {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

enum class MaskPolicy { Threshold, TopK };

struct LayerMask {
    SegKind kind = SegKind::MsaHead;
    std::vector<double> imp;     // I, one entry per segment
    std::vector<double> prob;    // P = sigmoid(I), kept in lockstep with I
    std::vector<uint8_t> bits;   // sampled or frozen M

    size_t segments() const { return imp.size(); }

    void init(SegKind k, size_t n, double init_value) {
        kind = k;
        imp.assign(n, init_value);
        prob.assign(n, sigmoid(init_value));
        bits.assign(n, 1);
    }

    void sample(Rng& rng) {
        for (size_t j = 0; j < prob.size(); ++j) bits[j] = rng.bernoulli(prob[j]) ? 1 : 0;
    }

    void set_importance(size_t j, double v) {
        imp[j] = v;
        prob[j] = sigmoid(v);
    }
};

// Mask state of one block: its three maskable layers.
struct BlockMaskState {
    LayerMask msa, fc1, fc2;
    bool frozen = false;
    bool trained = false;  // received at least one mask-phase update

    LayerMask& layer(SegKind k) { return k == SegKind::MsaHead ? msa : (k == SegKind::Fc1Group ? fc1 : fc2); }
    const LayerMask& layer(SegKind k) const {
        return k == SegKind::MsaHead ? msa : (k == SegKind::Fc1Group ? fc1 : fc2);
    }
};

inline BlockMaskState init_importance(const ModelConfig& cfg, double init_value = 0.0) {
    BlockMaskState s;
    s.msa.init(SegKind::MsaHead, cfg.heads, init_value);
    s.fc1.init(SegKind::Fc1Group, cfg.mlp_hidden() / cfg.group(), init_value);
    s.fc2.init(SegKind::Fc2Group, cfg.hidden / cfg.group(), init_value);
    return s;
}

inline void sample_binary(BlockMaskState& s, Rng& rng) {
    s.msa.sample(rng);
    s.fc1.sample(rng);
    s.fc2.sample(rng);
}

struct MaskBudget {
    double r_width = 1.0;
    double lambda1 = 1.0;

    void validate() const {
        require(r_width > 0.0 && r_width <= 1.0, "mask budget: r_width must be in (0,1]");
        require(lambda1 >= 0.0, "mask budget: lambda1 must be >= 0");
    }
};

// Explicit binary matrix extension of M, one tensor per weight matrix of the
// layer. Row-group j of a linear layer is all-ones iff M_j = 1; for attention
// the q/k/v row slices and the (input-major) output slice of head j follow M_j.
inline std::vector<Tensor> extend_mask(const std::vector<uint8_t>& m, SegKind kind,
                                       const ModelConfig& cfg) {
    const size_t d = cfg.hidden, g = cfg.group(), dh = cfg.head_dim(), mm = cfg.mlp_hidden();
    auto rowmask = [](const std::vector<uint8_t>& bits, size_t rows_per, size_t d_out,
                      size_t d_in) {
        Tensor t{d_out, d_in};
        for (size_t j = 0; j < bits.size(); ++j) {
            if (!bits[j]) continue;
            std::fill(t.data.begin() + j * rows_per * d_in,
                      t.data.begin() + (j + 1) * rows_per * d_in, 1.0);
        }
        return t;
    };
    switch (kind) {
        case SegKind::MsaHead:
            require(m.size() == cfg.heads, "extend_mask: descriptor mismatch");
            return {rowmask(m, dh, d, d), rowmask(m, dh, d, d), rowmask(m, dh, d, d),
                    rowmask(m, dh, d, d)};  // q, k, v, o (input-major)
        case SegKind::Fc1Group:
            require(m.size() == mm / g, "extend_mask: descriptor mismatch");
            return {rowmask(m, g, mm, d)};
        case SegKind::Fc2Group:
            require(m.size() == d / g, "extend_mask: descriptor mismatch");
            return {rowmask(m, g, d, mm)};
        default:
            throw std::runtime_error("extend_mask: layer is not maskable");
    }
}

// Inverse of extend_mask; every segment's entries must agree.
inline std::vector<uint8_t> collapse_mask(const std::vector<Tensor>& mhat, SegKind kind,
                                          const ModelConfig& cfg) {
    const size_t n = kind == SegKind::MsaHead ? cfg.heads
                     : kind == SegKind::Fc1Group ? cfg.mlp_hidden() / cfg.group()
                                                 : cfg.hidden / cfg.group();
    std::vector<uint8_t> m(n, 0);
    const size_t rows_per = kind == SegKind::MsaHead ? cfg.head_dim() : cfg.group();
    for (size_t j = 0; j < n; ++j) {
        const double v = mhat[0].data[j * rows_per * mhat[0].cols()];
        for (const auto& t : mhat) {
            for (size_t r = j * rows_per; r < (j + 1) * rows_per; ++r)
                for (size_t c = 0; c < t.cols(); ++c)
                    require(t.at(r, c) == v, "collapse_mask: non-uniform segment");
        }
        m[j] = v != 0.0 ? 1 : 0;
    }
    return m;
}

// Keep-ratio over a set of layer masks, counted in weight-matrix entries
// (matching the matrix extension; bias entries follow their segment but are
// not part of the budget ratio).
struct KeepRatio {
    double kept = 0.0;
    double total = 0.0;
    double ratio() const { return total > 0.0 ? kept / total : 0.0; }
};

inline void accumulate_ratio(const ModelLayout& L, size_t block, const LayerMask& lm,
                             bool expected, KeepRatio& acc) {
    const auto& segs = L.layer_segments(block, lm.kind);
    for (size_t j = 0; j < segs.size(); ++j) {
        const double e = static_cast<double>(L.segment(segs[j]).matrix_entries);
        acc.kept += e * (expected ? lm.prob[j] : static_cast<double>(lm.bits[j]));
        acc.total += e;
    }
}

struct BudgetPenalty {
    double value = 0.0;
    double sign = 0.0;           // subgradient direction
    double total_entries = 0.0;  // matrix entries across the layer set
};

// Eq-style budget term |keep_ratio - r_width|; per-entry subgradient is
// sign / total_entries, so the per-segment collapsed gradient is
// sign * matrix_entries(segment) / total_entries.
inline BudgetPenalty budget_penalty(double keep_ratio, double total_entries, double r_width) {
    require(total_entries > 0.0, "budget_penalty: empty layer set");
    BudgetPenalty p;
    const double diff = keep_ratio - r_width;
    p.value = std::fabs(diff);
    p.sign = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
    p.total_entries = total_entries;
    return p;
}

// Straight-through step: the binary sample passes the collapsed gradient
// through unchanged, then the sigmoid derivative maps it onto I.
inline double ste_backward(double collapsed_grad, double p) {
    return collapsed_grad * p * (1.0 - p);
}

// Collapse a flat weight-space gradient onto one segment: sum over the
// segment's entries of grad * base weight (the relaxation d w_tilde / d m).
inline double collapse_segment_grad(const Segment& seg, const double* grad,
                                    const double* base) {
    double acc = 0.0;
    for (const auto& r : seg.ranges)
        for (size_t i = r.offset; i < r.offset + r.length; ++i) acc += grad[i] * base[i];
    return acc;
}

// Final binary mask for one layer. Threshold keeps P >= 0.5; topk keeps
// exactly ceil(r_width * n) highest-P segments, ties to the lower index.
inline std::vector<uint8_t> freeze_mask(const std::vector<double>& prob, MaskPolicy policy,
                                        double r_width) {
    const size_t n = prob.size();
    std::vector<uint8_t> m(n, 0);
    if (policy == MaskPolicy::Threshold) {
        for (size_t j = 0; j < n; ++j) m[j] = prob[j] >= 0.5 ? 1 : 0;
        return m;
    }
    const size_t k = std::min(n, static_cast<size_t>(std::ceil(r_width * static_cast<double>(n))));
    std::vector<size_t> idx(n);
    for (size_t j = 0; j < n; ++j) idx[j] = j;
    std::stable_sort(idx.begin(), idx.end(),
                     [&](size_t a, size_t b) { return prob[a] > prob[b]; });
    for (size_t j = 0; j < k; ++j) m[idx[j]] = 1;
    return m;
}

inline void freeze_state(BlockMaskState& s, MaskPolicy policy, double r_width) {
    s.msa.bits = freeze_mask(s.msa.prob, policy, r_width);
    s.fc1.bits = freeze_mask(s.fc1.prob, policy, r_width);
    s.fc2.bits = freeze_mask(s.fc2.prob, policy, r_width);
    s.frozen = true;
}

// Zero every range of masked-out segments (bias slices included): the masked
// weights contribute exactly zero downstream, which is what the zero-padded
// residual of a structurally pruned block computes.
inline void apply_mask(const ModelLayout& L, size_t block, const BlockMaskState& s,
                       double* params) {
    for (SegKind kind : {SegKind::MsaHead, SegKind::Fc1Group, SegKind::Fc2Group}) {
        const LayerMask& lm = s.layer(kind);
        const auto& segs = L.layer_segments(block, kind);
        for (size_t j = 0; j < segs.size(); ++j) {
            if (lm.bits[j]) continue;
            for (const auto& r : L.segment(segs[j]).ranges)
                std::fill(params + r.offset, params + r.offset + r.length, 0.0);
        }
    }
}

// Restore the window's maskable segments from the base copy (undo apply_mask).
inline void restore_masked(const ModelLayout& L, size_t block, const double* base,
                           double* params) {
    for (SegKind kind : {SegKind::MsaHead, SegKind::Fc1Group, SegKind::Fc2Group}) {
        const auto& segs = L.layer_segments(block, kind);
        for (size_t id : segs)
            for (const auto& r : L.segment(id).ranges)
                std::copy(base + r.offset, base + r.offset + r.length, params + r.offset);
    }
}

}  // namespace cos2p
