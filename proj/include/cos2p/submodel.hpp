// Depth-rolling window construction and coverage: which global segments a
// client's update actually trained.
#pragma once

#include <map>
#include <vector>

#include "cos2p/mask.hpp"
#include "cos2p/model.hpp"

namespace cos2p {

// Rolling window: the frozen prefix advances one block per round, offset per
// client, so every block enters some trainable range over L - w + 1 rounds.
inline DepthWindow depth_window(size_t client, size_t round, size_t L, double r_depth,
                                size_t stride = 1) {
    require(L >= 1 && r_depth > 0.0 && r_depth <= 1.0, "depth_window: bad arguments");
    const size_t w = static_cast<size_t>(std::floor(static_cast<double>(L) * r_depth));
    require(w >= 1, "depth_window: r_depth too small for L");
    const size_t period = L - w + 1;
    const size_t s = (client * stride + round) % period;
    return DepthWindow{s, s + w, L};
}

// Per-segment coverage bits of one client round: maskable segments of the
// trainable range that the width mask keeps, the attention output bias of
// trainable blocks, the embedding when block 0 is trainable, and the global
// classifier copies at the window's exit depths.
struct CoverageMask {
    std::vector<uint8_t> bits;  // indexed by segment id

    bool covered(size_t seg) const { return bits[seg] != 0; }
    size_t count() const {
        size_t n = 0;
        for (uint8_t b : bits) n += b;
        return n;
    }
};

inline CoverageMask coverage_for(const ModelLayout& L, const DepthWindow& win,
                                 const std::map<size_t, BlockMaskState>& masks,
                                 const std::vector<size_t>& exit_depths) {
    CoverageMask cov;
    cov.bits.assign(L.n_segments(), 0);
    if (win.frozen_end == 0) cov.bits[L.embed_segment()] = 1;
    for (size_t b = win.frozen_end; b < win.train_end; ++b) {
        cov.bits[L.bias_segment(b)] = 1;
        auto it = masks.find(b);
        for (SegKind kind : {SegKind::MsaHead, SegKind::Fc1Group, SegKind::Fc2Group}) {
            const auto& segs = L.layer_segments(b, kind);
            for (size_t j = 0; j < segs.size(); ++j) {
                const bool kept = it == masks.end() || it->second.layer(kind).bits[j] != 0;
                cov.bits[segs[j]] = kept ? 1 : 0;
            }
        }
    }
    for (size_t depth : exit_depths) cov.bits[L.classifier_segment(depth)] = 1;
    return cov;
}

// One round's report from a client: accumulated gradient per covered segment,
// in gradient units (weight change divided by the client learning rate).
struct ClientUpdate {
    size_t client = 0;
    size_t base_round = 0;  // global version the client trained on
    CoverageMask coverage;
    std::vector<size_t> segments;            // covered segment ids, ascending
    std::vector<std::vector<double>> delta;  // per segment, range order
};

// Materialized client view of the global weights: frozen + trainable blocks
// carry the latest values, masked segments are zeroed. Pruned blocks are
// never read by forward(); the view keeps their storage untouched.
inline std::vector<double> build_submodel(const ModelLayout& L, const std::vector<double>& global,
                                          const DepthWindow& win,
                                          const std::map<size_t, BlockMaskState>& masks) {
    require(global.size() == L.n_params, "build_submodel: param size mismatch");
    std::vector<double> view = global;
    for (size_t b = win.frozen_end; b < win.train_end; ++b) {
        auto it = masks.find(b);
        if (it != masks.end()) apply_mask(L, b, it->second, view.data());
    }
    return view;
}

}  // namespace cos2p
