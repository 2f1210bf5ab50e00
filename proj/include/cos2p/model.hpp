// Block-structured model: linear embedding, L residual blocks (multi-head
// self-attention + MLP), one linear classifier per depth. Parameters live in
// one flat vector partitioned into named segments, the unit of masking,
// scoring and aggregation.
#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "cos2p/rng.hpp"
#include "cos2p/tensor.hpp"

namespace cos2p {

struct ModelConfig {
    size_t input_dim = 32;
    size_t hidden = 32;     // d
    size_t heads = 4;       // h
    size_t mlp_ratio = 4;
    size_t classes = 10;    // C
    size_t blocks = 4;      // L
    size_t group_size = 0;  // linear-layer segment width; 0 means hidden/heads

    size_t head_dim() const { return hidden / heads; }
    size_t mlp_hidden() const { return mlp_ratio * hidden; }
    size_t group() const { return group_size ? group_size : hidden / heads; }

    void validate() const {
        require(blocks >= 1, "model: blocks must be >= 1");
        require(heads >= 1 && hidden % heads == 0, "model: hidden must be divisible by heads");
        require(classes >= 2, "model: classes must be >= 2");
        require(input_dim >= 1 && mlp_ratio >= 1, "model: bad dims");
        require(mlp_hidden() % group() == 0 && hidden % group() == 0,
                "model: group_size must divide every linear output dim");
    }
};

enum class SegKind { Embed, MsaHead, MsaBias, Fc1Group, Fc2Group, Classifier };

struct ParamRange {
    size_t offset = 0;
    size_t length = 0;
};

struct Segment {
    std::string name;
    std::string layer;  // manifest layer id, e.g. "block3.msa"
    int block = -1;     // -1 for embed / classifiers
    int index = 0;      // head or group index; classifier depth
    SegKind kind = SegKind::Embed;
    bool maskable = false;
    std::vector<ParamRange> ranges;
    size_t size = 0;            // total parameter count
    size_t matrix_entries = 0;  // entries counted by the width-budget ratio
};

struct BlockOffsets {
    size_t wq, bq, wk, bk, wv, bv, wo_t, bo, w1, b1, w2, b2;
};

// Trainable-depth window: blocks [0,s) frozen, [s,e) trainable, [e,L) pruned.
struct DepthWindow {
    size_t frozen_end = 0;  // s
    size_t train_end = 0;   // s + w
    size_t depth = 0;       // L

    size_t width() const { return train_end - frozen_end; }
    bool trainable(size_t b) const { return b >= frozen_end && b < train_end; }
    bool pruned(size_t b) const { return b >= train_end; }

    static DepthWindow full(size_t L) { return DepthWindow{0, L, L}; }
};

class ModelLayout {
public:
    ModelConfig cfg;
    size_t embed_w = 0, embed_b = 0;
    std::vector<BlockOffsets> block;
    std::vector<size_t> clf;  // clf[k-1]: offset of depth-k classifier (W then b)
    size_t n_params = 0;
    std::vector<Segment> segments;

    ModelLayout() = default;

    explicit ModelLayout(const ModelConfig& c) : cfg(c) {
        cfg.validate();
        const size_t d = cfg.hidden, in = cfg.input_dim, m = cfg.mlp_hidden();
        const size_t C = cfg.classes, L = cfg.blocks;
        size_t off = 0;
        auto take = [&off](size_t n) {
            size_t o = off;
            off += n;
            return o;
        };
        embed_w = take(d * in);
        embed_b = take(d);
        block.resize(L);
        for (size_t b = 0; b < L; ++b) {
            auto& o = block[b];
            o.wq = take(d * d);
            o.bq = take(d);
            o.wk = take(d * d);
            o.bk = take(d);
            o.wv = take(d * d);
            o.bv = take(d);
            o.wo_t = take(d * d);  // stored input-major so head slices are contiguous rows
            o.bo = take(d);
            o.w1 = take(m * d);
            o.b1 = take(m);
            o.w2 = take(d * m);
            o.b2 = take(d);
        }
        clf.resize(L);
        for (size_t k = 0; k < L; ++k) clf[k] = take(C * d + C);
        n_params = off;
        build_segments();
    }

    size_t clf_params() const { return cfg.classes * cfg.hidden + cfg.classes; }

    const Segment& segment(size_t id) const { return segments[id]; }
    size_t n_segments() const { return segments.size(); }

    int segment_id(const std::string& name) const {
        auto it = by_name_.find(name);
        return it == by_name_.end() ? -1 : static_cast<int>(it->second);
    }

    // Segment ids of one maskable layer of a block, ordered by segment index.
    const std::vector<size_t>& layer_segments(size_t b, SegKind kind) const {
        switch (kind) {
            case SegKind::MsaHead: return msa_segs_[b];
            case SegKind::Fc1Group: return fc1_segs_[b];
            default: return fc2_segs_[b];
        }
    }

    size_t embed_segment() const { return embed_seg_; }
    size_t bias_segment(size_t b) const { return bias_segs_[b]; }
    size_t classifier_segment(size_t depth) const { return clf_segs_[depth - 1]; }

    // Segments matching "trainable block b" coverage (maskable layers + bo).
    std::vector<size_t> block_segments(size_t b) const {
        std::vector<size_t> out(msa_segs_[b]);
        out.push_back(bias_segs_[b]);
        out.insert(out.end(), fc1_segs_[b].begin(), fc1_segs_[b].end());
        out.insert(out.end(), fc2_segs_[b].begin(), fc2_segs_[b].end());
        return out;
    }

private:
    std::unordered_map<std::string, size_t> by_name_;
    std::vector<std::vector<size_t>> msa_segs_, fc1_segs_, fc2_segs_;
    std::vector<size_t> bias_segs_, clf_segs_;
    size_t embed_seg_ = 0;

    size_t add_segment(Segment s) {
        s.size = 0;
        for (const auto& r : s.ranges) s.size += r.length;
        by_name_[s.name] = segments.size();
        segments.push_back(std::move(s));
        return segments.size() - 1;
    }

    void build_segments() {
        const size_t d = cfg.hidden, in = cfg.input_dim, m = cfg.mlp_hidden();
        const size_t dh = cfg.head_dim(), g = cfg.group(), L = cfg.blocks;

        embed_seg_ = add_segment({"embed", "embed", -1, 0, SegKind::Embed, false,
                                  {{embed_w, d * in + d}}, 0, 0});

        msa_segs_.resize(L);
        fc1_segs_.resize(L);
        fc2_segs_.resize(L);
        bias_segs_.resize(L);
        for (size_t b = 0; b < L; ++b) {
            const auto& o = block[b];
            const std::string pre = "block" + std::to_string(b);
            for (size_t j = 0; j < cfg.heads; ++j) {
                Segment s;
                s.name = pre + ".msa.head" + std::to_string(j);
                s.layer = pre + ".msa";
                s.block = static_cast<int>(b);
                s.index = static_cast<int>(j);
                s.kind = SegKind::MsaHead;
                s.maskable = true;
                s.ranges = {{o.wq + j * dh * d, dh * d}, {o.bq + j * dh, dh},
                            {o.wk + j * dh * d, dh * d}, {o.bk + j * dh, dh},
                            {o.wv + j * dh * d, dh * d}, {o.bv + j * dh, dh},
                            {o.wo_t + j * dh * d, dh * d}};
                s.matrix_entries = 4 * dh * d;
                msa_segs_[b].push_back(add_segment(std::move(s)));
            }
            bias_segs_[b] = add_segment({pre + ".msa.bias_o", pre + ".msa", static_cast<int>(b),
                                         0, SegKind::MsaBias, false, {{o.bo, d}}, 0, 0});
            for (size_t j = 0; j < m / g; ++j) {
                Segment s;
                s.name = pre + ".fc1.g" + std::to_string(j);
                s.layer = pre + ".fc1";
                s.block = static_cast<int>(b);
                s.index = static_cast<int>(j);
                s.kind = SegKind::Fc1Group;
                s.maskable = true;
                s.ranges = {{o.w1 + j * g * d, g * d}, {o.b1 + j * g, g}};
                s.matrix_entries = g * d;
                fc1_segs_[b].push_back(add_segment(std::move(s)));
            }
            for (size_t j = 0; j < d / g; ++j) {
                Segment s;
                s.name = pre + ".fc2.g" + std::to_string(j);
                s.layer = pre + ".fc2";
                s.block = static_cast<int>(b);
                s.index = static_cast<int>(j);
                s.kind = SegKind::Fc2Group;
                s.maskable = true;
                s.ranges = {{o.w2 + j * g * m, g * m}, {o.b2 + j * g, g}};
                s.matrix_entries = g * m;
                fc2_segs_[b].push_back(add_segment(std::move(s)));
            }
        }
        clf_segs_.resize(L);
        for (size_t k = 1; k <= L; ++k) {
            clf_segs_[k - 1] = add_segment({"clf.depth" + std::to_string(k), "clf" + std::to_string(k),
                                            -1, static_cast<int>(k), SegKind::Classifier, false,
                                            {{clf[k - 1], clf_params()}}, 0, 0});
        }
    }
};

// Xavier-normal init; residual-writing matrices scaled down so deep stacks
// start near identity (no normalization layers to absorb drift).
inline std::vector<double> init_params(const ModelLayout& L, uint64_t seed) {
    std::vector<double> p(L.n_params, 0.0);
    Rng rng(seed);
    const auto& c = L.cfg;
    const double res_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(c.blocks));
    auto fill = [&](size_t off, size_t rows, size_t cols, double scale) {
        const double std = scale * std::sqrt(2.0 / static_cast<double>(rows + cols));
        for (size_t i = 0; i < rows * cols; ++i) p[off + i] = rng.normal(0.0, std);
    };
    fill(L.embed_w, c.hidden, c.input_dim, 1.0);
    for (size_t b = 0; b < c.blocks; ++b) {
        const auto& o = L.block[b];
        fill(o.wq, c.hidden, c.hidden, 1.0);
        fill(o.wk, c.hidden, c.hidden, 1.0);
        fill(o.wv, c.hidden, c.hidden, 1.0);
        fill(o.wo_t, c.hidden, c.hidden, res_scale);
        fill(o.w1, c.mlp_hidden(), c.hidden, 1.0);
        fill(o.w2, c.hidden, c.mlp_hidden(), res_scale);
    }
    for (size_t k = 0; k < c.blocks; ++k) fill(L.clf[k], c.classes, c.hidden, 1.0);
    return p;
}

struct ClassifierRef {
    const double* w = nullptr;  // (C, d) row-major
    const double* b = nullptr;  // C
};

inline ClassifierRef classifier_ref(const ModelLayout& L, const double* params, size_t depth) {
    const size_t off = L.clf[depth - 1];
    return {params + off, params + off + L.cfg.classes * L.cfg.hidden};
}

struct BlockCache {
    Tensor x_in;    // entering the block
    Tensor v;       // value projection (== attention context for one position)
    Tensor x1;      // after attention residual
    Tensor hpre;    // MLP pre-activation
    Tensor hact;    // MLP activation
};

struct ForwardCache {
    Tensor batch;                       // kept for embed gradients
    Tensor embed_out;
    std::vector<BlockCache> blocks;     // filled for trainable blocks only
    std::vector<Tensor> block_out;      // activation after block b, all computed blocks
    std::map<size_t, Tensor> logits;    // depth -> (B, C)
    DepthWindow window;

    const Tensor& activation_at(size_t depth) const {
        return depth == 0 ? embed_out : block_out[depth - 1];
    }
};

// Runs embedding + blocks [0, window.train_end). Pruned blocks are never read.
// Masked segments must already be zeroed in `params` (see mask.hpp); a zeroed
// segment contributes exactly zero, which is the zero-padded residual path.
inline void forward(const ModelLayout& L, const double* params, const Tensor& batch,
                    const DepthWindow& win, const std::map<size_t, ClassifierRef>& exits,
                    ForwardCache& cache) {
    const auto& c = L.cfg;
    require(batch.cols() == c.input_dim, "forward: batch shape mismatch");
    require(win.train_end <= c.blocks && win.frozen_end <= win.train_end,
            "forward: window invalid for model");
    const size_t B = batch.rows(), d = c.hidden, m = c.mlp_hidden();

    cache.batch = batch;
    cache.window = win;
    cache.blocks.assign(c.blocks, {});
    cache.block_out.assign(c.blocks, {});
    cache.logits.clear();

    linear_forward(batch, params + L.embed_w, params + L.embed_b, d, c.input_dim,
                   cache.embed_out);
    Tensor cur = cache.embed_out;

    for (size_t b = 0; b < win.train_end; ++b) {
        const auto& o = L.block[b];
        const bool cache_full = win.trainable(b);
        BlockCache& bc = cache.blocks[b];

        // Attention over a single position: softmax(q.k/sqrt(dh)) == 1, so the
        // context equals the value projection and q/k drop out of the value path.
        Tensor v;
        linear_forward(cur, params + o.wv, params + o.bv, d, d, v);
        Tensor msa;
        linear_forward_t(v, params + o.wo_t, params + o.bo, d, d, msa);

        Tensor x1{B, d};
        for (size_t i = 0; i < B * d; ++i) x1.data[i] = cur.data[i] + msa.data[i];

        Tensor hpre;
        linear_forward(x1, params + o.w1, params + o.b1, m, d, hpre);
        Tensor hact{B, m};
        for (size_t i = 0; i < B * m; ++i) hact.data[i] = gelu(hpre.data[i]);
        Tensor mlp;
        linear_forward(hact, params + o.w2, params + o.b2, d, m, mlp);

        Tensor x2{B, d};
        for (size_t i = 0; i < B * d; ++i) x2.data[i] = x1.data[i] + mlp.data[i];

        if (cache_full) {
            bc.x_in = std::move(cur);
            bc.v = std::move(v);
            bc.x1 = std::move(x1);
            bc.hpre = std::move(hpre);
            bc.hact = std::move(hact);
        }
        cache.block_out[b] = x2;
        cur = std::move(x2);
    }

    for (const auto& [depth, head] : exits) {
        require(depth >= 1 && depth <= win.train_end, "forward: exit above window top");
        Tensor z;
        linear_forward(cache.activation_at(depth), head.w, head.b, c.classes, d, z);
        require(z.finite(), "forward: non-finite activations");
        cache.logits[depth] = std::move(z);
    }
}

struct ExitGrad {
    ClassifierRef head;          // weights used in forward
    const Tensor* dlogits;       // (B, C)
    double* dw = nullptr;        // destination (C, d); may be null to skip
    double* db = nullptr;
};

// Reverse pass over the trainable window; frozen and pruned parameters get no
// gradient. Returns gradients in a flat vector aligned with the param layout
// (classifier gradients go to the per-exit destinations instead).
inline void backward(const ModelLayout& L, const double* params, const ForwardCache& cache,
                     const std::map<size_t, ExitGrad>& exits, std::vector<double>& grad) {
    const auto& c = L.cfg;
    const auto& win = cache.window;
    const size_t B = cache.batch.rows(), d = c.hidden, m = c.mlp_hidden();
    grad.assign(L.n_params, 0.0);

    Tensor dcur{B, d};
    auto add_exit = [&](size_t depth) {
        auto it = exits.find(depth);
        if (it == exits.end()) return;
        const ExitGrad& e = it->second;
        if (e.dw) linear_backward_params(cache.activation_at(depth), *e.dlogits, e.dw, e.db,
                                         c.classes, d);
        linear_backward_input(*e.dlogits, e.head.w, c.classes, d, dcur);
    };

    add_exit(win.train_end);
    for (size_t bi = win.train_end; bi-- > win.frozen_end;) {
        const auto& o = L.block[bi];
        const BlockCache& bc = cache.blocks[bi];

        // MLP branch: x2 = x1 + W2 gelu(W1 x1 + b1) + b2
        Tensor dhact{B, m};
        linear_backward_params(bc.hact, dcur, grad.data() + o.w2, grad.data() + o.b2, d, m);
        linear_backward_input(dcur, params + o.w2, d, m, dhact);
        for (size_t i = 0; i < B * m; ++i) dhact.data[i] *= gelu_grad(bc.hpre.data[i]);
        Tensor dx1 = dcur;  // residual
        linear_backward_params(bc.x1, dhact, grad.data() + o.w1, grad.data() + o.b1, m, d);
        linear_backward_input(dhact, params + o.w1, m, d, dx1);

        // Attention branch: x1 = x + v Wo^T + bo (single-position context == v)
        Tensor dv{B, d};
        linear_t_backward_params(bc.v, dx1, grad.data() + o.wo_t, grad.data() + o.bo, d, d);
        linear_t_backward_input(dx1, params + o.wo_t, d, d, dv);
        Tensor dx = dx1;  // residual
        linear_backward_params(bc.x_in, dv, grad.data() + o.wv, grad.data() + o.bv, d, d);
        linear_backward_input(dv, params + o.wv, d, d, dx);

        dcur = std::move(dx);
        if (bi > 0) add_exit(bi);  // exit reading this block's input
    }

    if (win.frozen_end == 0) {
        linear_backward_params(cache.batch, dcur, grad.data() + L.embed_w,
                               grad.data() + L.embed_b, d, c.input_dim);
    }
}

// w <- w - eta * g, with optional classical momentum (v <- mu v + g).
inline void sgd_step(double* w, const double* g, size_t n, double eta,
                     double momentum = 0.0, double* velocity = nullptr) {
    require(eta > 0.0, "sgd_step: eta must be positive");
    if (momentum != 0.0 && velocity) {
        for (size_t i = 0; i < n; ++i) {
            velocity[i] = momentum * velocity[i] + g[i];
            w[i] -= eta * velocity[i];
        }
    } else {
        for (size_t i = 0; i < n; ++i) w[i] -= eta * g[i];
    }
}

}  // namespace cos2p
