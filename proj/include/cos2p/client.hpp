// Client-side two-phase local training: Bernoulli-sampled mask training with
// straight-through gradients while the weights stay frozen, then SGD on the
// masked submodel with the multi-exit self-distillation loss. Personal
// classifiers persist across rounds and are never uploaded; the dispatched
// global classifier copies are trained as detached linear probes so the
// aggregated model keeps working evaluation heads.
#pragma once

#include <map>
#include <vector>

#include "cos2p/dataset.hpp"
#include "cos2p/distill.hpp"
#include "cos2p/loss.hpp"
#include "cos2p/mask.hpp"
#include "cos2p/model.hpp"
#include "cos2p/rng.hpp"
#include "cos2p/submodel.hpp"

namespace cos2p {

struct TrainParams {
    double eta = 0.005;      // weight-phase learning rate
    size_t epochs = 5;       // E
    double eta_hat = 0.01;   // mask-phase learning rate
    size_t epochs_hat = 5;   // E_hat
    size_t q_hat = 20;       // rounds with an active mask phase
    double lambda1 = 1.0;
    double lambda2 = 0.2;
    double temperature = 3.0;
    size_t batch = 32;
    double momentum = 0.0;
    MaskPolicy freeze_policy = MaskPolicy::Threshold;
    bool mask_sample_per_epoch = false;  // default: resample every mini-batch
    bool reverse_kl = false;

    void validate() const {
        require(eta > 0.0 && eta_hat > 0.0, "train: learning rates must be positive");
        require(temperature > 0.0, "train: temperature must be positive");
        require(lambda1 >= 0.0, "train: lambda1 must be >= 0");
        require(lambda2 >= 0.0 && lambda2 <= 1.0, "train: lambda2 must be in [0,1]");
        require(batch >= 1, "train: batch must be >= 1");
        require(momentum >= 0.0 && momentum < 1.0, "train: momentum must be in [0,1)");
    }
};

enum class MaskMode { Trainable, RandomFixed };

struct ClientState {
    size_t id = 0;
    double r_n = 1.0, r_width = 1.0, r_depth = 1.0;
    LabeledDataset train;
    LabeledDataset test;
    std::map<size_t, BlockMaskState> masks;            // per visited block
    std::vector<std::vector<double>> personal_clf;     // per depth 1..L
    Rng mask_rng, shuffle_rng;
    MaskMode mask_mode = MaskMode::Trainable;
    DepthWindow last_window;
    std::vector<size_t> last_exits;

    // Expected keep-ratio across this client's mask states (probabilities for
    // live masks, bits once frozen), counted in matrix entries.
    double keep_ratio(const ModelLayout& L) const {
        KeepRatio acc;
        for (const auto& [b, s] : masks) {
            for (SegKind k : {SegKind::MsaHead, SegKind::Fc1Group, SegKind::Fc2Group})
                accumulate_ratio(L, b, s.layer(k), /*expected=*/!s.frozen, acc);
        }
        return acc.total > 0.0 ? acc.ratio() : r_width;
    }
};

inline ClientState make_client(size_t id, double r_width, double r_depth,
                               LabeledDataset shard, const ModelLayout& layout,
                               const std::vector<double>& initial_global, uint64_t seed,
                               MaskMode mode = MaskMode::Trainable) {
    ClientState c;
    c.id = id;
    c.r_width = r_width;
    c.r_depth = r_depth;
    c.r_n = r_width * r_depth;
    c.mask_mode = mode;
    c.mask_rng = Rng(derive_seed(seed, "client-mask", id));
    c.shuffle_rng = Rng(derive_seed(seed, "client-shuffle", id));

    // 8:2 train/test split of the local shard.
    std::vector<size_t> idx(shard.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng split_rng(derive_seed(seed, "client-split", id));
    split_rng.shuffle(idx);
    const size_t n_train = (shard.size() * 8 + 9) / 10;
    std::vector<size_t> tr(idx.begin(), idx.begin() + n_train);
    std::vector<size_t> te(idx.begin() + n_train, idx.end());
    c.train = shard.subset(tr);
    c.test = shard.subset(te);

    c.personal_clf.resize(layout.cfg.blocks);
    for (size_t k = 1; k <= layout.cfg.blocks; ++k) {
        const size_t off = layout.clf[k - 1];
        c.personal_clf[k - 1].assign(initial_global.begin() + off,
                                     initial_global.begin() + off + layout.clf_params());
    }
    c.last_window = DepthWindow::full(layout.cfg.blocks);
    return c;
}

namespace detail {

inline BlockMaskState& ensure_mask(ClientState& c, const ModelLayout& L, size_t block) {
    auto it = c.masks.find(block);
    if (it != c.masks.end()) return it->second;
    BlockMaskState s = init_importance(L.cfg);
    if (c.mask_mode == MaskMode::RandomFixed) {
        // Fixed random mask at the width budget, seeded per client.
        auto pick = [&](LayerMask& lm) {
            const size_t n = lm.segments();
            const size_t k = std::min(
                n, static_cast<size_t>(std::ceil(c.r_width * static_cast<double>(n))));
            std::vector<size_t> order(n);
            for (size_t j = 0; j < n; ++j) order[j] = j;
            c.mask_rng.shuffle(order);
            std::fill(lm.bits.begin(), lm.bits.end(), 0);
            for (size_t j = 0; j < k; ++j) lm.bits[order[j]] = 1;
        };
        pick(s.msa);
        pick(s.fc1);
        pick(s.fc2);
        s.frozen = true;
    } else {
        sample_binary(s, c.mask_rng);
    }
    return c.masks.emplace(block, std::move(s)).first->second;
}

inline std::vector<std::vector<size_t>> make_batches(ClientState& c, size_t batch) {
    std::vector<size_t> order(c.train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    c.shuffle_rng.shuffle(order);
    std::vector<std::vector<size_t>> out;
    for (size_t at = 0; at < order.size(); at += batch) {
        out.emplace_back(order.begin() + at,
                         order.begin() + std::min(at + batch, order.size()));
    }
    return out;
}

inline void gather_batch(const LabeledDataset& d, const std::vector<size_t>& idx,
                         Tensor& x, std::vector<int>& y) {
    x = Tensor{idx.size(), d.dim()};
    y.resize(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) {
        std::copy(d.features.row(idx[i]), d.features.row(idx[i]) + d.dim(), x.row(i));
        y[i] = d.labels[idx[i]];
    }
}

}  // namespace detail

struct RoundOutcome {
    ClientUpdate update;
    double mask_loss_first = 0.0, mask_loss_last = 0.0;
    double weight_loss_last = 0.0;
};

// Mask phase: for each mini-batch, resample M, forward the masked submodel,
// and step the importance logits down the straight-through gradient of
// CE + lambda1 * |keep_ratio - r_width|. Weights never move.
inline void train_mask_phase(ClientState& c, const ModelLayout& L,
                             const std::vector<double>& base, const DepthWindow& win,
                             const ExitSet& exits, const TrainParams& tp,
                             double* loss_first = nullptr, double* loss_last = nullptr) {
    require(c.train.size() > 0, "train_mask_phase: empty shard");
    if (tp.epochs_hat == 0) return;

    std::vector<double> work = base;
    const size_t teacher = exits.teacher();
    double total_entries = 0.0;
    for (size_t b = win.frozen_end; b < win.train_end; ++b)
        for (SegKind k : {SegKind::MsaHead, SegKind::Fc1Group, SegKind::Fc2Group})
            for (size_t id : L.layer_segments(b, k))
                total_entries += static_cast<double>(L.segment(id).matrix_entries);

    bool first = true;
    std::vector<double> grad;
    for (size_t e = 0; e < tp.epochs_hat; ++e) {
        auto batches = detail::make_batches(c, tp.batch);
        for (size_t bi = 0; bi < batches.size(); ++bi) {
            if (!tp.mask_sample_per_epoch || bi == 0) {
                for (size_t b = win.frozen_end; b < win.train_end; ++b)
                    sample_binary(c.masks.at(b), c.mask_rng);
            }
            for (size_t b = win.frozen_end; b < win.train_end; ++b) {
                restore_masked(L, b, base.data(), work.data());
                apply_mask(L, b, c.masks.at(b), work.data());
            }

            Tensor x;
            std::vector<int> y;
            detail::gather_batch(c.train, batches[bi], x, y);

            ForwardCache cache;
            std::map<size_t, ClassifierRef> heads;
            heads[teacher] = {c.personal_clf[teacher - 1].data(),
                              c.personal_clf[teacher - 1].data() + L.cfg.classes * L.cfg.hidden};
            forward(L, work.data(), x, win, heads, cache);
            LossGrad ce = ce_loss(cache.logits.at(teacher), y);

            KeepRatio kr;
            for (size_t b = win.frozen_end; b < win.train_end; ++b)
                for (SegKind k : {SegKind::MsaHead, SegKind::Fc1Group, SegKind::Fc2Group})
                    accumulate_ratio(L, b, c.masks.at(b).layer(k), /*expected=*/false, kr);
            BudgetPenalty pen = budget_penalty(kr.ratio(), total_entries, c.r_width);

            if (first && loss_first) *loss_first = ce.value + tp.lambda1 * pen.value;
            if (loss_last) *loss_last = ce.value + tp.lambda1 * pen.value;
            first = false;

            std::map<size_t, ExitGrad> eg;
            eg[teacher] = {heads[teacher], &ce.dlogits, nullptr, nullptr};
            backward(L, work.data(), cache, eg, grad);

            for (size_t b = win.frozen_end; b < win.train_end; ++b) {
                BlockMaskState& ms = c.masks.at(b);
                for (SegKind k : {SegKind::MsaHead, SegKind::Fc1Group, SegKind::Fc2Group}) {
                    LayerMask& lm = ms.layer(k);
                    const auto& segs = L.layer_segments(b, k);
                    for (size_t j = 0; j < segs.size(); ++j) {
                        const Segment& seg = L.segment(segs[j]);
                        const double g_task =
                            collapse_segment_grad(seg, grad.data(), base.data());
                        const double g_pen = tp.lambda1 * pen.sign *
                                             static_cast<double>(seg.matrix_entries) /
                                             pen.total_entries;
                        const double g_i = ste_backward(g_task + g_pen, lm.prob[j]);
                        lm.set_importance(j, lm.imp[j] - tp.eta_hat * g_i);
                    }
                }
                ms.trained = true;
            }
        }
    }
}

// Weight phase: E epochs of SGD on the self-distillation loss over the
// trainable window and the personal classifiers; the frozen mask pins masked
// segments at zero contribution and zero gradient. Global classifier copies
// at the exit depths train as probes on detached features.
inline void train_weight_phase(ClientState& c, const ModelLayout& L,
                               const std::vector<double>& base, std::vector<double>& work,
                               const DepthWindow& win, const ExitSet& exits,
                               std::map<size_t, std::vector<double>>& probes,
                               const TrainParams& tp, double* loss_last = nullptr) {
    require(c.train.size() > 0, "train_weight_phase: empty shard");
    const size_t clf_n = L.clf_params();
    const size_t wb = L.cfg.classes * L.cfg.hidden;

    // Flat ranges updated by SGD: the trainable blocks (plus embedding when
    // nothing is frozen below it).
    std::vector<ParamRange> train_ranges;
    if (win.frozen_end == 0) train_ranges.push_back({L.embed_w, L.cfg.hidden * L.cfg.input_dim + L.cfg.hidden});
    for (size_t b = win.frozen_end; b < win.train_end; ++b) {
        const auto& o = L.block[b];
        train_ranges.push_back({o.wq, L.block[b].b2 + L.cfg.hidden - o.wq});
    }

    std::vector<double> grad;
    std::vector<double> velocity;
    if (tp.momentum != 0.0) velocity.assign(L.n_params, 0.0);
    std::map<size_t, std::vector<double>> clf_grad, clf_vel, probe_vel;
    for (size_t depth : exits.depths) {
        clf_grad[depth].assign(clf_n, 0.0);
        if (tp.momentum != 0.0) {
            clf_vel[depth].assign(clf_n, 0.0);
            probe_vel[depth].assign(clf_n, 0.0);
        }
    }

    for (size_t e = 0; e < tp.epochs; ++e) {
        auto batches = detail::make_batches(c, tp.batch);
        for (const auto& bidx : batches) {
            Tensor x;
            std::vector<int> y;
            detail::gather_batch(c.train, bidx, x, y);

            std::map<size_t, ClassifierRef> heads;
            for (size_t depth : exits.depths)
                heads[depth] = {c.personal_clf[depth - 1].data(),
                                c.personal_clf[depth - 1].data() + wb};
            ForwardCache cache;
            forward(L, work.data(), x, win, heads, cache);

            std::vector<const Tensor*> logits;
            for (size_t depth : exits.depths) logits.push_back(&cache.logits.at(depth));
            DistillResult dl =
                self_distill_loss(logits, y, exits.lambda2, exits.temperature, tp.reverse_kl);
            if (loss_last) *loss_last = dl.value;

            std::map<size_t, ExitGrad> eg;
            for (size_t i = 0; i < exits.depths.size(); ++i) {
                const size_t depth = exits.depths[i];
                auto& cg = clf_grad[depth];
                std::fill(cg.begin(), cg.end(), 0.0);
                eg[depth] = {heads[depth], &dl.dlogits[i], cg.data(), cg.data() + wb};
            }
            backward(L, work.data(), cache, eg, grad);

            // Chain rule through the Hadamard mask: masked entries get no step.
            for (size_t b = win.frozen_end; b < win.train_end; ++b) {
                auto it = c.masks.find(b);
                if (it == c.masks.end()) continue;
                for (SegKind k : {SegKind::MsaHead, SegKind::Fc1Group, SegKind::Fc2Group}) {
                    const LayerMask& lm = it->second.layer(k);
                    const auto& segs = L.layer_segments(b, k);
                    for (size_t j = 0; j < segs.size(); ++j) {
                        if (lm.bits[j]) continue;
                        for (const auto& r : L.segment(segs[j]).ranges)
                            std::fill(grad.begin() + r.offset,
                                      grad.begin() + r.offset + r.length, 0.0);
                    }
                }
            }

            for (const auto& r : train_ranges)
                sgd_step(work.data() + r.offset, grad.data() + r.offset, r.length, tp.eta,
                         tp.momentum, velocity.empty() ? nullptr : velocity.data() + r.offset);
            for (size_t depth : exits.depths)
                sgd_step(c.personal_clf[depth - 1].data(), clf_grad[depth].data(), clf_n,
                         tp.eta, tp.momentum,
                         clf_vel.count(depth) ? clf_vel[depth].data() : nullptr);

            // Probe pass: plain CE on the cached (detached) trunk features.
            for (size_t depth : exits.depths) {
                auto& pw = probes.at(depth);
                Tensor pz;
                linear_forward(cache.activation_at(depth), pw.data(), pw.data() + wb,
                               L.cfg.classes, L.cfg.hidden, pz);
                LossGrad pce = ce_loss(pz, y);
                std::vector<double> pg(clf_n, 0.0);
                linear_backward_params(cache.activation_at(depth), pce.dlogits, pg.data(),
                                       pg.data() + wb, L.cfg.classes, L.cfg.hidden);
                sgd_step(pw.data(), pg.data(), clf_n, tp.eta, tp.momentum,
                         probe_vel.count(depth) ? probe_vel[depth].data() : nullptr);
            }
        }
    }
}

// One full local round against the dispatched base weights.
inline RoundOutcome client_round(ClientState& c, const ModelLayout& L,
                                 const std::vector<double>& base, size_t round,
                                 const std::vector<double>& depth_budgets,
                                 const TrainParams& tp, size_t stride = 1) {
    const DepthWindow win = depth_window(c.id, round, L.cfg.blocks, c.r_depth, stride);
    const ExitSet exits = classifier_depths(depth_budgets, c.r_depth, win, L.cfg.blocks,
                                            tp.lambda2, tp.temperature);
    for (size_t b = win.frozen_end; b < win.train_end; ++b) detail::ensure_mask(c, L, b);

    RoundOutcome out;
    const bool mask_round = round < tp.q_hat && c.mask_mode == MaskMode::Trainable;
    if (mask_round) {
        train_mask_phase(c, L, base, win, exits, tp, &out.mask_loss_first,
                         &out.mask_loss_last);
    } else if (c.mask_mode == MaskMode::Trainable) {
        // First weight-only round for a block freezes its mask; blocks never
        // visited during the mask phase get the deterministic default.
        for (size_t b = win.frozen_end; b < win.train_end; ++b) {
            BlockMaskState& s = c.masks.at(b);
            if (s.frozen) continue;
            freeze_state(s, s.trained ? tp.freeze_policy : MaskPolicy::TopK, c.r_width);
        }
    }

    std::vector<double> work = build_submodel(L, base, win, c.masks);
    std::map<size_t, std::vector<double>> probes;
    for (size_t depth : exits.depths) {
        const size_t off = L.clf[depth - 1];
        probes[depth].assign(base.begin() + off, base.begin() + off + L.clf_params());
    }
    if (tp.epochs > 0)
        train_weight_phase(c, L, base, work, win, exits, probes, tp, &out.weight_loss_last);

    // Package: delta in gradient units over covered segments only; personal
    // classifiers never leave the client, probes stand in for the global
    // classifier copies.
    out.update.client = c.id;
    out.update.base_round = round;
    out.update.coverage = coverage_for(L, win, c.masks, exits.depths);
    for (size_t id = 0; id < L.n_segments(); ++id) {
        if (!out.update.coverage.covered(id)) continue;
        const Segment& seg = L.segment(id);
        std::vector<double> d(seg.size);
        size_t di = 0;
        if (seg.kind == SegKind::Classifier) {
            const auto& pw = probes.at(static_cast<size_t>(seg.index));
            const size_t off = seg.ranges[0].offset;
            for (size_t k = 0; k < seg.size; ++k, ++di)
                d[di] = (base[off + k] - pw[k]) / tp.eta;
        } else {
            for (const auto& r : seg.ranges)
                for (size_t k = r.offset; k < r.offset + r.length; ++k, ++di)
                    d[di] = (base[k] - work[k]) / tp.eta;
        }
        out.update.segments.push_back(id);
        out.update.delta.push_back(std::move(d));
    }

    c.last_window = win;
    c.last_exits = exits.depths;
    return out;
}

// Personalized submodel accuracy on the client's local test split, read at
// the deepest exit of its last window.
inline Metrics client_evaluate(const ClientState& c, const ModelLayout& L,
                               const std::vector<double>& global) {
    std::vector<double> view = build_submodel(L, global, c.last_window, c.masks);
    const size_t teacher = c.last_exits.empty() ? c.last_window.train_end
                                                : c.last_exits.back();
    std::map<size_t, ClassifierRef> heads;
    heads[teacher] = {c.personal_clf[teacher - 1].data(),
                      c.personal_clf[teacher - 1].data() + L.cfg.classes * L.cfg.hidden};
    ForwardCache cache;
    forward(L, view.data(), c.test.features, c.last_window, heads, cache);
    return evaluate_logits(cache.logits.at(teacher), c.test.labels, c.test.classes);
}

}  // namespace cos2p
