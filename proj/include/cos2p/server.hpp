// Aggregation server: stages client updates, scores each covered segment by
// update magnitude against version drift, and applies the normalized
// importance-weighted step. Keeps a bounded ring of past global versions for
// staleness lookups.
#pragma once

#include <deque>
#include <map>
#include <vector>

#include "cos2p/model.hpp"
#include "cos2p/submodel.hpp"

namespace cos2p {

struct ScoredUpdate {
    ClientUpdate update;
    size_t tau = 0;
    double dispatch_time = 0.0;
    double arrival_time = 0.0;
    double duration = 0.0;
    std::vector<double> gamma;  // aligned with update.segments
    std::vector<double> dw_l1;  // |w_q - w_{q-tau}|_1 per covered segment
};

class AggServer {
public:
    // The server only needs the segment table: any parameter space carved
    // into named segments aggregates the same way.
    AggServer(const std::vector<Segment>& segments, std::vector<double> initial, double eta,
              size_t tau_max)
        : segments_(&segments), global_(std::move(initial)), eta_(eta), tau_max_(tau_max) {
        require(eta_ > 0.0, "server: eta must be positive");
        snapshots_.emplace_back(0, global_);
    }

    AggServer(const ModelLayout& layout, std::vector<double> initial, double eta,
              size_t tau_max)
        : AggServer(layout.segments, std::move(initial), eta, tau_max) {
        require(global_.size() == layout.n_params, "server: param size mismatch");
    }

    size_t round() const { return round_; }
    const std::vector<double>& global() const { return global_; }
    size_t tau_max() const { return tau_max_; }

    bool version_retained(size_t version) const {
        return version + tau_max_ >= round_ && version <= round_;
    }

    const std::vector<double>& snapshot(size_t version) const {
        for (const auto& [v, p] : snapshots_)
            if (v == version) return p;
        throw std::runtime_error("server: version evicted from ledger");
    }

    // Validates coverage against the segment table and version retention.
    // Returns false when the update is too stale to score (caller logs a drop).
    bool admissible(const ClientUpdate& u) const {
        require(u.segments.size() == u.delta.size(), "merge_delta: malformed update");
        for (size_t i = 0; i < u.segments.size(); ++i) {
            require(u.segments[i] < segments_->size(), "merge_delta: unknown segment id");
            require(u.delta[i].size() == (*segments_)[u.segments[i]].size,
                    "merge_delta: delta size mismatch");
        }
        return version_retained(u.base_round);
    }

    // Segment importance: |delta|_1 / (|w_q - w_{q-tau}|_1 + size). Norms are
    // summed sequentially in segment-range order for determinism.
    void score(ScoredUpdate& s) const {
        const auto& base = snapshot(s.update.base_round);
        s.tau = round_ - s.update.base_round;
        s.gamma.resize(s.update.segments.size());
        s.dw_l1.resize(s.update.segments.size());
        for (size_t i = 0; i < s.update.segments.size(); ++i) {
            const Segment& seg = (*segments_)[s.update.segments[i]];
            double drift = 0.0;
            for (const auto& r : seg.ranges)
                for (size_t k = r.offset; k < r.offset + r.length; ++k)
                    drift += std::fabs(global_[k] - base[k]);
            const double num = l1_norm(s.update.delta[i].data(), s.update.delta[i].size());
            s.dw_l1[i] = drift;
            s.gamma[i] = num / (drift + static_cast<double>(seg.size));
        }
    }

    // Normalized weighted step per segment; uncovered segments stay put and an
    // all-zero score set falls back to uniform weights. Output depends only on
    // the admitted set: contributions are folded in client-id order.
    void aggregate(std::vector<ScoredUpdate>& admitted) {
        std::stable_sort(admitted.begin(), admitted.end(), [](const auto& a, const auto& b) {
            return a.update.client < b.update.client;
        });
        struct Contrib {
            const ScoredUpdate* s;
            size_t pos;  // index into its segment list
        };
        std::map<size_t, std::vector<Contrib>> by_segment;
        for (const auto& s : admitted)
            for (size_t i = 0; i < s.update.segments.size(); ++i)
                by_segment[s.update.segments[i]].push_back({&s, i});

        min_participants_ = by_segment.empty() ? 0 : SIZE_MAX;
        for (const auto& [seg_id, contribs] : by_segment) {
            min_participants_ = std::min(min_participants_, contribs.size());
            double gamma_sum = 0.0;
            for (const auto& c : contribs) gamma_sum += c.s->gamma[c.pos];
            const bool uniform = gamma_sum <= 0.0;
            const double inv = uniform ? 1.0 / static_cast<double>(contribs.size())
                                       : 1.0 / gamma_sum;
            const Segment& seg = (*segments_)[seg_id];
            for (const auto& c : contribs) {
                const double w = uniform ? inv : c.s->gamma[c.pos] * inv;
                const double* d = c.s->update.delta[c.pos].data();
                size_t di = 0;
                for (const auto& r : seg.ranges)
                    for (size_t k = r.offset; k < r.offset + r.length; ++k, ++di)
                        global_[k] -= eta_ * w * d[di];
            }
            for (const auto& r : seg.ranges)
                for (size_t k = r.offset; k < r.offset + r.length; ++k)
                    require(std::isfinite(global_[k]), "aggregate: non-finite result");
        }

        ++round_;
        snapshots_.emplace_back(round_, global_);
        while (snapshots_.size() > tau_max_ + 1) snapshots_.pop_front();
    }

    // Minimum per-segment participation of the last aggregate call, over the
    // segments that were actually aggregated.
    size_t last_min_participants() const { return min_participants_; }

private:
    const std::vector<Segment>* segments_;
    std::vector<double> global_;
    double eta_;
    size_t tau_max_;
    size_t round_ = 0;
    size_t min_participants_ = 0;
    std::deque<std::pair<size_t, std::vector<double>>> snapshots_;
};

}  // namespace cos2p
