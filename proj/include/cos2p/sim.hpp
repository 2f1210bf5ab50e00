// Deterministic discrete-event simulation of heterogeneous clients around the
// aggregation server: dispatch, compute-time modeling, the quota + grace
// window admission rule, staleness drops, and the resource-utilization metric.
#pragma once

#include <cmath>
#include <functional>
#include <queue>
#include <string>
#include <vector>

#include "cos2p/rng.hpp"
#include "cos2p/server.hpp"

namespace cos2p {

struct ClientProfile {
    double speed = 0.01;         // seconds per sample-epoch at full model
    double comm_latency = 1.0;   // seconds per dispatch/upload leg
    double jitter_sigma = 0.1;   // log-normal sigma; 0 disables jitter
    double r_n = 1.0;            // trained fraction of the full model

    void validate() const {
        require(speed > 0.0, "client profile: speed must be positive");
        require(comm_latency >= 0.0, "client profile: comm_latency must be >= 0");
        require(jitter_sigma >= 0.0, "client profile: jitter_sigma must be >= 0");
        require(r_n > 0.0 && r_n <= 1.0, "client profile: r_n must be in (0,1]");
    }
};

// Round-trip communication plus compute that scales with the kept fraction.
inline double client_time(const ClientProfile& p, double epochs, size_t dataset_size,
                          Rng& rng) {
    const double jitter = p.jitter_sigma > 0.0 ? rng.lognormal(0.0, p.jitter_sigma) : 1.0;
    return p.comm_latency * 2.0 +
           p.speed * static_cast<double>(dataset_size) * epochs * p.r_n * jitter;
}

// What the simulator needs from the local training side.
class LocalCompute {
public:
    virtual ~LocalCompute() = default;
    virtual ClientUpdate train(size_t client, size_t round, const std::vector<double>& base) = 0;
    virtual double epochs(size_t client, size_t round) const = 0;
    virtual size_t dataset_size(size_t client) const = 0;
};

struct DispatchEvent {
    double t = 0.0;
    size_t client = 0;
    size_t round = 0;  // base version tag
};

struct AdmitRecord {
    size_t client = 0;
    size_t base = 0;
    size_t tau = 0;
    double dispatch_t = 0.0;
    double arrival_t = 0.0;
    double duration = 0.0;
    std::vector<size_t> cov;      // covered segment ids
    std::vector<double> gamma;    // aligned with cov
    std::vector<double> dw_l1;    // aligned with cov
};

struct RoundRecord {
    size_t round = 0;  // 1-based: aggregation producing version `round`
    double t_start = 0.0;
    double t_quota = 0.0;
    double t_timeout = 0.0;
    std::vector<AdmitRecord> admitted;
    size_t n_star = 0;
    double ru_round = 0.0;
    size_t tau_max_round = 0;
};

struct StaleDrop {
    double t = 0.0;
    size_t client = 0;
    size_t base = 0;
    size_t agg_round = 0;
    size_t tau = 0;
};

struct ArrivalLog {
    double t = 0.0;
    size_t client = 0;
    size_t base = 0;
    double dispatch_t = 0.0;
    std::vector<size_t> cov;
    std::vector<double> delta_l1;
    uint64_t digest = 0;
};

struct SimLog {
    std::vector<DispatchEvent> dispatches;
    std::vector<ArrivalLog> arrivals;
    std::vector<StaleDrop> drops;
};

struct SimSettings {
    size_t rounds = 1;
    double mu = 0.5;
    double t_clk = 0.0;
    size_t quota_override = 0;  // nonzero: admit this many before the timer (async mode = 1)

    size_t quota(size_t n_clients) const {
        if (quota_override) return std::min(quota_override, n_clients);
        return static_cast<size_t>(std::ceil(mu * static_cast<double>(n_clients)));
    }
};

struct SimResult {
    std::vector<RoundRecord> rounds;
    SimLog log;
    double end_time = 0.0;
    size_t stale_drops = 0;
};

// Mean over rounds of (sum of participant times) / (participants * slowest).
inline double resource_utilization(const std::vector<RoundRecord>& rounds) {
    require(!rounds.empty(), "resource_utilization: no completed round");
    double acc = 0.0;
    for (const auto& r : rounds) acc += r.ru_round;
    return acc / static_cast<double>(rounds.size());
}

inline double round_ru(const std::vector<AdmitRecord>& admitted) {
    require(!admitted.empty(), "round_ru: empty round");
    double sum = 0.0, mx = 0.0;
    for (const auto& a : admitted) {
        sum += a.duration;
        mx = std::max(mx, a.duration);
    }
    return sum / (static_cast<double>(admitted.size()) * mx);
}

// Runs Q rounds. Per round: every idle client is dispatched and computes
// eagerly against the current global; the round closes T_clk after the quota
// is met and admits everything that arrived by then. A client stays busy
// until its update is consumed (admitted or dropped), so each round sees at
// most one update per client.
inline SimResult run_simulation(AggServer& server, const std::vector<ClientProfile>& profiles,
                                LocalCompute& compute, const SimSettings& s, uint64_t seed,
                                const std::function<void(const RoundRecord&)>& on_round = {}) {
    const size_t n = profiles.size();
    require(n >= 1, "run_simulation: need at least one client");
    require(s.quota_override > 0 || (s.mu > 0.0 && s.mu <= 1.0),
            "run_simulation: mu must be in (0,1]");
    require(s.t_clk >= 0.0, "run_simulation: t_clk must be >= 0");

    struct Pending {
        double t = 0.0;
        size_t seq = 0;
        size_t client = 0;
        size_t base = 0;
        double dispatch_t = 0.0;
        double duration = 0.0;
        ClientUpdate update;
        bool operator>(const Pending& o) const { return std::tie(t, seq) > std::tie(o.t, o.seq); }
    };
    std::priority_queue<Pending, std::vector<Pending>, std::greater<>> queue;
    std::vector<Rng> jitter(n);
    for (size_t i = 0; i < n; ++i) jitter[i] = Rng(derive_seed(seed, "jitter", i));
    std::vector<bool> available(n, true);

    SimResult res;
    size_t seq = 0;
    double t_start = 0.0;
    const size_t quota = s.quota(n);

    for (size_t r = 0; r < s.rounds; ++r) {
        for (size_t i = 0; i < n; ++i) {
            if (!available[i]) continue;
            available[i] = false;
            const double dur =
                client_time(profiles[i], compute.epochs(i, r), compute.dataset_size(i),
                            jitter[i]);
            Pending p;
            p.t = t_start + dur;
            p.seq = seq++;
            p.client = i;
            p.base = r;
            p.dispatch_t = t_start;
            p.duration = p.t - t_start;  // the log-derivable value, bit for bit
            p.update = compute.train(i, r, server.global());
            require(server.admissible(p.update), "run_simulation: malformed update");
            res.log.dispatches.push_back({t_start, i, r});

            ArrivalLog al;
            al.t = p.t;
            al.client = i;
            al.base = r;
            al.dispatch_t = t_start;
            uint64_t dg = 0xcbf29ce484222325ULL;
            for (size_t k = 0; k < p.update.segments.size(); ++k) {
                al.cov.push_back(p.update.segments[k]);
                al.delta_l1.push_back(
                    l1_norm(p.update.delta[k].data(), p.update.delta[k].size()));
                dg = digest_doubles(p.update.delta[k], dg);
            }
            al.digest = dg;
            res.log.arrivals.push_back(std::move(al));
            queue.push(std::move(p));
        }

        RoundRecord rec;
        rec.round = r + 1;
        rec.t_start = t_start;

        std::vector<ScoredUpdate> admitted;
        std::vector<size_t> freed;
        auto consume = [&](Pending&& p) {
            const size_t tau = r - p.base;
            if (tau > server.tau_max()) {
                res.log.drops.push_back({std::max(p.t, t_start), p.client, p.base, r + 1, tau});
                ++res.stale_drops;
                freed.push_back(p.client);
                return false;
            }
            ScoredUpdate su;
            su.update = std::move(p.update);
            su.dispatch_time = p.dispatch_t;
            su.arrival_time = p.t;
            su.duration = p.duration;
            server.score(su);
            admitted.push_back(std::move(su));
            freed.push_back(p.client);
            return true;
        };

        size_t usable = 0;
        double t_quota = t_start;
        while (usable < quota) {
            require(!queue.empty(), "run_simulation: deadlock, no client can report");
            Pending p = queue.top();
            queue.pop();
            t_quota = std::max(t_start, p.t);
            if (consume(std::move(p))) ++usable;
        }
        const double t_timeout = t_quota + s.t_clk;
        while (!queue.empty() && queue.top().t <= t_timeout) {
            Pending p = queue.top();
            queue.pop();
            consume(std::move(p));
        }

        server.aggregate(admitted);
        for (size_t c : freed) available[c] = true;

        rec.t_quota = t_quota;
        rec.t_timeout = t_timeout;
        for (const auto& su : admitted) {
            AdmitRecord ar;
            ar.client = su.update.client;
            ar.base = su.update.base_round;
            ar.tau = su.tau;
            ar.dispatch_t = su.dispatch_time;
            ar.arrival_t = su.arrival_time;
            ar.duration = su.duration;
            ar.cov = su.update.segments;
            ar.gamma = su.gamma;
            ar.dw_l1 = su.dw_l1;
            rec.tau_max_round = std::max(rec.tau_max_round, su.tau);
            rec.admitted.push_back(std::move(ar));
        }
        rec.n_star = server.last_min_participants();
        rec.ru_round = round_ru(rec.admitted);
        t_start = t_timeout;
        res.rounds.push_back(rec);
        if (on_round) on_round(res.rounds.back());
    }
    res.end_time = t_start;
    return res;
}

}  // namespace cos2p
