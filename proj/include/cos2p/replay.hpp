// Replay verification: re-derives admission sets, delays, importance scores
// and resource utilization from the persisted event log alone and diffs the
// result against what the live run recorded.
#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cos2p/config.hpp"
#include "cos2p/experiment.hpp"

namespace cos2p {

struct ReplayReport {
    std::vector<std::string> diffs;
    size_t rounds_checked = 0;

    bool clean() const { return diffs.empty(); }

    void add(const std::string& d) {
        if (diffs.size() < 200) diffs.push_back(d);  // cap runaway reports
    }
};

namespace replaydetail {

struct Arrival {
    double t;
    size_t client;
    size_t base;
    double dispatch_t;
    std::vector<size_t> cov;
    std::vector<double> delta_l1;
};

}  // namespace replaydetail

inline ReplayReport replay_events(const std::filesystem::path& events_path,
                                  const ExperimentConfig& cfg,
                                  const nlohmann::json* summary = nullptr) {
    ReplayReport rep;
    std::ifstream f(events_path);
    require(f.good(), "replay: cannot open " + events_path.string());

    std::vector<replaydetail::Arrival> arrivals;
    std::vector<nlohmann::json> aggregates;
    std::vector<nlohmann::json> drops;
    std::string line;
    size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json e;
        try {
            e = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& ex) {
            throw std::runtime_error("replay: truncated or corrupt log at line " +
                                     std::to_string(lineno) + ": " + ex.what());
        }
        const std::string kind = e.at("kind").get<std::string>();
        if (kind == "update_arrival") {
            replaydetail::Arrival a;
            a.t = e.at("t").get<double>();
            a.client = e.at("client").get<size_t>();
            a.base = e.at("round").get<size_t>();
            a.dispatch_t = e.at("dispatch_t").get<double>();
            a.cov = e.at("cov").get<std::vector<size_t>>();
            a.delta_l1 = e.at("delta_l1").get<std::vector<double>>();
            arrivals.push_back(std::move(a));
        } else if (kind == "aggregate") {
            aggregates.push_back(std::move(e));
        } else if (kind == "stale_drop") {
            drops.push_back(std::move(e));
        } else if (kind != "dispatch") {
            rep.add("line " + std::to_string(lineno) + ": unknown event kind '" + kind + "'");
        }
    }
    std::stable_sort(arrivals.begin(), arrivals.end(),
                     [](const auto& a, const auto& b) { return a.t < b.t; });
    std::stable_sort(aggregates.begin(), aggregates.end(),
                     [](const nlohmann::json& a, const nlohmann::json& b) {
                         return a.at("round").get<size_t>() < b.at("round").get<size_t>();
                     });

    const ResolvedMode mode = resolve_mode(cfg);
    const size_t n = cfg.federation.n_clients;
    const size_t quota = mode.quota_override
                             ? std::min(mode.quota_override, n)
                             : static_cast<size_t>(std::ceil(mode.mu * static_cast<double>(n)));
    const size_t tau_max = cfg.federation.tau_max;
    ModelLayout layout(cfg.model);

    struct Derived {
        std::vector<const replaydetail::Arrival*> admitted;
        double t_start, t_quota, t_timeout;
    };

    size_t next = 0;
    double t_start = 0.0;
    size_t derived_drops = 0;
    size_t tau_max_observed = 0;
    double ru_acc = 0.0;
    size_t n_star = SIZE_MAX;
    size_t rounds_done = 0;

    for (const auto& agg : aggregates) {
        const size_t r = agg.at("round").get<size_t>();  // 1-based
        Derived d;
        d.t_start = t_start;
        size_t usable = 0;
        double t_quota = t_start;
        while (usable < quota && next < arrivals.size()) {
            const auto& a = arrivals[next++];
            t_quota = std::max(t_start, a.t);
            const size_t tau = r - 1 - a.base;
            if (a.base > r - 1 || tau > tau_max) {
                ++derived_drops;
                continue;
            }
            d.admitted.push_back(&a);
            ++usable;
        }
        if (usable < quota) {
            rep.add("round " + std::to_string(r) + ": log exhausted before quota");
            break;
        }
        const double t_timeout = t_quota + mode.t_clk;
        while (next < arrivals.size() && arrivals[next].t <= t_timeout) {
            const auto& a = arrivals[next++];
            const size_t tau = r - 1 - a.base;
            if (a.base > r - 1 || tau > tau_max) {
                ++derived_drops;
                continue;
            }
            d.admitted.push_back(&a);
        }
        d.t_quota = t_quota;
        d.t_timeout = t_timeout;
        t_start = t_timeout;

        // The live run records admissions sorted by client id.
        std::stable_sort(d.admitted.begin(), d.admitted.end(),
                         [](const auto* a, const auto* b) { return a->client < b->client; });

        const auto& logged = agg.at("admitted");
        if (logged.size() != d.admitted.size()) {
            rep.add("round " + std::to_string(r) + ": admission count " +
                    std::to_string(d.admitted.size()) + " (derived) vs " +
                    std::to_string(logged.size()) + " (logged)");
            ++rounds_done;
            continue;
        }
        if (agg.at("t_quota").get<double>() != d.t_quota ||
            agg.at("t_timeout").get<double>() != d.t_timeout) {
            rep.add("round " + std::to_string(r) + ": admission window mismatch");
        }

        double ru_sum = 0.0, ru_max = 0.0;
        std::map<size_t, size_t> seg_count;
        for (size_t i = 0; i < logged.size(); ++i) {
            const auto& la = logged[i];
            const auto& da = *d.admitted[i];
            const size_t lclient = la.at("client").get<size_t>();
            if (lclient != da.client) {
                rep.add("round " + std::to_string(r) + ": admitted[" + std::to_string(i) +
                        "] is client " + std::to_string(da.client) + " (derived) vs client " +
                        std::to_string(lclient) + " (logged)");
                continue;
            }
            const size_t tau = r - 1 - da.base;
            if (la.at("base").get<size_t>() != da.base ||
                la.at("tau").get<size_t>() != tau)
                rep.add("round " + std::to_string(r) + ": tau mismatch for client " +
                        std::to_string(da.client) + ": derived base " +
                        std::to_string(da.base) + " tau " + std::to_string(tau) +
                        " vs logged base " + std::to_string(la.at("base").get<size_t>()) +
                        " tau " + std::to_string(la.at("tau").get<size_t>()));
            tau_max_observed = std::max(tau_max_observed, tau);

            const double duration = da.t - da.dispatch_t;
            if (la.at("duration").get<double>() != duration)
                rep.add("round " + std::to_string(r) + ": duration mismatch for client " +
                        std::to_string(da.client));
            ru_sum += duration;
            ru_max = std::max(ru_max, duration);

            // Importance scores from logged raw measurements.
            const auto ldw = la.at("dw_l1").get<std::vector<double>>();
            const auto lgamma = la.at("gamma").get<std::vector<double>>();
            if (da.cov.size() != ldw.size() || da.cov.size() != lgamma.size()) {
                rep.add("round " + std::to_string(r) + ": coverage size mismatch for client " +
                        std::to_string(da.client));
                continue;
            }
            for (size_t k = 0; k < da.cov.size(); ++k) {
                seg_count[da.cov[k]]++;
                const double size = static_cast<double>(layout.segment(da.cov[k]).size);
                const double gamma = da.delta_l1[k] / (ldw[k] + size);
                if (gamma != lgamma[k]) {
                    rep.add("round " + std::to_string(r) + ": gamma mismatch client " +
                            std::to_string(da.client) + " segment " +
                            std::to_string(da.cov[k]));
                    break;
                }
            }
        }
        const double ru_round = ru_sum / (static_cast<double>(logged.size()) * ru_max);
        if (agg.at("ru_round").get<double>() != ru_round)
            rep.add("round " + std::to_string(r) + ": ru_round mismatch");
        ru_acc += ru_round;

        size_t round_min = SIZE_MAX;
        for (const auto& [seg, cnt] : seg_count) round_min = std::min(round_min, cnt);
        if (round_min != SIZE_MAX) n_star = std::min(n_star, round_min);
        if (agg.at("n_star").get<size_t>() != (round_min == SIZE_MAX ? 0 : round_min))
            rep.add("round " + std::to_string(r) + ": n_star mismatch");
        ++rounds_done;
    }

    if (derived_drops != drops.size())
        rep.add("stale drops: derived " + std::to_string(derived_drops) + " vs logged " +
                std::to_string(drops.size()));

    rep.rounds_checked = rounds_done;
    if (summary) {
        const double ru = rounds_done ? ru_acc / static_cast<double>(rounds_done) : 0.0;
        if (summary->at("ru").get<double>() != ru)
            rep.add("summary: RU mismatch (derived " + expdetail::fmt(ru) + ")");
        if (summary->at("tau_max_observed").get<size_t>() != tau_max_observed)
            rep.add("summary: tau_max_observed mismatch");
        const size_t ns = n_star == SIZE_MAX ? 0 : n_star;
        if (summary->at("n_star").get<size_t>() != ns)
            rep.add("summary: n_star mismatch");
        if (summary->at("stale_drops").get<size_t>() != derived_drops)
            rep.add("summary: stale_drops mismatch");
    }
    return rep;
}

}  // namespace cos2p
