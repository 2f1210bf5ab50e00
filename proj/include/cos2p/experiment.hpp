// Experiment orchestration: wires data generation, clients, server and the
// event simulation together, and persists metrics.csv, events.jsonl,
// final.ckpt, masks.json and summary.json.
#pragma once

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cos2p/checkpoint.hpp"
#include "cos2p/client.hpp"
#include "cos2p/config.hpp"
#include "cos2p/dataset.hpp"
#include "cos2p/sim.hpp"

namespace cos2p {

// Baseline modes are config toggles over the same machinery: the synchronous
// barrier pins mu=1 with no grace window, fully-async admits one update per
// round, and the random-mask baseline swaps trainable masks for fixed ones.
struct ResolvedMode {
    double mu;
    double t_clk;
    size_t quota_override;  // 0: derive from mu
    MaskMode mask_mode;
};

inline ResolvedMode resolve_mode(const ExperimentConfig& c) {
    switch (c.federation.mode) {
        case FedMode::SyncFedAvg: return {1.0, 0.0, 0, MaskMode::Trainable};
        case FedMode::FullAsync: return {c.federation.mu, 0.0, 1, MaskMode::Trainable};
        case FedMode::RandomMask:
            return {c.federation.mu, c.federation.t_clk, 0, MaskMode::RandomFixed};
        default: return {c.federation.mu, c.federation.t_clk, 0, MaskMode::Trainable};
    }
}

inline constexpr const char* kMetricsHeader =
    "round,sim_time,server_top1,server_top5,server_f1,client_top1,client_top5,client_f1,"
    "ru_running,tau_max,n_star_running,keep_ratio_mean";

namespace expdetail {

inline std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline nlohmann::json admit_json(const AdmitRecord& a) {
    return {{"client", a.client},   {"base", a.base},         {"tau", a.tau},
            {"dispatch_t", a.dispatch_t}, {"arrival_t", a.arrival_t}, {"duration", a.duration},
            {"cov", a.cov},         {"gamma", a.gamma},       {"dw_l1", a.dw_l1}};
}

inline char hexdigit(uint64_t v) { return "0123456789abcdef"[v & 0xf]; }

inline std::string hex64(uint64_t v) {
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[i] = hexdigit(v);
    return s;
}

}  // namespace expdetail

// Production LocalCompute: full two-phase client training.
class FederatedCompute : public LocalCompute {
public:
    FederatedCompute(std::vector<ClientState>& clients, const ModelLayout& layout,
                     std::vector<double> budgets, const TrainParams& tp)
        : clients_(&clients), layout_(&layout), budgets_(std::move(budgets)), tp_(tp) {}

    ClientUpdate train(size_t client, size_t round, const std::vector<double>& base) override {
        return client_round((*clients_)[client], *layout_, base, round, budgets_, tp_).update;
    }

    double epochs(size_t client, size_t round) const override {
        const bool mask_round = round < tp_.q_hat &&
                                (*clients_)[client].mask_mode == MaskMode::Trainable;
        return static_cast<double>(tp_.epochs + (mask_round ? tp_.epochs_hat : 0));
    }

    size_t dataset_size(size_t client) const override {
        return (*clients_)[client].train.size();
    }

private:
    std::vector<ClientState>* clients_;
    const ModelLayout* layout_;
    std::vector<double> budgets_;
    TrainParams tp_;
};

struct RunResult {
    Metrics server;
    Metrics client_avg;
    double ru = 0.0;
    size_t n_star = 0;
    size_t tau_max_observed = 0;
    size_t stale_drops = 0;
    double end_time = 0.0;
    std::vector<double> final_params;
};

// Everything a run needs, wired from one config: data, clients, profiles,
// the depth-budget set broadcast at setup, and the initial global weights.
struct Federation {
    ModelLayout layout;
    LabeledDataset pool;
    LabeledDataset server_test;
    std::vector<double> init;
    std::vector<ClientState> clients;
    std::vector<ClientProfile> profiles;
    std::vector<double> budgets;
    ResolvedMode mode;
    double server_eta = 0.0;
};

inline Federation make_federation(const ExperimentConfig& cfg) {
    Federation f;
    f.mode = resolve_mode(cfg);
    const uint64_t seed = cfg.data.seed;
    f.layout = ModelLayout(cfg.model);

    // Training pool plus a held-out server test set drawn from the same
    // cluster centers (one generation, per-class split; roughly 8:2 overall).
    const size_t n_test_pc = std::max<size_t>(5, cfg.data.n / 4);
    const size_t per_class = cfg.data.n + n_test_pc;
    LabeledDataset all = gen_synthetic(cfg.data.classes, cfg.data.dim, per_class,
                                       cfg.data.separation, derive_seed(seed, "data"));
    std::vector<size_t> pool_idx, test_idx;
    for (size_t c = 0; c < cfg.data.classes; ++c) {
        for (size_t i = 0; i < per_class; ++i)
            (i < cfg.data.n ? pool_idx : test_idx).push_back(c * per_class + i);
    }
    f.pool = all.subset(pool_idx);
    f.server_test = all.subset(test_idx);

    auto shards = dirichlet_partition(f.pool.labels, cfg.federation.n_clients, cfg.data.alpha,
                                      derive_seed(seed, "partition"));
    f.init = init_params(f.layout, derive_seed(seed, "init"));

    for (size_t i = 0; i < cfg.federation.n_clients; ++i) {
        const ClientConfig& cc = cfg.clients[i];
        auto idx = shards[i];
        if (cc.dataset_fraction < 1.0) {
            Rng r(derive_seed(seed, "fraction", i));
            r.shuffle(idx);
            idx.resize(std::max<size_t>(1, static_cast<size_t>(
                                               std::ceil(cc.dataset_fraction *
                                                         static_cast<double>(idx.size())))));
            std::sort(idx.begin(), idx.end());
        }
        f.clients.push_back(make_client(i, cc.r_width, cc.r_depth, f.pool.subset(idx),
                                        f.layout, f.init, seed, f.mode.mask_mode));
        f.profiles.push_back({cc.speed, cc.comm_latency, cc.jitter_sigma,
                              cc.r_width * cc.r_depth});
        f.profiles.back().validate();
        bool seen = false;
        for (double b : f.budgets) seen = seen || std::fabs(b - cc.r_depth) < 1e-12;
        if (!seen) f.budgets.push_back(cc.r_depth);
    }
    std::sort(f.budgets.begin(), f.budgets.end());
    f.server_eta = cfg.server_eta > 0.0 ? cfg.server_eta : cfg.train.eta;
    return f;
}

inline RunResult run_experiment(const ExperimentConfig& cfg,
                                const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    const uint64_t seed = cfg.data.seed;
    Federation fed = make_federation(cfg);
    const ResolvedMode mode = fed.mode;
    ModelLayout& layout = fed.layout;
    LabeledDataset& server_test = fed.server_test;
    std::vector<ClientState>& clients = fed.clients;

    AggServer server(layout, fed.init, fed.server_eta, cfg.federation.tau_max);
    FederatedCompute compute(clients, layout, fed.budgets, cfg.train);

    std::ofstream metrics(out_dir / "metrics.csv");
    metrics << kMetricsHeader << "\n";

    RunResult rr;
    double ru_acc = 0.0;
    size_t n_star_min = SIZE_MAX;
    std::vector<nlohmann::json> agg_events;

    auto server_metrics = [&]() {
        std::map<size_t, ClassifierRef> heads;
        heads[layout.cfg.blocks] = classifier_ref(layout, server.global().data(),
                                                  layout.cfg.blocks);
        ForwardCache cache;
        forward(layout, server.global().data(), server_test.features,
                DepthWindow::full(layout.cfg.blocks), heads, cache);
        return evaluate_logits(cache.logits.at(layout.cfg.blocks), server_test.labels,
                               server_test.classes);
    };
    auto client_metrics = [&]() {
        std::vector<Metrics> per;
        std::vector<size_t> sizes;
        for (const auto& c : clients) {
            if (c.test.size() == 0) continue;
            per.push_back(client_evaluate(c, layout, server.global()));
            sizes.push_back(c.test.size());
        }
        return per.empty() ? Metrics{} : client_average(per, sizes);
    };

    auto on_round = [&](const RoundRecord& rec) {
        ru_acc += rec.ru_round;
        if (rec.n_star > 0) n_star_min = std::min(n_star_min, rec.n_star);
        rr.tau_max_observed = std::max(rr.tau_max_observed, rec.tau_max_round);
        rr.server = server_metrics();
        rr.client_avg = client_metrics();
        double keep = 0.0;
        for (const auto& c : clients) keep += c.keep_ratio(layout);
        keep /= static_cast<double>(clients.size());

        using expdetail::fmt;
        metrics << rec.round << ',' << fmt(rec.t_timeout) << ',' << fmt(rr.server.top1) << ','
                << fmt(rr.server.top5) << ',' << fmt(rr.server.macro_f1) << ','
                << fmt(rr.client_avg.top1) << ',' << fmt(rr.client_avg.top5) << ','
                << fmt(rr.client_avg.macro_f1) << ','
                << fmt(ru_acc / static_cast<double>(rec.round)) << ',' << rec.tau_max_round
                << ',' << (n_star_min == SIZE_MAX ? 0 : n_star_min) << ',' << fmt(keep)
                << '\n';

        nlohmann::json adm = nlohmann::json::array();
        for (const auto& a : rec.admitted) adm.push_back(expdetail::admit_json(a));
        agg_events.push_back({{"t", rec.t_timeout},
                              {"kind", "aggregate"},
                              {"round", rec.round},
                              {"t_start", rec.t_start},
                              {"t_quota", rec.t_quota},
                              {"t_timeout", rec.t_timeout},
                              {"admitted", adm},
                              {"n_star", rec.n_star},
                              {"ru_round", rec.ru_round}});
    };

    SimSettings ss;
    ss.rounds = cfg.federation.rounds;
    ss.mu = mode.mu;
    ss.t_clk = mode.t_clk;
    ss.quota_override = mode.quota_override;
    SimResult sim = run_simulation(server, fed.profiles, compute, ss, seed, on_round);

    rr.ru = sim.rounds.empty() ? 0.0 : resource_utilization(sim.rounds);
    rr.n_star = n_star_min == SIZE_MAX ? 0 : n_star_min;
    rr.stale_drops = sim.stale_drops;
    rr.end_time = sim.end_time;
    if (sim.rounds.empty()) {
        rr.server = server_metrics();
        rr.client_avg = client_metrics();
    }
    rr.final_params = server.global();
    metrics.close();

    // events.jsonl: every event with its simulated timestamp, time-sorted.
    struct Line {
        double t;
        size_t order;
        std::string text;
    };
    std::vector<Line> lines;
    size_t order = 0;
    for (const auto& d : sim.log.dispatches) {
        lines.push_back({d.t, order++,
                         nlohmann::json{{"t", d.t}, {"kind", "dispatch"}, {"client", d.client},
                                        {"round", d.round}}
                             .dump()});
    }
    for (const auto& a : sim.log.arrivals) {
        lines.push_back({a.t, order++,
                         nlohmann::json{{"t", a.t},
                                        {"kind", "update_arrival"},
                                        {"client", a.client},
                                        {"round", a.base},
                                        {"dispatch_t", a.dispatch_t},
                                        {"cov", a.cov},
                                        {"delta_l1", a.delta_l1},
                                        {"digest", expdetail::hex64(a.digest)}}
                             .dump()});
    }
    for (const auto& s : sim.log.drops) {
        lines.push_back({s.t, order++,
                         nlohmann::json{{"t", s.t}, {"kind", "stale_drop"}, {"client", s.client},
                                        {"round", s.base}, {"agg_round", s.agg_round},
                                        {"tau", s.tau}}
                             .dump()});
    }
    for (auto& e : agg_events) {
        lines.push_back({e.at("t").get<double>(), order++, e.dump()});
    }
    std::stable_sort(lines.begin(), lines.end(), [](const Line& a, const Line& b) {
        return a.t < b.t;
    });
    {
        std::ofstream ev(out_dir / "events.jsonl");
        for (const auto& l : lines) ev << l.text << "\n";
    }

    save_checkpoint(layout, server.global(), out_dir / "final.ckpt");

    // Final per-client mask state, consumed by `inspect-mask`.
    {
        nlohmann::json mj = nlohmann::json::array();
        for (const auto& c : clients) {
            nlohmann::json blocks = nlohmann::json::object();
            for (const auto& [b, s] : c.masks) {
                auto layer_json = [](const LayerMask& lm) {
                    return nlohmann::json{{"p", lm.prob},
                                          {"m", std::vector<int>(lm.bits.begin(), lm.bits.end())}};
                };
                blocks[std::to_string(b)] = {{"frozen", s.frozen},
                                             {"msa", layer_json(s.msa)},
                                             {"fc1", layer_json(s.fc1)},
                                             {"fc2", layer_json(s.fc2)}};
            }
            mj.push_back({{"client", c.id}, {"r_width", c.r_width}, {"blocks", blocks}});
        }
        std::ofstream mf(out_dir / "masks.json");
        mf << mj.dump(2) << "\n";
    }

    {
        nlohmann::json summary{
            {"rounds", cfg.federation.rounds},
            {"mode", to_string(cfg.federation.mode)},
            {"seed", seed},
            {"server", {{"top1", rr.server.top1}, {"top5", rr.server.top5},
                        {"f1", rr.server.macro_f1}}},
            {"client_avg", {{"top1", rr.client_avg.top1}, {"top5", rr.client_avg.top5},
                            {"f1", rr.client_avg.macro_f1}}},
            {"ru", rr.ru},
            {"n_star", rr.n_star},
            {"tau_max_observed", rr.tau_max_observed},
            {"stale_drops", rr.stale_drops},
            {"end_time", rr.end_time}};
        std::ofstream sf(out_dir / "summary.json");
        sf << summary.dump(2) << "\n";
    }
    return rr;
}

}  // namespace cos2p
