#include <gtest/gtest.h>

#include "cos2p/sim.hpp"

using namespace cos2p;

namespace {

ModelConfig tiny() {
    ModelConfig c;
    c.input_dim = 2;
    c.hidden = 4;
    c.heads = 2;
    c.mlp_ratio = 1;
    c.classes = 2;
    c.blocks = 1;
    return c;
}

// Compute stub: empty updates, unit epoch, unit dataset, so durations are
// fully controlled by the profile speeds.
class StubCompute : public LocalCompute {
public:
    explicit StubCompute(const ModelLayout& L) : layout_(&L) {}
    ClientUpdate train(size_t client, size_t round, const std::vector<double>&) override {
        ClientUpdate u;
        u.client = client;
        u.base_round = round;
        u.coverage.bits.assign(layout_->n_segments(), 0);
        return u;
    }
    double epochs(size_t, size_t) const override { return 1.0; }
    size_t dataset_size(size_t) const override { return 1; }

private:
    const ModelLayout* layout_;
};

ClientProfile prof(double speed, double comm = 0.0, double jitter = 0.0) {
    ClientProfile p;
    p.speed = speed;
    p.comm_latency = comm;
    p.jitter_sigma = jitter;
    p.r_n = 1.0;
    return p;
}

}  // namespace

TEST(ClientTime, LinearInWorkAndDeterministic) {
    ClientProfile p;
    p.speed = 0.001;
    p.comm_latency = 1.0;
    p.jitter_sigma = 0.0;
    p.r_n = 0.25;
    Rng r1(1), r2(1);
    EXPECT_DOUBLE_EQ(client_time(p, 5.0, 1000, r1), 3.25);

    // Halving r_n halves the training component.
    ClientProfile half = p;
    half.r_n = 0.125;
    EXPECT_DOUBLE_EQ(client_time(half, 5.0, 1000, r2) - 2.0, (3.25 - 2.0) / 2.0);

    // Identical profiles and seed streams give identical jittered durations.
    ClientProfile j = p;
    j.jitter_sigma = 0.2;
    Rng a(42), b(42);
    for (int i = 0; i < 20; ++i)
        EXPECT_DOUBLE_EQ(client_time(j, 5.0, 1000, a), client_time(j, 5.0, 1000, b));
}

TEST(Simulation, ZeroRoundsKeepInitialWeights) {
    ModelLayout L(tiny());
    std::vector<double> init(L.n_params, 0.75);
    AggServer server(L, init, 0.1, 5);
    StubCompute compute(L);
    SimSettings s;
    s.rounds = 0;
    s.mu = 1.0;
    SimResult res = run_simulation(server, {prof(1.0)}, compute, s, 1);
    EXPECT_TRUE(res.rounds.empty());
    EXPECT_TRUE(res.log.dispatches.empty());
    EXPECT_EQ(server.global(), init);
}

// mu=0.5, N=4, arrivals at 1,2,9,20, T_clk=5: the round admits {1,2}; the
// timer closes at 7 and arrivals 9 and 20 roll to later rounds.
TEST(Simulation, AdmissionWindowReplaysHandExample) {
    ModelLayout L(tiny());
    AggServer server(L, std::vector<double>(L.n_params, 0.0), 0.1, 50);
    StubCompute compute(L);
    SimSettings s;
    s.rounds = 2;
    s.mu = 0.5;
    s.t_clk = 5.0;
    std::vector<ClientProfile> profiles{prof(1), prof(2), prof(9), prof(20)};
    SimResult res = run_simulation(server, profiles, compute, s, 3);

    const RoundRecord& r0 = res.rounds[0];
    ASSERT_EQ(r0.admitted.size(), 2u);
    EXPECT_EQ(r0.admitted[0].client, 0u);
    EXPECT_EQ(r0.admitted[1].client, 1u);
    EXPECT_DOUBLE_EQ(r0.t_quota, 2.0);
    EXPECT_DOUBLE_EQ(r0.t_timeout, 7.0);

    // Round 2: clients 0,1 redispatched at t=7 arrive at 8 and 9; straggler 2
    // (t=9) rolls in with tau=1; client 3 (t=20) stays out.
    const RoundRecord& r1 = res.rounds[1];
    ASSERT_EQ(r1.admitted.size(), 3u);
    EXPECT_EQ(r1.admitted[0].client, 0u);
    EXPECT_EQ(r1.admitted[1].client, 1u);
    EXPECT_EQ(r1.admitted[2].client, 2u);
    EXPECT_EQ(r1.admitted[2].tau, 1u);
    EXPECT_EQ(r1.admitted[0].tau, 0u);
}

TEST(Simulation, SynchronousBarrierWaitsForSlowest) {
    ModelLayout L(tiny());
    AggServer server(L, std::vector<double>(L.n_params, 0.0), 0.1, 5);
    StubCompute compute(L);
    SimSettings s;
    s.rounds = 3;
    s.mu = 1.0;
    s.t_clk = 0.0;
    std::vector<ClientProfile> profiles{prof(3), prof(7), prof(5)};
    SimResult res = run_simulation(server, profiles, compute, s, 4);
    double t = 0.0;
    for (const auto& r : res.rounds) {
        ASSERT_EQ(r.admitted.size(), 3u);
        EXPECT_DOUBLE_EQ(r.t_timeout - r.t_start, 7.0);  // slowest client
        EXPECT_DOUBLE_EQ(r.t_start, t);
        t = r.t_timeout;
        for (const auto& a : r.admitted) EXPECT_EQ(a.tau, 0u);
    }
}

TEST(Simulation, EventLogDigestStableAcrossRuns) {
    ModelLayout L(tiny());
    auto once = [&] {
        AggServer server(L, std::vector<double>(L.n_params, 0.1), 0.1, 20);
        StubCompute compute(L);
        SimSettings s;
        s.rounds = 12;
        s.mu = 0.5;
        s.t_clk = 1.0;
        std::vector<ClientProfile> profiles;
        for (int i = 0; i < 8; ++i) profiles.push_back(prof(1.0 + i, 0.2, 0.3));
        SimResult res = run_simulation(server, profiles, compute, s, 99);
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& d : res.log.dispatches) {
            h = fnv1a64_bytes(&d.t, sizeof(d.t), h);
            h = fnv1a64_bytes(&d.client, sizeof(d.client), h);
        }
        for (const auto& a : res.log.arrivals) h = fnv1a64_bytes(&a.t, sizeof(a.t), h);
        h = digest_doubles(server.global(), h);
        return h;
    };
    EXPECT_EQ(once(), once());
}

TEST(Simulation, CausalityAndAvailability) {
    ModelLayout L(tiny());
    AggServer server(L, std::vector<double>(L.n_params, 0.0), 0.1, 30);
    StubCompute compute(L);
    SimSettings s;
    s.rounds = 10;
    s.mu = 0.5;
    s.t_clk = 0.5;
    std::vector<ClientProfile> profiles{prof(1, 0.1, 0.2), prof(4, 0.1, 0.2),
                                        prof(9, 0.1, 0.2), prof(2, 0.1, 0.2)};
    SimResult res = run_simulation(server, profiles, compute, s, 7);
    // Every arrival strictly follows its dispatch.
    for (const auto& a : res.log.arrivals) EXPECT_GT(a.t, a.dispatch_t);
    // At most one update per client per round.
    for (const auto& r : res.rounds) {
        std::set<size_t> seen;
        for (const auto& ad : r.admitted) EXPECT_TRUE(seen.insert(ad.client).second);
    }
}

TEST(ResourceUtilization, HandExamples) {
    // One round, times (5, 10): RU = 15 / (2 * 10) = 0.75.
    RoundRecord r;
    r.admitted.resize(2);
    r.admitted[0].duration = 5.0;
    r.admitted[1].duration = 10.0;
    r.ru_round = round_ru(r.admitted);
    EXPECT_DOUBLE_EQ(r.ru_round, 0.75);
    EXPECT_DOUBLE_EQ(resource_utilization({r}), 0.75);

    // All equal times: RU = 1.
    for (auto& a : r.admitted) a.duration = 4.0;
    EXPECT_DOUBLE_EQ(round_ru(r.admitted), 1.0);

    EXPECT_THROW(resource_utilization({}), std::runtime_error);
}

// Fully asynchronous mode (one admission per round, no grace window) has
// RU = 1 exactly.
TEST(ResourceUtilization, FullyAsyncIsExactlyOne) {
    ModelLayout L(tiny());
    AggServer server(L, std::vector<double>(L.n_params, 0.0), 0.1, 100);
    StubCompute compute(L);
    SimSettings s;
    s.rounds = 20;
    s.mu = 0.5;
    s.t_clk = 0.0;
    s.quota_override = 1;
    std::vector<ClientProfile> profiles{prof(1, 0.3, 0.4), prof(3, 0.3, 0.4),
                                        prof(11, 0.3, 0.4), prof(5, 0.3, 0.4)};
    SimResult res = run_simulation(server, profiles, compute, s, 11);
    for (const auto& r : res.rounds) ASSERT_EQ(r.admitted.size(), 1u);
    EXPECT_DOUBLE_EQ(resource_utilization(res.rounds), 1.0);
}

TEST(Simulation, StaleUpdatesDroppedAndLogged) {
    ModelLayout L(tiny());
    AggServer server(L, std::vector<double>(L.n_params, 0.0), 0.1, 1);  // tau_max = 1
    StubCompute compute(L);
    SimSettings s;
    s.rounds = 200;
    s.mu = 0.25;  // quota 1 via mu
    s.t_clk = 0.0;
    // One very slow client: its update ages beyond tau_max while others spin.
    std::vector<ClientProfile> profiles{prof(1), prof(1.1), prof(1.2), prof(50)};
    SimResult res = run_simulation(server, profiles, compute, s, 13);
    EXPECT_GT(res.stale_drops, 0u);
    EXPECT_EQ(res.stale_drops, res.log.drops.size());
    for (const auto& d : res.log.drops) EXPECT_GT(d.tau, 1u);
}
