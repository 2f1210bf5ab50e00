// Experiment configuration: one JSON document, every field range-checked at
// load, unknown keys rejected, defaults documented in the README.
#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cos2p/client.hpp"
#include "cos2p/model.hpp"

namespace cos2p {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class FedMode { Cos2p, SyncFedAvg, RandomMask, FullAsync };

inline std::string to_string(FedMode m) {
    switch (m) {
        case FedMode::Cos2p: return "cos2p";
        case FedMode::SyncFedAvg: return "sync_fedavg";
        case FedMode::RandomMask: return "random_mask";
        default: return "full_async";
    }
}

struct FederationConfig {
    size_t n_clients = 4;
    double mu = 0.5;
    double t_clk = 60.0;
    size_t rounds = 120;
    size_t tau_max = 10;
    FedMode mode = FedMode::Cos2p;
};

struct ClientConfig {
    double r_depth = 0.5;
    double r_width = 0.5;
    std::optional<double> r_n;  // redundant declaration, checked when present
    double speed = 0.01;
    double comm_latency = 1.0;
    double dataset_fraction = 1.0;
    double jitter_sigma = 0.1;
};

struct DataConfig {
    size_t dim = 32;
    size_t classes = 10;
    size_t n = 100;  // per-class sample count of the training pool
    double alpha = 1.5;
    double separation = 3.0;
    uint64_t seed = 42;
};

struct ExperimentConfig {
    ModelConfig model;  // input_dim is taken from data.dim
    FederationConfig federation;
    std::vector<ClientConfig> clients;
    TrainParams train;
    double server_eta = 0.0;  // 0: use the client learning rate
    DataConfig data;
};

namespace cfgdetail {

inline void reject_unknown(const nlohmann::json& obj, const std::set<std::string>& allowed,
                           const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (!allowed.count(it.key()))
            throw ConfigError("unknown key: " + where + "." + it.key());
    }
}

template <typename T>
void get_field(const nlohmann::json& obj, const char* key, T& out) {
    if (obj.contains(key)) {
        try {
            out = obj.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(std::string("bad value type for ") + key);
        }
    }
}

inline void check(bool ok, const std::string& field, const std::string& what) {
    if (!ok) throw ConfigError("config error: " + field + ": " + what);
}

}  // namespace cfgdetail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
    using namespace cfgdetail;
    ExperimentConfig c;
    reject_unknown(j, {"model", "federation", "clients", "train", "data"}, "<root>");

    if (j.contains("data")) {
        const auto& d = j.at("data");
        reject_unknown(d, {"dim", "classes", "n", "alpha", "separation", "seed"}, "data");
        get_field(d, "dim", c.data.dim);
        get_field(d, "classes", c.data.classes);
        get_field(d, "n", c.data.n);
        get_field(d, "alpha", c.data.alpha);
        get_field(d, "separation", c.data.separation);
        get_field(d, "seed", c.data.seed);
    }
    check(c.data.dim >= 1, "data.dim", "must be >= 1");
    check(c.data.classes >= 2, "data.classes", "must be >= 2");
    check(c.data.n >= 1, "data.n", "must be >= 1");
    check(c.data.alpha > 0.0, "data.alpha", "must be > 0");
    check(c.data.separation >= 0.0, "data.separation", "must be >= 0");

    c.model.classes = c.data.classes;
    if (j.contains("model")) {
        const auto& m = j.at("model");
        reject_unknown(m, {"blocks", "hidden", "heads", "mlp_ratio", "classes", "group_size"},
                       "model");
        get_field(m, "blocks", c.model.blocks);
        get_field(m, "hidden", c.model.hidden);
        get_field(m, "heads", c.model.heads);
        get_field(m, "mlp_ratio", c.model.mlp_ratio);
        get_field(m, "classes", c.model.classes);
        get_field(m, "group_size", c.model.group_size);
    }
    c.model.input_dim = c.data.dim;
    check(c.model.classes == c.data.classes, "model.classes", "must equal data.classes");
    check(c.model.blocks >= 1, "model.blocks", "must be >= 1");
    check(c.model.heads >= 1 && c.model.hidden % c.model.heads == 0, "model.hidden",
          "must be divisible by model.heads");
    check(c.model.mlp_hidden() % c.model.group() == 0 && c.model.hidden % c.model.group() == 0,
          "model.group_size", "must divide every linear output dim");

    if (j.contains("federation")) {
        const auto& f = j.at("federation");
        reject_unknown(f, {"n", "mu", "t_clk", "rounds", "tau_max", "mode"}, "federation");
        get_field(f, "n", c.federation.n_clients);
        get_field(f, "mu", c.federation.mu);
        get_field(f, "t_clk", c.federation.t_clk);
        get_field(f, "rounds", c.federation.rounds);
        get_field(f, "tau_max", c.federation.tau_max);
        if (f.contains("mode")) {
            const std::string m = f.at("mode").get<std::string>();
            if (m == "cos2p") c.federation.mode = FedMode::Cos2p;
            else if (m == "sync_fedavg") c.federation.mode = FedMode::SyncFedAvg;
            else if (m == "random_mask") c.federation.mode = FedMode::RandomMask;
            else if (m == "full_async") c.federation.mode = FedMode::FullAsync;
            else throw ConfigError("config error: federation.mode: unknown mode '" + m + "'");
        }
    }
    check(c.federation.n_clients >= 1, "federation.n", "must be >= 1");
    check(c.federation.mu > 0.0 && c.federation.mu <= 1.0, "federation.mu",
          "must be in (0, 1]");
    check(c.federation.t_clk >= 0.0, "federation.t_clk", "must be >= 0");
    check(c.federation.tau_max >= 1, "federation.tau_max", "must be >= 1");

    c.clients.assign(c.federation.n_clients, ClientConfig{});
    if (j.contains("clients")) {
        const auto& arr = j.at("clients");
        check(arr.is_array(), "clients", "must be an array");
        check(arr.size() == c.federation.n_clients, "clients",
              "array size must equal federation.n");
        for (size_t i = 0; i < arr.size(); ++i) {
            const auto& e = arr[i];
            const std::string where = "clients[" + std::to_string(i) + "]";
            reject_unknown(e, {"r_depth", "r_width", "r_n", "speed", "comm_latency",
                               "dataset_fraction", "jitter_sigma"}, where);
            auto& cc = c.clients[i];
            get_field(e, "r_depth", cc.r_depth);
            get_field(e, "r_width", cc.r_width);
            get_field(e, "speed", cc.speed);
            get_field(e, "comm_latency", cc.comm_latency);
            get_field(e, "dataset_fraction", cc.dataset_fraction);
            get_field(e, "jitter_sigma", cc.jitter_sigma);
            if (e.contains("r_n")) cc.r_n = e.at("r_n").get<double>();
            check(cc.r_depth > 0.0 && cc.r_depth <= 1.0, where + ".r_depth",
                  "must be in (0, 1]");
            check(cc.r_width > 0.0 && cc.r_width <= 1.0, where + ".r_width",
                  "must be in (0, 1]");
            check(cc.speed > 0.0, where + ".speed", "must be > 0");
            check(cc.comm_latency >= 0.0, where + ".comm_latency", "must be >= 0");
            check(cc.dataset_fraction > 0.0 && cc.dataset_fraction <= 1.0,
                  where + ".dataset_fraction", "must be in (0, 1]");
            check(cc.jitter_sigma >= 0.0, where + ".jitter_sigma", "must be >= 0");
            if (cc.r_n)
                check(std::fabs(*cc.r_n - cc.r_width * cc.r_depth) <= 1e-12, where + ".r_n",
                      "must equal r_width * r_depth");
            // The window must hold at least one block.
            check(static_cast<size_t>(std::floor(c.model.blocks * cc.r_depth)) >= 1,
                  where + ".r_depth", "too small: floor(blocks * r_depth) must be >= 1");
        }
    }

    if (j.contains("train")) {
        const auto& t = j.at("train");
        reject_unknown(t,
                       {"eta", "epochs", "eta_hat", "epochs_hat", "q_hat", "lambda1", "lambda2",
                        "temperature", "batch", "momentum", "freeze_policy",
                        "mask_sample_per_epoch", "reverse_kl", "server_eta"},
                       "train");
        get_field(t, "eta", c.train.eta);
        get_field(t, "epochs", c.train.epochs);
        get_field(t, "eta_hat", c.train.eta_hat);
        get_field(t, "epochs_hat", c.train.epochs_hat);
        get_field(t, "q_hat", c.train.q_hat);
        get_field(t, "lambda1", c.train.lambda1);
        get_field(t, "lambda2", c.train.lambda2);
        get_field(t, "temperature", c.train.temperature);
        get_field(t, "batch", c.train.batch);
        get_field(t, "momentum", c.train.momentum);
        get_field(t, "mask_sample_per_epoch", c.train.mask_sample_per_epoch);
        get_field(t, "reverse_kl", c.train.reverse_kl);
        get_field(t, "server_eta", c.server_eta);
        if (t.contains("freeze_policy")) {
            const std::string p = t.at("freeze_policy").get<std::string>();
            if (p == "threshold") c.train.freeze_policy = MaskPolicy::Threshold;
            else if (p == "topk") c.train.freeze_policy = MaskPolicy::TopK;
            else throw ConfigError("config error: train.freeze_policy: unknown policy '" + p + "'");
        }
    }
    check(c.train.eta > 0.0, "train.eta", "must be > 0");
    check(c.train.eta_hat > 0.0, "train.eta_hat", "must be > 0");
    check(c.train.lambda1 >= 0.0, "train.lambda1", "must be >= 0");
    check(c.train.lambda2 >= 0.0 && c.train.lambda2 <= 1.0, "train.lambda2",
          "must be in [0, 1]");
    check(c.train.temperature > 0.0, "train.temperature", "must be > 0");
    check(c.train.batch >= 1, "train.batch", "must be >= 1");
    check(c.train.momentum >= 0.0 && c.train.momentum < 1.0, "train.momentum",
          "must be in [0, 1)");
    check(c.server_eta >= 0.0, "train.server_eta", "must be >= 0");
    return c;
}

// Loads, validates, and fills defaults. An empty file means all defaults.
// COS2P_SEED in the environment overrides data.seed.
inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f.good()) throw ConfigError("config error: cannot open " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    std::string text = ss.str();
    if (text.find_first_not_of(" \t\r\n") == std::string::npos) text = "{}";

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        size_t line = 1;
        for (size_t i = 0; i + 1 < e.byte && i < text.size(); ++i)
            if (text[i] == '\n') ++line;
        throw ConfigError("config parse error at line " + std::to_string(line) + ": " +
                          e.what());
    }
    ExperimentConfig c = parse_config(j);
    if (const char* env = std::getenv("COS2P_SEED")) {
        c.data.seed = static_cast<uint64_t>(std::strtoull(env, nullptr, 10));
    }
    return c;
}

}  // namespace cos2p
