// Command-line front end: run experiments, evaluate checkpoints, partition
// datasets, inspect trained masks, and verify event logs by replay.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cos2p/checkpoint.hpp"
#include "cos2p/config.hpp"
#include "cos2p/dataset.hpp"
#include "cos2p/experiment.hpp"
#include "cos2p/replay.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int cmd_run(const std::string& config_path, const std::string& out_dir) {
    cos2p::ExperimentConfig cfg = cos2p::load_config(config_path);
    cos2p::RunResult r = cos2p::run_experiment(cfg, out_dir);
    json out{{"server", {{"top1", r.server.top1}, {"top5", r.server.top5},
                         {"f1", r.server.macro_f1}}},
             {"client_avg", {{"top1", r.client_avg.top1}, {"top5", r.client_avg.top5},
                             {"f1", r.client_avg.macro_f1}}},
             {"ru", r.ru},
             {"n_star", r.n_star},
             {"tau_max_observed", r.tau_max_observed},
             {"out_dir", out_dir}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_evaluate(const std::string& ckpt_path, const std::string& dataset_dir) {
    cos2p::Checkpoint ck = cos2p::load_checkpoint(ckpt_path);
    cos2p::LabeledDataset ds = cos2p::load_dataset(dataset_dir);
    cos2p::require(ds.dim() == ck.config.input_dim, "evaluate: dataset dim mismatch");
    cos2p::require(ds.classes == ck.config.classes, "evaluate: dataset class count mismatch");

    cos2p::ModelLayout layout(ck.config);
    std::map<size_t, cos2p::ClassifierRef> heads;
    heads[layout.cfg.blocks] =
        cos2p::classifier_ref(layout, ck.params.data(), layout.cfg.blocks);
    cos2p::ForwardCache cache;
    cos2p::forward(layout, ck.params.data(), ds.features,
                   cos2p::DepthWindow::full(layout.cfg.blocks), heads, cache);
    cos2p::Metrics m =
        cos2p::evaluate_logits(cache.logits.at(layout.cfg.blocks), ds.labels, ds.classes);
    std::cout << json{{"top1", m.top1}, {"top5", m.top5}, {"f1", m.macro_f1},
                      {"n", ds.size()}}.dump(2)
              << "\n";
    return 0;
}

int cmd_partition(const std::string& dataset_dir, size_t n_clients, double alpha,
                  uint64_t seed, const std::string& out_dir) {
    cos2p::LabeledDataset ds = cos2p::load_dataset(dataset_dir);
    auto shards = cos2p::dirichlet_partition(ds.labels, n_clients, alpha, seed);
    fs::create_directories(out_dir);
    for (size_t i = 0; i < shards.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "client_%03zu.json", i);
        std::ofstream f(fs::path(out_dir) / name);
        f << json{{"client", i}, {"alpha", alpha}, {"seed", seed},
                  {"indices", shards[i]}}.dump()
          << "\n";
    }
    std::cout << json{{"clients", n_clients}, {"out_dir", out_dir}}.dump(2) << "\n";
    return 0;
}

int cmd_inspect_mask(const std::string& masks_path) {
    std::ifstream f(masks_path);
    cos2p::require(f.good(), "inspect-mask: cannot open " + masks_path);
    json masks = json::parse(f);
    for (const auto& client : masks) {
        const size_t id = client.at("client").get<size_t>();
        for (const auto& [block, state] : client.at("blocks").items()) {
            for (const char* layer : {"msa", "fc1", "fc2"}) {
                const auto p = state.at(layer).at("p").get<std::vector<double>>();
                const auto m = state.at(layer).at("m").get<std::vector<int>>();
                double kept = 0.0;
                for (int b : m) kept += b;
                std::vector<int> hist(10, 0);
                for (double v : p)
                    hist[std::min<size_t>(9, static_cast<size_t>(v * 10.0))]++;
                std::cout << json{{"client", id},
                                  {"block", std::stoul(block)},
                                  {"layer", layer},
                                  {"segments", p.size()},
                                  {"keep_ratio", kept / static_cast<double>(m.size())},
                                  {"frozen", state.at("frozen").get<bool>()},
                                  {"p_hist", hist}}
                                 .dump()
                          << "\n";
            }
        }
    }
    return 0;
}

int cmd_replay(const std::string& events_path, const std::string& config_path,
               const std::string& summary_path) {
    cos2p::ExperimentConfig cfg = cos2p::load_config(config_path);
    json summary;
    const json* sp = nullptr;
    if (!summary_path.empty()) {
        std::ifstream f(summary_path);
        cos2p::require(f.good(), "replay: cannot open " + summary_path);
        summary = json::parse(f);
        sp = &summary;
    }
    cos2p::ReplayReport rep = cos2p::replay_events(events_path, cfg, sp);
    json out{{"rounds_checked", rep.rounds_checked},
             {"clean", rep.clean()},
             {"diffs", rep.diffs}};
    std::cout << out.dump(2) << "\n";
    return rep.clean() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cos2p: semi-asynchronous collaborative training simulator with "
                 "structured pruning"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out", ckpt_path, dataset_dir, masks_path;
    std::string events_path, summary_path;
    size_t n_clients = 4;
    double alpha = 1.5;
    uint64_t seed = 42;

    auto* run = app.add_subcommand("run", "run an experiment from a JSON config");
    run->add_option("-c,--config", config_path, "config file")->required();
    run->add_option("-o,--out", out_dir, "output directory");

    auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint on a dataset directory");
    ev->add_option("-m,--model", ckpt_path, "checkpoint file")->required();
    ev->add_option("-d,--data", dataset_dir, "dataset directory")->required();

    auto* part = app.add_subcommand("partition", "write Dirichlet per-client index files");
    part->add_option("-d,--data", dataset_dir, "dataset directory")->required();
    part->add_option("-n,--clients", n_clients, "number of clients");
    part->add_option("-a,--alpha", alpha, "Dirichlet concentration");
    part->add_option("-s,--seed", seed, "partition seed");
    part->add_option("-o,--out", out_dir, "output directory");

    auto* im = app.add_subcommand("inspect-mask", "emit per-layer keep ratios as JSON lines");
    im->add_option("-i,--input", masks_path, "masks.json from a run")->required();

    auto* rp = app.add_subcommand("replay", "re-derive delays and admissions from an event log");
    rp->add_option("-e,--events", events_path, "events.jsonl from a run")->required();
    rp->add_option("-c,--config", config_path, "config the run used")->required();
    rp->add_option("-s,--summary", summary_path, "summary.json to diff against");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return cmd_run(config_path, out_dir);
        if (ev->parsed()) return cmd_evaluate(ckpt_path, dataset_dir);
        if (part->parsed()) return cmd_partition(dataset_dir, n_clients, alpha, seed, out_dir);
        if (im->parsed()) return cmd_inspect_mask(masks_path);
        if (rp->parsed()) return cmd_replay(events_path, config_path, summary_path);
    } catch (const cos2p::ConfigError& e) {
        std::cerr << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
