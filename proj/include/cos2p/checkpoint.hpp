// Checkpoint format: 6-byte magic "COS2P1", u32 little-endian manifest
// length, a JSON manifest (model dims plus the segment table as one entry per
// contiguous range), then raw 64-bit float arrays in manifest order.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "cos2p/model.hpp"

namespace cos2p {

inline constexpr char kCheckpointMagic[6] = {'C', 'O', 'S', '2', 'P', '1'};

inline nlohmann::json checkpoint_manifest(const ModelLayout& L) {
    nlohmann::json model{{"input_dim", L.cfg.input_dim}, {"hidden", L.cfg.hidden},
                         {"heads", L.cfg.heads},         {"mlp_ratio", L.cfg.mlp_ratio},
                         {"classes", L.cfg.classes},     {"blocks", L.cfg.blocks},
                         {"group_size", L.cfg.group()}};
    nlohmann::json segs = nlohmann::json::array();
    for (const auto& s : L.segments) {
        for (const auto& r : s.ranges) {
            segs.push_back({{"name", s.name},
                            {"layer", s.layer},
                            {"offset", r.offset},
                            {"length", r.length}});
        }
    }
    return nlohmann::json{{"format", "COS2P1"}, {"model", model}, {"segments", segs}};
}

inline void save_checkpoint(const ModelLayout& L, const std::vector<double>& params,
                            const std::filesystem::path& path) {
    require(params.size() == L.n_params, "save_checkpoint: param size mismatch");
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "save_checkpoint: cannot open " + path.string());
    f.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::string manifest = checkpoint_manifest(L).dump();
    const uint32_t len = static_cast<uint32_t>(manifest.size());
    f.write(reinterpret_cast<const char*>(&len), sizeof(len));
    f.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
    nlohmann::json segs = checkpoint_manifest(L)["segments"];
    for (const auto& e : segs) {
        const size_t off = e.at("offset").get<size_t>();
        const size_t n = e.at("length").get<size_t>();
        f.write(reinterpret_cast<const char*>(params.data() + off),
                static_cast<std::streamsize>(n * sizeof(double)));
    }
    require(f.good(), "save_checkpoint: write failed");
}

struct Checkpoint {
    ModelConfig config;
    std::vector<double> params;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "load_checkpoint: cannot open " + path.string());
    char magic[6];
    f.read(magic, sizeof(magic));
    require(f.good() && std::equal(magic, magic + 6, kCheckpointMagic),
            "load_checkpoint: bad magic");
    uint32_t len = 0;
    f.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string manifest(len, '\0');
    f.read(manifest.data(), len);
    require(f.good(), "load_checkpoint: truncated manifest");
    nlohmann::json j = nlohmann::json::parse(manifest);

    Checkpoint ck;
    const auto& m = j.at("model");
    ck.config.input_dim = m.at("input_dim").get<size_t>();
    ck.config.hidden = m.at("hidden").get<size_t>();
    ck.config.heads = m.at("heads").get<size_t>();
    ck.config.mlp_ratio = m.at("mlp_ratio").get<size_t>();
    ck.config.classes = m.at("classes").get<size_t>();
    ck.config.blocks = m.at("blocks").get<size_t>();
    ck.config.group_size = m.at("group_size").get<size_t>();

    ModelLayout L(ck.config);
    ck.params.assign(L.n_params, 0.0);
    for (const auto& e : j.at("segments")) {
        const size_t off = e.at("offset").get<size_t>();
        const size_t n = e.at("length").get<size_t>();
        require(off + n <= L.n_params, "load_checkpoint: range outside parameter space");
        f.read(reinterpret_cast<char*>(ck.params.data() + off),
               static_cast<std::streamsize>(n * sizeof(double)));
    }
    require(f.good(), "load_checkpoint: truncated data");
    return ck;
}

}  // namespace cos2p
