#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdba/nn/network.hpp"

namespace mdba::nn {

inline constexpr char kCheckpointMagic[8] = {'M', 'D', 'B', 'A', 'C', 'K', 'P', '1'};

/// Single-file archive: magic, little-endian u64 JSON length, JSON header
/// (config, step, parameter names and shapes), then raw float32 parameter
/// data in header order.
inline void save_checkpoint(const std::string& path, const Network& net) {
    nlohmann::json meta;
    meta["format"] = "mdba-checkpoint";
    meta["version"] = 1;
    meta["config"] = net.config();
    meta["step"] = net.training_step();
    nlohmann::json plist = nlohmann::json::array();
    for (const Parameter* p : net.parameters()) {
        plist.push_back({{"name", p->name}, {"shape", p->value.shape()}});
    }
    meta["parameters"] = std::move(plist);
    std::string header = meta.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    out.write(kCheckpointMagic, 8);
    uint64_t len = header.size();
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(header.data(), std::streamsize(header.size()));
    for (const Parameter* p : net.parameters())
        out.write(reinterpret_cast<const char*>(p->value.data()), std::streamsize(p->value.size() * sizeof(float)));
    if (!out) throw std::runtime_error("failed writing checkpoint: " + path);
}

/// Rebuild the network stored in `path`. When `expected` is given, a
/// config mismatch is a hard error.
inline Network load_checkpoint(const std::string& path, const NetworkConfig* expected = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw std::runtime_error("not an mdba checkpoint: " + path);
    uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 8);
    std::string header(len, '\0');
    in.read(header.data(), std::streamsize(len));
    if (!in) throw std::runtime_error("truncated checkpoint header: " + path);

    nlohmann::json meta = nlohmann::json::parse(header);
    NetworkConfig cfg = meta.at("config").get<NetworkConfig>();
    if (expected && !(cfg == *expected))
        throw std::runtime_error("checkpoint config mismatch: " + path + " stores a different NetworkConfig");

    Network net(cfg);
    net.set_training_step(meta.value("step", int64_t(0)));
    std::vector<Parameter*> params = net.parameters();
    const auto& plist = meta.at("parameters");
    if (plist.size() != params.size())
        throw std::runtime_error("checkpoint parameter count mismatch: " + path);
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& rec = plist[i];
        if (rec.at("name").get<std::string>() != params[i]->name)
            throw std::runtime_error("checkpoint parameter order mismatch at '" + params[i]->name + "': " + path);
        if (rec.at("shape").get<std::vector<int64_t>>() != params[i]->value.shape())
            throw std::runtime_error("checkpoint parameter shape mismatch at '" + params[i]->name + "': " + path);
        in.read(reinterpret_cast<char*>(params[i]->value.data()),
                std::streamsize(params[i]->value.size() * sizeof(float)));
    }
    if (!in) throw std::runtime_error("truncated checkpoint data: " + path);
    return net;
}

}  // namespace mdba::nn
