#include "cwm/checkpoint.hpp"

#include <json.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace cwm {

namespace {

void put_le32(std::ofstream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                                static_cast<unsigned char>((v >> 8) & 0xff),
                                static_cast<unsigned char>((v >> 16) & 0xff),
                                static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_le32(const unsigned char* b) {
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_checkpoint(const std::string& dir,
                     const std::vector<std::pair<std::string, TensorF>>& tensors,
                     const std::string& config_hash) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = kCheckpointFormat;
    manifest["dtype"] = "float32";
    manifest["config_hash"] = config_hash;
    nlohmann::json entries = nlohmann::json::array();

    std::ofstream weights(std::filesystem::path(dir) / "weights.bin", std::ios::binary);
    if (!weights) throw std::runtime_error("cwm: cannot write " + dir + "/weights.bin");
    std::size_t offset = 0;
    for (const auto& [name, t] : tensors) {
        nlohmann::json e;
        e["name"] = name;
        e["shape"] = t.shape();
        e["offset"] = offset;
        e["count"] = t.numel();
        entries.push_back(e);
        for (float v : t.data()) {
            std::uint32_t bits;
            std::memcpy(&bits, &v, 4);
            put_le32(weights, bits);
        }
        offset += t.numel() * 4;
    }
    manifest["tensors"] = entries;
    weights.close();

    std::ofstream mf(std::filesystem::path(dir) / "manifest.json");
    if (!mf) throw std::runtime_error("cwm: cannot write " + dir + "/manifest.json");
    mf << manifest.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::string& dir) {
    std::ifstream mf(std::filesystem::path(dir) / "manifest.json");
    if (!mf) throw std::runtime_error("cwm: missing checkpoint manifest in " + dir);
    nlohmann::json manifest = nlohmann::json::parse(mf);
    if (manifest.value("format", "") != kCheckpointFormat)
        throw std::runtime_error("cwm: unsupported checkpoint format '" +
                                 manifest.value("format", std::string("?")) + "' in " + dir);

    std::ifstream weights(std::filesystem::path(dir) / "weights.bin", std::ios::binary);
    if (!weights) throw std::runtime_error("cwm: missing " + dir + "/weights.bin");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(weights)),
                                     std::istreambuf_iterator<char>());

    Checkpoint ckpt;
    ckpt.config_hash = manifest.value("config_hash", "");
    for (const auto& e : manifest.at("tensors")) {
        const std::string name = e.at("name");
        Shape shape = e.at("shape").get<Shape>();
        const std::size_t offset = e.at("offset");
        const std::size_t count = e.at("count");
        if (offset + count * 4 > bytes.size())
            throw std::runtime_error("cwm: checkpoint tensor '" + name + "' out of bounds");
        std::vector<float> data(count);
        for (std::size_t i = 0; i < count; ++i) {
            const std::uint32_t bits = get_le32(bytes.data() + offset + i * 4);
            std::memcpy(&data[i], &bits, 4);
        }
        ckpt.tensors.emplace_back(name, TensorF(std::move(shape), std::move(data)));
    }
    return ckpt;
}

}  // namespace cwm
