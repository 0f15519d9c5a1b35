#pragma once

// Checkpoint directory format "cwm-ckpt-1":
//   manifest.json  tensor names, shapes, byte offsets, dtype, config hash
//   weights.bin    concatenated little-endian IEEE-754 float32, row-major,
//                  in manifest order

#include "cwm/tensor.hpp"

#include <string>
#include <utility>
#include <vector>

namespace cwm {

inline constexpr const char* kCheckpointFormat = "cwm-ckpt-1";

struct Checkpoint {
    std::string config_hash;
    std::vector<std::pair<std::string, TensorF>> tensors;

    const TensorF& get(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return t;
        throw std::runtime_error("cwm: checkpoint missing tensor '" + name + "'");
    }
    bool has(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return true;
        return false;
    }
};

void save_checkpoint(const std::string& dir,
                     const std::vector<std::pair<std::string, TensorF>>& tensors,
                     const std::string& config_hash);

Checkpoint load_checkpoint(const std::string& dir);

}  // namespace cwm
