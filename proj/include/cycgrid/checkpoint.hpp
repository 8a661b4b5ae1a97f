#pragma once

#include <optional>
#include <string>

#include "cycgrid/model.hpp"

namespace cycgrid {

// Binary checkpoint, magic "CYCG", little-endian, 64-bit row-major tensors.
// The stored vocab hash must match the loader's vocabulary.
void save_checkpoint(const Policy& policy, const OptimState* opt, const std::string& path);

struct LoadedCheckpoint {
    Policy policy;
    std::optional<OptimState> opt;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace cycgrid
