#pragma once

#include "poro/diff/tensor.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace poro::diff {

/// PVK1 container: magic "PVK1", little-endian u64 JSON length, a JSON
/// manifest {"meta": ..., "params": [{name, shape, dtype, byte_offset}, ...]},
/// then one blob of little-endian f64 values in manifest order.
void save_checkpoint(const std::filesystem::path& path,
                     const std::vector<std::pair<std::string, const DTensor*>>& params,
                     const nlohmann::ordered_json& meta);

struct Checkpoint {
    nlohmann::ordered_json meta;
    std::map<std::string, DTensor> params;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace poro::diff
