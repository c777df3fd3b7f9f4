#pragma once

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace poro {

/// Per-sample record in a dataset manifest. K components are lattice-unit
/// values in the order K11, K22, K33, K12, K13, K23.
struct SampleEntry {
    std::string id;
    std::string file;  // grid path relative to the dataset root
    std::uint64_t seed = 0;
    std::string provenance = "generated";  // generated | subsampled | designed
    std::string status = "new";            // new | ok | impermeable | error:<what>
    double n_F = -1.0;
    bool has_k = false;
    std::string k_mode = "none";  // none | diag | full
    std::array<bool, 3> axes_done{};
    std::array<double, 6> k{};
    std::array<long, 3> steps{};
    nlohmann::ordered_json lbm_runs = nlohmann::ordered_json::array();
};

struct Manifest {
    int schema_version = 1;
    std::vector<SampleEntry> samples;

    SampleEntry* find(const std::string& id);

    /// manifest.json inside the dataset directory; writes are atomic.
    static Manifest load(const std::filesystem::path& dir);
    static bool exists(const std::filesystem::path& dir);
    void save(const std::filesystem::path& dir) const;
};

}  // namespace poro
