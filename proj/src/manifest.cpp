#include "poro/manifest.hpp"

#include "poro/error.hpp"
#include "poro/text.hpp"

namespace poro {

SampleEntry* Manifest::find(const std::string& id) {
    for (auto& s : samples)
        if (s.id == id) return &s;
    return nullptr;
}

bool Manifest::exists(const std::filesystem::path& dir) {
    return std::filesystem::exists(dir / "manifest.json");
}

Manifest Manifest::load(const std::filesystem::path& dir) {
    const auto path = dir / "manifest.json";
    nlohmann::ordered_json j;
    try {
        j = nlohmann::ordered_json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest: parse error in " + path.string() + ": " + e.what());
    }
    Manifest m;
    m.schema_version = j.value("schema_version", 0);
    if (m.schema_version != 1)
        throw FormatError("manifest: unrecognized schema_version in " + path.string());
    for (const auto& e : j["samples"]) {
        SampleEntry s;
        s.id = e.at("id").get<std::string>();
        s.file = e.at("file").get<std::string>();
        s.seed = e.value("seed", std::uint64_t{0});
        s.provenance = e.value("provenance", std::string("generated"));
        s.status = e.value("status", std::string("new"));
        s.n_F = e.value("n_F", -1.0);
        s.k_mode = e.value("k_mode", std::string("none"));
        if (e.contains("axes_done")) {
            const auto& a = e["axes_done"];
            for (int i = 0; i < 3 && i < static_cast<int>(a.size()); ++i) s.axes_done[static_cast<std::size_t>(i)] = a[static_cast<std::size_t>(i)].get<bool>();
        }
        if (e.contains("K")) {
            s.has_k = true;
            const auto& k = e["K"];
            s.k = {k.value("K11_lu", 0.0), k.value("K22_lu", 0.0), k.value("K33_lu", 0.0),
                   k.value("K12_lu", 0.0), k.value("K13_lu", 0.0), k.value("K23_lu", 0.0)};
        }
        if (e.contains("steps")) {
            const auto& st = e["steps"];
            s.steps = {st.value("x", 0L), st.value("y", 0L), st.value("z", 0L)};
        }
        if (e.contains("lbm_runs")) s.lbm_runs = e["lbm_runs"];
        const auto file_path = dir / s.file;
        if (!std::filesystem::exists(file_path))
            throw FormatError("manifest: missing grid file " + file_path.string());
        m.samples.push_back(std::move(s));
    }
    // ids must be unique
    for (std::size_t i = 0; i < m.samples.size(); ++i)
        for (std::size_t j2 = i + 1; j2 < m.samples.size(); ++j2)
            if (m.samples[i].id == m.samples[j2].id)
                throw FormatError("manifest: duplicate id " + m.samples[i].id);
    return m;
}

void Manifest::save(const std::filesystem::path& dir) const {
    nlohmann::ordered_json j;
    j["schema_version"] = schema_version;
    auto& arr = j["samples"] = nlohmann::ordered_json::array();
    for (const auto& s : samples) {
        nlohmann::ordered_json e;
        e["id"] = s.id;
        e["file"] = s.file;
        e["seed"] = s.seed;
        e["provenance"] = s.provenance;
        e["status"] = s.status;
        e["n_F"] = s.n_F;
        if (s.k_mode != "none") {
            e["k_mode"] = s.k_mode;
            e["axes_done"] = s.axes_done;
        }
        if (s.has_k) {
            nlohmann::ordered_json k;
            k["K11_lu"] = s.k[0];
            k["K22_lu"] = s.k[1];
            k["K33_lu"] = s.k[2];
            k["K12_lu"] = s.k[3];
            k["K13_lu"] = s.k[4];
            k["K23_lu"] = s.k[5];
            e["K"] = k;
        }
        if (s.steps[0] || s.steps[1] || s.steps[2]) {
            nlohmann::ordered_json st;
            st["x"] = s.steps[0];
            st["y"] = s.steps[1];
            st["z"] = s.steps[2];
            e["steps"] = st;
        }
        if (!s.lbm_runs.empty()) e["lbm_runs"] = s.lbm_runs;
        arr.push_back(std::move(e));
    }
    write_file_atomic(dir / "manifest.json", j.dump(2) + "\n");
}

}  // namespace poro
