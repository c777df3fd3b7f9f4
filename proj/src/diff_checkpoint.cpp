#include "poro/diff/checkpoint.hpp"

#include "poro/error.hpp"

#include <cstring>
#include <fstream>

namespace poro::diff {

void save_checkpoint(const std::filesystem::path& path,
                     const std::vector<std::pair<std::string, const DTensor*>>& params,
                     const nlohmann::ordered_json& meta) {
    nlohmann::ordered_json manifest;
    manifest["meta"] = meta;
    auto& plist = manifest["params"] = nlohmann::ordered_json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : params) {
        nlohmann::ordered_json entry;
        entry["name"] = name;
        entry["shape"] = t->shape;
        entry["dtype"] = "f64";
        entry["byte_offset"] = offset;
        plist.push_back(entry);
        offset += static_cast<std::uint64_t>(t->size()) * 8;
    }
    const std::string js = manifest.dump();

    std::string buf;
    buf.reserve(12 + js.size() + offset);
    buf.append("PVK1", 4);
    const std::uint64_t jlen = js.size();
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((jlen >> (8 * i)) & 0xff));
    buf.append(js);
    for (const auto& [name, t] : params) {
        const std::size_t pos = buf.size();
        buf.resize(pos + static_cast<std::size_t>(t->size()) * 8);
        std::memcpy(buf.data() + pos, t->value.data(), static_cast<std::size_t>(t->size()) * 8);
    }

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("save_checkpoint: cannot open " + tmp.string());
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!out) throw IoError("save_checkpoint: write failed on " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_checkpoint: cannot open " + path.string());
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (data.size() < 12 || std::memcmp(data.data(), "PVK1", 4) != 0)
        throw FormatError("load_checkpoint: bad magic in " + path.string());
    std::uint64_t jlen = 0;
    for (int i = 0; i < 8; ++i)
        jlen |= static_cast<std::uint64_t>(static_cast<unsigned char>(data[4 + i])) << (8 * i);
    if (12 + jlen > data.size()) throw FormatError("load_checkpoint: truncated manifest in " + path.string());

    nlohmann::ordered_json manifest;
    try {
        manifest = nlohmann::ordered_json::parse(data.substr(12, jlen));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("load_checkpoint: manifest parse error: " + std::string(e.what()));
    }

    Checkpoint ck;
    if (manifest.contains("meta")) ck.meta = manifest["meta"];
    const std::size_t blob_begin = 12 + static_cast<std::size_t>(jlen);
    for (const auto& entry : manifest["params"]) {
        const std::string name = entry["name"].get<std::string>();
        Shape shape = entry["shape"].get<Shape>();
        if (entry["dtype"].get<std::string>() != "f64")
            throw FormatError("load_checkpoint: unsupported dtype for " + name);
        const std::uint64_t off = entry["byte_offset"].get<std::uint64_t>();
        DTensor t(shape);
        const std::size_t bytes = static_cast<std::size_t>(t.size()) * 8;
        if (blob_begin + off + bytes > data.size())
            throw FormatError("load_checkpoint: truncated blob for " + name);
        std::memcpy(t.value.data(), data.data() + blob_begin + off, bytes);
        ck.params.emplace(name, std::move(t));
    }
    return ck;
}

}  // namespace poro::diff
