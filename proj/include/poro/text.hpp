#pragma once

#include <charconv>
#include <filesystem>
#include <string>
#include <vector>

namespace poro {

/// Shortest round-trip decimal form of a double. Keeps CSV/JSON output
/// byte-stable across runs, which the pipeline determinism contract requires.
inline std::string fmt_double(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    (void)ec;
    return std::string(buf, ptr);
}

std::vector<std::string> split_csv_line(const std::string& line);

/// Writes `content` to `path` atomically (temp file in the same directory + rename),
/// so interrupted runs never leave half-written files behind.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

std::string read_file(const std::filesystem::path& path);

}  // namespace poro
