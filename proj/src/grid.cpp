#include "poro/grid.hpp"

#include "poro/error.hpp"
#include "poro/rng.hpp"

#include <cstring>
#include <fstream>
#include <string>

namespace poro {

namespace {

constexpr char kMagic[4] = {'V', 'X', 'G', '1'};

void put_u32(std::string& s, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& s, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

double get_f64(const unsigned char* p) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

}  // namespace

void VoxelGrid::validate() const {
    if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0)
        throw ConfigError("VoxelGrid: dims must be positive");
    if (voxels.size() != static_cast<std::size_t>(dims[0]) * dims[1] * dims[2])
        throw ConfigError("VoxelGrid: voxel count does not match dims");
    if (!(spacing.array() > 0.0).all())
        throw ConfigError("VoxelGrid: spacing must be strictly positive");
    for (std::uint8_t v : voxels)
        if (v > 1) throw ConfigError("VoxelGrid: voxels must be 0 or 1");
}

void GrayVolume::validate() const {
    if (values.size() != static_cast<std::size_t>(dims[0]) * dims[1] * dims[2])
        throw ConfigError("GrayVolume: value count does not match dims");
    for (double v : values)
        if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("GrayVolume: values must lie in [0, 1]");
}

void GeneratorConfig::validate() const {
    if (image_size <= 0 || depth <= 0 || pore_size <= 0 || count < 0)
        throw ConfigError("GeneratorConfig: sizes must be positive");
    if (pore_size > image_size)
        throw ConfigError("GeneratorConfig: pore_size exceeds image_size");
    if (n_pores_min < 0 || n_pores_min > n_pores_max)
        throw ConfigError("GeneratorConfig: need 0 <= n_pores_min <= n_pores_max");
    const long cells = static_cast<long>(image_size) * image_size;
    if (static_cast<long>(n_pores_max) * pore_size * pore_size > cells)
        throw ConfigError("GeneratorConfig: n_pores_max pores cannot fit without overlap");
}

VoxelGrid generate_synthetic_one(const GeneratorConfig& cfg, std::uint64_t sample_seed) {
    cfg.validate();
    Rng rng(sample_seed);
    const int span = cfg.image_size - cfg.pore_size;  // inclusive corner range

    std::vector<std::array<int, 2>> corners;
    for (;;) {
        corners.clear();
        const int n_pores = static_cast<int>(rng.uniform_int(cfg.n_pores_min, cfg.n_pores_max));
        int rejects = 0;
        bool restart = false;
        while (static_cast<int>(corners.size()) < n_pores) {
            const int cy = static_cast<int>(rng.uniform_int(0, span));
            const int cz = static_cast<int>(rng.uniform_int(0, span));
            bool overlaps = false;
            for (const auto& c : corners) {
                // shared edges allowed, interior intersection not
                if (std::abs(c[0] - cy) < cfg.pore_size && std::abs(c[1] - cz) < cfg.pore_size) {
                    overlaps = true;
                    break;
                }
            }
            if (overlaps) {
                if (++rejects >= 10000) {
                    restart = true;  // resample the pore count and start over
                    break;
                }
            } else {
                rejects = 0;
                corners.push_back({cy, cz});
            }
        }
        if (!restart) break;
    }

    // solid cross-section with square pores carved out, extruded along x
    VoxelGrid g(cfg.depth, cfg.image_size, cfg.image_size, 1);
    std::vector<std::uint8_t> slice(static_cast<std::size_t>(cfg.image_size) * cfg.image_size, 1);
    for (const auto& c : corners)
        for (int dz = 0; dz < cfg.pore_size; ++dz)
            for (int dy = 0; dy < cfg.pore_size; ++dy)
                slice[static_cast<std::size_t>(c[0] + dy) + static_cast<std::size_t>(cfg.image_size) * (c[1] + dz)] = 0;

    for (int z = 0; z < cfg.image_size; ++z)
        for (int y = 0; y < cfg.image_size; ++y) {
            const std::uint8_t v = slice[static_cast<std::size_t>(y) + static_cast<std::size_t>(cfg.image_size) * z];
            for (int x = 0; x < cfg.depth; ++x) g.at(x, y, z) = v;
        }
    return g;
}

std::vector<VoxelGrid> generate_synthetic(const GeneratorConfig& cfg) {
    cfg.validate();
    std::vector<VoxelGrid> out;
    out.reserve(static_cast<std::size_t>(cfg.count));
    for (int i = 0; i < cfg.count; ++i)
        out.push_back(generate_synthetic_one(cfg, cfg.seed + static_cast<std::uint64_t>(i)));
    return out;
}

double porosity(const VoxelGrid& g) {
    std::size_t pores = 0;
    for (std::uint8_t v : g.voxels) pores += (v == 0);
    return static_cast<double>(pores) / static_cast<double>(g.voxels.size());
}

std::vector<VoxelGrid> subsample(const VoxelGrid& g,
                                 const std::array<int, 3>& size,
                                 const std::array<int, 3>& stride) {
    for (int a = 0; a < 3; ++a) {
        if (size[a] <= 0 || size[a] > g.dims[a])
            throw ArgumentError("subsample: size exceeds grid dims on axis " + std::to_string(a));
        if (stride[a] <= 0) throw ArgumentError("subsample: strides must be positive");
    }
    std::vector<VoxelGrid> out;
    for (int oz = 0; oz + size[2] <= g.dims[2]; oz += stride[2])
        for (int oy = 0; oy + size[1] <= g.dims[1]; oy += stride[1])
            for (int ox = 0; ox + size[0] <= g.dims[0]; ox += stride[0]) {
                VoxelGrid s(size[0], size[1], size[2]);
                s.spacing = g.spacing;
                for (int z = 0; z < size[2]; ++z)
                    for (int y = 0; y < size[1]; ++y) {
                        const std::size_t src = g.index(ox, oy + y, oz + z);
                        const std::size_t dst = s.index(0, y, z);
                        std::memcpy(&s.voxels[dst], &g.voxels[src], static_cast<std::size_t>(size[0]));
                    }
                out.push_back(std::move(s));
            }
    return out;
}

VoxelGrid binarize(const GrayVolume& v, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0))
        throw ArgumentError("binarize: threshold must lie in (0, 1)");
    VoxelGrid g(v.dims[0], v.dims[1], v.dims[2]);
    for (std::size_t i = 0; i < v.values.size(); ++i)
        g.voxels[i] = v.values[i] >= threshold ? 1 : 0;
    return g;
}

void write_grid(const VoxelGrid& g, const std::filesystem::path& path) {
    g.validate();
    std::string buf;
    buf.reserve(41 + g.voxels.size());
    buf.append(kMagic, 4);
    put_u32(buf, static_cast<std::uint32_t>(g.dims[0]));
    put_u32(buf, static_cast<std::uint32_t>(g.dims[1]));
    put_u32(buf, static_cast<std::uint32_t>(g.dims[2]));
    for (int a = 0; a < 3; ++a) put_f64(buf, g.spacing[a]);
    buf.push_back(1);  // polarity: 1 means solid
    buf.append(reinterpret_cast<const char*>(g.voxels.data()), g.voxels.size());

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("write_grid: cannot open " + tmp.string());
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!out) throw IoError("write_grid: write failed on " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

VoxelGrid read_grid(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("read_grid: cannot open " + path.string());
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (data.size() < 41) throw FormatError("read_grid: truncated header in " + path.string());
    if (std::memcmp(data.data(), kMagic, 4) != 0)
        throw FormatError("read_grid: bad magic in " + path.string());

    const auto* p = reinterpret_cast<const unsigned char*>(data.data());
    const std::uint32_t nx = get_u32(p + 4), ny = get_u32(p + 8), nz = get_u32(p + 12);
    constexpr std::uint64_t kMaxVoxels = std::uint64_t(1) << 33;
    const std::uint64_t n = static_cast<std::uint64_t>(nx) * ny * nz;
    if (nx == 0 || ny == 0 || nz == 0 || n > kMaxVoxels)
        throw FormatError("read_grid: dimension overflow in " + path.string());
    if (data.size() != 41 + n) throw FormatError("read_grid: truncated voxel data in " + path.string());
    if (p[40] != 1) throw FormatError("read_grid: unsupported polarity flag in " + path.string());

    VoxelGrid g(static_cast<int>(nx), static_cast<int>(ny), static_cast<int>(nz));
    for (int a = 0; a < 3; ++a) g.spacing[a] = get_f64(p + 16 + 8 * a);
    std::memcpy(g.voxels.data(), data.data() + 41, n);
    g.validate();
    return g;
}

VoxelGrid transpose_axes(const VoxelGrid& g, int a, int b) {
    if (a < 0 || a > 2 || b < 0 || b > 2) throw ArgumentError("transpose_axes: axis out of range");
    if (a == b) return g;
    std::array<int, 3> perm{0, 1, 2};
    std::swap(perm[a], perm[b]);
    VoxelGrid t(g.dims[perm[0]], g.dims[perm[1]], g.dims[perm[2]]);
    t.spacing = Eigen::Vector3d(g.spacing[perm[0]], g.spacing[perm[1]], g.spacing[perm[2]]);
    std::array<int, 3> c{}, o{};
    for (c[2] = 0; c[2] < t.dims[2]; ++c[2])
        for (c[1] = 0; c[1] < t.dims[1]; ++c[1])
            for (c[0] = 0; c[0] < t.dims[0]; ++c[0]) {
                for (int k = 0; k < 3; ++k) o[perm[k]] = c[k];
                t.at(c[0], c[1], c[2]) = g.at(o[0], o[1], o[2]);
            }
    return t;
}

VoxelGrid extrude_x(const VoxelGrid& g, int depth) {
    if (depth <= 0) throw ArgumentError("extrude_x: depth must be positive");
    VoxelGrid e(depth, g.dims[1], g.dims[2]);
    e.spacing = g.spacing;
    for (int z = 0; z < g.dims[2]; ++z)
        for (int y = 0; y < g.dims[1]; ++y) {
            const std::uint8_t v = g.at(0, y, z);
            for (int x = 0; x < depth; ++x) e.at(x, y, z) = v;
        }
    return e;
}

VoxelGrid rotate90_z(const VoxelGrid& g) {
    // (x, y) -> (ny-1-y, x): solids at +x move toward +y
    VoxelGrid r(g.dims[1], g.dims[0], g.dims[2]);
    r.spacing = Eigen::Vector3d(g.spacing[1], g.spacing[0], g.spacing[2]);
    for (int z = 0; z < g.dims[2]; ++z)
        for (int y = 0; y < g.dims[1]; ++y)
            for (int x = 0; x < g.dims[0]; ++x)
                r.at(g.dims[1] - 1 - y, x, z) = g.at(x, y, z);
    return r;
}

}  // namespace poro
