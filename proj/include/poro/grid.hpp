#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace poro {

/// Binary voxel microstructure. Convention: 1 = solid, 0 = pore,
/// x-fastest storage order, physical node spacing in meters per axis.
struct VoxelGrid {
    std::array<int, 3> dims{0, 0, 0};
    Eigen::Vector3d spacing{1.0e-6, 1.0e-6, 1.0e-6};
    std::vector<std::uint8_t> voxels;

    VoxelGrid() = default;
    VoxelGrid(int nx, int ny, int nz, std::uint8_t fill = 0)
        : dims{nx, ny, nz},
          voxels(static_cast<std::size_t>(nx) * ny * nz, fill) {}

    std::size_t size() const { return voxels.size(); }
    std::size_t index(int x, int y, int z) const {
        return static_cast<std::size_t>(x) +
               static_cast<std::size_t>(dims[0]) * (static_cast<std::size_t>(y) + static_cast<std::size_t>(dims[1]) * z);
    }
    std::uint8_t at(int x, int y, int z) const { return voxels[index(x, y, z)]; }
    std::uint8_t& at(int x, int y, int z) { return voxels[index(x, y, z)]; }

    bool operator==(const VoxelGrid& o) const {
        return dims == o.dims && spacing == o.spacing && voxels == o.voxels;
    }

    /// Throws ConfigError if dims/spacing/voxel values violate the invariants.
    void validate() const;
};

/// Real-valued volume with entries in [0, 1] (decoder outputs, grayscale stacks).
struct GrayVolume {
    std::array<int, 3> dims{0, 0, 0};
    std::vector<double> values;

    GrayVolume() = default;
    GrayVolume(int nx, int ny, int nz, double fill = 0.0)
        : dims{nx, ny, nz},
          values(static_cast<std::size_t>(nx) * ny * nz, fill) {}

    std::size_t index(int x, int y, int z) const {
        return static_cast<std::size_t>(x) +
               static_cast<std::size_t>(dims[0]) * (static_cast<std::size_t>(y) + static_cast<std::size_t>(dims[1]) * z);
    }
    void validate() const;
};

/// Synthetic generator settings: square pores scattered in a square
/// cross-section, extruded through `depth` identical slices.
struct GeneratorConfig {
    int image_size = 100;
    int depth = 100;
    int pore_size = 10;
    int n_pores_min = 10;
    int n_pores_max = 40;
    std::uint64_t seed = 0;
    int count = 1;

    void validate() const;
};

/// Generates `cfg.count` extruded samples. Pores may share edges but never
/// overlap; sample i uses the derived seed cfg.seed + i, so batches are
/// reproducible and order-independent.
std::vector<VoxelGrid> generate_synthetic(const GeneratorConfig& cfg);

/// Single sample for a given per-sample seed (building block of the batch API).
VoxelGrid generate_synthetic_one(const GeneratorConfig& cfg, std::uint64_t sample_seed);

/// Pore volume fraction n^F = pore voxels / total voxels.
double porosity(const VoxelGrid& g);

/// All axis-aligned sub-volumes of `size` at origins {0, stride, 2*stride, ...}
/// that fit entirely inside g.
std::vector<VoxelGrid> subsample(const VoxelGrid& g,
                                 const std::array<int, 3>& size,
                                 const std::array<int, 3>& stride);

/// Thresholds a gray volume: voxel = 1 (solid) where value >= threshold.
VoxelGrid binarize(const GrayVolume& v, double threshold);

/// VXG1 container, bit-exact round trip.
void write_grid(const VoxelGrid& g, const std::filesystem::path& path);
VoxelGrid read_grid(const std::filesystem::path& path);

/// Index-permutation transpose of two axes (0=x, 1=y, 2=z).
VoxelGrid transpose_axes(const VoxelGrid& g, int a, int b);

/// Geometric 90-degree rotation about the z axis.
VoxelGrid rotate90_z(const VoxelGrid& g);

/// Stacks `depth` copies of g's x = 0 cross-section along x.
VoxelGrid extrude_x(const VoxelGrid& g, int depth);

}  // namespace poro
