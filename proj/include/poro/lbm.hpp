#pragma once

#include "poro/grid.hpp"

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace poro::lbm {

inline constexpr int kQ = 19;
inline constexpr double kCs2 = 1.0 / 3.0;  // lattice sound speed squared

/// D3Q19 directions: rest, 6 axis, 12 diagonal. Opposites are adjacent
/// (opp(2k-1) = 2k), which the bounce-back and Zou-He closures rely on.
inline constexpr std::array<std::array<int, 3>, kQ> kE = {{
    {0, 0, 0},
    {1, 0, 0},  {-1, 0, 0},
    {0, 1, 0},  {0, -1, 0},
    {0, 0, 1},  {0, 0, -1},
    {1, 1, 0},  {-1, -1, 0},
    {1, -1, 0}, {-1, 1, 0},
    {1, 0, 1},  {-1, 0, -1},
    {1, 0, -1}, {-1, 0, 1},
    {0, 1, 1},  {0, -1, -1},
    {0, 1, -1}, {0, -1, 1},
}};

inline constexpr std::array<double, kQ> kW = {
    1.0 / 3.0,
    1.0 / 18.0, 1.0 / 18.0, 1.0 / 18.0, 1.0 / 18.0, 1.0 / 18.0, 1.0 / 18.0,
    1.0 / 36.0, 1.0 / 36.0, 1.0 / 36.0, 1.0 / 36.0, 1.0 / 36.0, 1.0 / 36.0,
    1.0 / 36.0, 1.0 / 36.0, 1.0 / 36.0, 1.0 / 36.0, 1.0 / 36.0, 1.0 / 36.0};

inline constexpr int opposite(int i) { return i == 0 ? 0 : (i % 2 == 1 ? i + 1 : i - 1); }

enum class Axis { x = 0, y = 1, z = 2 };

enum class LateralMode {
    no_slip,       // bounce-back walls on domain faces parallel to the flow
    natural_slip,  // specular reflection (free slip)
    periodic       // wrap-around; diagnostics only
};

struct FlowConfig {
    Axis axis = Axis::x;
    double nu_l = 1.0 / 6.0;        // tau = 1
    double rho_in = 1.0 + 5.0e-4;   // delta rho = 1e-3 across the sample
    double rho_out = 1.0 - 5.0e-4;
    LateralMode lateral = LateralMode::no_slip;
    double tol = 1.0e-6;
    int max_steps = 200000;
    int check_every = 100;
    bool pressure_bc = true;  // false: periodic along the flow axis too (diagnostics)

    double tau() const { return 0.5 + nu_l / kCs2; }
    void validate() const;
};

/// f_i^eq(rho, u) with terms up to u^2; sums reproduce (rho, rho*u) exactly.
std::array<double, kQ> equilibrium(double rho, const Eigen::Vector3d& u);

/// Double-buffered D3Q19 state over a voxel mask. Populations are stored
/// direction-major with one extra dead slot per direction that absorbs
/// populations leaving through open faces.
struct LatticeField {
    std::array<int, 3> dims{0, 0, 0};
    std::vector<std::uint8_t> fluid;    // 1 = fluid (pore), 0 = solid
    std::vector<double> f, f_next;      // size kQ * (n + 1)
    std::vector<std::int32_t> fluid_nodes;
    std::int64_t n = 0;                 // total nodes
    long step_count = 0;

    std::int64_t stride() const { return n + 1; }
    double& pop(int dir, std::int64_t node) { return f[static_cast<std::int64_t>(dir) * stride() + node]; }
    double pop(int dir, std::int64_t node) const { return f[static_cast<std::int64_t>(dir) * stride() + node]; }

    // streaming action table, rebuilt when the boundary mode changes
    std::vector<std::int32_t> actions;
    LateralMode built_mode = LateralMode::no_slip;
    bool built_pressure = true;
    bool actions_ready = false;
};

LatticeField make_field(const VoxelGrid& g);

/// Sets f = equilibrium(rho(x), 0) with rho ramping linearly from rho_in to rho_out.
void init_equilibrium_ramp(LatticeField& field, const FlowConfig& cfg);

/// Density and velocity at one node; solid nodes report (0, 0).
void moments_node(const LatticeField& field, std::int64_t node, double& rho, Eigen::Vector3d& u);

struct Moments {
    std::vector<double> rho;
    std::vector<double> ux, uy, uz;
};
Moments moments(const LatticeField& field);

/// BGK relaxation toward equilibrium, in place on f. Fluid nodes only.
void collide(LatticeField& field, const FlowConfig& cfg);

/// Push-streaming with bounce-back / specular / periodic handling, then swap buffers.
void stream(LatticeField& field, const FlowConfig& cfg);

/// Zou-He fixed-density closure on the inlet/outlet faces normal to x.
void apply_pressure_bc(LatticeField& field, const FlowConfig& cfg);

/// One explicit timestep: collide, stream, pressure closure.
void step(LatticeField& field, const FlowConfig& cfg);

struct FlowResult {
    Eigen::Vector3d u_avg = Eigen::Vector3d::Zero();  // pore-volume average
    long steps = 0;
    double residual = 0.0;
    bool converged = false;
    std::array<int, 3> dims{0, 0, 0};
    std::vector<double> ux, uy, uz;  // per node, original orientation, solids = 0
};

/// True if a 6-connected pore path joins the two faces normal to `axis`.
bool percolates(const VoxelGrid& g, Axis axis);

/// Steady pressure-driven flow through the sample. Internally the flow axis is
/// canonicalized to +x by an index transposition, so all three axes run
/// through identical arithmetic. Throws ImpermeableError, ConvergenceError,
/// DivergenceError.
FlowResult run_to_steady(const VoxelGrid& g, const FlowConfig& cfg);

/// VXF1 dump: magic, dims, then (ux, uy, uz) as little-endian f64 per node.
void write_velocity_field(const FlowResult& r, const std::filesystem::path& path);

/// Deterministic pairwise (tree) summation; reduction order is fixed
/// regardless of thread count.
double pairwise_sum(const double* data, std::int64_t count);

}  // namespace poro::lbm
