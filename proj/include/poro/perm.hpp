#pragma once

#include "poro/grid.hpp"
#include "poro/lbm.hpp"

#include <Eigen/Core>

#include <array>
#include <string>

namespace poro::perm {

/// Symmetric intrinsic permeability in lattice units, with the physical
/// tensor derived by componentwise spacing products.
struct PermeabilityTensor {
    Eigen::Matrix3d lattice = Eigen::Matrix3d::Zero();
    bool diagonal_only = true;

    /// K_ij [m^2] = (K_l)_ij * dx_i * dx_j
    Eigen::Matrix3d physical(const Eigen::Vector3d& spacing) const;
};

/// 1D Darcy inversion: (K_l)_ii = -nu_l * u_avg_i / grad_p_i. The velocity
/// must come from a no-slip run; a negative result signals a sign-convention
/// mistake and raises InconsistentRunError.
double diagonal_component(double u_avg_i, double grad_p_i, double nu_l);

/// Off-diagonal components from the three natural-slip runs. `u_slip`
/// row i holds the averaged velocity vector of the slip run driven along
/// axis i. Throws ArgumentError when any gradient vanishes (singular system).
Eigen::Vector3d offdiagonal_solve(const Eigen::Vector3d& grad_p,
                                  const Eigen::Matrix3d& u_slip,
                                  const Eigen::Vector3d& k_diag,
                                  double nu_l);

/// Discrete pressure gradient along an axis of lattice extent L:
/// grad p = c_s^2 (rho_out - rho_in) / (L - 1).
double pressure_gradient(const lbm::FlowConfig& cfg, int extent);

struct AxisRun {
    long steps = 0;
    double residual = 0.0;
    Eigen::Vector3d u_avg = Eigen::Vector3d::Zero();
    std::string status = "skipped";  // ok | impermeable | skipped | error:<what>
};

struct HomogenizeConfig {
    lbm::FlowConfig flow;        // axis/lateral fields are managed per run
    bool full_tensor = false;
    std::array<bool, 3> axes{true, true, true};
};

struct HomogenizeResult {
    PermeabilityTensor tensor;
    double porosity = 0.0;
    std::array<AxisRun, 3> no_slip;
    std::array<AxisRun, 3> slip;
};

/// Runs no-slip LBM along the requested axes for the diagonal entries and,
/// in full-tensor mode, natural-slip runs for the off-diagonal system.
/// Non-percolating axes report K_ii = 0 rather than failing.
HomogenizeResult homogenize(const VoxelGrid& g, const HomogenizeConfig& cfg);

}  // namespace poro::perm
