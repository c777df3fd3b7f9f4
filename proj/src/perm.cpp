#include "poro/perm.hpp"

#include "poro/error.hpp"

#include <Eigen/Dense>

#include <cmath>

namespace poro::perm {

Eigen::Matrix3d PermeabilityTensor::physical(const Eigen::Vector3d& spacing) const {
    if (!(spacing.array() > 0.0).all()) throw ArgumentError("physical: spacing must be positive");
    Eigen::Matrix3d k;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) k(i, j) = lattice(i, j) * spacing[i] * spacing[j];
    return k;
}

double diagonal_component(double u_avg_i, double grad_p_i, double nu_l) {
    if (grad_p_i == 0.0) throw ArgumentError("diagonal_component: zero pressure gradient");
    if (!(nu_l > 0.0)) throw ArgumentError("diagonal_component: nu_l must be positive");
    const double k = -nu_l * u_avg_i / grad_p_i;
    if (k < 0.0)
        throw InconsistentRunError("diagonal_component: negative permeability (flow along the gradient)");
    return k;
}

Eigen::Vector3d offdiagonal_solve(const Eigen::Vector3d& grad_p,
                                  const Eigen::Matrix3d& u_slip,
                                  const Eigen::Vector3d& k_diag,
                                  double nu_l) {
    if (grad_p[0] == 0.0 || grad_p[1] == 0.0 || grad_p[2] == 0.0)
        throw ArgumentError("offdiagonal_solve: all three gradients must be nonzero");
    Eigen::Matrix3d a;
    a << grad_p[1], grad_p[2], 0.0,
         grad_p[0], 0.0, grad_p[2],
         0.0, grad_p[0], grad_p[1];
    Eigen::Vector3d b;
    for (int i = 0; i < 3; ++i) b[i] = -nu_l * u_slip(i, i) - k_diag[i] * grad_p[i];
    return a.partialPivLu().solve(b);
}

double pressure_gradient(const lbm::FlowConfig& cfg, int extent) {
    if (extent < 2) throw ArgumentError("pressure_gradient: axis extent must be at least 2");
    return lbm::kCs2 * (cfg.rho_out - cfg.rho_in) / static_cast<double>(extent - 1);
}

HomogenizeResult homogenize(const VoxelGrid& g, const HomogenizeConfig& cfg) {
    g.validate();
    HomogenizeResult out;
    out.porosity = porosity(g);
    out.tensor.diagonal_only = !cfg.full_tensor;

    Eigen::Vector3d grad = Eigen::Vector3d::Zero();
    for (int ax = 0; ax < 3; ++ax) grad[ax] = pressure_gradient(cfg.flow, g.dims[ax]);

    auto run_axis = [&](int ax, lbm::LateralMode mode, AxisRun& rec) -> bool {
        lbm::FlowConfig fc = cfg.flow;
        fc.axis = static_cast<lbm::Axis>(ax);
        fc.lateral = mode;
        try {
            const lbm::FlowResult r = lbm::run_to_steady(g, fc);
            rec.steps = r.steps;
            rec.residual = r.residual;
            rec.u_avg = r.u_avg;
            rec.status = "ok";
            return true;
        } catch (const ImpermeableError&) {
            rec.status = "impermeable";
            return false;
        }
    };

    for (int ax = 0; ax < 3; ++ax) {
        if (!cfg.axes[ax]) continue;
        AxisRun& rec = out.no_slip[ax];
        if (run_axis(ax, lbm::LateralMode::no_slip, rec))
            out.tensor.lattice(ax, ax) = diagonal_component(rec.u_avg[ax], grad[ax], cfg.flow.nu_l);
    }

    if (cfg.full_tensor) {
        bool all_ok = true;
        Eigen::Matrix3d u_slip = Eigen::Matrix3d::Zero();
        for (int ax = 0; ax < 3; ++ax) {
            AxisRun& rec = out.slip[ax];
            if (run_axis(ax, lbm::LateralMode::natural_slip, rec))
                u_slip.row(ax) = rec.u_avg;
            else
                all_ok = false;
        }
        if (all_ok) {
            const Eigen::Vector3d off =
                offdiagonal_solve(grad, u_slip, out.tensor.lattice.diagonal(), cfg.flow.nu_l);
            out.tensor.lattice(0, 1) = out.tensor.lattice(1, 0) = off[0];
            out.tensor.lattice(0, 2) = out.tensor.lattice(2, 0) = off[1];
            out.tensor.lattice(1, 2) = out.tensor.lattice(2, 1) = off[2];
            out.tensor.diagonal_only = false;
        }
    }
    return out;
}

}  // namespace poro::perm
