#include "poro/lbm.hpp"

#include "poro/error.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <deque>
#include <fstream>

namespace poro::lbm {

namespace {

// Per-node moments from a 19-entry population view. The sums are grouped so
// that a lateral mirror of the geometry permutes only operands of single
// commutative additions; this keeps axis-permuted runs bit-identical.
struct NodeMoments {
    double rho, ux, uy, uz;
};

inline NodeMoments node_moments(const double* f, std::int64_t s, std::int64_t node) {
    const double f0 = f[node];
    const double f1 = f[1 * s + node], f2 = f[2 * s + node];
    const double f3 = f[3 * s + node], f4 = f[4 * s + node];
    const double f5 = f[5 * s + node], f6 = f[6 * s + node];
    const double f7 = f[7 * s + node], f8 = f[8 * s + node];
    const double f9 = f[9 * s + node], f10 = f[10 * s + node];
    const double f11 = f[11 * s + node], f12 = f[12 * s + node];
    const double f13 = f[13 * s + node], f14 = f[14 * s + node];
    const double f15 = f[15 * s + node], f16 = f[16 * s + node];
    const double f17 = f[17 * s + node], f18 = f[18 * s + node];

    NodeMoments m;
    m.rho = f0 + ((f1 + f2) + ((f3 + f4) + (f5 + f6))) +
            (((f7 + f8) + (f9 + f10)) + (((f11 + f12) + (f13 + f14)) + ((f15 + f16) + (f17 + f18))));
    m.ux = (f1 - f2) + (((f7 - f8) + (f9 - f10)) + ((f11 - f12) + (f13 - f14)));
    m.uy = (f3 - f4) + (((f7 - f8) - (f9 - f10)) + ((f15 - f16) + (f17 - f18)));
    m.uz = (f5 - f6) + (((f11 - f12) - (f13 - f14)) + ((f15 - f16) - (f17 - f18)));
    return m;
}

inline void equilibrium_into(double rho, double ux, double uy, double uz, double* feq) {
    const double usq = (ux * ux + uy * uy) + uz * uz;
    const double common = 1.0 - 1.5 * usq;
    const double wa = rho * (1.0 / 18.0);
    const double wd = rho * (1.0 / 36.0);

    feq[0] = rho * (1.0 / 3.0) * common;

    const double exy = ux + uy, exy2 = ux - uy;
    const double exz = ux + uz, exz2 = ux - uz;
    const double eyz = uy + uz, eyz2 = uy - uz;

    auto term = [](double eu) { return 3.0 * eu + 4.5 * (eu * eu); };

    feq[1] = wa * (common + term(ux));
    feq[2] = wa * (common + term(-ux));
    feq[3] = wa * (common + term(uy));
    feq[4] = wa * (common + term(-uy));
    feq[5] = wa * (common + term(uz));
    feq[6] = wa * (common + term(-uz));
    feq[7] = wd * (common + term(exy));
    feq[8] = wd * (common + term(-exy));
    feq[9] = wd * (common + term(exy2));
    feq[10] = wd * (common + term(-exy2));
    feq[11] = wd * (common + term(exz));
    feq[12] = wd * (common + term(-exz));
    feq[13] = wd * (common + term(exz2));
    feq[14] = wd * (common + term(-exz2));
    feq[15] = wd * (common + term(eyz));
    feq[16] = wd * (common + term(-eyz));
    feq[17] = wd * (common + term(eyz2));
    feq[18] = wd * (common + term(-eyz2));
}

}  // namespace

void FlowConfig::validate() const {
    if (!(tau() > 0.5)) throw ConfigError("FlowConfig: tau must exceed 1/2 (nu_l > 0)");
    if (!(rho_in > rho_out && rho_out > 0.0))
        throw ConfigError("FlowConfig: need rho_in > rho_out > 0");
    if (!(tol > 0.0)) throw ConfigError("FlowConfig: tolerance must be positive");
    if (max_steps <= 0 || check_every <= 0) throw ConfigError("FlowConfig: step counts must be positive");
}

std::array<double, kQ> equilibrium(double rho, const Eigen::Vector3d& u) {
    if (!(rho > 0.0)) throw ArgumentError("equilibrium: rho must be positive");
    static std::atomic<bool> warned{false};
    if (u.norm() > 0.1 && !warned.exchange(true))
        std::fprintf(stderr, "poro: |u| = %g exceeds the low-Mach regime (0.1)\n", u.norm());
    std::array<double, kQ> feq;
    equilibrium_into(rho, u[0], u[1], u[2], feq.data());
    return feq;
}

LatticeField make_field(const VoxelGrid& g) {
    g.validate();
    LatticeField field;
    field.dims = g.dims;
    field.n = static_cast<std::int64_t>(g.voxels.size());
    field.fluid.resize(g.voxels.size());
    for (std::size_t i = 0; i < g.voxels.size(); ++i) field.fluid[i] = g.voxels[i] ? 0 : 1;
    field.f.assign(static_cast<std::size_t>(kQ) * (field.n + 1), 0.0);
    field.f_next.assign(static_cast<std::size_t>(kQ) * (field.n + 1), 0.0);
    field.fluid_nodes.reserve(g.voxels.size());
    for (std::int64_t i = 0; i < field.n; ++i)
        if (field.fluid[i]) field.fluid_nodes.push_back(static_cast<std::int32_t>(i));
    return field;
}

void init_equilibrium_ramp(LatticeField& field, const FlowConfig& cfg) {
    cfg.validate();
    const std::int64_t s = field.stride();
    const int nx = field.dims[0];
    double feq[kQ];
    for (std::int32_t node : field.fluid_nodes) {
        const int x = static_cast<int>(node % nx);
        const double frac = nx > 1 ? static_cast<double>(x) / (nx - 1) : 0.0;
        const double rho = cfg.pressure_bc ? cfg.rho_in + (cfg.rho_out - cfg.rho_in) * frac : 1.0;
        equilibrium_into(rho, 0.0, 0.0, 0.0, feq);
        for (int i = 0; i < kQ; ++i) field.f[i * s + node] = feq[i];
    }
    field.step_count = 0;
}

void moments_node(const LatticeField& field, std::int64_t node, double& rho, Eigen::Vector3d& u) {
    if (!field.fluid[node]) {
        rho = 0.0;
        u.setZero();
        return;
    }
    const NodeMoments m = node_moments(field.f.data(), field.stride(), node);
    rho = m.rho;
    if (!(rho > 0.0))
        throw DivergenceError("moments: non-positive density at fluid node (unstable run)", field.step_count);
    u = Eigen::Vector3d(m.ux / rho, m.uy / rho, m.uz / rho);
}

Moments moments(const LatticeField& field) {
    Moments out;
    out.rho.assign(field.n, 0.0);
    out.ux.assign(field.n, 0.0);
    out.uy.assign(field.n, 0.0);
    out.uz.assign(field.n, 0.0);
    double rho;
    Eigen::Vector3d u;
    for (std::int32_t node : field.fluid_nodes) {
        moments_node(field, node, rho, u);
        out.rho[node] = rho;
        out.ux[node] = u[0];
        out.uy[node] = u[1];
        out.uz[node] = u[2];
    }
    return out;
}

void collide(LatticeField& field, const FlowConfig& cfg) {
    const double omega = 1.0 / cfg.tau();
    const std::int64_t s = field.stride();
    double* f = field.f.data();
    double feq[kQ];
    for (std::int32_t node : field.fluid_nodes) {
        const NodeMoments m = node_moments(f, s, node);
        const double inv_rho = 1.0 / m.rho;
        equilibrium_into(m.rho, m.ux * inv_rho, m.uy * inv_rho, m.uz * inv_rho, feq);
        for (int i = 0; i < kQ; ++i) {
            double& fi = f[i * s + node];
            fi += omega * (feq[i] - fi);
        }
    }
}

namespace {

void build_actions(LatticeField& field, const FlowConfig& cfg) {
    const int nx = field.dims[0], ny = field.dims[1], nz = field.dims[2];
    const std::int64_t s = field.stride();
    const std::int32_t dead = static_cast<std::int32_t>(field.n);
    field.actions.assign(field.fluid_nodes.size() * 18, 0);

    for (std::size_t k = 0; k < field.fluid_nodes.size(); ++k) {
        const std::int32_t node = field.fluid_nodes[k];
        const int x = static_cast<int>(node % nx);
        const int y = static_cast<int>((node / nx) % ny);
        const int z = static_cast<int>(node / (static_cast<std::int64_t>(nx) * ny));
        for (int i = 1; i < kQ; ++i) {
            const int ex = kE[i][0], ey = kE[i][1], ez = kE[i][2];
            int tx = x + ex, ty = y + ey, tz = z + ez;
            const bool oobx = tx < 0 || tx >= nx;
            const bool ooby = ty < 0 || ty >= ny;
            const bool oobz = tz < 0 || tz >= nz;

            std::int32_t act;
            const bool lateral_oob = ooby || oobz;
            if (lateral_oob && cfg.lateral == LateralMode::no_slip) {
                act = static_cast<std::int32_t>(opposite(i) * s + node);
            } else if (oobx && cfg.pressure_bc) {
                act = static_cast<std::int32_t>(i * s + dead);  // leaves through inlet/outlet
            } else {
                int dir = i;
                if (oobx) tx = (tx + nx) % nx;  // periodic along the flow axis (diagnostics)
                if (lateral_oob && cfg.lateral == LateralMode::natural_slip) {
                    // specular: reflect the exiting component, keep the tangential move
                    int rex = ex, rey = ey, rez = ez;
                    if (ooby) {
                        rey = -ey;
                        ty = y;
                    }
                    if (oobz) {
                        rez = -ez;
                        tz = z;
                    }
                    dir = 0;
                    for (int j = 1; j < kQ; ++j)
                        if (kE[j][0] == rex && kE[j][1] == rey && kE[j][2] == rez) {
                            dir = j;
                            break;
                        }
                } else if (lateral_oob) {  // periodic laterals
                    ty = (ty + ny) % ny;
                    tz = (tz + nz) % nz;
                }
                const std::int64_t target =
                    static_cast<std::int64_t>(tx) + static_cast<std::int64_t>(nx) * (ty + static_cast<std::int64_t>(ny) * tz);
                if (field.fluid[target])
                    act = static_cast<std::int32_t>(dir * s + target);
                else
                    act = static_cast<std::int32_t>(opposite(dir) * s + node);  // half-way bounce-back
            }
            field.actions[k * 18 + (i - 1)] = act;
        }
    }
    field.built_mode = cfg.lateral;
    field.built_pressure = cfg.pressure_bc;
    field.actions_ready = true;
}

}  // namespace

void stream(LatticeField& field, const FlowConfig& cfg) {
    if (!field.actions_ready || field.built_mode != cfg.lateral || field.built_pressure != cfg.pressure_bc)
        build_actions(field, cfg);
    const std::int64_t s = field.stride();
    const double* f = field.f.data();
    double* fn = field.f_next.data();
    const std::int32_t* act = field.actions.data();
    const std::size_t m = field.fluid_nodes.size();
    for (std::size_t k = 0; k < m; ++k) {
        const std::int32_t node = field.fluid_nodes[k];
        fn[node] = f[node];  // rest population
        const std::int32_t* a = act + k * 18;
        for (int i = 1; i < kQ; ++i) fn[a[i - 1]] = f[i * s + node];
    }
    field.f.swap(field.f_next);
}

void apply_pressure_bc(LatticeField& field, const FlowConfig& cfg) {
    if (!cfg.pressure_bc) return;
    const int nx = field.dims[0], ny = field.dims[1], nz = field.dims[2];
    const std::int64_t s = field.stride();
    double* f = field.f.data();

    auto closure = [&](std::int64_t node, bool inlet) {
        const double f0 = f[node];
        const double f3 = f[3 * s + node], f4 = f[4 * s + node];
        const double f5 = f[5 * s + node], f6 = f[6 * s + node];
        const double f15 = f[15 * s + node], f16 = f[16 * s + node];
        const double f17 = f[17 * s + node], f18 = f[18 * s + node];
        const double s0 = f0 + ((f3 + f4) + (f5 + f6)) + ((f15 + f16) + (f17 + f18));
        const double ny_m = (f3 - f4) + ((f15 - f16) + (f17 - f18));
        const double nz_m = (f5 - f6) + ((f15 - f16) - (f17 - f18));

        if (inlet) {
            const double rho = cfg.rho_in;
            const double f2 = f[2 * s + node], f8 = f[8 * s + node], f10 = f[10 * s + node];
            const double f12 = f[12 * s + node], f14 = f[14 * s + node];
            const double sneg = f2 + ((f8 + f10) + (f12 + f14));
            const double rux = rho - (s0 + 2.0 * sneg);
            const double t = (1.0 / 6.0) * rux;
            f[1 * s + node] = f2 + (1.0 / 3.0) * rux;
            f[7 * s + node] = f8 + (t - 0.5 * ny_m);
            f[9 * s + node] = f10 + (t + 0.5 * ny_m);
            f[11 * s + node] = f12 + (t - 0.5 * nz_m);
            f[13 * s + node] = f14 + (t + 0.5 * nz_m);
        } else {
            const double rho = cfg.rho_out;
            const double f1 = f[1 * s + node], f7 = f[7 * s + node], f9 = f[9 * s + node];
            const double f11 = f[11 * s + node], f13 = f[13 * s + node];
            const double spos = f1 + ((f7 + f9) + (f11 + f13));
            const double rux = (s0 + 2.0 * spos) - rho;
            const double t = (1.0 / 6.0) * rux;
            f[2 * s + node] = f1 - (1.0 / 3.0) * rux;
            f[8 * s + node] = f7 - (t - 0.5 * ny_m);
            f[10 * s + node] = f9 - (t + 0.5 * ny_m);
            f[12 * s + node] = f11 - (t - 0.5 * nz_m);
            f[14 * s + node] = f13 - (t + 0.5 * nz_m);
        }
    };

    for (int z = 0; z < nz; ++z)
        for (int y = 0; y < ny; ++y) {
            const std::int64_t row = static_cast<std::int64_t>(nx) * (y + static_cast<std::int64_t>(ny) * z);
            if (field.fluid[row]) closure(row, true);
            const std::int64_t out = row + nx - 1;
            if (field.fluid[out]) closure(out, false);
        }
}

void step(LatticeField& field, const FlowConfig& cfg) {
    collide(field, cfg);
    stream(field, cfg);
    apply_pressure_bc(field, cfg);
    ++field.step_count;
}

double pairwise_sum(const double* data, std::int64_t count) {
    if (count <= 16) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < count; ++i) acc += data[i];
        return acc;
    }
    const std::int64_t half = count / 2;
    return pairwise_sum(data, half) + pairwise_sum(data + half, count - half);
}

bool percolates(const VoxelGrid& g, Axis axis) {
    const int ax = static_cast<int>(axis);
    const int nx = g.dims[0], ny = g.dims[1], nz = g.dims[2];
    const std::int64_t n = static_cast<std::int64_t>(g.voxels.size());
    std::vector<std::uint8_t> seen(n, 0);
    std::deque<std::int64_t> queue;

    auto coord_index = [&](int x, int y, int z) {
        return static_cast<std::int64_t>(x) + static_cast<std::int64_t>(nx) * (y + static_cast<std::int64_t>(ny) * z);
    };

    const std::array<int, 3> dims = g.dims;
    for (int b = 0; b < dims[(ax + 1) % 3]; ++b)
        for (int c = 0; c < dims[(ax + 2) % 3]; ++c) {
            int xyz[3];
            xyz[ax] = 0;
            xyz[(ax + 1) % 3] = b;
            xyz[(ax + 2) % 3] = c;
            const std::int64_t idx = coord_index(xyz[0], xyz[1], xyz[2]);
            if (g.voxels[idx] == 0 && !seen[idx]) {
                seen[idx] = 1;
                queue.push_back(idx);
            }
        }

    const std::int64_t strides[3] = {1, nx, static_cast<std::int64_t>(nx) * ny};
    while (!queue.empty()) {
        const std::int64_t idx = queue.front();
        queue.pop_front();
        const int x = static_cast<int>(idx % nx);
        const int y = static_cast<int>((idx / nx) % ny);
        const int z = static_cast<int>(idx / (static_cast<std::int64_t>(nx) * ny));
        const int pos[3] = {x, y, z};
        if (pos[ax] == dims[ax] - 1) return true;
        for (int a = 0; a < 3; ++a)
            for (int d = -1; d <= 1; d += 2) {
                const int q = pos[a] + d;
                if (q < 0 || q >= dims[a]) continue;
                const std::int64_t nb = idx + d * strides[a];
                if (g.voxels[nb] == 0 && !seen[nb]) {
                    seen[nb] = 1;
                    queue.push_back(nb);
                }
            }
    }
    return false;
}

FlowResult run_to_steady(const VoxelGrid& g, const FlowConfig& cfg) {
    cfg.validate();
    g.validate();

    // canonicalize: simulate with the flow along +x via an index transposition
    const int ax = static_cast<int>(cfg.axis);
    const VoxelGrid* grid = &g;
    VoxelGrid transposed;
    if (ax != 0) {
        transposed = transpose_axes(g, 0, ax);
        grid = &transposed;
    }
    if (grid->dims[0] < 3) throw ArgumentError("run_to_steady: need at least 3 nodes along the flow axis");
    if (!percolates(*grid, Axis::x))
        throw ImpermeableError("run_to_steady: no percolating pore path along the flow axis");

    FlowConfig canon = cfg;
    canon.axis = Axis::x;

    LatticeField field = make_field(*grid);
    init_equilibrium_ramp(field, canon);

    const std::size_t m = field.fluid_nodes.size();
    std::vector<double> sux(m), suy(m), suz(m);
    const std::int64_t s = field.stride();

    auto average_velocity = [&]() {
        const double* f = field.f.data();
        for (std::size_t k = 0; k < m; ++k) {
            const NodeMoments mm = node_moments(f, s, field.fluid_nodes[k]);
            const double inv_rho = 1.0 / mm.rho;
            sux[k] = mm.ux * inv_rho;
            suy[k] = mm.uy * inv_rho;
            suz[k] = mm.uz * inv_rho;
        }
        const double count = static_cast<double>(m);
        return Eigen::Vector3d(pairwise_sum(sux.data(), m) / count,
                               pairwise_sum(suy.data(), m) / count,
                               pairwise_sum(suz.data(), m) / count);
    };

    Eigen::Vector3d u_prev = Eigen::Vector3d::Zero();
    Eigen::Vector3d u_avg = Eigen::Vector3d::Zero();
    double residual = 1.0;
    bool converged = false;
    long steps = 0;

    for (long it = 1; it <= cfg.max_steps; ++it) {
        step(field, canon);
        steps = it;
        if (it % cfg.check_every == 0) {
            u_avg = average_velocity();
            if (!u_avg.allFinite())
                throw DivergenceError("run_to_steady: velocity field diverged", it);
            residual = (u_avg - u_prev).norm() / std::max(u_avg.norm(), 1.0e-300);
            if (residual < cfg.tol) {
                converged = true;
                break;
            }
            u_prev = u_avg;
        }
    }
    if (!converged)
        throw ConvergenceError("run_to_steady: no steady state within max_steps", steps, residual);

    FlowResult r;
    r.steps = steps;
    r.residual = residual;
    r.converged = true;

    Moments mom = moments(field);
    if (ax == 0) {
        r.dims = field.dims;
        r.u_avg = u_avg;
        r.ux = std::move(mom.ux);
        r.uy = std::move(mom.uy);
        r.uz = std::move(mom.uz);
    } else {
        // map the canonical frame back: canonical x is the original flow axis
        r.dims = g.dims;
        r.u_avg = u_avg;
        std::swap(r.u_avg[0], r.u_avg[ax]);
        const std::size_t nn = g.voxels.size();
        r.ux.assign(nn, 0.0);
        r.uy.assign(nn, 0.0);
        r.uz.assign(nn, 0.0);
        const int cnx = field.dims[0], cny = field.dims[1];
        for (int z = 0; z < field.dims[2]; ++z)
            for (int y = 0; y < field.dims[1]; ++y)
                for (int x = 0; x < field.dims[0]; ++x) {
                    const std::int64_t cn =
                        static_cast<std::int64_t>(x) + static_cast<std::int64_t>(cnx) * (y + static_cast<std::int64_t>(cny) * z);
                    int oc[3] = {x, y, z};
                    std::swap(oc[0], oc[ax]);
                    const std::size_t on = g.index(oc[0], oc[1], oc[2]);
                    double uc[3] = {mom.ux[cn], mom.uy[cn], mom.uz[cn]};
                    std::swap(uc[0], uc[ax]);
                    r.ux[on] = uc[0];
                    r.uy[on] = uc[1];
                    r.uz[on] = uc[2];
                }
    }
    return r;
}

void write_velocity_field(const FlowResult& r, const std::filesystem::path& path) {
    std::string buf;
    const std::size_t n = r.ux.size();
    buf.reserve(16 + n * 24);
    buf.append("VXF1", 4);
    for (int a = 0; a < 3; ++a) {
        const std::uint32_t v = static_cast<std::uint32_t>(r.dims[a]);
        for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    auto put = [&buf](double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
    };
    for (std::size_t i = 0; i < n; ++i) {
        put(r.ux[i]);
        put(r.uy[i]);
        put(r.uz[i]);
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("write_velocity_field: cannot open " + tmp.string());
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!out) throw IoError("write_velocity_field: write failed on " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace poro::lbm
