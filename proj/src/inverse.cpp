#include "poro/inverse.hpp"

#include "poro/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace poro::inverse {

using diff::DTensor;
using diff::mul_scalar;
using diff::square;
using diff::sub;
using diff::sum;
using diff::Tape;
using diff::Var;

void DesignTarget::validate(int property_dim) const {
    if (properties.size() != property_dim)
        throw ArgumentError("DesignTarget: expected " + std::to_string(property_dim) + " properties");
    if (weights.size() != property_dim) throw ArgumentError("DesignTarget: weight length mismatch");
    if (!(weights.array() >= 0.0).all() || weights.sum() <= 0.0)
        throw ArgumentError("DesignTarget: weights must be non-negative and not all zero");
    if (!properties.allFinite()) throw ArgumentError("DesignTarget: non-finite target");
}

std::vector<int> nearest_initializers(const DesignTarget& target, const Eigen::MatrixXd& raw_props,
                                      const pvae::PVAEModel& model, int k) {
    const int n = static_cast<int>(raw_props.rows());
    if (n == 0) throw ArgumentError("nearest_initializers: empty dataset");
    if (k <= 0 || k > n) throw ArgumentError("nearest_initializers: k out of range");
    target.validate(model.cfg.property_dim);

    const Eigen::VectorXd t_norm = model.normalize_props(target.properties);
    std::vector<std::pair<double, int>> scored(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const Eigen::VectorXd p = model.normalize_props(raw_props.row(i));
        const double d = (target.weights.array() * (p - t_norm).array().square()).sum();
        scored[static_cast<std::size_t>(i)] = {d, i};
    }
    std::sort(scored.begin(), scored.end());  // ties fall to the lower index
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) out.push_back(scored[static_cast<std::size_t>(i)].second);
    return out;
}

OptimizeOutcome optimize_latent(const Eigen::VectorXd& z0, const DesignTarget& target,
                                const pvae::PVAEModel& model, const OptimizeConfig& cfg) {
    target.validate(model.cfg.property_dim);
    if (z0.size() != model.cfg.latent_dim) throw ArgumentError("optimize_latent: latent length mismatch");
    if (!model.bounds_set) throw ModelStateError("optimize_latent: model has no normalization bounds");

    const int L = model.cfg.latent_dim;
    const int P = model.cfg.property_dim;
    const Eigen::VectorXd t_norm = model.normalize_props(target.properties);

    DTensor z({L});
    z.value = z0.array();
    z.set_requires_grad(true);

    auto objective_grad = [&](bool want_grad) {
        Tape t;
        Var zv = t.leaf(z);
        Var pred = model.regress_t(t, diff::reshape(zv, {1, L}));
        Eigen::ArrayXd diffv = pred.value() - t_norm.array();
        double obj = (target.weights.array() * diffv.square()).sum();
        if (want_grad) {
            Var tv = t.constant({1, P}, t_norm.array());
            Var wv = t.constant({1, P}, target.weights.array());
            Var loss = sum(diff::mul(wv, square(sub(pred, tv))));
            z.zero_grad();
            t.backward(loss);
        }
        return obj;
    };

    OptimizeOutcome out;
    out.z = z0;
    out.objective = objective_grad(false);
    out.trace.push_back(out.objective);
    if (!std::isfinite(out.objective)) throw DivergenceError("optimize_latent: non-finite objective", 0);
    if (out.objective < cfg.loss_tol) {
        out.stop_reason = "tolerance";
        return out;
    }

    int since_best = 0;
    for (int step = 1; step <= cfg.max_steps; ++step) {
        const double obj = objective_grad(true);
        if (!std::isfinite(obj)) throw DivergenceError("optimize_latent: non-finite objective", step);

        const double decay =
            cfg.cosine_decay ? 0.5 * (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(step) /
                                                     static_cast<double>(cfg.max_steps)))
                             : 1.0;
        z.value -= (cfg.lr * decay) * z.grad;

        if (cfg.reproject_every > 0 && step % cfg.reproject_every == 0) {
            const GrayVolume decoded = model.decode(z.value.matrix());
            const VoxelGrid grid = binarize(decoded, cfg.binarize_threshold);
            const pvae::LatentCode code = model.encode(pvae::image_from_grid(grid, model.cfg.mode));
            z.value = code.mu.array();
        }

        const double now = objective_grad(false);
        out.steps = step;
        if (now < out.objective) {
            out.objective = now;
            out.z = z.value.matrix();
            since_best = 0;
        } else {
            ++since_best;
        }
        out.trace.push_back(out.objective);

        if (out.objective < cfg.loss_tol) {
            out.stop_reason = "tolerance";
            return out;
        }
        if (since_best >= cfg.patience) {
            out.stop_reason = "no_improvement";
            return out;
        }
    }
    out.stop_reason = "max_steps";
    return out;
}

std::vector<DesignResult> design_batch(const std::vector<DesignTarget>& targets,
                                       const pvae::PVAEModel& model,
                                       const surrogate::SurrogateModel& verifier,
                                       const Eigen::MatrixXd& dataset_props,
                                       const Eigen::MatrixXd& dataset_latents,
                                       const BatchConfig& cfg) {
    if (dataset_props.rows() != dataset_latents.rows())
        throw ArgumentError("design_batch: property and latent tables disagree");
    if (dataset_latents.cols() != model.cfg.latent_dim)
        throw ArgumentError("design_batch: latent width mismatch");

    std::vector<DesignResult> results;
    results.reserve(targets.size());

    for (std::size_t ti = 0; ti < targets.size(); ++ti) {
        DesignResult r;
        r.target_id = static_cast<int>(ti);
        try {
            const DesignTarget& target = targets[ti];
            const int k = std::min<int>(cfg.k_init, static_cast<int>(dataset_props.rows()));
            const std::vector<int> init = nearest_initializers(target, dataset_props, model, k);

            OptimizeConfig triage_cfg = cfg.optimize;
            triage_cfg.max_steps = cfg.triage_steps;
            triage_cfg.patience = std::max(cfg.triage_steps, 1);

            OptimizeOutcome best_out;
            bool have = false;
            if (cfg.optimize_all) {
                for (int idx : init) {
                    OptimizeOutcome full = optimize_latent(dataset_latents.row(idx), target, model, cfg.optimize);
                    if (!have || full.objective < best_out.objective) {
                        best_out = std::move(full);
                        have = true;
                    }
                }
            } else {
                // cheap triage of every initializer, full run from the survivor
                Eigen::VectorXd best_z;
                double best_obj = 0.0;
                for (int idx : init) {
                    OptimizeOutcome probe = optimize_latent(dataset_latents.row(idx), target, model, triage_cfg);
                    if (!have || probe.objective < best_obj) {
                        best_obj = probe.objective;
                        best_z = probe.z;
                        have = true;
                    }
                }
                best_out = optimize_latent(best_z, target, model, cfg.optimize);
            }

            r.z = best_out.z;
            r.steps = best_out.steps;
            r.stop_reason = best_out.stop_reason;
            r.trace = std::move(best_out.trace);

            const GrayVolume decoded = model.decode(r.z);
            r.grid = binarize(decoded, cfg.optimize.binarize_threshold);
            r.predicted = model.regress(r.z);

            if (cfg.verify_with_lbm) {
                const VoxelGrid volume = extrude_x(r.grid, cfg.lbm_depth);
                perm::HomogenizeConfig hc;
                hc.flow = cfg.flow;
                hc.axes = {true, false, false};
                const perm::HomogenizeResult h = perm::homogenize(volume, hc);
                r.verified.resize(2);
                r.verified << h.porosity, h.tensor.lattice(0, 0);
            } else {
                const Eigen::Vector2d v = verifier.predict(pvae::image_from_grid(r.grid, model.cfg.mode));
                r.verified = v;
            }

            double se = 0.0;
            const int np = std::min<int>(static_cast<int>(r.verified.size()),
                                         static_cast<int>(targets[ti].properties.size()));
            for (int j = 0; j < np; ++j) se += std::pow(r.verified[j] - targets[ti].properties[j], 2);
            r.log_mse = std::log(std::max(se, 1e-300));
        } catch (const Error& e) {
            r.status = std::string("error:") + e.what();
        }
        results.push_back(std::move(r));
    }
    return results;
}

}  // namespace poro::inverse
