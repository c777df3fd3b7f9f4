#pragma once

#include "poro/perm.hpp"
#include "poro/pvae.hpp"
#include "poro/surrogate.hpp"

#include <optional>
#include <string>
#include <vector>

namespace poro::inverse {

struct DesignTarget {
    Eigen::VectorXd properties;  // raw space, same columns as the model
    Eigen::VectorXd weights;     // per property, default 1

    void validate(int property_dim) const;
};

struct OptimizeConfig {
    double lr = 0.05;
    bool cosine_decay = true;
    int max_steps = 2000;
    double loss_tol = 1e-5;
    int patience = 400;        // steps without improvement
    int reproject_every = 50;  // decode -> binarize -> encode cadence
    double binarize_threshold = 0.5;
};

struct OptimizeOutcome {
    Eigen::VectorXd z;          // best-so-far latent
    double objective = 0.0;     // best weighted normalized residual
    std::vector<double> trace;  // best-so-far objective per step
    std::string stop_reason;    // tolerance | no_improvement | max_steps
    int steps = 0;
};

/// Indices of the k dataset rows closest to the target in weighted normalized
/// property space; ties break toward the lower index.
std::vector<int> nearest_initializers(const DesignTarget& target, const Eigen::MatrixXd& raw_props,
                                      const pvae::PVAEModel& model, int k);

/// SGD on the latent vector against the regressor, re-projected onto the data
/// manifold (decode, binarize, encode) every `reproject_every` steps.
OptimizeOutcome optimize_latent(const Eigen::VectorXd& z0, const DesignTarget& target,
                                const pvae::PVAEModel& model, const OptimizeConfig& cfg);

struct DesignResult {
    int target_id = 0;
    std::string status = "ok";  // ok | error:<what>
    std::string stop_reason;
    int steps = 0;
    Eigen::VectorXd z;
    VoxelGrid grid;                  // decoded + binarized cross-section
    Eigen::VectorXd predicted;       // regressor view of z (raw space)
    Eigen::VectorXd verified;        // surrogate (or LBM) view of the grid
    double log_mse = 0.0;            // ln sum of squared property errors
    std::vector<double> trace;
};

struct BatchConfig {
    OptimizeConfig optimize;
    int k_init = 100;
    int triage_steps = 50;
    bool optimize_all = false;  // full optimization of every initializer
    bool verify_with_lbm = false;
    int lbm_depth = 8;          // extrusion depth for LBM verification
    lbm::FlowConfig flow;       // used when verify_with_lbm
};

/// Designs one grid per target: k nearest initializers, a short triage run on
/// each, full optimization of the survivor(s), then verification with the
/// surrogate (never the regressor that drove the optimization). A failing
/// target is recorded with an error status; the batch continues.
std::vector<DesignResult> design_batch(const std::vector<DesignTarget>& targets,
                                       const pvae::PVAEModel& model,
                                       const surrogate::SurrogateModel& verifier,
                                       const Eigen::MatrixXd& dataset_props,
                                       const Eigen::MatrixXd& dataset_latents,
                                       const BatchConfig& cfg);

}  // namespace poro::inverse
