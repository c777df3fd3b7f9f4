#pragma once

#include "poro/diff/tensor.hpp"

#include <vector>

namespace poro::diff {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// First/second moment accumulators, one pair per parameter, plus the shared
/// step counter used for bias correction.
struct AdamState {
    std::vector<Eigen::ArrayXd> m, v;
    long t = 0;

    void init(const std::vector<DTensor*>& params) {
        m.clear();
        v.clear();
        for (const DTensor* p : params) {
            m.push_back(Eigen::ArrayXd::Zero(p->size()));
            v.push_back(Eigen::ArrayXd::Zero(p->size()));
        }
        t = 0;
    }
};

/// Standard bias-corrected Adam update from the gradients currently held in
/// each parameter's grad buffer. Gradients are not cleared here.
inline void adam_step(const std::vector<DTensor*>& params, AdamState& state, const AdamConfig& cfg) {
    if (state.m.size() != params.size())
        throw ArgumentError("adam_step: state does not match parameter list");
    state.t += 1;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        DTensor& p = *params[i];
        if (p.grad.size() != p.value.size())
            throw ArgumentError("adam_step: parameter " + std::to_string(i) + " has no gradient buffer");
        if (state.m[i].size() != p.value.size())
            throw ArgumentError("adam_step: moment shape mismatch on parameter " + std::to_string(i));
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * p.grad;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * p.grad.square();
        p.value -= cfg.lr * (state.m[i] / c1) / ((state.v[i] / c2).sqrt() + cfg.eps);
    }
}

}  // namespace poro::diff
