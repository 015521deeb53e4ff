#pragma once

// Rectified adaptive-moment optimizer, plus the plain adaptive-moment update
// as a debugging fallback. Early steps, where the variance estimate is
// untractable (rectification term rho_t <= 4), fall back to the
// bias-corrected momentum update.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "treecaps/autodiff.hpp"
#include "treecaps/tensor.hpp"

namespace treecaps {

enum class OptimizerKind { radam, adam };

inline OptimizerKind optimizer_from_name(const std::string& s) {
    if (s == "radam") return OptimizerKind::radam;
    if (s == "adam") return OptimizerKind::adam;
    throw std::invalid_argument("unknown optimizer \"" + s + "\" (expected radam | adam)");
}

inline std::string optimizer_name(OptimizerKind k) { return k == OptimizerKind::radam ? "radam" : "adam"; }

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::radam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
struct OptimizerState {
    std::vector<Tensor<T>> m;  // first moments, parallel to the param store
    std::vector<Tensor<T>> v;  // second moments
    std::int64_t step = 0;

    static OptimizerState init(const ParamStore<T>& params) {
        OptimizerState st;
        for (const auto& p : params.values) {
            st.m.push_back(Tensor<T>(p.shape, T(0)));
            st.v.push_back(Tensor<T>(p.shape, T(0)));
        }
        return st;
    }
};

template <typename T>
void optimizer_step(ParamStore<T>& params, const std::vector<Tensor<T>>& grads, OptimizerState<T>& state,
                    const OptimizerConfig& cfg, double learning_rate) {
    if (grads.size() != params.size()) {
        throw std::invalid_argument("optimizer_step: " + std::to_string(grads.size()) + " gradients for " +
                                    std::to_string(params.size()) + " parameters");
    }
    for (std::size_t s = 0; s < grads.size(); ++s) {
        if (!grads[s].all_finite()) {
            throw std::runtime_error("optimizer_step: non-finite gradient for \"" + params.names[s] + "\"");
        }
    }

    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double b1 = cfg.beta1, b2 = cfg.beta2;
    const double b1t = std::pow(b1, t), b2t = std::pow(b2, t);
    const double rho_inf = 2.0 / (1.0 - b2) - 1.0;
    const double rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);

    double rect = 0.0;
    const bool rectified = rho_t > 4.0;
    if (rectified) {
        rect = std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) /
                         ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
    }

    for (std::size_t s = 0; s < params.size(); ++s) {
        Tensor<T>& theta = params.values[s];
        Tensor<T>& m = state.m[s];
        Tensor<T>& v = state.v[s];
        const Tensor<T>& g = grads[s];
        for (std::int64_t i = 0; i < theta.numel(); ++i) {
            const double gi = static_cast<double>(g[i]);
            const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
            const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double mhat = mi / (1.0 - b1t);
            double update;
            if (cfg.kind == OptimizerKind::adam) {
                update = mhat / (std::sqrt(vi / (1.0 - b2t)) + cfg.eps);
            } else if (rectified) {
                update = rect * mhat / (std::sqrt(vi / (1.0 - b2t)) + cfg.eps);
            } else {
                update = mhat;
            }
            theta[i] = static_cast<T>(static_cast<double>(theta[i]) - learning_rate * update);
        }
    }
}

}  // namespace treecaps
