#pragma once

// Central finite-difference gradient verification for tape-built models.

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

#include "treecaps/autodiff.hpp"
#include "treecaps/common.hpp"

namespace treecaps {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_coordinate;      // "name[flat_index]"
    std::int64_t coordinates_checked = 0;

    bool ok(double tol) const { return max_rel_error < tol; }
};

// Compares analytic gradients against central finite differences for every
// parameter coordinate touched by `build`. `build` must construct a fresh
// graph from the current store values and return a scalar loss var:
//     Var<double> build(Tape<double>&, const ParamStore<double>&)
//
// Relative error per coordinate: |a - n| / max(|a|, |n|, 1e-8).
template <typename BuildFn>
GradCheckReport gradient_check(ParamStore<double>& params, BuildFn&& build, double epsilon) {
    if (!(epsilon >= 1e-7 && epsilon <= 1e-4)) {
        throw std::invalid_argument("gradient_check epsilon must lie in [1e-7, 1e-4], got " + fmt_g(epsilon));
    }

    auto eval_loss = [&]() -> double {
        Tape<double> tape;
        Var<double> loss = build(tape, params);
        const Tensor<double>& lv = tape.value(loss);
        if (lv.numel() != 1) {
            throw std::invalid_argument("gradient_check: build returned non-scalar loss " + shape_str(lv.shape));
        }
        return lv[0];
    };

    // Analytic pass.
    Tape<double> tape;
    Var<double> loss = build(tape, params);
    if (tape.value(loss).numel() != 1) {
        throw std::invalid_argument("gradient_check: build returned non-scalar loss");
    }
    tape.backward(loss);

    // A slot may be bound more than once; analytic gradient is the sum.
    std::vector<Tensor<double>> analytic(params.size());
    for (const auto& [slot, node] : tape.param_bindings()) {
        const Tensor<double>& g = tape.grad(Var<double>{&tape, node});
        if (analytic[static_cast<std::size_t>(slot)].numel() == 0) {
            analytic[static_cast<std::size_t>(slot)] = g;
        } else {
            for (std::int64_t i = 0; i < g.numel(); ++i) analytic[static_cast<std::size_t>(slot)][i] += g[i];
        }
    }

    GradCheckReport report;
    for (std::size_t slot = 0; slot < params.size(); ++slot) {
        if (analytic[slot].numel() == 0) continue;  // parameter never bound by build
        Tensor<double>& theta = params.values[slot];
        for (std::int64_t i = 0; i < theta.numel(); ++i) {
            const double saved = theta[i];
            theta[i] = saved + epsilon;
            const double lp = eval_loss();
            theta[i] = saved - epsilon;
            const double lm = eval_loss();
            theta[i] = saved;

            const double numeric = (lp - lm) / (2.0 * epsilon);
            const double a = analytic[slot][i];
            if (!std::isfinite(numeric) || !std::isfinite(a)) {
                throw std::runtime_error("gradient_check: non-finite value at " + params.names[slot] + "[" +
                                         std::to_string(i) + "]");
            }
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
            ++report.coordinates_checked;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_coordinate = params.names[slot] + "[" + std::to_string(i) + "]";
            }
        }
    }
    return report;
}

}  // namespace treecaps
