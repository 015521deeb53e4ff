#pragma once

// Capsule layers: squash, primary variable capsule formation, the
// variable-to-static routing that maps a tree-size-dependent capsule set to
// a fixed one, dynamic routing to the code capsules, and the dynamic
// max-pooling ablation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "treecaps/autodiff.hpp"
#include "treecaps/tensor.hpp"

namespace treecaps {

// Direct squash of a single vector; mirrors the tape primitive.
template <typename T>
std::vector<T> squash(const std::vector<T>& u) {
    double s = 0.0;
    for (const T& v : u) s += static_cast<double>(v) * static_cast<double>(v);
    const double norm = std::sqrt(s);
    const double c = s / ((1.0 + s) * (norm + 1e-9));
    std::vector<T> out(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) out[i] = static_cast<T>(c * static_cast<double>(u[i]));
    return out;
}

struct RoutingConfig {
    int static_capsules = 8;   // a
    int routed_capsules = 0;   // b; 0 routes every capsule
    int vts_iterations = 3;    // r
    int dyn_iterations = 3;    // t

    void validate() const {
        if (static_capsules < 1) throw std::invalid_argument("routing: static capsule count must be >= 1");
        if (routed_capsules != 0 && routed_capsules < static_capsules) {
            throw std::invalid_argument("routing: routed capsule count " + std::to_string(routed_capsules) +
                                        " must be >= static capsule count " + std::to_string(static_capsules));
        }
        if (vts_iterations < 1) throw std::invalid_argument("routing: need >= 1 variable-to-static iteration");
        if (dyn_iterations < 1) throw std::invalid_argument("routing: need >= 1 dynamic iteration");
    }
};

// Descending L2-norm order; ties broken by the lower original index.
template <typename T>
std::vector<std::int64_t> norm_sort_order(const Tensor<T>& caps) {
    const std::int64_t n = caps.shape[0], d = caps.shape[1];
    std::vector<double> norms(static_cast<std::size_t>(n), 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
            const double v = static_cast<double>(caps[i * d + j]);
            s += v * v;
        }
        norms[static_cast<std::size_t>(i)] = s;
    }
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::int64_t x, std::int64_t y) {
        const double nx = norms[static_cast<std::size_t>(x)], ny = norms[static_cast<std::size_t>(y)];
        if (nx != ny) return nx > ny;
        return x < y;
    });
    return order;
}

// Groups per-node conv features into capsules of dimension d_pvc, then
// squashes. Input features are (T, slices*V'), slice-major per node, so each
// capsule draws from exactly one AST node; (slices*V') must divide evenly.
template <typename T>
Var<T> form_primary_capsules_graph(Tape<T>& tape, Var<T> features, int d_pvc) {
    const Tensor<T>& f = tape.value(features);
    const std::int64_t t = f.shape[0], w = f.shape[1];
    if (d_pvc < 1 || w % d_pvc != 0) {
        throw std::invalid_argument("primary capsule dimension " + std::to_string(d_pvc) +
                                    " must divide per-node feature width " + std::to_string(w) +
                                    " (conv_dim * conv_slices)");
    }
    return tape.squash_rows(tape.reshape(features, {t * (w / d_pvc), d_pvc}));
}

// Direct counterpart over the (T, V', slices) conv output layout.
template <typename T>
Tensor<T> form_primary_capsules(const Tensor<T>& y, int d_pvc) {
    if (y.rank() != 3) throw std::invalid_argument("form_primary_capsules expects (T, V', slices), got " + shape_str(y.shape));
    const std::int64_t t = y.shape[0], vp = y.shape[1], eps = y.shape[2];
    if (d_pvc < 1 || (vp * eps) % d_pvc != 0) {
        throw std::invalid_argument("primary capsule dimension " + std::to_string(d_pvc) +
                                    " must divide per-node feature width " + std::to_string(vp * eps));
    }
    const std::int64_t n = t * vp * eps / d_pvc;
    Tensor<T> caps({n, d_pvc});
    std::vector<T> block(static_cast<std::size_t>(d_pvc));
    std::int64_t row = 0;
    for (std::int64_t node = 0; node < t; ++node) {
        // slice-major, feature-minor ordering of the node's features
        std::int64_t k = 0;
        std::vector<T> feats(static_cast<std::size_t>(vp * eps));
        for (std::int64_t e = 0; e < eps; ++e) {
            for (std::int64_t r = 0; r < vp; ++r) feats[static_cast<std::size_t>(k++)] = y[(node * vp + r) * eps + e];
        }
        for (std::int64_t off = 0; off < vp * eps; off += d_pvc) {
            for (std::int64_t j = 0; j < d_pvc; ++j) block[static_cast<std::size_t>(j)] = feats[static_cast<std::size_t>(off + j)];
            const std::vector<T> sq = squash(block);
            for (std::int64_t j = 0; j < d_pvc; ++j) caps[row * d_pvc + j] = sq[static_cast<std::size_t>(j)];
            ++row;
        }
    }
    return caps;
}

// ---- variable-to-static routing ----

template <typename T>
struct VtsResult {
    Var<T> output;                        // (a, D) static capsules
    std::vector<Var<T>> betas;            // per-iteration softmax outputs (b_eff, a)
    std::vector<std::int64_t> init_order; // sorted capsule indices actually routed
    std::int64_t effective_b = 0;
};

// Routes a variable number of capsules to `a` static ones. The inputs are
// sorted by descending norm; the top-a initialize the static outputs and the
// top-b participate in routing. Fewer than `a` inputs are padded with zero
// capsules (squash fixed points) first.
template <typename T>
VtsResult<T> variable_to_static_route(Tape<T>& tape, Var<T> caps, const RoutingConfig& cfg) {
    cfg.validate();
    const Tensor<T>& cv = tape.value(caps);
    if (cv.rank() != 2) throw std::invalid_argument("variable_to_static_route expects (N, D) capsules");
    const std::int64_t a = cfg.static_capsules;
    Var<T> u = caps;
    std::int64_t n = cv.shape[0];
    if (n < a) {
        Var<T> pad = tape.constant(Tensor<T>({a - n, cv.shape[1]}, T(0)));
        u = tape.concat_rows({u, pad});
        n = a;
    }
    std::vector<std::int64_t> order = norm_sort_order(tape.value(u));
    std::int64_t b = cfg.routed_capsules == 0 ? n : std::min<std::int64_t>(cfg.routed_capsules, n);
    b = std::max(b, a);
    order.resize(static_cast<std::size_t>(b));

    VtsResult<T> res;
    res.init_order = order;
    res.effective_b = b;

    Var<T> routed = tape.gather_rows(u, order);          // top-b, descending norm
    Var<T> v = tape.slice_rows(routed, 0, a);            // initialization: a highest norms
    Var<T> alpha = tape.constant(Tensor<T>({b, a}, T(0)));
    for (int it = 0; it < cfg.vts_iterations; ++it) {
        Var<T> f = tape.matmul(routed, v, false, true);  // agreement f_ij = u_i . v_j
        alpha = tape.add(alpha, f);
        Var<T> beta = tape.softmax(alpha, 1);
        res.betas.push_back(beta);
        Var<T> s = tape.matmul(beta, routed, true, false);  // s_j = sum_i beta_ij u_i
        v = tape.squash_rows(s);
    }
    res.output = v;
    return res;
}

// ---- dynamic routing (code capsule layer) ----

template <typename T>
struct DynResult {
    Var<T> output;              // (classes, D_cc)
    std::vector<Var<T>> gammas; // per-iteration softmax outputs (a, classes)
};

// Routing-by-agreement between a fixed set of capsules and the class
// capsules, over prediction vectors vhat of shape (a, classes, D_cc). The
// final coefficient update of the last iteration is dead in the unrolled
// graph and is skipped.
template <typename T>
DynResult<T> dynamic_route(Tape<T>& tape, Var<T> vhat, int iterations) {
    if (iterations < 1) throw std::invalid_argument("dynamic_route needs >= 1 iteration");
    const Tensor<T>& hv = tape.value(vhat);
    if (hv.rank() != 3) throw std::invalid_argument("dynamic_route expects (a, classes, D) prediction vectors");
    const std::int64_t a = hv.shape[0], classes = hv.shape[1];

    DynResult<T> res;
    Var<T> delta = tape.constant(Tensor<T>({a, classes}, T(0)));
    Var<T> z{};
    for (int it = 0; it < iterations; ++it) {
        Var<T> gamma = tape.softmax(delta, 1);
        res.gammas.push_back(gamma);
        z = tape.squash_rows(tape.route_weighted_sum(vhat, gamma));
        if (it + 1 < iterations) delta = tape.add(delta, tape.route_agreement(vhat, z));
    }
    res.output = z;
    return res;
}

// Dynamic max pooling ablation: collapses all capsules to one by
// coordinate-wise max; the result is routed like a one-capsule static layer.
template <typename T>
Var<T> dynamic_max_pool(Tape<T>& tape, Var<T> caps) {
    return tape.colwise_max(caps);
}

// ---- class scores ----

struct ClassScores {
    std::vector<double> norms;
    std::vector<double> probabilities;  // softmax over norms
    int predicted = 0;                  // argmax norm == argmax probability
};

template <typename T>
ClassScores class_scores(const Tensor<T>& code_caps) {
    if (code_caps.rank() != 2) throw std::invalid_argument("class_scores expects (classes, D) capsules");
    const std::int64_t k = code_caps.shape[0], d = code_caps.shape[1];
    ClassScores out;
    out.norms.resize(static_cast<std::size_t>(k));
    for (std::int64_t m = 0; m < k; ++m) {
        double s = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
            const double v = static_cast<double>(code_caps[m * d + j]);
            s += v * v;
        }
        out.norms[static_cast<std::size_t>(m)] = std::sqrt(s);
    }
    double mx = out.norms[0];
    for (std::size_t m = 1; m < out.norms.size(); ++m) {
        if (out.norms[m] > mx) {
            mx = out.norms[m];
            out.predicted = static_cast<int>(m);
        }
    }
    double total = 0.0;
    out.probabilities.resize(out.norms.size());
    for (std::size_t m = 0; m < out.norms.size(); ++m) {
        out.probabilities[m] = std::exp(out.norms[m] - mx);
        total += out.probabilities[m];
    }
    for (auto& p : out.probabilities) p /= total;
    return out;
}

}  // namespace treecaps
