#pragma once

// Continuous-binary-tree convolution over ASTs. Each window member's weight
// matrix is an eta-weighted blend of three learned matrices (top/left/right);
// the blend coefficients depend only on the member's depth and sibling
// position, so per-tree they compile down to three fixed row mixes.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "treecaps/ast.hpp"
#include "treecaps/autodiff.hpp"
#include "treecaps/common.hpp"
#include "treecaps/tensor.hpp"

namespace treecaps {

struct EtaWeights {
    double top;
    double left;
    double right;
};

// Coefficients for one window member. The window root carries depth_in_window
// == window_depth and gets eta_top = 1; descendants interpolate toward the
// left/right matrices by sibling position. Degenerate cases: window_depth 1
// pins eta_top = 1, an only child uses rho = 1/2.
inline EtaWeights eta_weights(const WindowMember& m, int window_depth) {
    const double top = window_depth == 1
                           ? 1.0
                           : static_cast<double>(m.depth_in_window - 1) / static_cast<double>(window_depth - 1);
    const double rho = m.sibling_count == 1
                           ? 0.5
                           : static_cast<double>(m.position - 1) / static_cast<double>(m.sibling_count - 1);
    const double right = (1.0 - top) * rho;
    const double left = (1.0 - top) * (1.0 - rho);
    return {top, left, right};
}

// Per-tree convolution structure: row t of each mix aggregates the window
// rooted at node t with that matrix's eta coefficients.
struct WindowMixes {
    RowMix top, left, right;
};

inline WindowMixes build_window_mixes(const std::vector<Window>& windows, int window_depth) {
    WindowMixes mixes;
    mixes.top.resize(windows.size());
    mixes.left.resize(windows.size());
    mixes.right.resize(windows.size());
    for (std::size_t t = 0; t < windows.size(); ++t) {
        for (const WindowMember& m : windows[t].members) {
            const EtaWeights e = eta_weights(m, window_depth);
            if (e.top != 0.0) mixes.top[t].push_back({m.node, e.top});
            if (e.left != 0.0) mixes.left[t].push_back({m.node, e.left});
            if (e.right != 0.0) mixes.right[t].push_back({m.node, e.right});
        }
    }
    return mixes;
}

// One convolution slice: three blend matrices of shape (V', V) plus bias.
template <typename T>
struct ConvSlice {
    Tensor<T> wt, wl, wr, bias;
};

template <typename T>
ConvSlice<T> init_conv_slice(int conv_dim, int embed_dim, Rng& rng) {
    ConvSlice<T> s;
    s.wt = Tensor<T>({conv_dim, embed_dim});
    s.wl = Tensor<T>({conv_dim, embed_dim});
    s.wr = Tensor<T>({conv_dim, embed_dim});
    s.bias = Tensor<T>({conv_dim});
    const double bound = std::sqrt(6.0 / static_cast<double>(embed_dim + conv_dim));
    for (auto* m : {&s.wt, &s.wl, &s.wr}) {
        for (auto& v : m->data) v = static_cast<T>(rng.uniform(-bound, bound));
    }
    for (auto& v : s.bias.data) v = static_cast<T>(rng.uniform(-bound, bound));
    return s;
}

// Direct evaluation of one window against one slice; `xs` holds the member
// vectors in window order, shape (K+1, V). Returns y in (-1, 1)^{V'}.
template <typename T>
Tensor<T> conv_node(const Window& w, int window_depth, const Tensor<T>& xs, const ConvSlice<T>& slice) {
    const std::int64_t vp = slice.wt.shape[0];
    const std::int64_t v = slice.wt.shape[1];
    if (xs.rank() != 2 || xs.shape[0] != static_cast<std::int64_t>(w.members.size()) || xs.shape[1] != v) {
        throw std::invalid_argument("conv_node: member matrix " + shape_str(xs.shape) + " does not match window of " +
                                    std::to_string(w.members.size()) + " members and V=" + std::to_string(v));
    }
    Tensor<T> y({vp});
    for (std::size_t i = 0; i < w.members.size(); ++i) {
        const EtaWeights e = eta_weights(w.members[i], window_depth);
        for (std::int64_t r = 0; r < vp; ++r) {
            T acc = T(0);
            for (std::int64_t c = 0; c < v; ++c) {
                const T blended = static_cast<T>(e.top) * slice.wt.at2(r, c) +
                                  static_cast<T>(e.left) * slice.wl.at2(r, c) +
                                  static_cast<T>(e.right) * slice.wr.at2(r, c);
                acc += blended * xs.at2(static_cast<std::int64_t>(i), c);
            }
            y[r] += acc;
        }
    }
    for (std::int64_t r = 0; r < vp; ++r) y[r] = std::tanh(y[r] + slice.bias[r]);
    return y;
}

// Whole-tree convolution across all slices; output shape (T, V', slices)
// with Y[t, :, e] the slice-e output for the window rooted at node t.
template <typename T>
Tensor<T> conv_tree(const Tree& tree, const Tensor<T>& x, const std::vector<ConvSlice<T>>& stack,
                    int window_depth) {
    if (stack.empty()) throw std::invalid_argument("conv_tree: need at least one slice");
    if (x.rank() != 2 || x.shape[0] != tree.size()) {
        throw std::invalid_argument("conv_tree: node matrix " + shape_str(x.shape) + " does not match tree of " +
                                    std::to_string(tree.size()) + " nodes");
    }
    const auto windows = extract_windows(tree, window_depth);
    const std::int64_t vp = stack[0].wt.shape[0];
    const std::int64_t eps = static_cast<std::int64_t>(stack.size());
    Tensor<T> out({tree.size(), vp, eps});
    for (std::size_t t = 0; t < windows.size(); ++t) {
        const Window& w = windows[t];
        Tensor<T> xs({static_cast<std::int64_t>(w.members.size()), x.shape[1]});
        for (std::size_t i = 0; i < w.members.size(); ++i) {
            for (std::int64_t c = 0; c < x.shape[1]; ++c) {
                xs.at2(static_cast<std::int64_t>(i), c) = x.at2(w.members[i].node, c);
            }
        }
        for (std::int64_t e = 0; e < eps; ++e) {
            const Tensor<T> y = conv_node(w, window_depth, xs, stack[static_cast<std::size_t>(e)]);
            for (std::int64_t r = 0; r < vp; ++r) {
                out[static_cast<std::int64_t>(t) * vp * eps + r * eps + e] = y[r];
            }
        }
    }
    return out;
}

// Graph-path slice parameters (ParamStore-bound vars).
template <typename T>
struct ConvSliceVars {
    Var<T> wt, wl, wr, bias;
};

// Tape convolution over a whole tree. Equivalent regrouping of the direct
// form: y = tanh(Wt * sum_i eta_t x_i + Wl * sum_i eta_l x_i + Wr * sum_i
// eta_r x_i + b), with the eta-weighted sums shared across slices.
// Returns per-node features (T, slices * V'), slice-major per node.
template <typename T>
Var<T> conv_tree_graph(Tape<T>& tape, Var<T> x, const WindowMixes& mixes,
                       const std::vector<ConvSliceVars<T>>& slices) {
    Var<T> st = tape.row_mix(x, &mixes.top);
    Var<T> sl = tape.row_mix(x, &mixes.left);
    Var<T> sr = tape.row_mix(x, &mixes.right);
    std::vector<Var<T>> outs;
    outs.reserve(slices.size());
    for (const ConvSliceVars<T>& s : slices) {
        Var<T> pre = tape.add(tape.add(tape.matmul(st, s.wt, false, true), tape.matmul(sl, s.wl, false, true)),
                              tape.matmul(sr, s.wr, false, true));
        outs.push_back(tape.tanh(tape.add_bias_rows(pre, s.bias)));
    }
    return tape.concat_cols(outs);
}

}  // namespace treecaps
