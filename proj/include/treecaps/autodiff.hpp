#pragma once

// Reverse-mode automatic differentiation on a single-threaded tape.
//
// Each primitive appends one record holding the forward value, the parent
// record ids and a backward closure. Records are created in topological
// order, so walking them from the loss record down to record 0 visits the
// graph in reverse topological order exactly once. Gradients flow through
// every recorded op, including unrolled routing iterations; sorting/top-k
// selection is recorded as a gather, so its subgradient passes through the
// selected rows and is zero elsewhere.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "treecaps/tensor.hpp"

namespace treecaps {

// Named trainable tensors. Slot order is the registration order and is the
// canonical order for optimizer state and checkpoints.
template <typename T>
struct ParamStore {
    std::vector<std::string> names;
    std::vector<Tensor<T>> values;

    int add(std::string name, Tensor<T> value) {
        names.push_back(std::move(name));
        values.push_back(std::move(value));
        return static_cast<int>(names.size()) - 1;
    }

    int find(const std::string& name) const {
        for (std::size_t i = 0; i < names.size(); ++i) {
            if (names[i] == name) return static_cast<int>(i);
        }
        return -1;
    }

    std::size_t size() const { return names.size(); }

    template <typename U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (std::size_t i = 0; i < names.size(); ++i) {
            out.add(names[i], values[i].template cast<U>());
        }
        return out;
    }
};

// Fixed row-mixing coefficients: out[i] = sum over entries e of
// e.weight * x[e.row]. Encodes tree structure, carries no gradient.
struct MixEntry {
    std::int64_t row;
    double weight;
};
using RowMix = std::vector<std::vector<MixEntry>>;

template <typename T>
class Tape;

template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor<T>& value() const;
};

template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // ---- leaves ----

    Var<T> leaf(Tensor<T> v, bool requires_grad = false) {
        return make("leaf", {}, std::move(v), nullptr, requires_grad);
    }

    Var<T> constant(Tensor<T> v) { return leaf(std::move(v), false); }

    // Trainable leaf bound to a ParamStore slot; the binding lets callers map
    // gradients back to named parameters after backward().
    Var<T> param(const ParamStore<T>& store, int slot) {
        Var<T> v = leaf(store.values[static_cast<std::size_t>(slot)], true);
        bindings_.push_back({slot, v.id});
        return v;
    }

    const std::vector<std::pair<int, int>>& param_bindings() const { return bindings_; }

    // ---- elementwise ----

    Var<T> add(Var<T> a, Var<T> b) {
        check_same_shape("add", a, b);
        Tensor<T> out = val(a.id);
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += val(b.id)[i];
        return make("add", {a.id, b.id}, std::move(out), [](Tape& t, const Rec& r) {
            t.accumulate(r.parents[0], t.grad_ref(r.self));
            t.accumulate(r.parents[1], t.grad_ref(r.self));
        });
    }

    Var<T> sub(Var<T> a, Var<T> b) {
        check_same_shape("sub", a, b);
        Tensor<T> out = val(a.id);
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= val(b.id)[i];
        return make("sub", {a.id, b.id}, std::move(out), [](Tape& t, const Rec& r) {
            const Tensor<T>& g = t.grad_ref(r.self);
            t.accumulate(r.parents[0], g);
            if (t.wants_grad(r.parents[1])) {
                Tensor<T>& gb = t.grad_buf(r.parents[1]);
                for (std::int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
            }
        });
    }

    Var<T> mul(Var<T> a, Var<T> b) {
        check_same_shape("mul", a, b);
        Tensor<T> out = val(a.id);
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= val(b.id)[i];
        return make("mul", {a.id, b.id}, std::move(out), [](Tape& t, const Rec& r) {
            const Tensor<T>& g = t.grad_ref(r.self);
            const Tensor<T>& av = t.val(r.parents[0]);
            const Tensor<T>& bv = t.val(r.parents[1]);
            if (t.wants_grad(r.parents[0])) {
                Tensor<T>& ga = t.grad_buf(r.parents[0]);
                for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
            }
            if (t.wants_grad(r.parents[1])) {
                Tensor<T>& gb = t.grad_buf(r.parents[1]);
                for (std::int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
            }
        });
    }

    Var<T> scale(Var<T> a, T c) {
        Tensor<T> out = val(a.id);
        for (auto& v : out.data) v *= c;
        return make("scale", {a.id}, std::move(out), [c](Tape& t, const Rec& r) {
            if (!t.wants_grad(r.parents[0])) return;
            const Tensor<T>& g = t.grad_ref(r.self);
            Tensor<T>& ga = t.grad_buf(r.parents[0]);
            for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += c * g[i];
        });
    }

    Var<T> tanh(Var<T> a) {
        Tensor<T> out = val(a.id);
        for (auto& v : out.data) v = std::tanh(v);
        return make("tanh", {a.id}, std::move(out), [](Tape& t, const Rec& r) {
            if (!t.wants_grad(r.parents[0])) return;
            const Tensor<T>& g = t.grad_ref(r.self);
            const Tensor<T>& y = t.val(r.self);
            Tensor<T>& ga = t.grad_buf(r.parents[0]);
            for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * (T(1) - y[i] * y[i]);
        });
    }

    Var<T> relu(Var<T> a) {
        Tensor<T> out = val(a.id);
        for (auto& v : out.data) v = v > T(0) ? v : T(0);
        return make("relu", {a.id}, std::move(out), [](Tape& t, const Rec& r) {
            if (!t.wants_grad(r.parents[0])) return;
            const Tensor<T>& g = t.grad_ref(r.self);
            const Tensor<T>& x = t.val(r.parents[0]);
            Tensor<T>& ga = t.grad_buf(r.parents[0]);
            for (std::int64_t i = 0; i < g.numel(); ++i) {
                if (x[i] > T(0)) ga[i] += g[i];
            }
        });
    }

    Var<T> square(Var<T> a) {
        Tensor<T> out = val(a.id);
        for (auto& v : out.data) v = v * v;
        return make("square", {a.id}, std::move(out), [](Tape& t, const Rec& r) {
            if (!t.wants_grad(r.parents[0])) return;
            const Tensor<T>& g = t.grad_ref(r.self);
            const Tensor<T>& x = t.val(r.parents[0]);
            Tensor<T>& ga = t.grad_buf(r.parents[0]);
            for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += T(2) * x[i] * g[i];
        });
    }

    // ---- reductions ----

    Var<T> sum(Var<T> a) {
        T s = T(0);
        for (const auto& v : val(a.id).data) s += v;
        return make("sum", {a.id}, Tensor<T>::from({1}, {s}), [](Tape& t, const Rec& r) {
            if (!t.wants_grad(r.parents[0])) return;
            const T g0 = t.grad_ref(r.self)[0];
            Tensor<T>& ga = t.grad_buf(r.parents[0]);
            for (auto& v : ga.data) v += g0;
        });
    }

    Var<T> mean(Var<T> a) {
        const std::int64_t n = val(a.id).numel();
        T s = T(0);
        for (const auto& v : val(a.id).data) s += v;
        s /= static_cast<T>(n);
        return make("mean", {a.id}, Tensor<T>::from({1}, {s}), [n](Tape& t, const Rec& r) {
            if (!t.wants_grad(r.parents[0])) return;
            const T g0 = t.grad_ref(r.self)[0] / static_cast<T>(n);
            Tensor<T>& ga = t.grad_buf(r.parents[0]);
            for (auto& v : ga.data) v += g0;
        });
    }

    Var<T> dot(Var<T> a, Var<T> b) {
        check_same_shape("dot", a, b);
        T s = T(0);
        const Tensor<T>& av = val(a.id);
        const Tensor<T>& bv = val(b.id);
        for (std::int64_t i = 0; i < av.numel(); ++i) s += av[i] * bv[i];
        return make("dot", {a.id, b.id}, Tensor<T>::from({1}, {s}), [](Tape& t, const Rec& r) {
            const T g0 = t.grad_ref(r.self)[0];
            const Tensor<T>& av = t.val(r.parents[0]);
            const Tensor<T>& bv = t.val(r.parents[1]);
            if (t.wants_grad(r.parents[0])) {
                Tensor<T>& ga = t.grad_buf(r.parents[0]);
                for (std::int64_t i = 0; i < av.numel(); ++i) ga[i] += g0 * bv[i];
            }
            if (t.wants_grad(r.parents[1])) {
                Tensor<T>& gb = t.grad_buf(r.parents[1]);
                for (std::int64_t i = 0; i < av.numel(); ++i) gb[i] += g0 * av[i];
            }
        });
    }

    // L2 norm of the whole tensor; subgradient 0 at the origin.
    Var<T> l2_norm(Var<T> a) {
        const T n = static_cast<T>(l2_norm_of(val(a.id)));
        return make("l2_norm", {a.id}, Tensor<T>::from({1}, {n}), [](Tape& t, const Rec& r) {
            if (!t.wants_grad(r.parents[0])) return;
            const T n = t.val(r.self)[0];
            if (n == T(0)) return;
            const T g0 = t.grad_ref(r.self)[0];
            const Tensor<T>& x = t.val(r.parents[0]);
            Tensor<T>& ga = t.grad_buf(r.parents[0]);
            for (std::int64_t i = 0; i < x.numel(); ++i) ga[i] += g0 * x[i] / n;
        });
    }

    // Row-wise L2 norms of a 2-D tensor -> vector of length rows.
    Var<T> l2_norm_rows(Var<T> a) {
        const Tensor<T>& x = val(a.id);
        require(x.rank() == 2, "l2_norm_rows expects a 2-D tensor, got " + shape_str(x.shape));
        const std::int64_t n = x.shape[0], d = x.shape[1];
        Tensor<T> out({n});
        for (std::int64_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::int64_t j = 0; j < d; ++j) {
                const double v = static_cast<double>(x.at2(i, j));
                s += v * v;
            }
            out[i] = static_cast<T>(std::sqrt(s));
        }
        return make("l2_norm_rows", {a.id}, std::move(out), [n, d](Tape& t, const Rec& r) {
            if (!t.wants_grad(r.parents[0])) return;
            const Tensor<T>& g = t.grad_ref(r.self);
            const Tensor<T>& norms = t.val(r.self);
            const Tensor<T>& x = t.val(r.parents[0]);
            Tensor<T>& ga = t.grad_buf(r.parents[0]);
            for (std::int64_t i = 0; i < n; ++i) {
                if (norms[i] == T(0)) continue;
                const T c = g[i] / norms[i];
                for (std::int64_t j = 0; j < d; ++j) ga[i * d + j] += c * x[i * d + j];
            }
        });
    }

    // ---- softmax ----

    // Softmax along `axis`. 1-D tensors use axis 0; 2-D tensors accept axis 0
    // (columns) or 1 (rows).
    Var<T> softmax(Var<T> a, int axis) {
        const Tensor<T>& x = val(a.id);
        Tensor<T> out = x;
        if (x.rank() == 1) {
            require(axis == 0, "softmax axis " + std::to_string(axis) + " invalid for 1-D tensor");
            softmax_span(out.data.data(), x.shape[0], 1);
        } else if (x.rank() == 2) {
            const std::int64_t n = x.shape[0], m = x.shape[1];
            if (axis == 1) {
                for (std::int64_t i = 0; i < n; ++i) softmax_span(out.data.data() + i * m, m, 1);
            } else if (axis == 0) {
                for (std::int64_t j = 0; j < m; ++j) softmax_span(out.data.data() + j, n, m);
            } else {
                throw std::invalid_argument("softmax axis " + std::to_string(axis) + " invalid for 2-D tensor");
            }
        } else {
            throw std::invalid_argument("softmax expects a 1-D or 2-D tensor, got " + shape_str(x.shape));
        }
        return make("softmax", {a.id}, std::move(out), [axis](Tape& t, const Rec& r) {
            if (!t.wants_grad(r.parents[0])) return;
            const Tensor<T>& y = t.val(r.self);
            const Tensor<T>& g = t.grad_ref(r.self);
            Tensor<T>& ga = t.grad_buf(r.parents[0]);
            auto lane = [&](std::int64_t base, std::int64_t len, std::int64_t stride) {
                T gy = T(0);
                for (std::int64_t k = 0; k < len; ++k) gy += g[base + k * stride] * y[base + k * stride];
                for (std::int64_t k = 0; k < len; ++k) {
                    const std::int64_t idx = base + k * stride;
                    ga[idx] += y[idx] * (g[idx] - gy);
                }
            };
            if (y.rank() == 1) {
                lane(0, y.shape[0], 1);
            } else {
                const std::int64_t n = y.shape[0], m = y.shape[1];
                if (axis == 1) {
                    for (std::int64_t i = 0; i < n; ++i) lane(i * m, m, 1);
                } else {
                    for (std::int64_t j = 0; j < m; ++j) lane(j, n, m);
                }
            }
        });
    }

    // ---- matrix products ----

    // C = op(A) * op(B), controlled by transpose flags.
    Var<T> matmul(Var<T> a, Var<T> b, bool trans_a = false, bool trans_b = false) {
        const Tensor<T>& av = val(a.id);
        const Tensor<T>& bv = val(b.id);
        require(av.rank() == 2 && bv.rank() == 2,
                "matmul expects 2-D tensors, got " + shape_str(av.shape) + " and " + shape_str(bv.shape));
        const std::int64_t m = trans_a ? av.shape[1] : av.shape[0];
        const std::int64_t k = trans_a ? av.shape[0] : av.shape[1];
        const std::int64_t kb = trans_b ? bv.shape[1] : bv.shape[0];
        const std::int64_t n = trans_b ? bv.shape[0] : bv.shape[1];
        if (k != kb) {
            throw std::invalid_argument("matmul inner dimensions disagree: " + shape_str(av.shape) +
                                        (trans_a ? "^T" : "") + " vs " + shape_str(bv.shape) +
                                        (trans_b ? "^T" : ""));
        }
        Tensor<T> out({m, n});
        matmul_kernel(av, trans_a, bv, trans_b, out);
        return make("matmul", {a.id, b.id}, std::move(out),
                    [trans_a, trans_b](Tape& t, const Rec& r) {
                        const Tensor<T>& g = t.grad_ref(r.self);
                        const Tensor<T>& av = t.val(r.parents[0]);
                        const Tensor<T>& bv = t.val(r.parents[1]);
                        if (t.wants_grad(r.parents[0])) {
                            Tensor<T>& ga = t.grad_buf(r.parents[0]);
                            if (!trans_a) {
                                // dA = G * op(B)^T
                                matmul_kernel(g, false, bv, !trans_b, ga);
                            } else {
                                // dA = op(B) * G^T
                                matmul_kernel(bv, trans_b, g, true, ga);
                            }
                        }
                        if (t.wants_grad(r.parents[1])) {
                            Tensor<T>& gb = t.grad_buf(r.parents[1]);
                            if (!trans_b) {
                                // dB = op(A)^T * G
                                matmul_kernel(av, !trans_a, g, false, gb);
                            } else {
                                // dB = G^T * op(A)
                                matmul_kernel(g, true, av, trans_a, gb);
                            }
                        }
                    });
    }

    // Adds a bias row vector to every row of a 2-D tensor.
    Var<T> add_bias_rows(Var<T> a, Var<T> bias) {
        const Tensor<T>& x = val(a.id);
        const Tensor<T>& b = val(bias.id);
        require(x.rank() == 2 && b.rank() == 1 && b.shape[0] == x.shape[1],
                "add_bias_rows shape mismatch: " + shape_str(x.shape) + " vs " + shape_str(b.shape));
        Tensor<T> out = x;
        const std::int64_t n = x.shape[0], m = x.shape[1];
        for (std::int64_t i = 0; i < n; ++i) {
            for (std::int64_t j = 0; j < m; ++j) out[i * m + j] += b[j];
        }
        return make("add_bias_rows", {a.id, bias.id}, std::move(out), [n, m](Tape& t, const Rec& r) {
            const Tensor<T>& g = t.grad_ref(r.self);
            if (t.wants_grad(r.parents[0])) t.accumulate(r.parents[0], g);
            if (t.wants_grad(r.parents[1])) {
                Tensor<T>& gb = t.grad_buf(r.parents[1]);
                for (std::int64_t i = 0; i < n; ++i) {
                    for (std::int64_t j = 0; j < m; ++j) gb[j] += g[i * m + j];
                }
            }
        });
    }

    // ---- shape ops ----

    Var<T> reshape(Var<T> a, Shape target) {
        const Tensor<T>& x = val(a.id);
        require(shape_numel(target) == x.numel(),
                "reshape from " + shape_str(x.shape) + " to " + shape_str(target) + " changes element count");
        Tensor<T> out;
        out.shape = std::move(target);
        out.data = x.data;
        return make("reshape", {a.id}, std::move(out), [](Tape& t, const Rec& r) {
            if (!t.wants_grad(r.parents[0])) return;
            const Tensor<T>& g = t.grad_ref(r.self);
            Tensor<T>& ga = t.grad_buf(r.parents[0]);
            for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        });
    }

    // Selects rows by index; backward scatter-adds into the selected rows
    // only, leaving every other row's gradient untouched.
    Var<T> gather_rows(Var<T> a, std::vector<std::int64_t> idx) {
        const Tensor<T>& x = val(a.id);
        require(x.rank() == 2, "gather_rows expects a 2-D tensor, got " + shape_str(x.shape));
        const std::int64_t d = x.shape[1];
        for (auto i : idx) {
            require(i >= 0 && i < x.shape[0],
                    "gather_rows index " + std::to_string(i) + " out of range for " + shape_str(x.shape));
        }
        Tensor<T> out({static_cast<std::int64_t>(idx.size()), d});
        for (std::size_t r = 0; r < idx.size(); ++r) {
            for (std::int64_t j = 0; j < d; ++j) out[static_cast<std::int64_t>(r) * d + j] = x[idx[r] * d + j];
        }
        return make("gather_rows", {a.id}, std::move(out),
                    [idx = std::move(idx), d](Tape& t, const Rec& r) {
                        if (!t.wants_grad(r.parents[0])) return;
                        const Tensor<T>& g = t.grad_ref(r.self);
                        Tensor<T>& ga = t.grad_buf(r.parents[0]);
                        for (std::size_t k = 0; k < idx.size(); ++k) {
                            for (std::int64_t j = 0; j < d; ++j) {
                                ga[idx[k] * d + j] += g[static_cast<std::int64_t>(k) * d + j];
                            }
                        }
                    });
    }

    Var<T> slice_rows(Var<T> a, std::int64_t row0, std::int64_t row1) {
        const Tensor<T>& x = val(a.id);
        require(x.rank() == 2 && row0 >= 0 && row1 <= x.shape[0] && row0 < row1,
                "slice_rows [" + std::to_string(row0) + "," + std::to_string(row1) + ") invalid for " +
                    shape_str(x.shape));
        const std::int64_t d = x.shape[1];
        Tensor<T> out({row1 - row0, d});
        std::copy(x.data.begin() + row0 * d, x.data.begin() + row1 * d, out.data.begin());
        return make("slice_rows", {a.id}, std::move(out), [row0, d](Tape& t, const Rec& r) {
            if (!t.wants_grad(r.parents[0])) return;
            const Tensor<T>& g = t.grad_ref(r.self);
            Tensor<T>& ga = t.grad_buf(r.parents[0]);
            for (std::int64_t i = 0; i < g.numel(); ++i) ga[row0 * d + i] += g[i];
        });
    }

    Var<T> concat_rows(const std::vector<Var<T>>& parts) {
        require(!parts.empty(), "concat_rows needs at least one part");
        const std::int64_t d = val(parts[0].id).shape.size() == 2 ? val(parts[0].id).shape[1] : -1;
        std::int64_t n = 0;
        std::vector<int> pids;
        for (const auto& p : parts) {
            const Tensor<T>& x = val(p.id);
            require(x.rank() == 2 && x.shape[1] == d,
                    "concat_rows column mismatch: " + shape_str(x.shape) + " vs width " + std::to_string(d));
            n += x.shape[0];
            pids.push_back(p.id);
        }
        Tensor<T> out({n, d});
        std::int64_t row = 0;
        for (const auto& p : parts) {
            const Tensor<T>& x = val(p.id);
            std::copy(x.data.begin(), x.data.end(), out.data.begin() + row * d);
            row += x.shape[0];
        }
        return make("concat_rows", std::move(pids), std::move(out), [d](Tape& t, const Rec& r) {
            const Tensor<T>& g = t.grad_ref(r.self);
            std::int64_t row = 0;
            for (int pid : r.parents) {
                const std::int64_t rows = t.val(pid).shape[0];
                if (t.wants_grad(pid)) {
                    Tensor<T>& gp = t.grad_buf(pid);
                    for (std::int64_t i = 0; i < rows * d; ++i) gp[i] += g[row * d + i];
                }
                row += rows;
            }
        });
    }

    Var<T> concat_cols(const std::vector<Var<T>>& parts) {
        require(!parts.empty(), "concat_cols needs at least one part");
        const std::int64_t n = val(parts[0].id).shape[0];
        std::int64_t d = 0;
        std::vector<int> pids;
        for (const auto& p : parts) {
            const Tensor<T>& x = val(p.id);
            require(x.rank() == 2 && x.shape[0] == n,
                    "concat_cols row mismatch: " + shape_str(x.shape) + " vs height " + std::to_string(n));
            d += x.shape[1];
            pids.push_back(p.id);
        }
        Tensor<T> out({n, d});
        std::int64_t col = 0;
        for (const auto& p : parts) {
            const Tensor<T>& x = val(p.id);
            const std::int64_t w = x.shape[1];
            for (std::int64_t i = 0; i < n; ++i) {
                std::copy(x.data.begin() + i * w, x.data.begin() + (i + 1) * w, out.data.begin() + i * d + col);
            }
            col += w;
        }
        return make("concat_cols", std::move(pids), std::move(out), [n, d](Tape& t, const Rec& r) {
            const Tensor<T>& g = t.grad_ref(r.self);
            std::int64_t col = 0;
            for (int pid : r.parents) {
                const std::int64_t w = t.val(pid).shape[1];
                if (t.wants_grad(pid)) {
                    Tensor<T>& gp = t.grad_buf(pid);
                    for (std::int64_t i = 0; i < n; ++i) {
                        for (std::int64_t j = 0; j < w; ++j) gp[i * w + j] += g[i * d + col + j];
                    }
                }
                col += w;
            }
        });
    }

    // The mix pointer must stay valid for the tape's lifetime.
    Var<T> row_mix(Var<T> a, const RowMix* mix) {
        const Tensor<T>& x = val(a.id);
        require(x.rank() == 2, "row_mix expects a 2-D tensor, got " + shape_str(x.shape));
        const std::int64_t d = x.shape[1];
        Tensor<T> out({static_cast<std::int64_t>(mix->size()), d});
        for (std::size_t i = 0; i < mix->size(); ++i) {
            T* dst = out.data.data() + static_cast<std::int64_t>(i) * d;
            for (const MixEntry& e : (*mix)[i]) {
                const T w = static_cast<T>(e.weight);
                const T* src = x.data.data() + e.row * d;
                for (std::int64_t j = 0; j < d; ++j) dst[j] += w * src[j];
            }
        }
        return make("row_mix", {a.id}, std::move(out), [mix, d](Tape& t, const Rec& r) {
            if (!t.wants_grad(r.parents[0])) return;
            const Tensor<T>& g = t.grad_ref(r.self);
            Tensor<T>& ga = t.grad_buf(r.parents[0]);
            for (std::size_t i = 0; i < mix->size(); ++i) {
                const T* src = g.data.data() + static_cast<std::int64_t>(i) * d;
                for (const MixEntry& e : (*mix)[i]) {
                    const T w = static_cast<T>(e.weight);
                    T* dst = ga.data.data() + e.row * d;
                    for (std::int64_t j = 0; j < d; ++j) dst[j] += w * src[j];
                }
            }
        });
    }

    // ---- capsule-specific fused ops ----

    // Row-wise squash: y_i = (|x_i|^2 / (1+|x_i|^2)) * x_i / (|x_i| + eps).
    Var<T> squash_rows(Var<T> a) {
        const Tensor<T>& x = val(a.id);
        require(x.rank() == 2, "squash_rows expects a 2-D tensor, got " + shape_str(x.shape));
        const std::int64_t n = x.shape[0], d = x.shape[1];
        Tensor<T> out({n, d});
        for (std::int64_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::int64_t j = 0; j < d; ++j) {
                const double v = static_cast<double>(x[i * d + j]);
                s += v * v;
            }
            const double norm = std::sqrt(s);
            const double c = s / ((1.0 + s) * (norm + kSquashEps));
            for (std::int64_t j = 0; j < d; ++j) out[i * d + j] = static_cast<T>(c) * x[i * d + j];
        }
        return make("squash_rows", {a.id}, std::move(out), [n, d](Tape& t, const Rec& r) {
            if (!t.wants_grad(r.parents[0])) return;
            const Tensor<T>& g = t.grad_ref(r.self);
            const Tensor<T>& x = t.val(r.parents[0]);
            Tensor<T>& ga = t.grad_buf(r.parents[0]);
            for (std::int64_t i = 0; i < n; ++i) {
                double s = 0.0, gx = 0.0;
                for (std::int64_t j = 0; j < d; ++j) {
                    const double xv = static_cast<double>(x[i * d + j]);
                    s += xv * xv;
                    gx += static_cast<double>(g[i * d + j]) * xv;
                }
                const double norm = std::sqrt(s);
                if (norm == 0.0) continue;
                const double den = (1.0 + s) * (norm + kSquashEps);
                const double c = s / den;
                // dc/dnorm, with s = norm^2
                const double dden = 2.0 * norm * (norm + kSquashEps) + (1.0 + s);
                const double dc = (2.0 * norm * den - s * dden) / (den * den);
                const double k = dc * gx / norm;
                for (std::int64_t j = 0; j < d; ++j) {
                    ga[i * d + j] += static_cast<T>(c * static_cast<double>(g[i * d + j]) +
                                                    k * static_cast<double>(x[i * d + j]));
                }
            }
        });
    }

    // vhat[j,m,:] = W[j,m] * v[j].  W: (a, k, C, D), v: (a, D) -> (a, k, C).
    Var<T> capsule_transform(Var<T> w, Var<T> v) {
        const Tensor<T>& wv = val(w.id);
        const Tensor<T>& vv = val(v.id);
        require(wv.rank() == 4 && vv.rank() == 2 && wv.shape[0] == vv.shape[0] && wv.shape[3] == vv.shape[1],
                "capsule_transform shape mismatch: W " + shape_str(wv.shape) + " vs v " + shape_str(vv.shape));
        const std::int64_t a = wv.shape[0], k = wv.shape[1], c = wv.shape[2], d = wv.shape[3];
        Tensor<T> out({a, k, c});
        for (std::int64_t j = 0; j < a; ++j) {
            for (std::int64_t m = 0; m < k; ++m) {
                const T* wj = wv.data.data() + ((j * k + m) * c) * d;
                for (std::int64_t q = 0; q < c; ++q) {
                    T s = T(0);
                    for (std::int64_t e = 0; e < d; ++e) s += wj[q * d + e] * vv[j * d + e];
                    out[(j * k + m) * c + q] = s;
                }
            }
        }
        return make("capsule_transform", {w.id, v.id}, std::move(out), [a, k, c, d](Tape& t, const Rec& r) {
            const Tensor<T>& g = t.grad_ref(r.self);
            const Tensor<T>& wv = t.val(r.parents[0]);
            const Tensor<T>& vv = t.val(r.parents[1]);
            const bool want_w = t.wants_grad(r.parents[0]);
            const bool want_v = t.wants_grad(r.parents[1]);
            for (std::int64_t j = 0; j < a; ++j) {
                for (std::int64_t m = 0; m < k; ++m) {
                    for (std::int64_t q = 0; q < c; ++q) {
                        const T gq = g[(j * k + m) * c + q];
                        if (gq == T(0)) continue;
                        const std::int64_t base = ((j * k + m) * c + q) * d;
                        if (want_w) {
                            Tensor<T>& gw = t.grad_buf(r.parents[0]);
                            for (std::int64_t e = 0; e < d; ++e) gw[base + e] += gq * vv[j * d + e];
                        }
                        if (want_v) {
                            Tensor<T>& gv = t.grad_buf(r.parents[1]);
                            for (std::int64_t e = 0; e < d; ++e) gv[j * d + e] += gq * wv[base + e];
                        }
                    }
                }
            }
        });
    }

    // s[m,:] = sum_j gamma[j,m] * vhat[j,m,:].  vhat: (a, k, D), gamma: (a, k) -> (k, D).
    Var<T> route_weighted_sum(Var<T> vhat, Var<T> gamma) {
        const Tensor<T>& hv = val(vhat.id);
        const Tensor<T>& gv = val(gamma.id);
        require(hv.rank() == 3 && gv.rank() == 2 && hv.shape[0] == gv.shape[0] && hv.shape[1] == gv.shape[1],
                "route_weighted_sum shape mismatch: " + shape_str(hv.shape) + " vs " + shape_str(gv.shape));
        const std::int64_t a = hv.shape[0], k = hv.shape[1], d = hv.shape[2];
        Tensor<T> out({k, d});
        for (std::int64_t j = 0; j < a; ++j) {
            for (std::int64_t m = 0; m < k; ++m) {
                const T w = gv[j * k + m];
                const T* src = hv.data.data() + (j * k + m) * d;
                for (std::int64_t e = 0; e < d; ++e) out[m * d + e] += w * src[e];
            }
        }
        return make("route_weighted_sum", {vhat.id, gamma.id}, std::move(out), [a, k, d](Tape& t, const Rec& r) {
            const Tensor<T>& g = t.grad_ref(r.self);
            const Tensor<T>& hv = t.val(r.parents[0]);
            const Tensor<T>& gv = t.val(r.parents[1]);
            const bool want_h = t.wants_grad(r.parents[0]);
            const bool want_g = t.wants_grad(r.parents[1]);
            for (std::int64_t j = 0; j < a; ++j) {
                for (std::int64_t m = 0; m < k; ++m) {
                    const std::int64_t base = (j * k + m) * d;
                    if (want_h) {
                        Tensor<T>& gh = t.grad_buf(r.parents[0]);
                        const T w = gv[j * k + m];
                        for (std::int64_t e = 0; e < d; ++e) gh[base + e] += w * g[m * d + e];
                    }
                    if (want_g) {
                        Tensor<T>& gg = t.grad_buf(r.parents[1]);
                        T s = T(0);
                        for (std::int64_t e = 0; e < d; ++e) s += hv[base + e] * g[m * d + e];
                        gg[j * k + m] += s;
                    }
                }
            }
        });
    }

    // f[j,m] = vhat[j,m,:] . z[m,:].  vhat: (a, k, D), z: (k, D) -> (a, k).
    Var<T> route_agreement(Var<T> vhat, Var<T> z) {
        const Tensor<T>& hv = val(vhat.id);
        const Tensor<T>& zv = val(z.id);
        require(hv.rank() == 3 && zv.rank() == 2 && hv.shape[1] == zv.shape[0] && hv.shape[2] == zv.shape[1],
                "route_agreement shape mismatch: " + shape_str(hv.shape) + " vs " + shape_str(zv.shape));
        const std::int64_t a = hv.shape[0], k = hv.shape[1], d = hv.shape[2];
        Tensor<T> out({a, k});
        for (std::int64_t j = 0; j < a; ++j) {
            for (std::int64_t m = 0; m < k; ++m) {
                T s = T(0);
                const T* src = hv.data.data() + (j * k + m) * d;
                for (std::int64_t e = 0; e < d; ++e) s += src[e] * zv[m * d + e];
                out[j * k + m] = s;
            }
        }
        return make("route_agreement", {vhat.id, z.id}, std::move(out), [a, k, d](Tape& t, const Rec& r) {
            const Tensor<T>& g = t.grad_ref(r.self);
            const Tensor<T>& hv = t.val(r.parents[0]);
            const Tensor<T>& zv = t.val(r.parents[1]);
            const bool want_h = t.wants_grad(r.parents[0]);
            const bool want_z = t.wants_grad(r.parents[1]);
            for (std::int64_t j = 0; j < a; ++j) {
                for (std::int64_t m = 0; m < k; ++m) {
                    const T gq = g[j * k + m];
                    if (gq == T(0)) continue;
                    const std::int64_t base = (j * k + m) * d;
                    if (want_h) {
                        Tensor<T>& gh = t.grad_buf(r.parents[0]);
                        for (std::int64_t e = 0; e < d; ++e) gh[base + e] += gq * zv[m * d + e];
                    }
                    if (want_z) {
                        Tensor<T>& gz = t.grad_buf(r.parents[1]);
                        for (std::int64_t e = 0; e < d; ++e) gz[m * d + e] += gq * hv[base + e];
                    }
                }
            }
        });
    }

    // Coordinate-wise max over rows -> (1, D). Ties route the subgradient to
    // the lowest row index.
    Var<T> colwise_max(Var<T> a) {
        const Tensor<T>& x = val(a.id);
        require(x.rank() == 2 && x.shape[0] >= 1, "colwise_max expects a non-empty 2-D tensor");
        const std::int64_t n = x.shape[0], d = x.shape[1];
        Tensor<T> out({1, d});
        std::vector<std::int64_t> arg(static_cast<std::size_t>(d), 0);
        for (std::int64_t j = 0; j < d; ++j) {
            T best = x[j];
            for (std::int64_t i = 1; i < n; ++i) {
                if (x[i * d + j] > best) {
                    best = x[i * d + j];
                    arg[static_cast<std::size_t>(j)] = i;
                }
            }
            out[j] = best;
        }
        return make("colwise_max", {a.id}, std::move(out), [arg = std::move(arg), d](Tape& t, const Rec& r) {
            if (!t.wants_grad(r.parents[0])) return;
            const Tensor<T>& g = t.grad_ref(r.self);
            Tensor<T>& ga = t.grad_buf(r.parents[0]);
            for (std::int64_t j = 0; j < d; ++j) ga[arg[static_cast<std::size_t>(j)] * d + j] += g[j];
        });
    }

    // ---- graph access / backward ----

    const Tensor<T>& value(Var<T> v) const { return recs_[static_cast<std::size_t>(v.id)].value; }

    const Tensor<T>& grad(Var<T> v) const {
        const Rec& r = recs_[static_cast<std::size_t>(v.id)];
        if (r.grad.numel() == 0) {
            throw std::logic_error("gradient not available; call backward() first");
        }
        return r.grad;
    }

    std::size_t size() const { return recs_.size(); }
    const char* op_name(int id) const { return recs_[static_cast<std::size_t>(id)].op; }

    // Reverse pass from a scalar loss. Gradients are recomputed from scratch
    // on every call, so repeated calls on the same graph agree exactly.
    void backward(Var<T> loss) {
        require(loss.tape == this, "backward: loss belongs to a different tape");
        const Tensor<T>& lv = val(loss.id);
        if (lv.numel() != 1) {
            throw std::invalid_argument("backward expects a scalar loss, got " + shape_str(lv.shape));
        }
        for (Rec& r : recs_) {
            if (r.requires_grad) {
                r.grad = Tensor<T>(r.value.shape, T(0));
            } else {
                r.grad = Tensor<T>();
            }
        }
        Rec& lr = recs_[static_cast<std::size_t>(loss.id)];
        if (!lr.requires_grad) return;  // loss does not depend on any trainable leaf
        lr.grad[0] = T(1);
        for (int id = loss.id; id >= 0; --id) {
            Rec& r = recs_[static_cast<std::size_t>(id)];
            if (!r.requires_grad || !r.backward) continue;
            r.backward(*this, r);
        }
    }

private:
    struct Rec {
        const char* op;
        Tensor<T> value;
        Tensor<T> grad;
        std::vector<int> parents;
        std::function<void(Tape&, const Rec&)> backward;
        bool requires_grad = false;
        int self = -1;
    };

    static constexpr double kSquashEps = 1e-9;

    std::vector<Rec> recs_;
    std::vector<std::pair<int, int>> bindings_;  // (param slot, record id)

    friend struct Var<T>;

    static void require(bool cond, const std::string& msg) {
        if (!cond) throw std::invalid_argument(msg);
    }

    void check_same_shape(const char* op, Var<T> a, Var<T> b) const {
        const Tensor<T>& av = val(a.id);
        const Tensor<T>& bv = val(b.id);
        if (!av.same_shape(bv)) {
            throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(av.shape) + " vs " +
                                        shape_str(bv.shape));
        }
    }

    const Tensor<T>& val(int id) const { return recs_[static_cast<std::size_t>(id)].value; }
    const Tensor<T>& grad_ref(int id) const { return recs_[static_cast<std::size_t>(id)].grad; }
    Tensor<T>& grad_buf(int id) { return recs_[static_cast<std::size_t>(id)].grad; }
    bool wants_grad(int id) const { return recs_[static_cast<std::size_t>(id)].requires_grad; }

    void accumulate(int id, const Tensor<T>& g) {
        if (!wants_grad(id)) return;
        Tensor<T>& dst = grad_buf(id);
        for (std::int64_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
    }

    Var<T> make(const char* op, std::vector<int> parents, Tensor<T> value,
                std::function<void(Tape&, const Rec&)> backward, bool leaf_requires_grad = false) {
        Rec r;
        r.op = op;
        r.value = std::move(value);
        r.parents = std::move(parents);
        r.backward = std::move(backward);
        r.self = static_cast<int>(recs_.size());
        r.requires_grad = leaf_requires_grad;
        for (int p : r.parents) {
            if (recs_[static_cast<std::size_t>(p)].requires_grad) r.requires_grad = true;
        }
        recs_.push_back(std::move(r));
        return Var<T>{this, static_cast<int>(recs_.size()) - 1};
    }

    static void softmax_span(T* p, std::int64_t len, std::int64_t stride) {
        T mx = p[0];
        for (std::int64_t k = 1; k < len; ++k) mx = std::max(mx, p[k * stride]);
        double sum = 0.0;
        for (std::int64_t k = 0; k < len; ++k) {
            const double e = std::exp(static_cast<double>(p[k * stride] - mx));
            p[k * stride] = static_cast<T>(e);
            sum += e;
        }
        for (std::int64_t k = 0; k < len; ++k) p[k * stride] = static_cast<T>(p[k * stride] / sum);
    }

public:
    // out = op(a) * op(b); accumulates into out (callers pass zeroed or
    // grad buffers).
    static void matmul_kernel(const Tensor<T>& a, bool ta, const Tensor<T>& b, bool tb, Tensor<T>& out) {
        const std::int64_t m = ta ? a.shape[1] : a.shape[0];
        const std::int64_t k = ta ? a.shape[0] : a.shape[1];
        const std::int64_t n = tb ? b.shape[0] : b.shape[1];
        T* c = out.data.data();
        const T* pa = a.data.data();
        const T* pb = b.data.data();
        if (!ta && !tb) {
            for (std::int64_t i = 0; i < m; ++i) {
                for (std::int64_t l = 0; l < k; ++l) {
                    const T av = pa[i * k + l];
                    if (av == T(0)) continue;
                    const T* brow = pb + l * n;
                    T* crow = c + i * n;
                    for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
                }
            }
        } else if (!ta && tb) {
            for (std::int64_t i = 0; i < m; ++i) {
                const T* arow = pa + i * k;
                for (std::int64_t j = 0; j < n; ++j) {
                    const T* brow = pb + j * k;
                    T s = T(0);
                    for (std::int64_t l = 0; l < k; ++l) s += arow[l] * brow[l];
                    c[i * n + j] += s;
                }
            }
        } else if (ta && !tb) {
            for (std::int64_t l = 0; l < k; ++l) {
                const T* arow = pa + l * m;
                const T* brow = pb + l * n;
                for (std::int64_t i = 0; i < m; ++i) {
                    const T av = arow[i];
                    if (av == T(0)) continue;
                    T* crow = c + i * n;
                    for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
                }
            }
        } else {
            // C = A^T B^T: c[i,j] = sum_l a[l,i] * b[j,l]
            for (std::int64_t i = 0; i < m; ++i) {
                for (std::int64_t j = 0; j < n; ++j) {
                    T s = T(0);
                    for (std::int64_t l = 0; l < k; ++l) s += pa[l * m + i] * pb[j * k + l];
                    c[i * n + j] += s;
                }
            }
        }
    }
};

template <typename T>
inline const Tensor<T>& Var<T>::value() const {
    return tape->value(*this);
}

}  // namespace treecaps
