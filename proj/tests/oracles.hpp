#pragma once

// Naive reference implementations used only by tests. Everything here works
// on plain nested std::vector<double> with straightforward loops and stays
// independent of the library's tensor/tape code paths.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

inline double norm_of(const Vec& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

inline Vec squash(const Vec& u) {
    const double n = norm_of(u);
    const double s = n * n;
    Vec out(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) {
        out[i] = (s / (1.0 + s)) * (u[i] / (n + 1e-9));
    }
    return out;
}

inline Vec softmax(const Vec& x) {
    double mx = x[0];
    for (double v : x) mx = std::max(mx, v);
    Vec e(x.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        e[i] = std::exp(x[i] - mx);
        sum += e[i];
    }
    for (auto& v : e) v /= sum;
    return e;
}

// ---- tree convolution (one window) ----

struct Member {
    int depth_in_window;  // root = window depth, deepest = 1
    int position;         // 1-based among siblings
    int sibling_count;
};

// Blended-matrix form: W_i = eta_t Wt + eta_l Wl + eta_r Wr built in full
// per member, then y = tanh(sum_i W_i x_i + b).
inline Vec conv_window(const std::vector<Member>& members, int window_depth, const Mat& xs, const Mat& wt,
                       const Mat& wl, const Mat& wr, const Vec& bias) {
    const std::size_t vp = wt.size();
    const std::size_t v = wt[0].size();
    Vec y(vp, 0.0);
    for (std::size_t i = 0; i < members.size(); ++i) {
        const Member& m = members[i];
        const double top = window_depth == 1 ? 1.0 : double(m.depth_in_window - 1) / double(window_depth - 1);
        const double rho = m.sibling_count == 1 ? 0.5 : double(m.position - 1) / double(m.sibling_count - 1);
        const double right = (1.0 - top) * rho;
        const double left = (1.0 - top) * (1.0 - rho);
        Mat w(vp, Vec(v, 0.0));
        for (std::size_t r = 0; r < vp; ++r) {
            for (std::size_t c = 0; c < v; ++c) {
                w[r][c] = top * wt[r][c] + left * wl[r][c] + right * wr[r][c];
            }
        }
        for (std::size_t r = 0; r < vp; ++r) {
            for (std::size_t c = 0; c < v; ++c) y[r] += w[r][c] * xs[i][c];
        }
    }
    for (std::size_t r = 0; r < vp; ++r) y[r] = std::tanh(y[r] + bias[r]);
    return y;
}

// ---- variable-to-static capsule routing ----

// Transliteration of the routing procedure: pad to `a` capsules if needed,
// sort by descending norm (ties keep the lower index first), initialize the
// static outputs from the top-a, route the top-b for r iterations.
inline Mat vts_route(Mat caps, int a, int b, int r) {
    const std::size_t d = caps[0].size();
    while (static_cast<int>(caps.size()) < a) caps.push_back(Vec(d, 0.0));
    const int n = static_cast<int>(caps.size());

    std::vector<int> idx(caps.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int x, int y) { return norm_of(caps[std::size_t(x)]) > norm_of(caps[std::size_t(y)]); });

    int b_eff = b <= 0 ? n : std::min(b, n);
    b_eff = std::max(b_eff, a);
    Mat u;
    for (int i = 0; i < b_eff; ++i) u.push_back(caps[std::size_t(idx[std::size_t(i)])]);

    Mat v;
    for (int j = 0; j < a; ++j) v.push_back(u[std::size_t(j)]);

    Mat alpha(std::size_t(b_eff), Vec(std::size_t(a), 0.0));
    for (int it = 0; it < r; ++it) {
        for (int i = 0; i < b_eff; ++i) {
            for (int j = 0; j < a; ++j) {
                double f = 0.0;
                for (std::size_t k = 0; k < d; ++k) f += u[std::size_t(i)][k] * v[std::size_t(j)][k];
                alpha[std::size_t(i)][std::size_t(j)] += f;
            }
        }
        Mat beta(static_cast<std::size_t>(b_eff));
        for (int i = 0; i < b_eff; ++i) beta[std::size_t(i)] = softmax(alpha[std::size_t(i)]);
        for (int j = 0; j < a; ++j) {
            Vec s(d, 0.0);
            for (int i = 0; i < b_eff; ++i) {
                for (std::size_t k = 0; k < d; ++k) s[k] += beta[std::size_t(i)][std::size_t(j)] * u[std::size_t(i)][k];
            }
            v[std::size_t(j)] = squash(s);
        }
    }
    return v;
}

// ---- dynamic routing ----

// vhat[j][m] is the prediction vector from static capsule j for class m.
inline Mat dynamic_route(const std::vector<Mat>& vhat, int t) {
    const int a = static_cast<int>(vhat.size());
    const int c = static_cast<int>(vhat[0].size());
    const std::size_t d = vhat[0][0].size();
    Mat delta(std::size_t(a), Vec(std::size_t(c), 0.0));
    Mat z(std::size_t(c), Vec(d, 0.0));
    for (int it = 0; it < t; ++it) {
        Mat gamma(static_cast<std::size_t>(a));
        for (int j = 0; j < a; ++j) gamma[std::size_t(j)] = softmax(delta[std::size_t(j)]);
        for (int m = 0; m < c; ++m) {
            Vec s(d, 0.0);
            for (int j = 0; j < a; ++j) {
                for (std::size_t k = 0; k < d; ++k) s[k] += gamma[std::size_t(j)][std::size_t(m)] * vhat[std::size_t(j)][std::size_t(m)][k];
            }
            z[std::size_t(m)] = squash(s);
        }
        for (int j = 0; j < a; ++j) {
            for (int m = 0; m < c; ++m) {
                double f = 0.0;
                for (std::size_t k = 0; k < d; ++k) f += vhat[std::size_t(j)][std::size_t(m)][k] * z[std::size_t(m)][k];
                delta[std::size_t(j)][std::size_t(m)] += f;
            }
        }
    }
    return z;
}

// ---- margin loss ----

inline double margin_loss(const Vec& norms, int label, double m_plus, double m_minus, double lambda) {
    double total = 0.0;
    for (std::size_t m = 0; m < norms.size(); ++m) {
        const double t_mu = static_cast<int>(m) == label ? 1.0 : 0.0;
        const double pos = std::max(0.0, m_plus - norms[m]);
        const double neg = std::max(0.0, norms[m] - m_minus);
        total += t_mu * pos * pos + lambda * (1.0 - t_mu) * neg * neg;
    }
    return total;
}

}  // namespace oracle
