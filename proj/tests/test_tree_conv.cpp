#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "treecaps/ast.hpp"
#include "treecaps/gradcheck.hpp"
#include "treecaps/synthetic.hpp"
#include "treecaps/tree_conv.hpp"

using namespace treecaps;

namespace {

WindowMember member(int depth_in_window, int position, int sibling_count) {
    return WindowMember{0, depth_in_window, position, sibling_count};
}

template <typename T>
Tensor<T> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<T> t(std::move(s));
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <typename T>
ConvSlice<T> identity_slice(int v) {
    ConvSlice<T> s;
    s.wt = Tensor<T>({v, v});
    s.wl = Tensor<T>({v, v});
    s.wr = Tensor<T>({v, v});
    s.bias = Tensor<T>({v});
    for (int i = 0; i < v; ++i) s.wt.at2(i, i) = T(1);
    return s;
}

oracle::Mat to_mat(const Tensor<double>& t) {
    oracle::Mat m(static_cast<std::size_t>(t.shape[0]), oracle::Vec(static_cast<std::size_t>(t.shape[1])));
    for (std::int64_t i = 0; i < t.shape[0]; ++i) {
        for (std::int64_t j = 0; j < t.shape[1]; ++j) m[std::size_t(i)][std::size_t(j)] = t.at2(i, j);
    }
    return m;
}

Tree random_tree(std::uint64_t seed) {
    GrammarSpec g = default_six_class_grammar();
    g.size_range = {8, 30};
    Rng rng(seed);
    return generate_one_tree(g, static_cast<int>(seed % 6), rng);
}

}  // namespace

TEST_CASE("eta coefficients at the window corners") {
    // parent of a depth-2 window
    auto e = eta_weights(member(2, 1, 1), 2);
    CHECK(e.top == doctest::Approx(1.0));
    CHECK(e.left == doctest::Approx(0.0));
    CHECK(e.right == doctest::Approx(0.0));

    // middle child of 3
    e = eta_weights(member(1, 2, 3), 2);
    CHECK(e.top == doctest::Approx(0.0));
    CHECK(e.left == doctest::Approx(0.5));
    CHECK(e.right == doctest::Approx(0.5));

    // last child of 3
    e = eta_weights(member(1, 3, 3), 2);
    CHECK(e.top == doctest::Approx(0.0));
    CHECK(e.left == doctest::Approx(0.0));
    CHECK(e.right == doctest::Approx(1.0));

    // only child
    e = eta_weights(member(1, 1, 1), 2);
    CHECK(e.top == doctest::Approx(0.0));
    CHECK(e.left == doctest::Approx(0.5));
    CHECK(e.right == doctest::Approx(0.5));

    // singleton window (depth 1)
    e = eta_weights(member(1, 1, 1), 1);
    CHECK(e.top == doctest::Approx(1.0));
}

TEST_CASE("eta partition of unity over random windows") {
    Rng rng(123);
    for (int i = 0; i < 1000; ++i) {
        const int d = 1 + static_cast<int>(rng.below(4));
        const int depth_in_window = 1 + static_cast<int>(rng.below(d));
        const int k = 1 + static_cast<int>(rng.below(6));
        const int p = 1 + static_cast<int>(rng.below(k));
        const EtaWeights e = eta_weights(member(depth_in_window, p, k), d);
        CHECK(std::abs(e.top + e.left + e.right - 1.0) < 1e-9);
        CHECK(e.top >= 0.0);
        CHECK(e.top <= 1.0);
        CHECK(e.left >= 0.0);
        CHECK(e.left <= 1.0);
        CHECK(e.right >= 0.0);
        CHECK(e.right <= 1.0);
    }
}

TEST_CASE("conv_node of zero inputs and zero bias is zero") {
    Rng rng(5);
    const Tree t = parse_canonical(R"({"type":"a","children":[{"type":"b"},{"type":"c"}]})");
    const auto windows = extract_windows(t, 2);
    ConvSlice<double> slice;
    slice.wt = random_tensor<double>({4, 3}, rng);
    slice.wl = random_tensor<double>({4, 3}, rng);
    slice.wr = random_tensor<double>({4, 3}, rng);
    slice.bias = Tensor<double>({4});
    const Tensor<double> xs({3, 3}, 0.0);
    const Tensor<double> y = conv_node(windows[0], 2, xs, slice);
    for (double v : y.data) CHECK(v == 0.0);
}

TEST_CASE("conv_node on a singleton window with identity top matrix is tanh") {
    const Tree t = parse_canonical(R"({"type":"leaf"})");
    const auto windows = extract_windows(t, 2);
    const ConvSlice<double> slice = identity_slice<double>(3);
    const Tensor<double> xs = Tensor<double>::from({1, 3}, {0.3, -1.2, 0.8});
    const Tensor<double> y = conv_node(windows[0], 2, xs, slice);
    for (int j = 0; j < 3; ++j) CHECK(y[j] == doctest::Approx(std::tanh(xs[j])).epsilon(1e-12));
}

TEST_CASE("conv_node matches the blended-matrix oracle on a random window") {
    Rng rng(31);
    // root with 3 children, window depth 2 -> 4 members
    const Tree t = parse_canonical(
        R"({"type":"a","children":[{"type":"b"},{"type":"c"},{"type":"d"}]})");
    const auto windows = extract_windows(t, 2);
    REQUIRE(windows[0].members.size() == 4);

    ConvSlice<double> slice;
    slice.wt = random_tensor<double>({5, 3}, rng);
    slice.wl = random_tensor<double>({5, 3}, rng);
    slice.wr = random_tensor<double>({5, 3}, rng);
    slice.bias = random_tensor<double>({5}, rng);
    const Tensor<double> xs = random_tensor<double>({4, 3}, rng);

    const Tensor<double> y = conv_node(windows[0], 2, xs, slice);

    std::vector<oracle::Member> members;
    for (const WindowMember& m : windows[0].members) {
        members.push_back({m.depth_in_window, m.position, m.sibling_count});
    }
    const oracle::Vec ref = oracle::conv_window(members, 2, to_mat(xs), to_mat(slice.wt), to_mat(slice.wl),
                                                to_mat(slice.wr), slice.bias.data);
    for (int j = 0; j < 5; ++j) CHECK(std::abs(y[j] - ref[std::size_t(j)]) < 1e-6);
}

TEST_CASE("conv_tree output shape and slice permutation") {
    Rng rng(7);
    const Tree single = parse_canonical(R"({"type":"one"})");
    std::vector<ConvSlice<double>> stack;
    for (int e = 0; e < 3; ++e) stack.push_back(init_conv_slice<double>(4, 3, rng));
    const Tensor<double> x = random_tensor<double>({1, 3}, rng);
    const Tensor<double> y = conv_tree(single, x, stack, 2);
    CHECK(y.shape == Shape{1, 4, 3});

    // permuting the slice order permutes the slice axis identically
    std::vector<ConvSlice<double>> permuted = {stack[2], stack[0], stack[1]};
    const Tensor<double> yp = conv_tree(single, x, permuted, 2);
    for (std::int64_t r = 0; r < 4; ++r) {
        CHECK(yp[r * 3 + 0] == y[r * 3 + 2]);
        CHECK(yp[r * 3 + 1] == y[r * 3 + 0]);
        CHECK(yp[r * 3 + 2] == y[r * 3 + 1]);
    }
}

TEST_CASE("single-slice conv_tree equals conv_node per window") {
    Rng rng(11);
    const Tree t = random_tree(4);
    const auto windows = extract_windows(t, 2);
    std::vector<ConvSlice<double>> stack{init_conv_slice<double>(6, 4, rng)};
    const Tensor<double> x = random_tensor<double>({t.size(), 4}, rng);
    const Tensor<double> y = conv_tree(t, x, stack, 2);
    for (int n = 0; n < t.size(); ++n) {
        const Window& w = windows[std::size_t(n)];
        Tensor<double> xs({static_cast<std::int64_t>(w.members.size()), 4});
        for (std::size_t i = 0; i < w.members.size(); ++i) {
            for (int c = 0; c < 4; ++c) xs.at2(static_cast<std::int64_t>(i), c) = x.at2(w.members[i].node, c);
        }
        const Tensor<double> yn = conv_node(w, 2, xs, stack[0]);
        for (int r = 0; r < 6; ++r) CHECK(y[(n * 6 + r) * 1] == doctest::Approx(yn[r]).epsilon(1e-12));
    }
}

TEST_CASE("conv_tree matches the scalar oracle on random trees") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        Rng rng(seed_combine(77, seed));
        const Tree t = random_tree(seed);
        REQUIRE(t.size() <= 30);
        const int d = 1 + static_cast<int>(rng.below(3));
        const auto windows = extract_windows(t, d);

        std::vector<ConvSlice<double>> stack;
        for (int e = 0; e < 2; ++e) stack.push_back(init_conv_slice<double>(5, 4, rng));
        const Tensor<double> x = random_tensor<double>({t.size(), 4}, rng);
        const Tensor<double> y = conv_tree(t, x, stack, d);

        for (int n = 0; n < t.size(); ++n) {
            const Window& w = windows[std::size_t(n)];
            oracle::Mat xs;
            std::vector<oracle::Member> members;
            for (const WindowMember& m : w.members) {
                members.push_back({m.depth_in_window, m.position, m.sibling_count});
                oracle::Vec row(4);
                for (int c = 0; c < 4; ++c) row[std::size_t(c)] = x.at2(m.node, c);
                xs.push_back(std::move(row));
            }
            for (std::size_t e = 0; e < stack.size(); ++e) {
                const oracle::Vec ref =
                    oracle::conv_window(members, d, xs, to_mat(stack[e].wt), to_mat(stack[e].wl),
                                        to_mat(stack[e].wr), stack[e].bias.data);
                for (int r = 0; r < 5; ++r) {
                    CHECK(std::abs(y[(n * 5 + r) * 2 + static_cast<std::int64_t>(e)] - ref[std::size_t(r)]) < 1e-6);
                }
            }
        }
    }
}

TEST_CASE("graph convolution agrees with the direct path") {
    Rng rng(13);
    const Tree t = random_tree(9);
    const int vp = 5, v = 4, eps = 3;

    std::vector<ConvSlice<float>> stack;
    for (int e = 0; e < eps; ++e) stack.push_back(init_conv_slice<float>(vp, v, rng));
    const Tensor<float> x = random_tensor<float>({t.size(), v}, rng);
    const Tensor<float> direct = conv_tree(t, x, stack, 2);

    Tape<float> tape;
    ParamStore<float> store;
    std::vector<ConvSliceVars<float>> slice_vars;
    for (int e = 0; e < eps; ++e) {
        const std::string p = "conv" + std::to_string(e) + ".";
        const int wt = store.add(p + "wt", stack[std::size_t(e)].wt);
        const int wl = store.add(p + "wl", stack[std::size_t(e)].wl);
        const int wr = store.add(p + "wr", stack[std::size_t(e)].wr);
        const int bias = store.add(p + "bias", stack[std::size_t(e)].bias);
        slice_vars.push_back(ConvSliceVars<float>{tape.param(store, wt), tape.param(store, wl),
                                                  tape.param(store, wr), tape.param(store, bias)});
    }
    const WindowMixes mixes = build_window_mixes(extract_windows(t, 2), 2);
    Var<float> xv = tape.leaf(x);
    Var<float> features = conv_tree_graph(tape, xv, mixes, slice_vars);
    const Tensor<float>& fv = tape.value(features);
    CHECK(fv.shape == Shape{t.size(), static_cast<std::int64_t>(eps) * vp});

    // graph layout is slice-major per node; direct layout is (T, V', eps)
    for (int n = 0; n < t.size(); ++n) {
        for (int e = 0; e < eps; ++e) {
            for (int r = 0; r < vp; ++r) {
                const float graph_val = fv.at2(n, e * vp + r);
                const float direct_val = direct[(n * vp + r) * eps + e];
                CHECK(std::abs(graph_val - direct_val) < 1e-6f);
            }
        }
    }
}

TEST_CASE("gradient check through tree convolution") {
    Rng rng(21);
    const Tree t = random_tree(3);
    const int vp = 4, v = 3, eps = 2;

    ParamStore<double> params;
    for (int e = 0; e < eps; ++e) {
        const std::string p = "conv" + std::to_string(e) + ".";
        ConvSlice<double> s = init_conv_slice<double>(vp, v, rng);
        params.add(p + "wt", s.wt);
        params.add(p + "wl", s.wl);
        params.add(p + "wr", s.wr);
        params.add(p + "bias", s.bias);
    }
    params.add("x", random_tensor<double>({t.size(), v}, rng));

    const WindowMixes mixes = build_window_mixes(extract_windows(t, 2), 2);
    auto build = [&](Tape<double>& tape, const ParamStore<double>& ps) {
        std::vector<ConvSliceVars<double>> slices;
        for (int e = 0; e < eps; ++e) {
            const std::string p = "conv" + std::to_string(e) + ".";
            slices.push_back(ConvSliceVars<double>{tape.param(ps, ps.find(p + "wt")),
                                                   tape.param(ps, ps.find(p + "wl")),
                                                   tape.param(ps, ps.find(p + "wr")),
                                                   tape.param(ps, ps.find(p + "bias"))});
        }
        Var<double> x = tape.param(ps, ps.find("x"));
        return tape.sum(tape.square(conv_tree_graph(tape, x, mixes, slices)));
    };
    const auto report = gradient_check(params, build, 1e-5);
    CHECK(report.max_rel_error < 1e-4);
    CHECK(report.coordinates_checked > 0);
}
