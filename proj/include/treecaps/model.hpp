#pragma once

// Whole-model assembly: configuration, parameter initialization, per-sample
// preparation and the forward graph from node-type ids to class-capsule
// norms.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "treecaps/ast.hpp"
#include "treecaps/autodiff.hpp"
#include "treecaps/capsules.hpp"
#include "treecaps/common.hpp"
#include "treecaps/embeddings.hpp"
#include "treecaps/tree_conv.hpp"

namespace treecaps {

enum class Variant { standard, dmp_ablation, secondary_layer };

inline std::string variant_name(Variant v) {
    switch (v) {
        case Variant::standard: return "standard";
        case Variant::dmp_ablation: return "dmp-ablation";
        case Variant::secondary_layer: return "secondary-layer";
    }
    return "standard";
}

inline Variant variant_from_name(const std::string& s) {
    if (s == "standard") return Variant::standard;
    if (s == "dmp-ablation") return Variant::dmp_ablation;
    if (s == "secondary-layer") return Variant::secondary_layer;
    throw std::invalid_argument("unknown variant \"" + s + "\" (expected standard | dmp-ablation | secondary-layer)");
}

struct ModelConfig {
    int window_depth = 2;      // convolution window depth d
    int embed_dim = 32;        // V
    int conv_dim = 32;         // V'
    int conv_slices = 8;       // number of independently initialized slices
    int capsule_dim = 8;       // D_pvc (also D_psc)
    int static_capsules = 8;   // a
    int routed_capsules = 0;   // b; 0 routes all capsules
    int vts_iterations = 3;    // r
    int dyn_iterations = 3;    // t
    int code_capsule_dim = 8;  // D_cc
    int num_classes = 0;       // set from the dataset manifest
    Variant variant = Variant::standard;
    int secondary_capsules = 8;  // secondary-layer variant only
    int secondary_dim = 8;

    RoutingConfig routing() const {
        return RoutingConfig{static_capsules, routed_capsules, vts_iterations, dyn_iterations};
    }

    void validate() const {
        auto positive = [](int v, const char* name) {
            if (v < 1) throw std::invalid_argument(std::string("model config: ") + name + " must be >= 1");
        };
        positive(window_depth, "window_depth");
        positive(embed_dim, "embed_dim");
        positive(conv_dim, "conv_dim");
        positive(conv_slices, "conv_slices");
        positive(capsule_dim, "capsule_dim");
        positive(code_capsule_dim, "code_capsule_dim");
        positive(num_classes, "num_classes");
        routing().validate();
        if ((static_cast<std::int64_t>(conv_dim) * conv_slices) % capsule_dim != 0) {
            throw std::invalid_argument("model config: capsule_dim " + std::to_string(capsule_dim) +
                                        " must divide conv_dim * conv_slices = " +
                                        std::to_string(conv_dim * conv_slices));
        }
        if (variant == Variant::secondary_layer) {
            positive(secondary_capsules, "secondary_capsules");
            positive(secondary_dim, "secondary_dim");
        }
    }
};

// ---- parameters ----

inline constexpr const char* kEmbeddingParam = "embedding";
inline constexpr const char* kTransformParam = "transform";
inline constexpr const char* kSecondaryTransformParam = "sc_transform";

namespace detail {

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
    return t;
}

}  // namespace detail

// Expected parameter shapes for a given config and vocabulary size, in
// registration order. Checkpoint loading validates against this.
inline std::vector<std::pair<std::string, Shape>> param_shapes(const ModelConfig& cfg, int vocab_size) {
    cfg.validate();
    std::vector<std::pair<std::string, Shape>> out;
    out.push_back({kEmbeddingParam, {vocab_size, cfg.embed_dim}});
    for (int e = 0; e < cfg.conv_slices; ++e) {
        const std::string p = "conv" + std::to_string(e) + ".";
        out.push_back({p + "wt", {cfg.conv_dim, cfg.embed_dim}});
        out.push_back({p + "wl", {cfg.conv_dim, cfg.embed_dim}});
        out.push_back({p + "wr", {cfg.conv_dim, cfg.embed_dim}});
        out.push_back({p + "bias", {cfg.conv_dim}});
    }
    if (cfg.variant == Variant::dmp_ablation) {
        out.push_back({kTransformParam, {1, cfg.num_classes, cfg.code_capsule_dim, cfg.capsule_dim}});
    } else if (cfg.variant == Variant::secondary_layer) {
        out.push_back({kSecondaryTransformParam,
                       {cfg.static_capsules, cfg.secondary_capsules, cfg.secondary_dim, cfg.capsule_dim}});
        out.push_back({kTransformParam,
                       {cfg.secondary_capsules, cfg.num_classes, cfg.code_capsule_dim, cfg.secondary_dim}});
    } else {
        out.push_back({kTransformParam,
                       {cfg.static_capsules, cfg.num_classes, cfg.code_capsule_dim, cfg.capsule_dim}});
    }
    return out;
}

template <typename T>
ParamStore<T> init_params(const ModelConfig& cfg, int vocab_size, std::uint64_t seed) {
    cfg.validate();
    ParamStore<T> store;
    {
        Rng rng(seed_combine(seed, 0x3A8Full));
        const double bound = 0.5 / static_cast<double>(cfg.embed_dim);
        store.add(kEmbeddingParam, detail::uniform_tensor<T>({vocab_size, cfg.embed_dim}, bound, rng));
    }
    {
        Rng rng(seed_combine(seed, 0xC0DEull));
        const double bound = std::sqrt(6.0 / static_cast<double>(cfg.embed_dim + cfg.conv_dim));
        for (int e = 0; e < cfg.conv_slices; ++e) {
            const std::string p = "conv" + std::to_string(e) + ".";
            store.add(p + "wt", detail::uniform_tensor<T>({cfg.conv_dim, cfg.embed_dim}, bound, rng));
            store.add(p + "wl", detail::uniform_tensor<T>({cfg.conv_dim, cfg.embed_dim}, bound, rng));
            store.add(p + "wr", detail::uniform_tensor<T>({cfg.conv_dim, cfg.embed_dim}, bound, rng));
            store.add(p + "bias", detail::uniform_tensor<T>({cfg.conv_dim}, bound, rng));
        }
    }
    {
        Rng rng(seed_combine(seed, 0x7F0Bull));
        if (cfg.variant == Variant::secondary_layer) {
            const double sc_bound = std::sqrt(6.0 / static_cast<double>(cfg.capsule_dim + cfg.secondary_dim));
            store.add(kSecondaryTransformParam,
                      detail::uniform_tensor<T>(
                          {cfg.static_capsules, cfg.secondary_capsules, cfg.secondary_dim, cfg.capsule_dim},
                          sc_bound, rng));
            const double bound = std::sqrt(6.0 / static_cast<double>(cfg.secondary_dim + cfg.code_capsule_dim));
            store.add(kTransformParam,
                      detail::uniform_tensor<T>(
                          {cfg.secondary_capsules, cfg.num_classes, cfg.code_capsule_dim, cfg.secondary_dim},
                          bound, rng));
        } else {
            const double bound = std::sqrt(6.0 / static_cast<double>(cfg.capsule_dim + cfg.code_capsule_dim));
            const int a = cfg.variant == Variant::dmp_ablation ? 1 : cfg.static_capsules;
            store.add(kTransformParam,
                      detail::uniform_tensor<T>({a, cfg.num_classes, cfg.code_capsule_dim, cfg.capsule_dim},
                                                bound, rng));
        }
    }
    return store;
}

// ---- per-sample preparation ----

// Everything structural about one sample, computed once and reused across
// epochs. Mix addresses must stay stable while a tape built from them is
// alive.
struct PreparedSample {
    std::vector<std::int64_t> type_ids;
    WindowMixes mixes;
    int label = 0;
    int tree_size = 0;
};

inline PreparedSample prepare_sample(const Tree& tree, int label, const Vocabulary& vocab,
                                     const ModelConfig& cfg) {
    PreparedSample p;
    p.type_ids = node_type_ids(tree, vocab);
    p.mixes = build_window_mixes(extract_windows(tree, cfg.window_depth), cfg.window_depth);
    p.label = label;
    p.tree_size = tree.size();
    return p;
}

// ---- forward graph ----

template <typename T>
struct ModelVars {
    Var<T> embedding;
    std::vector<ConvSliceVars<T>> conv;
    Var<T> transform;
    Var<T> sc_transform;  // secondary-layer variant only
};

template <typename T>
ModelVars<T> bind_params(Tape<T>& tape, const ParamStore<T>& store, const ModelConfig& cfg) {
    auto slot = [&](const std::string& name) {
        const int s = store.find(name);
        if (s < 0) throw std::invalid_argument("parameter store is missing tensor \"" + name + "\"");
        return s;
    };
    ModelVars<T> vars;
    vars.embedding = tape.param(store, slot(kEmbeddingParam));
    for (int e = 0; e < cfg.conv_slices; ++e) {
        const std::string p = "conv" + std::to_string(e) + ".";
        vars.conv.push_back(ConvSliceVars<T>{tape.param(store, slot(p + "wt")), tape.param(store, slot(p + "wl")),
                                             tape.param(store, slot(p + "wr")), tape.param(store, slot(p + "bias"))});
    }
    vars.transform = tape.param(store, slot(kTransformParam));
    if (cfg.variant == Variant::secondary_layer) {
        vars.sc_transform = tape.param(store, slot(kSecondaryTransformParam));
    }
    return vars;
}

template <typename T>
struct ForwardResult {
    Var<T> primary_caps;  // (N_pvc, D_pvc) squashed
    Var<T> code_caps;     // (classes, D_cc)
    Var<T> norms;         // (classes)
    VtsResult<T> vts;     // populated for the standard and secondary variants
    DynResult<T> dyn;
};

template <typename T>
ForwardResult<T> forward_graph(Tape<T>& tape, const ModelVars<T>& vars, const PreparedSample& sample,
                               const ModelConfig& cfg) {
    ForwardResult<T> res;
    Var<T> x = tape.gather_rows(vars.embedding, sample.type_ids);
    Var<T> features = conv_tree_graph(tape, x, sample.mixes, vars.conv);
    res.primary_caps = form_primary_capsules_graph(tape, features, cfg.capsule_dim);

    Var<T> static_caps;
    if (cfg.variant == Variant::dmp_ablation) {
        static_caps = dynamic_max_pool(tape, res.primary_caps);
    } else {
        res.vts = variable_to_static_route(tape, res.primary_caps, cfg.routing());
        static_caps = res.vts.output;
    }

    if (cfg.variant == Variant::secondary_layer) {
        Var<T> sc_vhat = tape.capsule_transform(vars.sc_transform, static_caps);
        DynResult<T> sc = dynamic_route(tape, sc_vhat, cfg.dyn_iterations);
        static_caps = sc.output;
    }

    Var<T> vhat = tape.capsule_transform(vars.transform, static_caps);
    res.dyn = dynamic_route(tape, vhat, cfg.dyn_iterations);
    res.code_caps = res.dyn.output;
    res.norms = tape.l2_norm_rows(res.code_caps);
    return res;
}

// Forward-only evaluation of a single tree against frozen parameters.
template <typename T>
ClassScores predict_scores(const ParamStore<T>& params, const ModelConfig& cfg, const Vocabulary& vocab,
                           const Tree& tree) {
    Tape<T> tape;
    const ModelVars<T> vars = bind_params(tape, params, cfg);
    const PreparedSample sample = prepare_sample(tree, 0, vocab, cfg);
    const ForwardResult<T> res = forward_graph(tape, vars, sample, cfg);
    return class_scores(tape.value(res.code_caps));
}

}  // namespace treecaps
