#pragma once

// Seeded synthetic corpus generator. Each class is a small stochastic tree
// grammar: a shared filler skeleton plus class-distinguishing subtree motifs.
// All classes draw skeleton shapes and sizes from the same distribution, so
// the only class signal is structural (which motifs appear and how they
// nest), never tree size.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "treecaps/ast.hpp"
#include "treecaps/common.hpp"

namespace treecaps {

struct GrammarClass {
    std::string name;
    std::vector<AstNode> motifs;
};

struct GrammarSpec {
    std::string root_type = "Module";
    std::vector<std::string> filler_types;
    std::array<int, 2> size_range{22, 40};
    std::array<int, 2> motifs_per_sample{2, 4};
    int max_children = 4;
    std::vector<GrammarClass> classes;
};

namespace detail {

inline int motif_size(const AstNode& n) {
    int s = 1;
    for (const AstNode& c : n.children) s += motif_size(c);
    return s;
}

inline void check_motif(const AstNode& n, const std::string& cls) {
    if (n.type.empty()) throw std::invalid_argument("class " + cls + " has a motif node with empty type");
    for (const AstNode& c : n.children) check_motif(c, cls);
}

}  // namespace detail

inline void validate_grammar(const GrammarSpec& g) {
    if (g.classes.size() < 2) throw std::invalid_argument("grammar needs at least 2 classes");
    if (g.filler_types.empty()) throw std::invalid_argument("grammar needs at least one filler type");
    if (g.root_type.empty()) throw std::invalid_argument("grammar root_type must be non-empty");
    if (g.max_children < 1) throw std::invalid_argument("grammar max_children must be >= 1");
    if (g.size_range[0] < 1 || g.size_range[0] > g.size_range[1]) {
        throw std::invalid_argument("grammar size_range invalid");
    }
    if (g.motifs_per_sample[0] < 1 || g.motifs_per_sample[0] > g.motifs_per_sample[1]) {
        throw std::invalid_argument("grammar motifs_per_sample invalid");
    }
    int largest_motif = 0;
    for (const GrammarClass& c : g.classes) {
        if (c.name.empty()) throw std::invalid_argument("grammar class names must be non-empty");
        if (c.motifs.empty()) throw std::invalid_argument("class " + c.name + " has no motifs");
        for (const AstNode& m : c.motifs) {
            detail::check_motif(m, c.name);
            largest_motif = std::max(largest_motif, detail::motif_size(m));
        }
    }
    // Expansion bound: the worst-case motif load must fit below the smallest
    // target size, otherwise generation cannot terminate within the range.
    const int worst = 1 + g.motifs_per_sample[1] * largest_motif;
    if (worst > g.size_range[0]) {
        throw std::invalid_argument("grammar cannot terminate within size_range: root plus " +
                                    std::to_string(g.motifs_per_sample[1]) + " motifs of up to " +
                                    std::to_string(largest_motif) + " nodes needs " + std::to_string(worst) +
                                    " nodes, but size_range starts at " + std::to_string(g.size_range[0]));
    }
}

inline GrammarSpec grammar_from_json(const Json& j) {
    static const std::vector<std::string> known = {"root_type", "filler_types", "size_range",
                                                   "motifs_per_sample", "max_children", "classes"};
    if (!j.is_object()) throw std::invalid_argument("grammar spec must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
            throw std::invalid_argument("grammar spec has unknown key \"" + it.key() + "\"");
        }
    }
    GrammarSpec g;
    if (j.contains("root_type")) g.root_type = j["root_type"].get<std::string>();
    if (j.contains("filler_types")) g.filler_types = j["filler_types"].get<std::vector<std::string>>();
    if (j.contains("size_range")) {
        auto v = j["size_range"].get<std::vector<int>>();
        if (v.size() != 2) throw std::invalid_argument("size_range must have two entries");
        g.size_range = {v[0], v[1]};
    }
    if (j.contains("motifs_per_sample")) {
        auto v = j["motifs_per_sample"].get<std::vector<int>>();
        if (v.size() != 2) throw std::invalid_argument("motifs_per_sample must have two entries");
        g.motifs_per_sample = {v[0], v[1]};
    }
    if (j.contains("max_children")) g.max_children = j["max_children"].get<int>();
    if (!j.contains("classes")) throw std::invalid_argument("grammar spec needs \"classes\"");
    for (const auto& cj : j["classes"]) {
        GrammarClass c;
        c.name = cj.at("name").get<std::string>();
        for (const auto& mj : cj.at("motifs")) {
            const Tree t = parse_canonical_json(mj);
            c.motifs.push_back(t.to_node());
        }
        g.classes.push_back(std::move(c));
    }
    validate_grammar(g);
    return g;
}

inline Json grammar_to_json(const GrammarSpec& g) {
    Json j;
    j["root_type"] = g.root_type;
    j["filler_types"] = g.filler_types;
    j["size_range"] = {g.size_range[0], g.size_range[1]};
    j["motifs_per_sample"] = {g.motifs_per_sample[0], g.motifs_per_sample[1]};
    j["max_children"] = g.max_children;
    Json classes = Json::array();
    for (const GrammarClass& c : g.classes) {
        Json cj;
        cj["name"] = c.name;
        Json motifs = Json::array();
        for (const AstNode& m : c.motifs) motifs.push_back(tree_to_json(Tree::from_node(m)));
        cj["motifs"] = std::move(motifs);
        classes.push_back(std::move(cj));
    }
    j["classes"] = std::move(classes);
    return j;
}

namespace detail {

inline AstNode motif_node(const std::string& type, std::vector<AstNode> kids = {}) {
    AstNode n;
    n.type = type;
    n.children = std::move(kids);
    return n;
}

}  // namespace detail

// Built-in 6-class grammar. All classes draw motifs from the same four types
// {Loop, Cond, Compare, Swap}, and every class's motif multiset is identical,
// so type histograms carry no class signal. What distinguishes classes is
// which parent-child nestings occur: the twelve ordered pairs over the four
// types are split into six disjoint signature-pair sets, one per class.
inline GrammarSpec default_six_class_grammar() {
    auto n = [](const std::string& t, std::vector<AstNode> kids = {}) { return detail::motif_node(t, std::move(kids)); };

    GrammarSpec g;
    g.root_type = "Module";
    g.filler_types = {"Block", "Stmt", "Assign", "Expr", "Name", "Const", "Return", "BinOp"};
    // Sparse signal in sizeable trees: a handful of signature nestings per
    // sample among dozens of filler nodes, so collapsing the capsule set
    // (e.g. by max pooling) costs real accuracy while routing keeps it.
    g.size_range = {36, 64};
    g.motifs_per_sample = {2, 3};
    g.max_children = 4;

    auto cls = [&](const std::string& name, AstNode first, AstNode second) {
        GrammarClass c;
        c.name = name;
        c.motifs.push_back(std::move(first));
        c.motifs.push_back(std::move(second));
        g.classes.push_back(std::move(c));
    };

    cls("bubble_sort", n("Loop", {n("Cond")}), n("Compare", {n("Swap")}));
    cls("insertion_sort", n("Cond", {n("Loop")}), n("Swap", {n("Compare")}));
    cls("selection_sort", n("Loop", {n("Compare")}), n("Cond", {n("Swap")}));
    cls("merge_sort", n("Compare", {n("Loop")}), n("Swap", {n("Cond")}));
    cls("quick_sort", n("Loop", {n("Swap")}), n("Cond", {n("Compare")}));
    cls("heap_sort", n("Swap", {n("Loop")}), n("Compare", {n("Cond")}));

    validate_grammar(g);
    return g;
}

// Replaces every class's motif list with class 0's; labels keep their names
// but carry no structural signal, so any classifier should sit near chance.
inline GrammarSpec motif_ablated(GrammarSpec g) {
    for (std::size_t c = 1; c < g.classes.size(); ++c) g.classes[c].motifs = g.classes[0].motifs;
    return g;
}

namespace detail {

struct Builder {
    std::vector<std::string> types;
    std::vector<std::vector<int>> kids;

    int add(const std::string& type) {
        types.push_back(type);
        kids.emplace_back();
        return static_cast<int>(types.size()) - 1;
    }

    int add_subtree(const AstNode& n) {
        const int idx = add(n.type);
        for (const AstNode& c : n.children) {
            const int child = add_subtree(c);  // may reallocate kids
            kids[static_cast<std::size_t>(idx)].push_back(child);
        }
        return idx;
    }

    AstNode to_ast(int idx) const {
        AstNode n;
        n.type = types[static_cast<std::size_t>(idx)];
        for (int c : kids[static_cast<std::size_t>(idx)]) n.children.push_back(to_ast(c));
        return n;
    }
};

}  // namespace detail

inline Tree generate_one_tree(const GrammarSpec& g, int class_idx, Rng& rng) {
    const GrammarClass& cls = g.classes[static_cast<std::size_t>(class_idx)];

    const int n_motifs = static_cast<int>(rng.range(g.motifs_per_sample[0], g.motifs_per_sample[1]));
    std::vector<int> picked;
    int motif_nodes = 0;
    for (int k = 0; k < n_motifs; ++k) {
        const int m = static_cast<int>(rng.below(static_cast<std::int64_t>(cls.motifs.size())));
        picked.push_back(m);
        motif_nodes += detail::motif_size(cls.motifs[static_cast<std::size_t>(m)]);
    }

    const int target = static_cast<int>(rng.range(g.size_range[0], g.size_range[1]));
    const int skeleton_target = std::max(1, target - motif_nodes);

    detail::Builder b;
    b.add(g.root_type);
    std::vector<int> skeleton{0};
    std::int64_t attempts = 0;
    const std::int64_t attempt_bound = 64LL * target + 256;
    while (static_cast<int>(skeleton.size()) < skeleton_target) {
        if (++attempts > attempt_bound) {
            throw std::runtime_error("grammar expansion bound exceeded while growing skeleton");
        }
        const int par = skeleton[static_cast<std::size_t>(rng.below(static_cast<std::int64_t>(skeleton.size())))];
        if (static_cast<int>(b.kids[static_cast<std::size_t>(par)].size()) >= g.max_children) continue;
        const auto& ft = g.filler_types;
        const int child = b.add(ft[static_cast<std::size_t>(rng.below(static_cast<std::int64_t>(ft.size())))]);
        b.kids[static_cast<std::size_t>(par)].push_back(child);
        skeleton.push_back(child);
    }

    // graft motifs onto skeleton nodes only, keeping motif subtrees intact
    for (int m : picked) {
        const int par = skeleton[static_cast<std::size_t>(rng.below(static_cast<std::int64_t>(skeleton.size())))];
        const int sub = b.add_subtree(cls.motifs[static_cast<std::size_t>(m)]);
        auto& pk = b.kids[static_cast<std::size_t>(par)];
        const auto pos = static_cast<std::size_t>(rng.below(static_cast<std::int64_t>(pk.size()) + 1));
        pk.insert(pk.begin() + static_cast<std::ptrdiff_t>(pos), sub);
    }

    return Tree::from_node(b.to_ast(0));
}

// Deterministic per (seed, class, index); samples are emitted class-major.
inline std::vector<Sample> generate_synthetic_corpus(const GrammarSpec& g, int samples_per_class,
                                                     std::uint64_t seed) {
    validate_grammar(g);
    if (samples_per_class < 1) throw std::invalid_argument("samples_per_class must be >= 1");
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(samples_per_class) * g.classes.size());
    for (int c = 0; c < static_cast<int>(g.classes.size()); ++c) {
        for (int i = 0; i < samples_per_class; ++i) {
            Rng rng(seed_combine(seed, static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(i)));
            Sample s;
            s.label = c;
            s.tree = generate_one_tree(g, c, rng);
            out.push_back(std::move(s));
        }
    }
    return out;
}

inline std::vector<std::string> grammar_class_names(const GrammarSpec& g) {
    std::vector<std::string> names;
    for (const GrammarClass& c : g.classes) names.push_back(c.name);
    return names;
}

}  // namespace treecaps
