#pragma once

// Canonical tree representation and ingestion. External parsers (python ast,
// srcML and friends) export trees as JSON documents; everything downstream
// consumes the flat, pre-order-indexed Tree built here.

#include <algorithm>
#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "treecaps/common.hpp"
#include "treecaps/io.hpp"

namespace treecaps {

using Json = nlohmann::ordered_json;

// Recursive node form, used when building or emitting documents.
struct AstNode {
    std::string type;
    std::vector<AstNode> children;
};

// Flat tree with deterministic depth-first pre-order indexing. Node 0 is the
// root; children lists preserve the input order.
struct Tree {
    std::vector<std::string> types;
    std::vector<int> parent;                 // -1 for the root
    std::vector<std::vector<int>> children;

    int size() const { return static_cast<int>(types.size()); }

    static Tree from_node(const AstNode& root) {
        Tree t;
        // stack of (node, parent index); children pushed in reverse so the
        // leftmost child is visited first, yielding pre-order.
        std::vector<std::pair<const AstNode*, int>> stack{{&root, -1}};
        while (!stack.empty()) {
            auto [node, par] = stack.back();
            stack.pop_back();
            const int idx = t.size();
            t.types.push_back(node->type);
            t.parent.push_back(par);
            t.children.emplace_back();
            if (par >= 0) t.children[static_cast<std::size_t>(par)].push_back(idx);
            for (auto it = node->children.rbegin(); it != node->children.rend(); ++it) {
                stack.push_back({&*it, idx});
            }
        }
        return t;
    }

    AstNode to_node(int idx = 0) const {
        AstNode n;
        n.type = types[static_cast<std::size_t>(idx)];
        for (int c : children[static_cast<std::size_t>(idx)]) n.children.push_back(to_node(c));
        return n;
    }
};

struct Sample {
    Tree tree;
    int label = 0;
};

inline constexpr int kDefaultMaxTreeDepth = 10000;

namespace detail {

inline std::string node_path(const std::vector<int>& parent, const std::vector<int>& child_pos, int idx) {
    if (idx < 0) return "root";
    std::vector<int> rev;
    while (idx >= 0 && parent[static_cast<std::size_t>(idx)] >= 0) {
        rev.push_back(child_pos[static_cast<std::size_t>(idx)]);
        idx = parent[static_cast<std::size_t>(idx)];
    }
    std::string out = "root";
    for (auto it = rev.rbegin(); it != rev.rend(); ++it) out += ".children[" + std::to_string(*it) + "]";
    return out;
}

}  // namespace detail

// Parses one canonical tree document: {"type": <string>, "children": [...]},
// children optional. Rejections carry the path to the offending node.
inline Tree parse_canonical_json(const Json& doc, int max_depth = kDefaultMaxTreeDepth) {
    Tree t;
    std::vector<int> depth;
    std::vector<int> child_pos;  // position within the parent's children

    struct Item {
        const Json* j;
        int parent;
        int pos;
    };
    std::vector<Item> stack{{&doc, -1, 0}};
    while (!stack.empty()) {
        auto [j, par, pos] = stack.back();
        stack.pop_back();
        auto fail = [&](const std::string& why) {
            const std::string where = par < 0 ? "root"
                                              : detail::node_path(t.parent, child_pos, par) + ".children[" +
                                                    std::to_string(pos) + "]";
            throw std::invalid_argument("invalid tree node at " + where + ": " + why);
        };
        if (!j->is_object()) fail("node must be a JSON object");
        auto ty = j->find("type");
        if (ty == j->end() || !ty->is_string()) fail("missing string field \"type\"");
        const std::string type_name = ty->get<std::string>();
        if (type_name.empty()) fail("empty type_name");

        const int d = par < 0 ? 1 : depth[static_cast<std::size_t>(par)] + 1;
        if (d > max_depth) fail("depth " + std::to_string(d) + " exceeds maximum " + std::to_string(max_depth));

        const int idx = t.size();
        t.types.push_back(type_name);
        t.parent.push_back(par);
        t.children.emplace_back();
        depth.push_back(d);
        child_pos.push_back(pos);
        if (par >= 0) t.children[static_cast<std::size_t>(par)].push_back(idx);

        auto ch = j->find("children");
        if (ch != j->end()) {
            if (!ch->is_array()) fail("\"children\" must be an array");
            for (std::size_t k = ch->size(); k-- > 0;) {
                stack.push_back({&(*ch)[k], idx, static_cast<int>(k)});
            }
        }
    }
    return t;
}

inline Tree parse_canonical(const std::string& bytes, int max_depth = kDefaultMaxTreeDepth) {
    Json doc;
    try {
        doc = Json::parse(bytes);
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("malformed tree document: ") + e.what());
    }
    return parse_canonical_json(doc, max_depth);
}

inline Json tree_to_json(const Tree& t, int idx = 0) {
    Json j;
    j["type"] = t.types[static_cast<std::size_t>(idx)];
    const auto& kids = t.children[static_cast<std::size_t>(idx)];
    if (!kids.empty()) {
        Json arr = Json::array();
        for (int c : kids) arr.push_back(tree_to_json(t, c));
        j["children"] = std::move(arr);
    }
    return j;
}

inline std::string serialize_canonical(const Tree& t) { return tree_to_json(t).dump(); }

// ---- vocabulary ----

inline constexpr const char* kOovToken = "<OOV>";

// Node-type-name -> dense id mapping. Id 0 is reserved for out-of-vocabulary
// types; the remaining ids follow lexicographic token order.
struct Vocabulary {
    std::vector<std::string> tokens;
    std::unordered_map<std::string, int> index;

    int size() const { return static_cast<int>(tokens.size()); }

    int id_of(const std::string& name) const {
        auto it = index.find(name);
        return it == index.end() ? 0 : it->second;
    }

    bool operator==(const Vocabulary& o) const { return tokens == o.tokens; }

    static Vocabulary from_tokens(std::vector<std::string> toks) {
        Vocabulary v;
        v.tokens = std::move(toks);
        if (v.tokens.empty() || v.tokens[0] != kOovToken) {
            throw std::invalid_argument("vocabulary must start with the OOV token");
        }
        for (std::size_t i = 1; i < v.tokens.size(); ++i) v.index[v.tokens[i]] = static_cast<int>(i);
        return v;
    }
};

inline Vocabulary build_vocabulary(const std::vector<Sample>& samples) {
    if (samples.empty()) throw std::invalid_argument("build_vocabulary needs at least one sample");
    std::vector<std::string> names;
    for (const Sample& s : samples) {
        for (const std::string& t : s.tree.types) names.push_back(t);
    }
    std::sort(names.begin(), names.end());
    names.erase(std::unique(names.begin(), names.end()), names.end());
    std::vector<std::string> toks;
    toks.reserve(names.size() + 1);
    toks.push_back(kOovToken);
    for (auto& n : names) {
        if (n != kOovToken) toks.push_back(std::move(n));
    }
    return Vocabulary::from_tokens(std::move(toks));
}

inline void save_vocabulary(const Vocabulary& v, const std::string& path) {
    Json j = Json::array();
    for (const auto& t : v.tokens) j.push_back(t);
    write_file_atomic(path, j.dump() + "\n");
}

inline Vocabulary load_vocabulary(const std::string& path) {
    Json j;
    try {
        j = Json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument("malformed vocabulary file " + path + ": " + e.what());
    }
    if (!j.is_array()) throw std::invalid_argument("vocabulary file must be a JSON array: " + path);
    std::vector<std::string> toks;
    for (const auto& e : j) {
        if (!e.is_string()) throw std::invalid_argument("vocabulary entries must be strings: " + path);
        toks.push_back(e.get<std::string>());
    }
    return Vocabulary::from_tokens(std::move(toks));
}

// ---- convolution windows ----

struct WindowMember {
    int node;
    int depth_in_window;  // root has depth d, deepest members have depth 1
    int position;         // 1-based position among siblings
    int sibling_count;
};

struct Window {
    int root;
    std::vector<WindowMember> members;  // pre-order, root first
};

// One window per node: the node plus its descendants down to `depth` levels
// (depth 1 = the node alone, depth 2 = node and children, ...).
inline std::vector<Window> extract_windows(const Tree& t, int depth) {
    if (depth < 1) throw std::invalid_argument("window depth must be >= 1, got " + std::to_string(depth));
    std::vector<Window> out(static_cast<std::size_t>(t.size()));
    for (int root = 0; root < t.size(); ++root) {
        Window& w = out[static_cast<std::size_t>(root)];
        w.root = root;
        // DFS limited to `depth` levels, children in order for pre-order.
        std::vector<std::pair<int, int>> stack{{root, 0}};  // (node, relative depth)
        while (!stack.empty()) {
            auto [n, rd] = stack.back();
            stack.pop_back();
            WindowMember m;
            m.node = n;
            m.depth_in_window = depth - rd;
            if (n == root) {
                m.position = 1;
                m.sibling_count = 1;
            } else {
                const int par = t.parent[static_cast<std::size_t>(n)];
                const auto& sibs = t.children[static_cast<std::size_t>(par)];
                int pos = 0;
                for (std::size_t k = 0; k < sibs.size(); ++k) {
                    if (sibs[k] == n) {
                        pos = static_cast<int>(k) + 1;
                        break;
                    }
                }
                m.position = pos;
                m.sibling_count = static_cast<int>(sibs.size());
            }
            w.members.push_back(m);
            if (rd + 1 < depth) {
                const auto& kids = t.children[static_cast<std::size_t>(n)];
                for (auto it = kids.rbegin(); it != kids.rend(); ++it) stack.push_back({*it, rd + 1});
            }
        }
    }
    return out;
}

// ---- dataset files ----

// JSON-lines dataset: {"label": <int>, "tree": <canonical node>} per line.
inline std::vector<Sample> load_dataset_jsonl(const std::string& path,
                                              int max_depth = kDefaultMaxTreeDepth) {
    const std::string body = read_file(path);
    std::vector<Sample> samples;
    std::vector<std::string> errors;
    std::size_t start = 0;
    int line_no = 0;
    while (start < body.size()) {
        std::size_t end = body.find('\n', start);
        if (end == std::string::npos) end = body.size();
        ++line_no;
        const std::string_view line(body.data() + start, end - start);
        start = end + 1;
        if (line.empty()) continue;
        try {
            Json j = Json::parse(line);
            if (!j.is_object() || !j.contains("label") || !j.contains("tree")) {
                throw std::invalid_argument("record must be {\"label\":..., \"tree\":...}");
            }
            if (!j["label"].is_number_integer() || j["label"].get<int>() < 0) {
                throw std::invalid_argument("label must be a non-negative integer");
            }
            Sample s;
            s.label = j["label"].get<int>();
            s.tree = parse_canonical_json(j["tree"], max_depth);
            samples.push_back(std::move(s));
        } catch (const std::exception& e) {
            errors.push_back("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (!errors.empty()) {
        std::string report = "dataset " + path + " has " + std::to_string(errors.size()) + " bad record(s):";
        for (const auto& e : errors) report += "\n  " + e;
        throw std::invalid_argument(report);
    }
    return samples;
}

inline void save_dataset_jsonl(const std::vector<Sample>& samples, const std::string& path) {
    std::string out;
    for (const Sample& s : samples) {
        Json j;
        j["label"] = s.label;
        j["tree"] = tree_to_json(s.tree);
        out += j.dump();
        out += '\n';
    }
    write_file_atomic(path, out);
}

// Class manifest: JSON array mapping label index -> class name.
inline void save_class_manifest(const std::vector<std::string>& names, const std::string& path) {
    Json j = Json::array();
    for (const auto& n : names) j.push_back(n);
    write_file_atomic(path, j.dump() + "\n");
}

inline std::vector<std::string> load_class_manifest(const std::string& path) {
    Json j;
    try {
        j = Json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument("malformed class manifest " + path + ": " + e.what());
    }
    if (!j.is_array() || j.empty()) throw std::invalid_argument("class manifest must be a non-empty array: " + path);
    std::vector<std::string> names;
    for (const auto& e : j) names.push_back(e.get<std::string>());
    return names;
}

// ---- stratified split ----

struct DatasetSplit {
    std::vector<Sample> train, val, test;
};

// Stratified three-way split; deterministic per seed, disjoint, exhaustive.
inline DatasetSplit split_samples(const std::vector<Sample>& samples, std::array<double, 3> ratios,
                                  std::uint64_t seed) {
    double sum = 0.0;
    for (double r : ratios) {
        if (r <= 0.0) throw std::invalid_argument("split ratios must be positive");
        sum += r;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("split ratios must sum to 1, got " + fmt_g(sum));

    std::unordered_map<int, std::vector<std::size_t>> by_label;
    int max_label = -1;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        by_label[samples[i].label].push_back(i);
        max_label = std::max(max_label, samples[i].label);
    }
    for (const auto& [label, idx] : by_label) {
        if (idx.size() < 3) {
            throw std::invalid_argument("class " + std::to_string(label) + " has only " +
                                        std::to_string(idx.size()) + " samples; need at least 3 to split");
        }
    }

    DatasetSplit out;
    // iterate labels in ascending order so the result is seed-stable
    for (int label = 0; label <= max_label; ++label) {
        auto it = by_label.find(label);
        if (it == by_label.end()) continue;
        std::vector<std::size_t> idx = it->second;
        Rng rng(seed_combine(seed, static_cast<std::uint64_t>(label)));
        rng.shuffle(idx);

        const std::size_t n = idx.size();
        std::array<std::size_t, 3> counts{};
        std::array<double, 3> frac{};
        std::size_t assigned = 0;
        for (int p = 0; p < 3; ++p) {
            const double want = ratios[static_cast<std::size_t>(p)] * static_cast<double>(n);
            counts[static_cast<std::size_t>(p)] = static_cast<std::size_t>(want);
            frac[static_cast<std::size_t>(p)] = want - static_cast<double>(counts[static_cast<std::size_t>(p)]);
            assigned += counts[static_cast<std::size_t>(p)];
        }
        while (assigned < n) {  // distribute remainders by largest fraction, earlier part on ties
            int best = 0;
            for (int p = 1; p < 3; ++p) {
                if (frac[static_cast<std::size_t>(p)] > frac[static_cast<std::size_t>(best)] + 1e-12) best = p;
            }
            ++counts[static_cast<std::size_t>(best)];
            frac[static_cast<std::size_t>(best)] = -1.0;
            ++assigned;
        }

        std::size_t cursor = 0;
        std::vector<Sample>* parts[3] = {&out.train, &out.val, &out.test};
        for (int p = 0; p < 3; ++p) {
            for (std::size_t k = 0; k < counts[static_cast<std::size_t>(p)]; ++k) {
                parts[p]->push_back(samples[idx[cursor++]]);
            }
        }
    }
    return out;
}

}  // namespace treecaps
