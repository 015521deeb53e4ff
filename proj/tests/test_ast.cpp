#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <set>
#include <string>

#include "treecaps/ast.hpp"
#include "treecaps/common.hpp"
#include "treecaps/io.hpp"
#include "treecaps/synthetic.hpp"

using namespace treecaps;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("treecaps_ast_" + name)).string();
}

}  // namespace

TEST_CASE("single-node document parses to a one-node tree") {
    const Tree t = parse_canonical(R"({"type":"Module"})");
    CHECK(t.size() == 1);
    CHECK(t.types[0] == "Module");
    CHECK(t.parent[0] == -1);
}

TEST_CASE("children are indexed in pre-order") {
    const Tree t = parse_canonical(
        R"({"type":"P","children":[{"type":"c1"},{"type":"c2"},{"type":"c3"}]})");
    CHECK(t.size() == 4);
    CHECK(t.types == std::vector<std::string>{"P", "c1", "c2", "c3"});
    CHECK(t.children[0] == std::vector<int>{1, 2, 3});
}

TEST_CASE("nested pre-order indexing is depth-first") {
    const Tree t = parse_canonical(
        R"({"type":"a","children":[{"type":"b","children":[{"type":"c"}]},{"type":"d"}]})");
    CHECK(t.types == std::vector<std::string>{"a", "b", "c", "d"});
    CHECK(t.parent == std::vector<int>{-1, 0, 1, 0});
}

TEST_CASE("serialize-parse round trip is the identity on normalized documents") {
    const std::string raw = R"({  "type" : "a", "children": [ {"type":"b"}, {"type":"c","children":[]} ] })";
    const std::string normalized = serialize_canonical(parse_canonical(raw));
    CHECK(serialize_canonical(parse_canonical(normalized)) == normalized);
    // children: [] is normalized away
    CHECK(normalized == R"({"type":"a","children":[{"type":"b"},{"type":"c"}]})");
}

TEST_CASE("parse rejections name the offending node") {
    CHECK_THROWS_AS(parse_canonical("not json"), std::invalid_argument);
    CHECK_THROWS_AS(parse_canonical(R"({"type":""})"), std::invalid_argument);
    try {
        parse_canonical(R"({"type":"a","children":[{"type":"b"},{"type":"c","children":[{"nope":1}]}]})");
        FAIL("expected rejection");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("root.children[1].children[0]") != std::string::npos);
    }
}

TEST_CASE("depth limit is enforced") {
    std::string deep;
    const int levels = 40;
    for (int i = 0; i < levels; ++i) deep += R"({"type":"n","children":[)";
    deep += R"({"type":"leaf"})";
    for (int i = 0; i < levels; ++i) deep += "]}";
    CHECK_NOTHROW(parse_canonical(deep));
    CHECK_THROWS_AS(parse_canonical(deep, 10), std::invalid_argument);
}

TEST_CASE("vocabulary assigns dense lexicographic ids after the OOV slot") {
    std::vector<Sample> samples(2);
    samples[0].tree = parse_canonical(R"({"type":"B","children":[{"type":"A"}]})");
    samples[1].tree = parse_canonical(R"({"type":"A"})");
    const Vocabulary v = build_vocabulary(samples);
    CHECK(v.size() == 3);
    CHECK(v.tokens == std::vector<std::string>{kOovToken, "A", "B"});
    CHECK(v.id_of("A") == 1);
    CHECK(v.id_of("B") == 2);
    CHECK(v.id_of("unseen") == 0);

    const Vocabulary again = build_vocabulary(samples);
    CHECK(again.tokens == v.tokens);

    const std::string path = temp_path("vocab.json");
    save_vocabulary(v, path);
    const Vocabulary loaded = load_vocabulary(path);
    CHECK(loaded == v);
    std::filesystem::remove(path);
}

TEST_CASE("windows on a chain") {
    const Tree t = parse_canonical(R"({"type":"a","children":[{"type":"b","children":[{"type":"c"}]}]})");
    const auto windows = extract_windows(t, 2);
    REQUIRE(windows.size() == 3);
    // {a,b}, {b,c}, {c}
    CHECK(windows[0].members.size() == 2);
    CHECK(windows[0].members[0].node == 0);
    CHECK(windows[0].members[0].depth_in_window == 2);
    CHECK(windows[0].members[1].node == 1);
    CHECK(windows[0].members[1].depth_in_window == 1);
    CHECK(windows[1].members.size() == 2);
    CHECK(windows[1].members[0].node == 1);
    CHECK(windows[1].members[1].node == 2);
    CHECK(windows[2].members.size() == 1);
    CHECK(windows[2].members[0].node == 2);
}

TEST_CASE("single node tree yields one singleton window at any depth") {
    const Tree t = parse_canonical(R"({"type":"only"})");
    for (int d : {1, 2, 5}) {
        const auto windows = extract_windows(t, d);
        REQUIRE(windows.size() == 1);
        CHECK(windows[0].members.size() == 1);
        CHECK(windows[0].members[0].depth_in_window == d);
    }
}

TEST_CASE("star window covers the parent plus all children") {
    std::string doc = R"({"type":"root","children":[)";
    for (int i = 0; i < 5; ++i) {
        if (i) doc += ',';
        doc += R"({"type":"kid"})";
    }
    doc += "]}";
    const Tree t = parse_canonical(doc);
    const auto windows = extract_windows(t, 2);
    REQUIRE(windows.size() == 6);
    CHECK(windows[0].members.size() == 6);  // K+1 with K = 5
    for (std::size_t i = 1; i < windows[0].members.size(); ++i) {
        const WindowMember& m = windows[0].members[i];
        CHECK(m.position == static_cast<int>(i));
        CHECK(m.sibling_count == 5);
        CHECK(m.depth_in_window == 1);
    }
}

TEST_CASE("window extraction invariants on random trees") {
    Rng rng(99);
    for (int trial = 0; trial < 25; ++trial) {
        // random tree via the synthetic generator
        GrammarSpec g = default_six_class_grammar();
        Rng trng(seed_combine(7, static_cast<std::uint64_t>(trial)));
        const Tree t = generate_one_tree(g, trial % 6, trng);
        const int d = 1 + static_cast<int>(rng.below(3));
        const auto windows = extract_windows(t, d);

        REQUIRE(static_cast<int>(windows.size()) == t.size());
        std::set<int> roots;
        std::size_t member_total = 0;
        for (const Window& w : windows) {
            roots.insert(w.root);
            member_total += w.members.size();
            for (const WindowMember& m : w.members) {
                CHECK(m.depth_in_window >= 1);
                CHECK(m.depth_in_window <= d);
                CHECK(m.position >= 1);
                CHECK(m.position <= m.sibling_count);
            }
        }
        CHECK(static_cast<int>(roots.size()) == t.size());

        // independent count: each node contributes 1 + descendants within depth d-1
        std::size_t expected = 0;
        for (int n = 0; n < t.size(); ++n) {
            std::vector<std::pair<int, int>> stack{{n, 0}};
            while (!stack.empty()) {
                auto [node, rd] = stack.back();
                stack.pop_back();
                ++expected;
                if (rd + 1 < d) {
                    for (int c : t.children[static_cast<std::size_t>(node)]) stack.push_back({c, rd + 1});
                }
            }
        }
        CHECK(member_total == expected);
    }
}

TEST_CASE("stratified split honors ratios per class") {
    std::vector<Sample> samples;
    for (int c = 0; c < 2; ++c) {
        for (int i = 0; i < 50; ++i) {
            Sample s;
            s.label = c;
            s.tree = parse_canonical(R"({"type":"n"})");
            samples.push_back(s);
        }
    }
    const DatasetSplit split = split_samples(samples, {0.8, 0.1, 0.1}, 17);
    CHECK(split.train.size() == 80);
    CHECK(split.val.size() == 10);
    CHECK(split.test.size() == 10);
    for (int c = 0; c < 2; ++c) {
        auto count = [&](const std::vector<Sample>& part) {
            std::size_t n = 0;
            for (const Sample& s : part) n += s.label == c;
            return n;
        };
        CHECK(count(split.train) == 40);
        CHECK(count(split.val) == 5);
        CHECK(count(split.test) == 5);
    }

    const DatasetSplit again = split_samples(samples, {0.8, 0.1, 0.1}, 17);
    CHECK(again.train.size() == split.train.size());
    for (std::size_t i = 0; i < split.train.size(); ++i) {
        CHECK(serialize_canonical(again.train[i].tree) == serialize_canonical(split.train[i].tree));
        CHECK(again.train[i].label == split.train[i].label);
    }

    // union of the parts is the input multiset
    const std::size_t total = split.train.size() + split.val.size() + split.test.size();
    CHECK(total == samples.size());

    CHECK_THROWS_AS(split_samples(samples, {0.5, 0.2, 0.2}, 1), std::invalid_argument);
    std::vector<Sample> tiny(samples.begin(), samples.begin() + 2);
    CHECK_THROWS_AS(split_samples(tiny, {0.8, 0.1, 0.1}, 1), std::invalid_argument);
}

TEST_CASE("split preserves the input multiset of trees") {
    GrammarSpec g = default_six_class_grammar();
    const auto samples = generate_synthetic_corpus(g, 5, 3);
    const DatasetSplit split = split_samples(samples, {0.6, 0.2, 0.2}, 5);
    std::multiset<std::string> before, after;
    for (const Sample& s : samples) before.insert(std::to_string(s.label) + serialize_canonical(s.tree));
    for (const auto* part : {&split.train, &split.val, &split.test}) {
        for (const Sample& s : *part) after.insert(std::to_string(s.label) + serialize_canonical(s.tree));
    }
    CHECK(before == after);
}

TEST_CASE("synthetic corpus is reproducible byte for byte") {
    GrammarSpec g = default_six_class_grammar();
    const auto a = generate_synthetic_corpus(g, 20, 42);
    const auto b = generate_synthetic_corpus(g, 20, 42);
    REQUIRE(a.size() == 120);
    REQUIRE(b.size() == a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].label == b[i].label);
        CHECK(serialize_canonical(a[i].tree) == serialize_canonical(b[i].tree));
    }

    const auto c = generate_synthetic_corpus(g, 20, 43);
    bool any_different = false;
    std::vector<int> label_count_a(6, 0), label_count_c(6, 0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (serialize_canonical(a[i].tree) != serialize_canonical(c[i].tree)) any_different = true;
        label_count_a[static_cast<std::size_t>(a[i].label)]++;
        label_count_c[static_cast<std::size_t>(c[i].label)]++;
    }
    CHECK(any_different);
    CHECK(label_count_a == label_count_c);
}

TEST_CASE("synthetic tree sizes stay inside the configured range") {
    GrammarSpec g = default_six_class_grammar();
    const auto samples = generate_synthetic_corpus(g, 30, 11);
    for (const Sample& s : samples) {
        CHECK(s.tree.size() >= g.size_range[0]);
        CHECK(s.tree.size() <= g.size_range[1]);
    }
}

TEST_CASE("degenerate grammars are rejected") {
    GrammarSpec g = default_six_class_grammar();
    g.size_range = {3, 5};  // cannot fit motifs
    CHECK_THROWS_AS(validate_grammar(g), std::invalid_argument);

    GrammarSpec one_class = default_six_class_grammar();
    one_class.classes.resize(1);
    CHECK_THROWS_AS(validate_grammar(one_class), std::invalid_argument);

    GrammarSpec no_fillers = default_six_class_grammar();
    no_fillers.filler_types.clear();
    CHECK_THROWS_AS(validate_grammar(no_fillers), std::invalid_argument);
}

TEST_CASE("grammar JSON round trip") {
    const GrammarSpec g = default_six_class_grammar();
    const GrammarSpec back = grammar_from_json(grammar_to_json(g));
    CHECK(back.classes.size() == g.classes.size());
    const auto a = generate_synthetic_corpus(g, 3, 9);
    const auto b = generate_synthetic_corpus(back, 3, 9);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(serialize_canonical(a[i].tree) == serialize_canonical(b[i].tree));
    }
    Json bad = grammar_to_json(g);
    bad["mystery"] = 1;
    CHECK_THROWS_AS(grammar_from_json(bad), std::invalid_argument);
}

TEST_CASE("dataset JSONL round trip and malformed-line reporting") {
    GrammarSpec g = default_six_class_grammar();
    const auto samples = generate_synthetic_corpus(g, 2, 8);
    const std::string path = temp_path("data.jsonl");
    save_dataset_jsonl(samples, path);
    const auto loaded = load_dataset_jsonl(path);
    REQUIRE(loaded.size() == samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        CHECK(loaded[i].label == samples[i].label);
        CHECK(serialize_canonical(loaded[i].tree) == serialize_canonical(samples[i].tree));
    }

    // corrupt one line and expect it to be named
    std::string body = read_file(path);
    const std::size_t first_nl = body.find('\n');
    std::string corrupted = body.substr(0, first_nl + 1) + "{broken\n" + body.substr(first_nl + 1);
    write_file_atomic(path, corrupted);
    try {
        load_dataset_jsonl(path);
        FAIL("expected rejection");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
    std::filesystem::remove(path);
}

TEST_CASE("class manifest round trip") {
    const std::string path = temp_path("classes.json");
    const std::vector<std::string> names = {"alpha", "beta"};
    save_class_manifest(names, path);
    CHECK(load_class_manifest(path) == names);
    std::filesystem::remove(path);
}
