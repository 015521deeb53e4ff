#pragma once

// Node-type embedding table: seeded initialization, tree vectorization,
// skip-gram pretraining over tree context, and text-format interop.

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "treecaps/ast.hpp"
#include "treecaps/common.hpp"
#include "treecaps/io.hpp"
#include "treecaps/tensor.hpp"

namespace treecaps {

struct EmbeddingTable {
    Vocabulary vocab;
    Tensor<float> weights;  // (vocab size, V); row 0 is the OOV row

    int dim() const { return weights.shape.size() == 2 ? static_cast<int>(weights.shape[1]) : 0; }
};

// Entries drawn uniform in [-0.5/V, 0.5/V]; row-major draw order fixes the
// table for a given seed.
inline EmbeddingTable init_table(const Vocabulary& vocab, int embed_dim, std::uint64_t seed) {
    if (embed_dim < 1) throw std::invalid_argument("embedding dimension must be >= 1");
    EmbeddingTable t;
    t.vocab = vocab;
    t.weights = Tensor<float>({vocab.size(), embed_dim});
    Rng rng(seed_combine(seed, 0x3A8Full));
    const double bound = 0.5 / static_cast<double>(embed_dim);
    for (auto& v : t.weights.data) v = static_cast<float>(rng.uniform(-bound, bound));
    return t;
}

// X row i = embedding of node i's type; unknown types hit the OOV row.
inline Tensor<float> vectorize(const Tree& tree, const EmbeddingTable& table) {
    const int v = table.dim();
    Tensor<float> x({tree.size(), v});
    for (int i = 0; i < tree.size(); ++i) {
        const int id = table.vocab.id_of(tree.types[static_cast<std::size_t>(i)]);
        for (int j = 0; j < v; ++j) x.at2(i, j) = table.weights.at2(id, j);
    }
    return x;
}

inline std::vector<std::int64_t> node_type_ids(const Tree& tree, const Vocabulary& vocab) {
    std::vector<std::int64_t> ids(static_cast<std::size_t>(tree.size()));
    for (int i = 0; i < tree.size(); ++i) ids[static_cast<std::size_t>(i)] = vocab.id_of(tree.types[static_cast<std::size_t>(i)]);
    return ids;
}

// ---- skip-gram with negative sampling ----

struct SkipgramOptions {
    int embed_dim = 32;
    int epochs = 5;
    int negatives = 5;
    double learning_rate = 0.025;
    std::uint64_t seed = 1;
    double heldout_fraction = 0.1;
};

struct PretrainResult {
    EmbeddingTable table;
    Tensor<float> context_weights;  // output-side matrix, same shape as the table
    // heldout_loss[0] is measured before training, one entry per epoch after.
    std::vector<double> heldout_loss;
};

namespace detail {

struct SkipgramPair {
    int center;
    int context;
};

// Context of a node = its parent, its children and its adjacent siblings.
inline std::vector<SkipgramPair> collect_pairs(const std::vector<Sample>& samples, const Vocabulary& vocab) {
    std::vector<SkipgramPair> pairs;
    for (const Sample& s : samples) {
        const Tree& t = s.tree;
        for (int n = 0; n < t.size(); ++n) {
            const int cid = vocab.id_of(t.types[static_cast<std::size_t>(n)]);
            auto push = [&](int other) {
                pairs.push_back({cid, vocab.id_of(t.types[static_cast<std::size_t>(other)])});
            };
            const int par = t.parent[static_cast<std::size_t>(n)];
            if (par >= 0) {
                push(par);
                const auto& sibs = t.children[static_cast<std::size_t>(par)];
                for (std::size_t k = 0; k < sibs.size(); ++k) {
                    if (sibs[k] != n) continue;
                    if (k > 0) push(sibs[k - 1]);
                    if (k + 1 < sibs.size()) push(sibs[k + 1]);
                    break;
                }
            }
            for (int c : t.children[static_cast<std::size_t>(n)]) push(c);
        }
    }
    return pairs;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace detail

inline PretrainResult pretrain_skipgram(const std::vector<Sample>& samples, const Vocabulary& vocab,
                                        const SkipgramOptions& opt) {
    if (samples.empty()) throw std::invalid_argument("pretrain_skipgram needs at least one sample");
    if (opt.negatives < 1) throw std::invalid_argument("pretrain_skipgram needs negatives >= 1");
    if (vocab.size() < opt.negatives + 1) {
        throw std::invalid_argument("vocabulary size " + std::to_string(vocab.size()) +
                                    " is smaller than negatives+1 = " + std::to_string(opt.negatives + 1));
    }

    PretrainResult result;
    result.table = init_table(vocab, opt.embed_dim, opt.seed);
    result.context_weights = Tensor<float>({vocab.size(), opt.embed_dim}, 0.0f);
    if (opt.epochs == 0) return result;

    auto pairs = detail::collect_pairs(samples, vocab);
    if (pairs.empty()) {
        // single-node trees only; nothing to train on
        return result;
    }

    Rng rng(seed_combine(opt.seed, 0x5169ull));
    rng.shuffle(pairs);

    std::size_t heldout_n = static_cast<std::size_t>(opt.heldout_fraction * static_cast<double>(pairs.size()));
    if (heldout_n >= pairs.size()) heldout_n = pairs.size() - 1;
    const std::vector<detail::SkipgramPair> heldout(pairs.begin(),
                                                    pairs.begin() + static_cast<std::ptrdiff_t>(heldout_n));
    std::vector<detail::SkipgramPair> train(pairs.begin() + static_cast<std::ptrdiff_t>(heldout_n), pairs.end());

    // unigram^0.75 negative-sampling distribution over context ids
    std::vector<double> cum(static_cast<std::size_t>(vocab.size()), 0.0);
    {
        std::vector<double> w(static_cast<std::size_t>(vocab.size()), 0.0);
        for (const auto& p : train) w[static_cast<std::size_t>(p.context)] += 1.0;
        double total = 0.0;
        for (auto& x : w) {
            x = std::pow(x, 0.75);
            total += x;
        }
        if (total == 0.0) throw std::invalid_argument("pretrain_skipgram: empty context distribution");
        double acc = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            acc += w[i] / total;
            cum[i] = acc;
        }
        cum.back() = 1.0;
    }
    auto draw_negative = [&](Rng& r, int avoid) {
        for (int attempt = 0; attempt < 16; ++attempt) {
            const double u = r.uniform();
            const auto it = std::lower_bound(cum.begin(), cum.end(), u);
            const int id = static_cast<int>(it - cum.begin());
            if (id != avoid) return id;
        }
        return avoid == 0 ? 1 : 0;
    };

    // frozen negatives for the held-out pairs keep the metric comparable
    std::vector<std::vector<int>> heldout_negs(heldout.size());
    {
        Rng hr(seed_combine(opt.seed, 0x9E1Dull));
        for (std::size_t i = 0; i < heldout.size(); ++i) {
            for (int k = 0; k < opt.negatives; ++k) {
                heldout_negs[i].push_back(draw_negative(hr, heldout[i].context));
            }
        }
    }

    const int v = opt.embed_dim;
    Tensor<float>& win = result.table.weights;
    Tensor<float>& wout = result.context_weights;

    auto heldout_loss = [&]() {
        const auto& eval = heldout.empty() ? train : heldout;
        const auto* negs = heldout.empty() ? nullptr : &heldout_negs;
        double total = 0.0;
        std::size_t count = 0;
        for (std::size_t i = 0; i < eval.size(); ++i) {
            double score = 0.0;
            for (int j = 0; j < v; ++j) {
                score += static_cast<double>(win.at2(eval[i].center, j)) * static_cast<double>(wout.at2(eval[i].context, j));
            }
            total += -std::log(std::max(detail::sigmoid(score), 1e-12));
            if (negs) {
                for (int n : (*negs)[i]) {
                    double ns = 0.0;
                    for (int j = 0; j < v; ++j) {
                        ns += static_cast<double>(win.at2(eval[i].center, j)) * static_cast<double>(wout.at2(n, j));
                    }
                    total += -std::log(std::max(detail::sigmoid(-ns), 1e-12));
                }
            }
            ++count;
        }
        return count ? total / static_cast<double>(count) : 0.0;
    };

    result.heldout_loss.push_back(heldout_loss());

    std::vector<double> accum(static_cast<std::size_t>(v));
    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        Rng erng(seed_combine(opt.seed, 0xE60Cull, static_cast<std::uint64_t>(epoch)));
        erng.shuffle(train);
        for (const auto& p : train) {
            std::fill(accum.begin(), accum.end(), 0.0);
            // positive pair
            {
                double score = 0.0;
                for (int j = 0; j < v; ++j) {
                    score += static_cast<double>(win.at2(p.center, j)) * static_cast<double>(wout.at2(p.context, j));
                }
                const double g = detail::sigmoid(score) - 1.0;
                for (int j = 0; j < v; ++j) {
                    accum[static_cast<std::size_t>(j)] += g * static_cast<double>(wout.at2(p.context, j));
                    wout.at2(p.context, j) -= static_cast<float>(opt.learning_rate * g * static_cast<double>(win.at2(p.center, j)));
                }
            }
            // negatives
            for (int k = 0; k < opt.negatives; ++k) {
                const int n = draw_negative(erng, p.context);
                double score = 0.0;
                for (int j = 0; j < v; ++j) {
                    score += static_cast<double>(win.at2(p.center, j)) * static_cast<double>(wout.at2(n, j));
                }
                const double g = detail::sigmoid(score);
                for (int j = 0; j < v; ++j) {
                    accum[static_cast<std::size_t>(j)] += g * static_cast<double>(wout.at2(n, j));
                    wout.at2(n, j) -= static_cast<float>(opt.learning_rate * g * static_cast<double>(win.at2(p.center, j)));
                }
            }
            for (int j = 0; j < v; ++j) {
                win.at2(p.center, j) -= static_cast<float>(opt.learning_rate * accum[static_cast<std::size_t>(j)]);
            }
        }
        result.heldout_loss.push_back(heldout_loss());
    }
    return result;
}

// ---- text interop ----
// Format: first line "<count> <V>", then one "<token> <f1> ... <fV>" per line.

inline void export_text(const EmbeddingTable& table, const std::string& path) {
    std::string out = std::to_string(table.vocab.size()) + " " + std::to_string(table.dim()) + "\n";
    for (int i = 0; i < table.vocab.size(); ++i) {
        out += table.vocab.tokens[static_cast<std::size_t>(i)];
        for (int j = 0; j < table.dim(); ++j) {
            out += ' ';
            out += fmt_g(static_cast<double>(table.weights.at2(i, j)), 9);
        }
        out += '\n';
    }
    write_file_atomic(path, out);
}

struct RawEmbeddings {
    std::vector<std::string> tokens;
    Tensor<float> weights;

    int dim() const { return weights.shape.size() == 2 ? static_cast<int>(weights.shape[1]) : 0; }
};

inline RawEmbeddings import_text(const std::string& path) {
    std::istringstream in(read_file(path));
    std::string header;
    if (!std::getline(in, header)) throw std::invalid_argument("embedding file is empty: " + path);
    std::istringstream hs(header);
    long long count = -1, dim = -1;
    if (!(hs >> count >> dim) || count < 1 || dim < 1) {
        throw std::invalid_argument("embedding file has malformed header \"" + header + "\": " + path);
    }
    RawEmbeddings raw;
    raw.weights = Tensor<float>({count, dim});
    std::unordered_set<std::string> seen;
    std::string line;
    long long row = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (row >= count) {
            throw std::invalid_argument("embedding file has more rows than header \"" + header + "\" declares: " + path);
        }
        std::istringstream ls(line);
        std::string token;
        ls >> token;
        if (!seen.insert(token).second) {
            throw std::invalid_argument("embedding file has duplicate token \"" + token + "\": " + path);
        }
        for (long long j = 0; j < dim; ++j) {
            double x;
            if (!(ls >> x)) {
                throw std::invalid_argument("embedding row for \"" + token + "\" has fewer than " +
                                            std::to_string(dim) + " values: " + path);
            }
            raw.weights.at2(row, j) = static_cast<float>(x);
        }
        double extra;
        if (ls >> extra) {
            throw std::invalid_argument("embedding row for \"" + token + "\" has more than " +
                                        std::to_string(dim) + " values: " + path);
        }
        raw.tokens.push_back(token);
        ++row;
    }
    if (row != count) {
        throw std::invalid_argument("embedding file header declares " + std::to_string(count) + " rows but " +
                                    std::to_string(row) + " present: " + path);
    }
    return raw;
}

// Copies matching rows into `table`; returns the number of file tokens that
// are absent from the table's vocabulary (skipped with a warning count).
inline int apply_pretrained(EmbeddingTable& table, const RawEmbeddings& raw) {
    if (raw.dim() != table.dim()) {
        throw std::invalid_argument("embedding dimension mismatch: file has " + std::to_string(raw.dim()) +
                                    ", table is configured for " + std::to_string(table.dim()));
    }
    int skipped = 0;
    for (std::size_t i = 0; i < raw.tokens.size(); ++i) {
        const std::string& tok = raw.tokens[i];
        int id = -1;
        if (tok == kOovToken) {
            id = 0;
        } else {
            auto it = table.vocab.index.find(tok);
            if (it != table.vocab.index.end()) id = it->second;
        }
        if (id < 0) {
            ++skipped;
            continue;
        }
        for (int j = 0; j < table.dim(); ++j) {
            table.weights.at2(id, j) = raw.weights.at2(static_cast<std::int64_t>(i), j);
        }
    }
    return skipped;
}

}  // namespace treecaps
