#pragma once

// Model persistence and weighted-average ensembling.
//
// Checkpoint file layout: 8-byte magic "TRCAPS01", a UTF-8 JSON manifest
// (config, vocabulary, class names, tensor directory with name/shape/offset/
// dtype), then raw little-endian IEEE-754 tensor payloads in directory
// order. Directory offsets are relative to the end of the manifest.

#include <bit>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "treecaps/ast.hpp"
#include "treecaps/io.hpp"
#include "treecaps/model.hpp"
#include "treecaps/training.hpp"

namespace treecaps {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char kCheckpointMagic[] = "TRCAPS01";  // 8 bytes

struct Checkpoint {
    TrainConfig config;  // config.model.num_classes matches class_names.size()
    Vocabulary vocab;
    std::vector<std::string> class_names;
    double val_accuracy = 0.0;
    ParamStore<float> params;
};

namespace detail {

// Byte offset one past the first complete JSON value starting at `start`;
// respects strings and escape sequences.
inline std::size_t json_value_end(const std::string& buf, std::size_t start) {
    int depth = 0;
    bool in_string = false;
    for (std::size_t i = start; i < buf.size(); ++i) {
        const char c = buf[i];
        if (in_string) {
            if (c == '\\') {
                ++i;
            } else if (c == '"') {
                in_string = false;
            }
            continue;
        }
        if (c == '"') {
            in_string = true;
        } else if (c == '{' || c == '[') {
            ++depth;
        } else if (c == '}' || c == ']') {
            --depth;
            if (depth == 0) return i + 1;
            if (depth < 0) break;
        }
    }
    throw std::invalid_argument("checkpoint manifest is truncated or unbalanced");
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& cp, const std::string& path) {
    if (static_cast<int>(cp.class_names.size()) != cp.config.model.num_classes) {
        throw std::invalid_argument("checkpoint class names do not match the configured class count");
    }
    Json manifest;
    manifest["version"] = kCheckpointVersion;
    manifest["config"] = train_config_to_json(cp.config);
    Json vocab = Json::array();
    for (const auto& t : cp.vocab.tokens) vocab.push_back(t);
    manifest["vocab"] = std::move(vocab);
    Json classes = Json::array();
    for (const auto& c : cp.class_names) classes.push_back(c);
    manifest["classes"] = std::move(classes);
    manifest["val_accuracy"] = cp.val_accuracy;

    Json dir = Json::array();
    std::uint64_t offset = 0;
    for (std::size_t s = 0; s < cp.params.size(); ++s) {
        Json entry;
        entry["name"] = cp.params.names[s];
        entry["shape"] = cp.params.values[s].shape;
        entry["offset"] = offset;
        entry["dtype"] = "f32";
        dir.push_back(std::move(entry));
        offset += static_cast<std::uint64_t>(cp.params.values[s].numel()) * sizeof(float);
    }
    manifest["tensors"] = std::move(dir);

    std::string out(kCheckpointMagic, 8);
    out += manifest.dump();
    for (const auto& t : cp.params.values) {
        const std::size_t bytes = t.data.size() * sizeof(float);
        const std::size_t at = out.size();
        out.resize(at + bytes);
        std::memcpy(out.data() + at, t.data.data(), bytes);
    }
    write_file_atomic(path, out);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    const std::string buf = read_file(path);
    if (buf.size() < 9 || buf.compare(0, 8, kCheckpointMagic, 8) != 0) {
        throw std::invalid_argument("not a treecaps checkpoint (bad magic): " + path);
    }
    const std::size_t manifest_end = detail::json_value_end(buf, 8);
    Json manifest;
    try {
        manifest = Json::parse(buf.substr(8, manifest_end - 8));
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument("checkpoint manifest is not valid JSON: " + std::string(e.what()));
    }

    const int version = manifest.at("version").get<int>();
    if (version != kCheckpointVersion) {
        throw std::invalid_argument("checkpoint version " + std::to_string(version) +
                                    " is not supported (this build reads version " +
                                    std::to_string(kCheckpointVersion) + ")");
    }

    Checkpoint cp;
    cp.config = train_config_from_json(manifest.at("config"));
    cp.vocab = Vocabulary::from_tokens(manifest.at("vocab").get<std::vector<std::string>>());
    cp.class_names = manifest.at("classes").get<std::vector<std::string>>();
    cp.config.model.num_classes = static_cast<int>(cp.class_names.size());
    cp.val_accuracy = manifest.at("val_accuracy").get<double>();

    const auto expected = param_shapes(cp.config.model, cp.vocab.size());
    const Json& dir = manifest.at("tensors");
    if (!dir.is_array() || dir.size() != expected.size()) {
        throw std::invalid_argument("checkpoint tensor directory has " + std::to_string(dir.size()) +
                                    " entries, expected " + std::to_string(expected.size()));
    }

    const std::size_t payload_base = manifest_end;
    for (std::size_t s = 0; s < expected.size(); ++s) {
        const Json& entry = dir[s];
        const std::string name = entry.at("name").get<std::string>();
        if (name != expected[s].first) {
            throw std::invalid_argument("checkpoint tensor \"" + name + "\" out of place; expected \"" +
                                        expected[s].first + "\"");
        }
        const Shape shape = entry.at("shape").get<Shape>();
        if (shape != expected[s].second) {
            throw std::invalid_argument("checkpoint tensor \"" + name + "\" has shape " + shape_str(shape) +
                                        ", expected " + shape_str(expected[s].second));
        }
        if (entry.at("dtype").get<std::string>() != "f32") {
            throw std::invalid_argument("checkpoint tensor \"" + name + "\" has unsupported dtype");
        }
        const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
        const std::size_t count = static_cast<std::size_t>(shape_numel(shape));
        const std::size_t begin = payload_base + offset;
        const std::size_t bytes = count * sizeof(float);
        if (begin + bytes > buf.size()) {
            throw std::invalid_argument("checkpoint is truncated at tensor \"" + name + "\"");
        }
        Tensor<float> t(shape);
        std::memcpy(t.data.data(), buf.data() + begin, bytes);
        if (!t.all_finite()) {
            throw std::invalid_argument("checkpoint tensor \"" + name + "\" holds non-finite values");
        }
        cp.params.add(name, std::move(t));
    }
    return cp;
}

// ---- ensembling ----

inline void check_ensemble_compatible(const std::vector<Checkpoint>& cps) {
    if (cps.empty()) throw std::invalid_argument("ensemble needs at least one checkpoint");
    for (std::size_t i = 1; i < cps.size(); ++i) {
        if (cps[i].class_names != cps[0].class_names) {
            throw std::invalid_argument("ensemble checkpoints disagree on class names");
        }
        if (!(cps[i].vocab == cps[0].vocab)) {
            throw std::invalid_argument("ensemble checkpoints disagree on vocabulary");
        }
    }
}

// Weights proportional to each model's recorded validation accuracy; uniform
// when no model reports a positive one.
inline std::vector<double> default_ensemble_weights(const std::vector<Checkpoint>& cps) {
    std::vector<double> w(cps.size(), 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < cps.size(); ++i) {
        w[i] = std::max(0.0, cps[i].val_accuracy);
        total += w[i];
    }
    if (total <= 0.0) return std::vector<double>(cps.size(), 1.0 / static_cast<double>(cps.size()));
    for (auto& x : w) x /= total;
    return w;
}

// Weighted mean of per-model softmax probabilities.
inline std::vector<double> ensemble_probabilities(const std::vector<Checkpoint>& cps,
                                                  const std::vector<double>& weights, const Tree& tree) {
    check_ensemble_compatible(cps);
    if (weights.size() != cps.size()) {
        throw std::invalid_argument("ensemble has " + std::to_string(cps.size()) + " checkpoints but " +
                                    std::to_string(weights.size()) + " weights");
    }
    double total = 0.0;
    for (double w : weights) {
        if (w < 0.0) throw std::invalid_argument("ensemble weights must be non-negative");
        total += w;
    }
    if (total <= 0.0) throw std::invalid_argument("ensemble weights must not all be zero");

    std::vector<double> probs(static_cast<std::size_t>(cps[0].config.model.num_classes), 0.0);
    for (std::size_t i = 0; i < cps.size(); ++i) {
        const ClassScores s = predict_scores(cps[i].params, cps[i].config.model, cps[i].vocab, tree);
        for (std::size_t m = 0; m < probs.size(); ++m) probs[m] += weights[i] / total * s.probabilities[m];
    }
    return probs;
}

inline Metrics evaluate_ensemble(const std::vector<Checkpoint>& cps, const std::vector<double>& weights,
                                 const std::vector<Sample>& samples) {
    check_ensemble_compatible(cps);
    const int k = cps[0].config.model.num_classes;
    std::vector<std::vector<std::int64_t>> confusion(static_cast<std::size_t>(k),
                                                     std::vector<std::int64_t>(static_cast<std::size_t>(k), 0));
    for (const Sample& s : samples) {
        if (s.label < 0 || s.label >= k) {
            throw std::invalid_argument("ensemble evaluate: label " + std::to_string(s.label) +
                                        " outside the checkpoints' " + std::to_string(k) + " classes");
        }
        const std::vector<double> probs = ensemble_probabilities(cps, weights, s.tree);
        int pred = 0;
        for (std::size_t m = 1; m < probs.size(); ++m) {
            if (probs[m] > probs[static_cast<std::size_t>(pred)]) pred = static_cast<int>(m);
        }
        confusion[static_cast<std::size_t>(s.label)][static_cast<std::size_t>(pred)] += 1;
    }
    return metrics_from_confusion(std::move(confusion), cps[0].class_names);
}

}  // namespace treecaps
