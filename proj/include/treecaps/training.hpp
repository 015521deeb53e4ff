#pragma once

// Margin-loss training loop, per-epoch metrics and model evaluation.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "treecaps/ast.hpp"
#include "treecaps/common.hpp"
#include "treecaps/model.hpp"
#include "treecaps/optimizer.hpp"

namespace treecaps {

struct TrainConfig {
    // 0.02 suits corpora in the hundreds-to-thousands of samples; drop
    // toward 0.001 when step counts per epoch grow by orders of magnitude.
    double learning_rate = 0.02;
    double lr_decay = 0.95;  // per-epoch exponential decay
    int epochs = 24;
    int batch_size = 32;     // gradient-accumulation count
    std::uint64_t seed = 1;
    double margin_plus = 0.9;
    double margin_minus = 0.1;
    double margin_lambda = 0.5;
    OptimizerKind optimizer = OptimizerKind::radam;
    ModelConfig model;

    void validate() const {
        if (!(learning_rate > 0.0)) throw std::invalid_argument("train config: learning_rate must be positive");
        if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw std::invalid_argument("train config: lr_decay must be in (0, 1]");
        if (epochs < 0) throw std::invalid_argument("train config: epochs must be >= 0");
        if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
        if (!(margin_minus > 0.0 && margin_plus > margin_minus && margin_plus < 1.0)) {
            throw std::invalid_argument("train config: need 0 < margin_minus < margin_plus < 1");
        }
        if (margin_lambda < 0.0) throw std::invalid_argument("train config: margin_lambda must be >= 0");
        model.validate();
    }
};

// ---- JSON round trip ----
// Flat key set shared by config files and CLI overrides; unknown keys are
// rejected at the call site, which may allow extra (path) keys of its own.

inline const std::vector<std::string>& train_config_keys() {
    static const std::vector<std::string> keys = {
        "learning_rate", "lr_decay", "epochs", "batch_size", "seed", "margin_plus", "margin_minus",
        "margin_lambda", "optimizer", "window_depth", "embed_dim", "conv_dim", "conv_slices", "capsule_dim",
        "static_capsules", "routed_capsules", "vts_iterations", "dyn_iterations", "code_capsule_dim",
        "variant", "secondary_capsules", "secondary_dim"};
    return keys;
}

inline TrainConfig train_config_from_json(const Json& j, const std::vector<std::string>& extra_allowed = {}) {
    if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
    const auto& known = train_config_keys();
    for (auto it = j.begin(); it != j.end(); ++it) {
        const bool ok = std::find(known.begin(), known.end(), it.key()) != known.end() ||
                        std::find(extra_allowed.begin(), extra_allowed.end(), it.key()) != extra_allowed.end();
        if (!ok) throw std::invalid_argument("config has unknown key \"" + it.key() + "\"");
    }
    TrainConfig c;
    auto num = [&](const char* k, auto& dst) {
        if (j.contains(k)) dst = j.at(k).template get<std::decay_t<decltype(dst)>>();
    };
    num("learning_rate", c.learning_rate);
    num("lr_decay", c.lr_decay);
    num("epochs", c.epochs);
    num("batch_size", c.batch_size);
    num("seed", c.seed);
    num("margin_plus", c.margin_plus);
    num("margin_minus", c.margin_minus);
    num("margin_lambda", c.margin_lambda);
    if (j.contains("optimizer")) c.optimizer = optimizer_from_name(j.at("optimizer").get<std::string>());
    num("window_depth", c.model.window_depth);
    num("embed_dim", c.model.embed_dim);
    num("conv_dim", c.model.conv_dim);
    num("conv_slices", c.model.conv_slices);
    num("capsule_dim", c.model.capsule_dim);
    num("static_capsules", c.model.static_capsules);
    num("routed_capsules", c.model.routed_capsules);
    num("vts_iterations", c.model.vts_iterations);
    num("dyn_iterations", c.model.dyn_iterations);
    num("code_capsule_dim", c.model.code_capsule_dim);
    if (j.contains("variant")) c.model.variant = variant_from_name(j.at("variant").get<std::string>());
    num("secondary_capsules", c.model.secondary_capsules);
    num("secondary_dim", c.model.secondary_dim);
    return c;
}

inline Json train_config_to_json(const TrainConfig& c) {
    Json j;
    j["learning_rate"] = c.learning_rate;
    j["lr_decay"] = c.lr_decay;
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["seed"] = c.seed;
    j["margin_plus"] = c.margin_plus;
    j["margin_minus"] = c.margin_minus;
    j["margin_lambda"] = c.margin_lambda;
    j["optimizer"] = optimizer_name(c.optimizer);
    j["window_depth"] = c.model.window_depth;
    j["embed_dim"] = c.model.embed_dim;
    j["conv_dim"] = c.model.conv_dim;
    j["conv_slices"] = c.model.conv_slices;
    j["capsule_dim"] = c.model.capsule_dim;
    j["static_capsules"] = c.model.static_capsules;
    j["routed_capsules"] = c.model.routed_capsules;
    j["vts_iterations"] = c.model.vts_iterations;
    j["dyn_iterations"] = c.model.dyn_iterations;
    j["code_capsule_dim"] = c.model.code_capsule_dim;
    j["variant"] = variant_name(c.model.variant);
    j["secondary_capsules"] = c.model.secondary_capsules;
    j["secondary_dim"] = c.model.secondary_dim;
    return j;
}

// ---- margin loss ----

// Per-capsule hinge-squared loss on the class-capsule norms, summed over
// classes: the correct class is pushed above margin_plus, every other class
// below margin_minus (down-weighted by lambda).
inline double margin_loss(const std::vector<double>& norms, int label, double m_plus = 0.9,
                          double m_minus = 0.1, double lambda = 0.5) {
    if (label < 0 || label >= static_cast<int>(norms.size())) {
        throw std::invalid_argument("margin_loss: label " + std::to_string(label) + " out of range");
    }
    double total = 0.0;
    for (std::size_t m = 0; m < norms.size(); ++m) {
        if (static_cast<int>(m) == label) {
            const double h = std::max(0.0, m_plus - norms[m]);
            total += h * h;
        } else {
            const double h = std::max(0.0, norms[m] - m_minus);
            total += lambda * h * h;
        }
    }
    return total;
}

template <typename T>
Var<T> margin_loss_graph(Tape<T>& tape, Var<T> norms, int label, double m_plus, double m_minus,
                         double lambda) {
    const std::int64_t k = tape.value(norms).numel();
    if (label < 0 || label >= k) {
        throw std::invalid_argument("margin_loss: label " + std::to_string(label) + " out of range");
    }
    Tensor<T> onehot({k}, T(0));
    onehot[label] = T(1);
    Tensor<T> inv({k}, T(1));
    inv[label] = T(0);
    Var<T> pos = tape.square(tape.relu(tape.sub(tape.constant(Tensor<T>({k}, static_cast<T>(m_plus))), norms)));
    Var<T> neg = tape.square(tape.relu(tape.sub(norms, tape.constant(Tensor<T>({k}, static_cast<T>(m_minus))))));
    Var<T> weighted = tape.add(tape.mul(tape.constant(std::move(onehot)), pos),
                               tape.scale(tape.mul(tape.constant(std::move(inv)), neg), static_cast<T>(lambda)));
    return tape.sum(weighted);
}

// ---- metrics ----

struct EpochRecord {
    int epoch;
    double train_loss;
    double val_accuracy;
};

struct ClassStats {
    std::string name;
    double precision = 0.0;
    double recall = 0.0;
    std::int64_t support = 0;
};

struct Metrics {
    double accuracy = 0.0;
    std::vector<std::vector<std::int64_t>> confusion;  // [true][predicted]
    std::vector<ClassStats> per_class;
};

inline std::string metrics_history_csv(const std::vector<EpochRecord>& history) {
    std::string out = "epoch,train_loss,val_accuracy\n";
    for (const EpochRecord& r : history) {
        out += std::to_string(r.epoch);
        out += ',';
        out += fmt_g(r.train_loss, 9);
        out += ',';
        out += fmt_g(r.val_accuracy, 9);
        out += '\n';
    }
    return out;
}

inline Metrics metrics_from_confusion(std::vector<std::vector<std::int64_t>> confusion,
                                      const std::vector<std::string>& class_names) {
    Metrics m;
    m.confusion = std::move(confusion);
    const std::size_t k = m.confusion.size();
    std::int64_t total = 0, correct = 0;
    std::vector<std::int64_t> col_sum(k, 0);
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            total += m.confusion[i][j];
            col_sum[j] += m.confusion[i][j];
        }
        correct += m.confusion[i][i];
    }
    m.accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
    for (std::size_t c = 0; c < k; ++c) {
        ClassStats s;
        s.name = c < class_names.size() ? class_names[c] : "class" + std::to_string(c);
        std::int64_t support = 0;
        for (std::size_t j = 0; j < k; ++j) support += m.confusion[c][j];
        s.support = support;
        s.recall = support ? static_cast<double>(m.confusion[c][c]) / static_cast<double>(support) : 0.0;
        s.precision = col_sum[c] ? static_cast<double>(m.confusion[c][c]) / static_cast<double>(col_sum[c]) : 0.0;
        m.per_class.push_back(std::move(s));
    }
    return m;
}

inline Json metrics_to_json(const Metrics& m) {
    Json j;
    j["accuracy"] = m.accuracy;
    Json per_class = Json::array();
    for (const ClassStats& s : m.per_class) {
        Json cj;
        cj["name"] = s.name;
        cj["precision"] = s.precision;
        cj["recall"] = s.recall;
        cj["support"] = s.support;
        per_class.push_back(std::move(cj));
    }
    j["per_class"] = std::move(per_class);
    Json conf = Json::array();
    for (const auto& row : m.confusion) conf.push_back(row);
    j["confusion"] = std::move(conf);
    return j;
}

// ---- evaluation ----

template <typename T>
Metrics evaluate_model(const ParamStore<T>& params, const ModelConfig& cfg, const Vocabulary& vocab,
                       const std::vector<Sample>& samples, const std::vector<std::string>& class_names = {}) {
    std::vector<std::vector<std::int64_t>> confusion(
        static_cast<std::size_t>(cfg.num_classes),
        std::vector<std::int64_t>(static_cast<std::size_t>(cfg.num_classes), 0));
    for (const Sample& s : samples) {
        if (s.label < 0 || s.label >= cfg.num_classes) {
            throw std::invalid_argument("evaluate: sample label " + std::to_string(s.label) +
                                        " outside the model's " + std::to_string(cfg.num_classes) + " classes");
        }
        const ClassScores scores = predict_scores(params, cfg, vocab, s.tree);
        confusion[static_cast<std::size_t>(s.label)][static_cast<std::size_t>(scores.predicted)] += 1;
    }
    return metrics_from_confusion(std::move(confusion), class_names);
}

// ---- training loop ----

struct TrainResult {
    ParamStore<float> best_params;  // checkpointed at the best validation epoch
    int best_epoch = -1;
    double best_val_accuracy = 0.0;
    std::vector<EpochRecord> history;
};

// Single-threaded, deterministic for a fixed config and seed. One tree per
// forward pass; gradients accumulate over batch_size samples (trees have
// variable size, so there is no padded batching), then one optimizer step
// on the batch-averaged gradient.
inline TrainResult train_model(const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                               const TrainConfig& cfg, const Vocabulary& vocab,
                               const Tensor<float>* init_embedding = nullptr) {
    cfg.validate();
    if (train_set.empty() || val_set.empty()) {
        throw std::invalid_argument("train_model needs non-empty train and validation splits");
    }
    for (const Sample& s : train_set) {
        if (s.label < 0 || s.label >= cfg.model.num_classes) {
            throw std::invalid_argument("train sample label " + std::to_string(s.label) + " outside " +
                                        std::to_string(cfg.model.num_classes) + " classes");
        }
    }

    std::vector<PreparedSample> prepared;
    prepared.reserve(train_set.size());
    for (const Sample& s : train_set) prepared.push_back(prepare_sample(s.tree, s.label, vocab, cfg.model));

    ParamStore<float> params = init_params<float>(cfg.model, vocab.size(), cfg.seed);
    if (init_embedding != nullptr) {
        const int slot = params.find(kEmbeddingParam);
        if (!init_embedding->same_shape(params.values[static_cast<std::size_t>(slot)])) {
            throw std::invalid_argument("initial embedding shape " + shape_str(init_embedding->shape) +
                                        " does not match expected " +
                                        shape_str(params.values[static_cast<std::size_t>(slot)].shape));
        }
        params.values[static_cast<std::size_t>(slot)] = *init_embedding;
    }

    OptimizerConfig opt_cfg;
    opt_cfg.kind = cfg.optimizer;
    OptimizerState<float> opt_state = OptimizerState<float>::init(params);

    std::vector<Tensor<float>> grad_accum;
    for (const auto& p : params.values) grad_accum.push_back(Tensor<float>(p.shape, 0.0f));
    auto zero_accum = [&]() {
        for (auto& g : grad_accum) std::fill(g.data.begin(), g.data.end(), 0.0f);
    };

    TrainResult result;
    result.best_params = params;

    std::vector<std::size_t> order(prepared.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.learning_rate * std::pow(cfg.lr_decay, epoch);
        Rng shuffle_rng(seed_combine(cfg.seed, 0xE90Cull, static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0;
        int in_batch = 0;
        zero_accum();
        for (std::size_t step = 0; step < order.size(); ++step) {
            const PreparedSample& sample = prepared[order[step]];
            Tape<float> tape;
            const ModelVars<float> vars = bind_params(tape, params, cfg.model);
            const ForwardResult<float> fwd = forward_graph(tape, vars, sample, cfg.model);
            Var<float> loss = margin_loss_graph(tape, fwd.norms, sample.label, cfg.margin_plus,
                                                cfg.margin_minus, cfg.margin_lambda);
            const double loss_val = static_cast<double>(tape.value(loss)[0]);
            if (!std::isfinite(loss_val)) {
                throw std::runtime_error("non-finite training loss at epoch " + std::to_string(epoch) +
                                         ", sample " + std::to_string(step));
            }
            loss_sum += loss_val;
            tape.backward(loss);
            for (const auto& [slot, node] : tape.param_bindings()) {
                const Tensor<float>& g = tape.grad(Var<float>{&tape, node});
                Tensor<float>& acc = grad_accum[static_cast<std::size_t>(slot)];
                for (std::int64_t i = 0; i < g.numel(); ++i) acc[i] += g[i];
            }
            ++in_batch;
            if (in_batch == cfg.batch_size || step + 1 == order.size()) {
                const float inv = 1.0f / static_cast<float>(in_batch);
                for (auto& g : grad_accum) {
                    for (auto& v : g.data) v *= inv;
                }
                optimizer_step(params, grad_accum, opt_state, opt_cfg, lr);
                zero_accum();
                in_batch = 0;
            }
        }

        const Metrics val = evaluate_model(params, cfg.model, vocab, val_set);
        const double val_acc = val.accuracy;
        result.history.push_back({epoch, loss_sum / static_cast<double>(order.size()), val_acc});
        if (result.best_epoch < 0 || val_acc > result.best_val_accuracy) {
            result.best_epoch = epoch;
            result.best_val_accuracy = val_acc;
            result.best_params = params;
        }
    }

    if (result.best_epoch < 0) {  // zero-epoch run: keep the initialization
        result.best_val_accuracy = evaluate_model(params, cfg.model, vocab, val_set).accuracy;
        result.best_params = params;
    }
    return result;
}

}  // namespace treecaps
