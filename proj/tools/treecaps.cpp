// Command-line front end: corpus preparation, embedding pretraining,
// training, evaluation, prediction and ablation sweeps.
//
// Exit codes: 0 success, 1 runtime failure, 2 input/validation failure.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "treecaps/treecaps.hpp"

namespace fs = std::filesystem;
using namespace treecaps;

namespace {

struct DataDir {
    std::vector<Sample> train, val, test;
    Vocabulary vocab;
    std::vector<std::string> classes;
};

DataDir load_data_dir(const std::string& dir) {
    DataDir d;
    d.train = load_dataset_jsonl(dir + "/train.jsonl");
    d.val = load_dataset_jsonl(dir + "/val.jsonl");
    d.test = load_dataset_jsonl(dir + "/test.jsonl");
    d.vocab = load_vocabulary(dir + "/vocab.json");
    d.classes = load_class_manifest(dir + "/classes.json");
    return d;
}

std::array<double, 3> parse_split(const std::string& s) {
    std::array<double, 3> out{};
    if (std::sscanf(s.c_str(), "%lf,%lf,%lf", &out[0], &out[1], &out[2]) != 3) {
        throw std::invalid_argument("--split expects three comma-separated ratios, got \"" + s + "\"");
    }
    return out;
}

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const std::size_t comma = s.find(',', start);
        if (comma == std::string::npos) {
            out.push_back(s.substr(start));
            break;
        }
        out.push_back(s.substr(start, comma - start));
        start = comma + 1;
    }
    return out;
}

const std::vector<std::string> kPathKeys = {"data_dir", "out_dir", "init_embeddings"};

Json load_config_json(const std::string& path) {
    Json j;
    try {
        j = Json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument("config " + path + " is not valid JSON: " + e.what());
    }
    return j;
}

// Train once against a prepared directory; shared by cmd_train and cmd_sweep.
struct TrainRun {
    TrainResult result;
    TrainConfig config;
    Metrics test_metrics;
};

TrainRun run_training(const DataDir& data, TrainConfig cfg, const Tensor<float>* init_embedding) {
    cfg.model.num_classes = static_cast<int>(data.classes.size());
    cfg.validate();
    TrainRun run;
    run.config = cfg;
    run.result = train_model(data.train, data.val, cfg, data.vocab, init_embedding);
    run.test_metrics = evaluate_model(run.result.best_params, cfg.model, data.vocab, data.test, data.classes);
    return run;
}

Checkpoint to_checkpoint(const DataDir& data, const TrainRun& run) {
    Checkpoint cp;
    cp.config = run.config;
    cp.vocab = data.vocab;
    cp.class_names = data.classes;
    cp.val_accuracy = run.result.best_val_accuracy;
    cp.params = run.result.best_params;
    return cp;
}

// ---- prepare ----

int cmd_prepare(const std::string& input, const std::string& synthetic_spec, int samples_per_class,
                const std::string& out_dir, std::uint64_t seed, const std::string& split_arg,
                const std::string& classes_path) {
    const std::array<double, 3> ratios = parse_split(split_arg);

    std::vector<Sample> samples;
    std::vector<std::string> class_names;
    if (!synthetic_spec.empty()) {
        GrammarSpec g = synthetic_spec == "default" ? default_six_class_grammar()
                                                    : grammar_from_json(load_config_json(synthetic_spec));
        samples = generate_synthetic_corpus(g, samples_per_class, seed);
        class_names = grammar_class_names(g);
    } else {
        samples = load_dataset_jsonl(input);
        int max_label = 0;
        for (const Sample& s : samples) max_label = std::max(max_label, s.label);
        if (!classes_path.empty()) {
            class_names = load_class_manifest(classes_path);
            if (static_cast<int>(class_names.size()) <= max_label) {
                throw std::invalid_argument("class manifest has " + std::to_string(class_names.size()) +
                                            " entries but labels reach " + std::to_string(max_label));
            }
        } else {
            for (int c = 0; c <= max_label; ++c) class_names.push_back("class" + std::to_string(c));
        }
    }

    const DatasetSplit split = split_samples(samples, ratios, seed);
    const Vocabulary vocab = build_vocabulary(split.train);

    fs::create_directories(out_dir);
    save_dataset_jsonl(split.train, out_dir + "/train.jsonl");
    save_dataset_jsonl(split.val, out_dir + "/val.jsonl");
    save_dataset_jsonl(split.test, out_dir + "/test.jsonl");
    save_vocabulary(vocab, out_dir + "/vocab.json");
    save_class_manifest(class_names, out_dir + "/classes.json");

    std::cout << "prepared " << samples.size() << " samples (" << split.train.size() << " train, "
              << split.val.size() << " val, " << split.test.size() << " test), vocabulary of "
              << vocab.size() << " types, " << class_names.size() << " classes -> " << out_dir << "\n";
    return 0;
}

// ---- pretrain ----

int cmd_pretrain(const std::string& data_dir, int dim, int epochs, int negatives, double lr,
                 std::uint64_t seed, const std::string& out_path) {
    const auto train = load_dataset_jsonl(data_dir + "/train.jsonl");
    const Vocabulary vocab = load_vocabulary(data_dir + "/vocab.json");

    SkipgramOptions opt;
    opt.embed_dim = dim;
    opt.epochs = epochs;
    opt.negatives = negatives;
    opt.learning_rate = lr;
    opt.seed = seed;
    const PretrainResult res = pretrain_skipgram(train, vocab, opt);
    export_text(res.table, out_path);

    std::cout << "pretrained " << vocab.size() << " x " << dim << " embeddings over " << epochs
              << " epoch(s) -> " << out_path << "\n";
    if (res.heldout_loss.size() >= 2) {
        std::cout << "held-out loss " << fmt_g(res.heldout_loss.front(), 6) << " -> "
                  << fmt_g(res.heldout_loss.back(), 6) << "\n";
    }
    return 0;
}

// ---- train ----

TrainConfig config_from_file_and_overrides(const std::string& config_path, const Json& overrides,
                                           std::string* data_dir, std::string* out_dir,
                                           std::string* init_embeddings) {
    Json j = config_path.empty() ? Json::object() : load_config_json(config_path);
    for (auto it = overrides.begin(); it != overrides.end(); ++it) j[it.key()] = it.value();
    if (j.contains("data_dir")) *data_dir = j["data_dir"].get<std::string>();
    if (j.contains("out_dir")) *out_dir = j["out_dir"].get<std::string>();
    if (init_embeddings && j.contains("init_embeddings")) *init_embeddings = j["init_embeddings"].get<std::string>();
    return train_config_from_json(j, kPathKeys);
}

int cmd_train(const std::string& config_path, const Json& overrides, std::string data_dir,
              std::string out_dir, std::string init_embeddings_path) {
    const TrainConfig cfg =
        config_from_file_and_overrides(config_path, overrides, &data_dir, &out_dir, &init_embeddings_path);
    if (data_dir.empty()) throw std::invalid_argument("no data directory (pass --data or set data_dir in the config)");
    if (out_dir.empty()) throw std::invalid_argument("no output directory (pass --out or set out_dir in the config)");

    const DataDir data = load_data_dir(data_dir);

    Tensor<float> init_embedding;
    const Tensor<float>* init_ptr = nullptr;
    if (!init_embeddings_path.empty()) {
        const RawEmbeddings raw = import_text(init_embeddings_path);
        EmbeddingTable table = init_table(data.vocab, raw.dim(), cfg.seed);
        const int skipped = apply_pretrained(table, raw);
        if (skipped > 0) {
            std::cerr << "warning: " << skipped << " pretrained token(s) absent from the vocabulary, skipped\n";
        }
        init_embedding = std::move(table.weights);
        init_ptr = &init_embedding;
    }

    const TrainRun run = run_training(data, cfg, init_ptr);

    fs::create_directories(out_dir);
    save_checkpoint(to_checkpoint(data, run), out_dir + "/model.caps");
    write_file_atomic(out_dir + "/metrics.csv", metrics_history_csv(run.result.history));
    Json report = metrics_to_json(run.test_metrics);
    report["best_epoch"] = run.result.best_epoch;
    report["best_val_accuracy"] = run.result.best_val_accuracy;
    write_file_atomic(out_dir + "/report.json", report.dump(2) + "\n");

    std::cout << "trained " << run.config.epochs << " epoch(s); best val accuracy "
              << fmt_g(run.result.best_val_accuracy, 6) << " at epoch " << run.result.best_epoch
              << "; test accuracy " << fmt_g(run.test_metrics.accuracy, 6) << "\n"
              << "checkpoint -> " << out_dir << "/model.caps\n";
    return 0;
}

// ---- evaluate ----

int cmd_evaluate(const std::string& checkpoints_arg, const std::string& data_dir, const std::string& split,
                 const std::string& weights_arg, const std::string& out_path) {
    std::vector<Checkpoint> cps;
    for (const std::string& path : split_commas(checkpoints_arg)) cps.push_back(load_checkpoint(path));
    check_ensemble_compatible(cps);

    const DataDir data = load_data_dir(data_dir);
    if (data.classes != cps[0].class_names) {
        throw std::invalid_argument("checkpoint classes do not match the dataset manifest");
    }

    const std::vector<Sample>* samples = &data.test;
    if (split == "val") samples = &data.val;
    else if (split == "train") samples = &data.train;
    else if (split != "test") throw std::invalid_argument("--on must be train, val or test");

    Json out;
    Json individuals = Json::array();
    for (const Checkpoint& cp : cps) {
        const Metrics m = evaluate_model(cp.params, cp.config.model, cp.vocab, *samples, cp.class_names);
        Json ind;
        ind["val_accuracy"] = cp.val_accuracy;
        ind["accuracy"] = m.accuracy;
        individuals.push_back(std::move(ind));
    }
    out["models"] = std::move(individuals);

    Metrics final_metrics;
    if (cps.size() == 1) {
        final_metrics = evaluate_model(cps[0].params, cps[0].config.model, cps[0].vocab, *samples, cps[0].class_names);
    } else {
        std::vector<double> weights;
        if (weights_arg.empty()) {
            weights = default_ensemble_weights(cps);
        } else {
            for (const std::string& w : split_commas(weights_arg)) weights.push_back(std::stod(w));
        }
        final_metrics = evaluate_ensemble(cps, weights, *samples);
        Json jw = Json::array();
        for (double w : weights) jw.push_back(w);
        out["ensemble_weights"] = std::move(jw);
    }
    out["report"] = metrics_to_json(final_metrics);

    const std::string text = out.dump(2) + "\n";
    std::cout << text;
    if (!out_path.empty()) write_file_atomic(out_path, text);
    return 0;
}

// ---- predict ----

int cmd_predict(const std::string& checkpoint_path, const std::string& tree_path) {
    const Checkpoint cp = load_checkpoint(checkpoint_path);
    const Tree tree = parse_canonical(read_file(tree_path));
    const ClassScores scores = predict_scores(cp.params, cp.config.model, cp.vocab, tree);
    for (std::size_t m = 0; m < scores.probabilities.size(); ++m) {
        std::cout << cp.class_names[m] << " " << fmt_g(scores.probabilities[m], 9) << "\n";
    }
    std::cout << "predicted: " << cp.class_names[static_cast<std::size_t>(scores.predicted)] << "\n";
    return 0;
}

// ---- sweep ----

int cmd_sweep(const std::string& config_path, const Json& overrides, std::string data_dir,
              const std::string& param, const std::string& values_arg, int trials,
              const std::string& out_path) {
    if (trials < 1) throw std::invalid_argument("--trials must be >= 1");
    std::string unused_out;
    Json base = config_path.empty() ? Json::object() : load_config_json(config_path);
    for (auto it = overrides.begin(); it != overrides.end(); ++it) base[it.key()] = it.value();
    if (base.contains("data_dir") && data_dir.empty()) data_dir = base["data_dir"].get<std::string>();
    if (data_dir.empty()) throw std::invalid_argument("no data directory (pass --data or set data_dir in the config)");

    const std::vector<std::string> values = split_commas(values_arg);
    if (values.empty()) throw std::invalid_argument("--values must name at least one setting");

    // validate the parameter name and every value before any compute
    std::vector<Json> configs;
    for (const std::string& v : values) {
        Json j = base;
        try {
            j[param] = Json::parse(v);  // numbers and booleans
        } catch (const nlohmann::json::exception&) {
            j[param] = v;  // plain strings (e.g. variant names)
        }
        train_config_from_json(j, kPathKeys);  // throws on unknown keys/bad values
        configs.push_back(std::move(j));
    }

    const DataDir data = load_data_dir(data_dir);
    const std::uint64_t base_seed = base.contains("seed") ? base["seed"].get<std::uint64_t>() : 1;

    std::string csv = "param,value,trials,failures,mean_accuracy,std_accuracy\n";
    for (std::size_t vi = 0; vi < values.size(); ++vi) {
        std::vector<double> accs;
        int failures = 0;
        for (int trial = 0; trial < trials; ++trial) {
            TrainConfig cfg = train_config_from_json(configs[vi], kPathKeys);
            cfg.seed = base_seed + static_cast<std::uint64_t>(trial);
            try {
                const TrainRun run = run_training(data, cfg, nullptr);
                accs.push_back(run.test_metrics.accuracy);
                std::cout << param << "=" << values[vi] << " trial " << trial << " seed " << cfg.seed
                          << " accuracy " << fmt_g(run.test_metrics.accuracy, 6) << "\n";
            } catch (const std::exception& e) {
                ++failures;
                std::cerr << param << "=" << values[vi] << " trial " << trial << " failed: " << e.what()
                          << "\n";
            }
        }
        double mean = 0.0, stddev = 0.0;
        for (double a : accs) mean += a;
        if (!accs.empty()) mean /= static_cast<double>(accs.size());
        if (accs.size() > 1) {
            for (double a : accs) stddev += (a - mean) * (a - mean);
            stddev = std::sqrt(stddev / static_cast<double>(accs.size() - 1));
        }
        csv += param + "," + values[vi] + "," + std::to_string(accs.size()) + "," + std::to_string(failures) +
               "," + fmt_g(mean, 9) + "," + fmt_g(stddev, 9) + "\n";
    }
    std::cout << csv;
    if (!out_path.empty()) write_file_atomic(out_path, csv);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"TreeCaps: tree-based capsule networks for program classification"};
    app.require_subcommand(1);

    // prepare
    auto* prepare = app.add_subcommand("prepare", "Build train/val/test JSONL files, vocabulary and class manifest");
    std::string prep_input, prep_spec, prep_out = "data", prep_split = "0.8,0.1,0.1", prep_classes;
    std::uint64_t prep_seed = 42;
    int prep_per_class = 200;
    auto* in_opt = prepare->add_option("--input", prep_input, "JSONL dataset to split");
    auto* spec_opt = prepare->add_option("--synthetic-spec", prep_spec,
                                         "grammar JSON file, or 'default' for the built-in 6-class grammar");
    in_opt->excludes(spec_opt);
    prepare->add_option("--samples-per-class", prep_per_class, "synthetic samples per class");
    prepare->add_option("--out", prep_out, "output directory");
    prepare->add_option("--seed", prep_seed, "generation/split seed");
    prepare->add_option("--split", prep_split, "train,val,test ratios");
    prepare->add_option("--classes", prep_classes, "class manifest for --input datasets");

    // pretrain
    auto* pretrain = app.add_subcommand("pretrain", "Skip-gram pretraining of node-type embeddings");
    std::string pre_data = "data", pre_out = "embeddings.txt";
    int pre_dim = 32, pre_epochs = 5, pre_negatives = 5;
    double pre_lr = 0.025;
    std::uint64_t pre_seed = 1;
    pretrain->add_option("--data", pre_data, "prepared data directory");
    pretrain->add_option("--dim", pre_dim, "embedding dimension");
    pretrain->add_option("--epochs", pre_epochs, "pretraining epochs");
    pretrain->add_option("--negatives", pre_negatives, "negative samples per pair");
    pretrain->add_option("--lr", pre_lr, "learning rate");
    pretrain->add_option("--seed", pre_seed, "seed");
    pretrain->add_option("--out", pre_out, "output embedding text file");

    // shared train-config overrides
    auto add_override_options = [](CLI::App* cmd, std::shared_ptr<Json> overrides) {
        auto bind_num = [cmd, overrides](const std::string& flag, const std::string& key, const char* help) {
            cmd->add_option_function<double>(
                   flag, [overrides, key](double v) { (*overrides)[key] = v; }, help)
                ->expected(1);
        };
        auto bind_int = [cmd, overrides](const std::string& flag, const std::string& key, const char* help) {
            cmd->add_option_function<std::int64_t>(
                   flag, [overrides, key](std::int64_t v) { (*overrides)[key] = v; }, help)
                ->expected(1);
        };
        auto bind_str = [cmd, overrides](const std::string& flag, const std::string& key, const char* help) {
            cmd->add_option_function<std::string>(
                   flag, [overrides, key](const std::string& v) { (*overrides)[key] = v; }, help)
                ->expected(1);
        };
        bind_num("--learning-rate", "learning_rate", "initial learning rate");
        bind_int("--epochs", "epochs", "training epochs");
        bind_int("--batch-size", "batch_size", "gradient-accumulation count");
        bind_int("--seed", "seed", "training seed");
        bind_str("--variant", "variant", "standard | dmp-ablation | secondary-layer");
        bind_str("--optimizer", "optimizer", "radam | adam");
    };

    // train
    auto* train = app.add_subcommand("train", "Train a model and write checkpoint + metrics");
    std::string train_config, train_data, train_out, train_init_emb;
    auto train_overrides = std::make_shared<Json>(Json::object());
    train->add_option("--config", train_config, "experiment config JSON");
    train->add_option("--data", train_data, "prepared data directory (overrides config data_dir)");
    train->add_option("--out", train_out, "output directory (overrides config out_dir)");
    train->add_option("--init-embeddings", train_init_emb, "text embedding file for initialization");
    add_override_options(train, train_overrides);

    // evaluate
    auto* evaluate = app.add_subcommand("evaluate", "Evaluate one checkpoint or a weighted ensemble");
    std::string eval_cps, eval_data = "data", eval_split = "test", eval_weights, eval_out;
    evaluate->add_option("--checkpoints", eval_cps, "comma-separated checkpoint paths")->required();
    evaluate->add_option("--data", eval_data, "prepared data directory");
    evaluate->add_option("--on", eval_split, "split to evaluate: train | val | test");
    evaluate->add_option("--ensemble-weights", eval_weights, "comma-separated weights");
    evaluate->add_option("--out", eval_out, "write the JSON report here");

    // predict
    auto* predict = app.add_subcommand("predict", "Classify one canonical tree document");
    std::string pred_cp, pred_tree;
    predict->add_option("--checkpoint", pred_cp, "checkpoint path")->required();
    predict->add_option("--tree", pred_tree, "canonical tree JSON file")->required();

    // sweep
    auto* sweep = app.add_subcommand("sweep", "Grid over one config key with repeated trials");
    std::string sweep_config, sweep_data, sweep_param, sweep_values, sweep_out;
    int sweep_trials = 3;
    auto sweep_overrides = std::make_shared<Json>(Json::object());
    sweep->add_option("--config", sweep_config, "experiment config JSON");
    sweep->add_option("--data", sweep_data, "prepared data directory");
    sweep->add_option("--param", sweep_param, "config key to sweep")->required();
    sweep->add_option("--values", sweep_values, "comma-separated settings")->required();
    sweep->add_option("--trials", sweep_trials, "trials per setting (distinct seeds)");
    sweep->add_option("--out", sweep_out, "write the summary CSV here");
    add_override_options(sweep, sweep_overrides);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (prepare->parsed()) {
            if (prep_input.empty() == prep_spec.empty()) {
                throw std::invalid_argument("pass exactly one of --input or --synthetic-spec");
            }
            return cmd_prepare(prep_input, prep_spec, prep_per_class, prep_out, prep_seed, prep_split,
                               prep_classes);
        }
        if (pretrain->parsed()) {
            return cmd_pretrain(pre_data, pre_dim, pre_epochs, pre_negatives, pre_lr, pre_seed, pre_out);
        }
        if (train->parsed()) {
            return cmd_train(train_config, *train_overrides, train_data, train_out, train_init_emb);
        }
        if (evaluate->parsed()) {
            return cmd_evaluate(eval_cps, eval_data, eval_split, eval_weights, eval_out);
        }
        if (predict->parsed()) {
            return cmd_predict(pred_cp, pred_tree);
        }
        if (sweep->parsed()) {
            return cmd_sweep(sweep_config, *sweep_overrides, sweep_data, sweep_param, sweep_values,
                             sweep_trials, sweep_out);
        }
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
