#include "cli.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "fssam/errors.hpp"
#include "fssam/eval.hpp"
#include "fssam/lora.hpp"

namespace fssam::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

ordered_json train_defaults(const TrainConfig& t) {
    ordered_json j;
    j["epochs"] = t.epochs;
    j["lr"] = t.lr;
    j["batch"] = t.batch;
    j["beta1"] = t.beta1;
    j["beta2"] = t.beta2;
    j["weight_decay"] = t.weight_decay;
    j["eps"] = t.eps;
    j["lr_min"] = t.lr_min;
    j["w_bce"] = t.w_bce;
    j["w_dice"] = t.w_dice;
    j["episodes_per_epoch"] = t.episodes_per_epoch;
    j["patience"] = t.patience;
    j["train_k"] = t.train_k;
    j["val_episodes"] = t.val_episodes;
    j["jobs"] = t.jobs;
    return j;
}

void overlay(ordered_json& base, const json& over, const std::string& where) {
    if (!over.is_object()) throw ConfigError(where.empty() ? "config must be a JSON object" : where + " must be an object");
    for (const auto& [key, value] : over.items()) {
        const std::string path = where.empty() ? key : where + "." + key;
        if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
        auto& slot = base[key];
        if (slot.is_object()) {
            overlay(slot, value, path);
        } else if (slot.is_number_unsigned() || (slot.is_number_integer() && !slot.is_number_float())) {
            if (!value.is_number_integer()) throw ConfigError("'" + path + "' must be an integer");
            if (slot.is_number_unsigned() && value.get<std::int64_t>() < 0) {
                throw ConfigError("'" + path + "' must be non-negative");
            }
            slot = value;
        } else if (slot.is_number()) {
            if (!value.is_number()) throw ConfigError("'" + path + "' must be a number");
            slot = value.get<double>();
        } else if (slot.is_string()) {
            if (!value.is_string()) throw ConfigError("'" + path + "' must be a string");
            slot = value;
        } else {
            slot = value;
        }
    }
}

TrainConfig train_from(const ordered_json& j, std::uint64_t seed) {
    TrainConfig t;
    t.epochs = j.at("epochs").get<std::size_t>();
    t.lr = j.at("lr").get<double>();
    t.batch = j.at("batch").get<std::size_t>();
    t.beta1 = j.at("beta1").get<double>();
    t.beta2 = j.at("beta2").get<double>();
    t.weight_decay = j.at("weight_decay").get<double>();
    t.eps = j.at("eps").get<double>();
    t.lr_min = j.at("lr_min").get<double>();
    t.w_bce = j.at("w_bce").get<double>();
    t.w_dice = j.at("w_dice").get<double>();
    t.episodes_per_epoch = j.at("episodes_per_epoch").get<std::size_t>();
    t.patience = j.at("patience").get<std::size_t>();
    t.train_k = j.at("train_k").get<std::size_t>();
    t.val_episodes = j.at("val_episodes").get<std::size_t>();
    t.jobs = j.at("jobs").get<std::size_t>();
    t.seed = seed;
    t.validate();
    return t;
}

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IngestionError("cannot read config " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw IngestionError("cannot write " + path.string());
}

Checkpoint read_checkpoint(const fs::path& path) {
    if (path.empty()) throw ConfigError("--ckpt is required");
    if (!fs::exists(path)) throw IngestionError("checkpoint not found: " + path.string());
    return load_checkpoint(path);
}

std::string fold_tag(const RunConfig& c) { return "fold" + std::to_string(c.fold); }

SyntheticConfig synth_for_model(SyntheticConfig s, const ModelConfig& m) {
    s.image_size = m.image_size;
    return s;
}

/// Test-time images come from their own stream so they never coincide with
/// the training episodes.
DatasetIndex synthetic_test_index(const RunConfig& c, const ModelConfig& m, int background_id) {
    SyntheticConfig s = synth_for_model(c.synth, m);
    s.seed = derive_seed(c.synth.seed, 0x7e57);
    s.background_id = background_id;
    return build_synthetic_dataset(s, c.folds().test_classes(static_cast<std::size_t>(c.fold)));
}

// Commands.

int cmd_synth(const RunConfig& c) {
    SyntheticConfig s = synth_for_model(c.synth, c.model);
    s.validate();
    const fs::path root = output_path(c.out, "dataset");
    const DatasetIndex index = build_synthetic_dataset(s, s.class_ids());
    write_dataset(root, index);
    std::printf("wrote %zu images of %zu classes to %s\n", index.size(), s.n_classes(), root.string().c_str());
    return kExitOk;
}

struct LogFile {
    std::ofstream out;
    std::size_t lines = 0;

    void write(const std::string& line) {
        out << line << '\n';
        out.flush();
        ++lines;
        std::printf("%s\n", line.c_str());
        std::fflush(stdout);
    }
};

int cmd_pretrain(const RunConfig& c) {
    c.model.validate();
    const SyntheticConfig s = synth_for_model(c.synth, c.model);
    const auto classes = c.folds().train_classes(static_cast<std::size_t>(c.fold));
    LogFile log{std::ofstream(output_path(c.out, "pretrain_" + fold_tag(c) + ".log.jsonl"))};
    const auto result = pretrain_base(Model(c.model, c.seed), s, classes, c.pretrain,
                                      [&](const LogRecord& r) { log.write(log_record_json(r)); });
    const fs::path path = output_path(c.out, "pretrain_" + fold_tag(c) + ".ckpt");
    save_checkpoint(path, result.checkpoint);
    std::printf("checkpoint %s (epoch %ld)\n", path.string().c_str(), result.checkpoint.epoch);
    return kExitOk;
}

int cmd_metatrain(const RunConfig& c) {
    const lora::Strategy strategy = lora::parse_strategy(c.strategy);
    const Checkpoint input = read_checkpoint(c.ckpt);
    const ModelConfig& m = input.model.config();
    const SyntheticConfig s = synth_for_model(c.synth, m);
    const auto folds = c.folds();
    const auto train = folds.train_classes(static_cast<std::size_t>(c.fold));
    const auto& val = folds.test_classes(static_cast<std::size_t>(c.fold));

    // Trainable count is known before training starts; select on a scratch copy.
    Model scratch = input.model;
    std::size_t trainable = 0;
    if (strategy != lora::Strategy::none) {
        for (const auto& n : lora::select_trainable(scratch, strategy, c.metatrain.seed)) trainable += scratch.tensor(n).numel();
    }
    const std::string stem = "metatrain_" + c.strategy + "_" + fold_tag(c);
    LogFile log{std::ofstream(output_path(c.out, stem + ".log.jsonl"))};
    ordered_json header;
    header["stage"] = "metatrain";
    header["strategy"] = c.strategy;
    header["trainable_params"] = trainable;
    header["fold"] = c.fold;
    header["seed"] = c.seed;
    log.write(header.dump());

    auto result = meta_train(input.model, strategy, s, train, val, c.metatrain,
                             [&](const LogRecord& r) { log.write(log_record_json(r)); });
    const fs::path path = output_path(c.out, stem + ".ckpt");
    save_checkpoint(path, strategy == lora::Strategy::none ? input : result.checkpoint);
    std::printf("checkpoint %s\n", path.string().c_str());
    return kExitOk;
}

int cmd_eval(const RunConfig& c) {
    if (c.mode != "standard" && c.mode != "identity" && c.mode != "shift") {
        throw ConfigError("unknown mode '" + c.mode + "' (standard, identity, shift)");
    }
    const Checkpoint ckpt = read_checkpoint(c.ckpt);
    const ModelConfig& m = ckpt.model.config();
    const auto folds = c.folds();
    FoldEval spec;
    spec.fold = c.fold;
    spec.classes = folds.test_classes(static_cast<std::size_t>(c.fold));
    spec.k = c.k;
    spec.n_episodes = c.episodes;
    spec.sampler = c.sampler;
    spec.seed = c.seed;
    spec.jobs = c.jobs;
    const Predictor predict = ckpt.oracle ? oracle_predictor() : model_predictor(ckpt.model);

    MetricsReport report;
    if (c.mode == "shift") {
        const DatasetIndex shifted = synthetic_test_index(c, m, c.synth.background_id + 1);
        report = evaluate_domain_shift(predict, folds.train_classes(static_cast<std::size_t>(c.fold)), shifted, spec);
    } else {
        DatasetIndex index;
        if (!c.data.empty()) {
            if (!fs::is_directory(c.data)) throw IngestionError("dataset not found: " + c.data.string());
            index = load_dataset(c.data);
        } else {
            index = synthetic_test_index(c, m, c.synth.background_id);
        }
        report = c.mode == "identity" ? evaluate_identity_support(predict, index, spec)
                                      : evaluate_fold(predict, index, spec);
    }
    const std::string stem = "eval_" + c.mode + "_" + fold_tag(c) + "_k" + std::to_string(c.k);
    write_text(output_path(c.out, stem + ".json"), report_to_json(report));
    write_text(output_path(c.out, stem + ".csv"), report_to_csv(report));
    for (const auto& w : report.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
    const auto value = miou(report);
    if (value) {
        std::printf("mIoU %.4f\n", *value);
    } else {
        std::printf("mIoU undefined\n");
    }
    return kExitOk;
}

int cmd_merge(const RunConfig& c) {
    Checkpoint ckpt = read_checkpoint(c.ckpt);
    const fs::path path = output_path(c.out, c.ckpt.stem().string() + "_merged.ckpt");
    if (ckpt.model.merged() || ckpt.model.adapted_layers().empty()) {
        std::fprintf(stderr, "notice: %s has no separate adapters; written unchanged\n", c.ckpt.string().c_str());
    } else {
        ckpt.model.merge_adapters();
    }
    save_checkpoint(path, ckpt);
    std::printf("checkpoint %s (%zu parameters)\n", path.string().c_str(), ckpt.model.param_count());
    return kExitOk;
}

int cmd_verify(bool mutate_dice) {
    set_dice_mutation(mutate_dice);
    const auto results = run_verify_checks(true);
    set_dice_mutation(false);
    std::size_t failed = 0;
    for (const auto& r : results) failed += !r.passed;
    std::printf("%zu checks, %zu failed\n", results.size(), failed);
    return failed ? kExitCheckFailed : kExitOk;
}

}  // namespace

FoldSpec RunConfig::folds() const {
    if (fold < 0 || static_cast<std::size_t>(fold) >= n_folds) {
        throw ConfigError("fold " + std::to_string(fold) + " outside 0.." + std::to_string(n_folds) + "-1");
    }
    return make_folds(synth.class_ids(), n_folds);
}

ordered_json default_config_json() {
    const RunConfig d;
    ordered_json j;
    j["seed"] = d.seed;
    j["fold"] = d.fold;
    j["n_folds"] = d.n_folds;
    j["K"] = d.k;
    j["strategy"] = d.strategy;
    j["mode"] = d.mode;
    j["sampler"] = std::string(sampler_name(d.sampler));
    j["jobs"] = d.jobs;
    j["episodes"] = d.episodes;
    j["out"] = d.out.string();
    j["data"] = d.data.string();
    j["ckpt"] = d.ckpt.string();
    ordered_json m;
    m["image_size"] = d.model.image_size;
    m["patch"] = d.model.patch;
    m["d_model"] = d.model.d_model;
    m["enc_depth"] = d.model.enc_depth;
    m["n_heads"] = d.model.n_heads;
    m["mem_depth"] = d.model.mem_depth;
    m["d_mem"] = d.model.d_mem;
    j["model"] = m;
    ordered_json s;
    s["n_shapes"] = d.synth.n_shapes;
    s["n_textures"] = d.synth.n_textures;
    s["clutter"] = d.synth.clutter;
    s["background_id"] = d.synth.background_id;
    s["images_per_class"] = d.synth.images_per_class;
    s["seed"] = d.synth.seed;
    j["synth"] = s;
    j["pretrain"] = train_defaults(d.pretrain);
    j["metatrain"] = train_defaults(d.metatrain);
    return j;
}

RunConfig resolve_config(const json& overrides) {
    ordered_json j = default_config_json();
    overlay(j, overrides, "");
    RunConfig c;
    try {
        c.seed = j.at("seed").get<std::uint64_t>();
        c.fold = j.at("fold").get<int>();
        c.n_folds = j.at("n_folds").get<std::size_t>();
        c.k = j.at("K").get<std::size_t>();
        c.strategy = j.at("strategy").get<std::string>();
        c.mode = j.at("mode").get<std::string>();
        c.sampler = parse_sampler(j.at("sampler").get<std::string>());
        c.jobs = j.at("jobs").get<std::size_t>();
        c.episodes = j.at("episodes").get<std::size_t>();
        c.out = j.at("out").get<std::string>();
        c.data = j.at("data").get<std::string>();
        c.ckpt = j.at("ckpt").get<std::string>();
        const auto& m = j.at("model");
        c.model.image_size = m.at("image_size").get<std::size_t>();
        c.model.patch = m.at("patch").get<std::size_t>();
        c.model.d_model = m.at("d_model").get<std::size_t>();
        c.model.enc_depth = m.at("enc_depth").get<std::size_t>();
        c.model.n_heads = m.at("n_heads").get<std::size_t>();
        c.model.mem_depth = m.at("mem_depth").get<std::size_t>();
        c.model.d_mem = m.at("d_mem").get<std::size_t>();
        const auto& s = j.at("synth");
        c.synth.n_shapes = s.at("n_shapes").get<std::size_t>();
        c.synth.n_textures = s.at("n_textures").get<std::size_t>();
        c.synth.clutter = s.at("clutter").get<std::size_t>();
        c.synth.background_id = s.at("background_id").get<int>();
        c.synth.images_per_class = s.at("images_per_class").get<std::size_t>();
        c.synth.seed = s.at("seed").get<std::uint64_t>();
        c.synth.image_size = c.model.image_size;
        c.pretrain = train_from(j.at("pretrain"), derive_seed(c.seed, 11));
        c.metatrain = train_from(j.at("metatrain"), derive_seed(c.seed, 12));
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    if (c.k == 0) throw ConfigError("K must be positive");
    if (c.jobs == 0) throw ConfigError("jobs must be positive");
    if (c.out.empty()) throw ConfigError("out must not be empty");
    c.synth.validate();
    return c;
}

fs::path output_path(const fs::path& out, const std::string& name) {
    const fs::path rel = fs::path(name).lexically_normal();
    if (name.empty() || rel.is_absolute() || rel.has_root_path() || *rel.begin() == "..") {
        throw ConfigError("output name '" + name + "' escapes the output directory");
    }
    fs::create_directories(out);
    return out / rel;
}

int run(const std::vector<std::string>& args) {
    CLI::App app{"Few-shot segmentation with memory attention and low-rank adapters", "fssam"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<int> fold;
    std::optional<std::size_t> k, jobs, episodes;
    std::optional<std::string> strategy, ckpt, out, mode;
    std::string mutate;
    app.add_option("--config", config_path, "JSON run configuration");
    app.add_option("--seed", seed, "Global seed");
    app.add_option("--fold", fold, "Fold whose classes are held out");
    app.add_option("--K", k, "Support images per episode");
    app.add_option("--strategy", strategy, "Meta-training strategy");
    app.add_option("--ckpt", ckpt, "Input checkpoint");
    app.add_option("--out", out, "Output directory");
    app.add_option("--mode", mode, "Evaluation mode: standard, identity or shift");
    app.add_option("--jobs", jobs, "Evaluation threads");
    app.add_option("--episodes", episodes, "Evaluation episodes");

    auto* synth = app.add_subcommand("synth", "Write a synthetic dataset");
    auto* pretrain = app.add_subcommand("pretrain", "Train every parameter on video-like episodes");
    auto* metatrain = app.add_subcommand("metatrain", "Meta-train the parameters selected by --strategy");
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the held-out fold");
    auto* merge = app.add_subcommand("merge", "Fold adapters into their base weights");
    auto* verify = app.add_subcommand("verify", "Run the invariant checks");
    verify->add_option("--mutate", mutate, "Inject a fault (dice) to exercise the checks")
        ->check(CLI::IsMember({"dice"}));

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (verify->parsed()) return cmd_verify(mutate == "dice");
        json overrides = json::object();
        if (!config_path.empty()) overrides = read_json_file(config_path);
        if (seed) overrides["seed"] = *seed;
        if (fold) overrides["fold"] = *fold;
        if (k) overrides["K"] = *k;
        if (jobs) overrides["jobs"] = *jobs;
        if (episodes) overrides["episodes"] = *episodes;
        if (strategy) overrides["strategy"] = *strategy;
        if (ckpt) overrides["ckpt"] = *ckpt;
        if (out) overrides["out"] = *out;
        if (mode) overrides["mode"] = *mode;
        const RunConfig c = resolve_config(overrides);

        if (synth->parsed()) return cmd_synth(c);
        if (pretrain->parsed()) return cmd_pretrain(c);
        if (metatrain->parsed()) return cmd_metatrain(c);
        if (eval->parsed()) return cmd_eval(c);
        if (merge->parsed()) return cmd_merge(c);
    } catch (const TrainingError& e) {
        std::fprintf(stderr, "error: %s (step %ld)\n", e.what(), e.step());
        return kExitTraining;
    } catch (const IngestionError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNoInput;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const ProtocolError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitTraining;
    }
    return kExitUsage;
}

}  // namespace fssam::cli
