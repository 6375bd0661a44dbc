// Command-line front end: synth, train, eval, ablate, grid, predict.

#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "simclip/datastore.hpp"
#include "simclip/errors.hpp"
#include "simclip/harness.hpp"
#include "simclip/model.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace simclip;

namespace {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumeric = 4 };

struct TrainFlags {
    std::string manifest;
    std::string config_file;
    std::optional<std::string> variant;
    std::optional<std::size_t> batch_size;
    std::optional<std::size_t> epochs;
    std::optional<std::uint64_t> seed;
    std::string out = ".";
};

void add_train_flags(CLI::App* cmd, TrainFlags& f, bool with_variant = true) {
    cmd->add_option("--manifest", f.manifest, "Dataset manifest JSON")->required();
    cmd->add_option("--config", f.config_file, "JSON file with TrainConfig fields");
    if (with_variant) {
        cmd->add_option("--variant", f.variant, "Fusion variant")->check(CLI::IsMember({"cat", "cat-diff", "cat-prod", "full"}));
    }
    cmd->add_option("--batch-size", f.batch_size, "Batch size")->check(CLI::IsMember({64, 32, 16}));
    cmd->add_option("--epochs", f.epochs, "Training epochs")->check(CLI::PositiveNumber);
    cmd->add_option("--seed", f.seed, "Random seed");
    cmd->add_option("--out", f.out, "Output directory");
}

harness::TrainConfig resolve_config(const TrainFlags& f) {
    harness::TrainConfig config;
    if (!f.config_file.empty()) {
        std::ifstream in(f.config_file);
        json j;
        try {
            in >> j;
        } catch (const json::exception& e) {
            throw ConfigError(f.config_file + ": " + e.what());
        }
        config = j.get<harness::TrainConfig>();
    }
    if (f.variant) config.variant = model::parse_variant(*f.variant);
    if (f.batch_size) config.batch_size = *f.batch_size;
    if (f.epochs) config.epochs = *f.epochs;
    if (f.seed) config.seed = *f.seed;
    config.validate();
    return config;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw DataError("cannot write " + path.string());
}

int run_synth(const data::SynthSpec& spec, const std::string& out) {
    const auto manifest = data::write_dataset(data::synth_dataset(spec), out);
    std::cout << manifest.string() << '\n';
    return kOk;
}

int run_train(const TrainFlags& f, const std::string& checkpoint) {
    const auto config = resolve_config(f);
    const auto experiment = harness::Experiment::load(f.manifest);
    auto result = harness::train(experiment, config);
    const fs::path out = f.out;
    const fs::path ckpt = checkpoint.empty() ? out / "model.ckpt" : fs::path(checkpoint);
    fs::create_directories(out);
    if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
    model::save_checkpoint(result.model, ckpt);
    write_text(out / "run.json", json(result.record).dump(2) + "\n");
    const auto split = experiment.report_split();
    std::cout << json(result.record.reports.at(split)).dump(2) << '\n';
    std::cerr << "checkpoint: " << ckpt.string() << "\nreport split: " << split << '\n';
    return kOk;
}

int run_eval(const std::string& manifest, const std::string& checkpoint, std::string split, const std::string& out) {
    const auto net = model::load_checkpoint(checkpoint);
    const auto experiment = harness::Experiment::load(manifest);
    if (split.empty()) split = experiment.report_split();
    const auto report = harness::evaluate(net, experiment, split);
    const std::string text = json(report).dump(2) + "\n";
    if (!out.empty()) write_text(fs::path(out) / ("eval_" + split + ".json"), text);
    std::cout << text;
    return kOk;
}

int run_ablate(const TrainFlags& f) {
    const auto config = resolve_config(f);
    const auto experiment = harness::Experiment::load(f.manifest);
    const auto runs = harness::ablate(experiment, config);
    const auto split = experiment.report_split();
    const auto table = harness::format_ablation_table(runs, split);
    write_text(fs::path(f.out) / "ablation.txt", table);
    write_text(fs::path(f.out) / "ablation.json", harness::ablation_json(runs, split).dump(2) + "\n");
    std::cout << "split: " << split << '\n' << table;
    for (const auto& r : runs)
        if (!r.ok()) return kFailure;
    return kOk;
}

int run_grid(const TrainFlags& f) {
    const auto config = resolve_config(f);
    const auto experiment = harness::Experiment::load(f.manifest);
    const auto grid = harness::hyperparameter_grid(experiment, config);
    const json log{{"runs", grid.runs}, {"best", grid.best}};
    write_text(fs::path(f.out) / "grid.json", log.dump(2) + "\n");
    for (std::size_t i = 0; i < grid.runs.size(); ++i) {
        const auto& r = grid.runs[i];
        std::cout << (i == grid.best ? "* " : "  ") << "batch_size=" << r.config.batch_size
                  << " lr=" << r.config.learning_rate();
        if (!r.ok()) {
            std::cout << " failed: " << *r.error << '\n';
            continue;
        }
        for (const auto& t : r.reports.at("val").tasks) std::cout << ' ' << t.name << ".val_macro_f1=" << t.macro_f1;
        std::cout << '\n';
    }
    return kOk;
}

int run_predict(const std::string& checkpoint, const std::string& embeddings, const std::string& out) {
    const auto net = model::load_checkpoint(checkpoint);
    const fs::path path = out;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    harness::predict(net, embeddings, path);
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"SimCLIP fusion head: training, ablation and evaluation over stored CLIP embeddings"};
    app.require_subcommand(1);

    data::SynthSpec synth;
    std::string synth_kind = "multiclass", synth_interaction = "dot_sign", synth_out;
    auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic dataset with train/val/test splits");
    synth_cmd->add_option("--out", synth_out, "Output directory")->required();
    synth_cmd->add_option("--n", synth.n, "Record count")->check(CLI::PositiveNumber);
    synth_cmd->add_option("--dim", synth.dim, "Embedding width")->check(CLI::PositiveNumber);
    synth_cmd->add_option("--seed", synth.seed, "Generator seed");
    synth_cmd->add_option("--kind", synth_kind, "Task kind")->check(CLI::IsMember({"multiclass", "multilabel"}));
    synth_cmd->add_option("--interaction", synth_interaction, "Label rule")
        ->check(CLI::IsMember({"dot_sign", "modality_only"}));
    synth_cmd->add_option("--positive-fraction", synth.positive_fraction, "Share of positive labels")
        ->check(CLI::Range(0.0, 1.0));

    TrainFlags train_flags;
    std::string checkpoint;
    auto* train_cmd = app.add_subcommand("train", "Train one model and write a checkpoint plus run.json");
    add_train_flags(train_cmd, train_flags);
    train_cmd->add_option("--checkpoint", checkpoint, "Checkpoint path (default OUT/model.ckpt)");

    std::string eval_manifest, eval_split, eval_out;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
    eval_cmd->add_option("--manifest", eval_manifest, "Dataset manifest JSON")->required();
    eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate")->required();
    eval_cmd->add_option("--split", eval_split, "Split name (default: test, else val)");
    eval_cmd->add_option("--out", eval_out, "Directory for the report JSON");

    TrainFlags ablate_flags;
    auto* ablate_cmd = app.add_subcommand("ablate", "Train all four fusion variants and tabulate them");
    add_train_flags(ablate_cmd, ablate_flags, false);

    TrainFlags grid_flags;
    auto* grid_cmd = app.add_subcommand("grid", "Search batch sizes 64, 32, 16 and select by validation F1");
    add_train_flags(grid_cmd, grid_flags);

    std::string embeddings, predict_out;
    auto* predict_cmd = app.add_subcommand("predict", "Write per-record probabilities as JSON lines");
    predict_cmd->add_option("--checkpoint", checkpoint, "Checkpoint")->required();
    predict_cmd->add_option("--embeddings", embeddings, "SCEB1 embedding file")->required();
    predict_cmd->add_option("--out", predict_out, "Output JSONL path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    try {
        if (*synth_cmd) {
            synth.kind = data::parse_task_kind(synth_kind);
            synth.interaction = data::parse_interaction(synth_interaction);
            return run_synth(synth, synth_out);
        }
        if (*train_cmd) return run_train(train_flags, checkpoint);
        if (*eval_cmd) return run_eval(eval_manifest, checkpoint, eval_split, eval_out);
        if (*ablate_cmd) return run_ablate(ablate_flags);
        if (*grid_cmd) return run_grid(grid_flags);
        if (*predict_cmd) return run_predict(checkpoint, embeddings, predict_out);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return kNumeric;
    } catch (const Error& e) {
        const bool data_like = dynamic_cast<const DataError*>(&e) || dynamic_cast<const FormatError*>(&e) ||
                               dynamic_cast<const DimensionError*>(&e) || dynamic_cast<const UndefinedMetric*>(&e);
        std::cerr << (data_like ? "data error: " : "error: ") << e.what() << '\n';
        return data_like ? kData : kFailure;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kData;
    }
    return kFailure;
}
