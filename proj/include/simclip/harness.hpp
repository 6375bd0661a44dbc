#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "simclip/datastore.hpp"
#include "simclip/metrics.hpp"
#include "simclip/model.hpp"
#include "simclip/ndgrad.hpp"
#include "simclip/objective.hpp"

namespace simclip::harness {

namespace fs = std::filesystem;

inline constexpr std::array<std::size_t, 3> kGridBatchSizes = {64, 32, 16};

/// Learning rate scaled to batch size: 1e-4 at 64, 5e-5 at 32, 2.5e-5 at 16.
double derived_lr(std::size_t batch_size);

/// Linear ramp from 0 over ceil(warmup_fraction * total_steps) steps, then
/// constant base_lr.
double lr_schedule(std::size_t step, std::size_t total_steps, double base_lr, double warmup_fraction);

struct TrainConfig {
    std::size_t batch_size = 64;
    std::optional<double> base_lr;  // derived from batch_size when unset
    std::size_t epochs = 10;
    double warmup_fraction = 0.1;
    double dropout = 0.2;
    std::size_t hidden = 128;
    std::size_t proj_dim = 0;  // 0: same as the embedding dim
    std::uint64_t seed = 0;
    model::FusionVariant variant = model::FusionVariant::full;
    nd::AdamConfig adam;
    bool class_weighting = true;

    double learning_rate() const { return base_lr ? *base_lr : derived_lr(batch_size); }
    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Missing fields keep their defaults, so partial config files are accepted.
void from_json(const nlohmann::json& j, TrainConfig& c);

/// A manifest with every split loaded, plus content hashes of its files.
struct Experiment {
    data::DatasetManifest manifest;
    std::map<std::string, data::Dataset> splits;
    std::map<std::string, std::string> input_hashes;  // relative file name -> sha256

    static Experiment load(const fs::path& manifest_path);
    const data::Dataset& split(const std::string& name) const;
    /// "test" when labeled test data exists, otherwise "val", otherwise "train".
    std::string report_split() const;
};

struct EpochLog {
    double total = 0.0;
    std::vector<double> components;  // per task, schema order
};

struct RunRecord {
    TrainConfig config;
    std::string dataset;
    std::vector<EpochLog> epochs;
    double initial_train_loss = 0.0;
    double final_train_loss = 0.0;
    std::map<std::string, metrics::EvalReport> reports;  // by split name
    double wall_seconds = 0.0;
    std::map<std::string, std::string> input_hashes;
    std::string batch_hash;      // sha256 over every epoch's batch index sequence
    std::string parameter_hash;  // sha256 over final parameters
    std::optional<std::string> error;

    bool ok() const noexcept { return !error.has_value(); }
};

void to_json(nlohmann::json& j, const RunRecord& r);
void from_json(const nlohmann::json& j, RunRecord& r);

struct TrainResult {
    model::SimClip model;
    RunRecord record;
};

model::ModelConfig model_config(const data::DatasetManifest& manifest, const TrainConfig& config);

/// Loss weights per task derived from the train split: inverse-frequency class
/// weights for multiclass heads, capped neg/pos ratios for multilabel heads.
/// With weighting disabled every weight is 1.
std::vector<std::vector<double>> task_weights(const data::DatasetManifest& manifest, const data::Dataset& train,
                                              bool class_weighting);

/// Summed head losses for `rows` of `dataset`.
objective::LossBundle batch_loss(nd::Tape& tape, const model::HeadOutput& logits, const data::DatasetManifest& manifest,
                                 const data::Dataset& dataset, std::span<const std::size_t> rows,
                                 const std::vector<std::vector<double>>& weights);

/// Eval-mode loss over a whole split.
double dataset_loss(const model::SimClip& model, const data::DatasetManifest& manifest, const data::Dataset& dataset,
                    const std::vector<std::vector<double>>& weights);

/// Fixed-epoch training, final-epoch weights, no early stopping. Throws
/// NumericError naming the step and component losses on a non-finite loss.
TrainResult train(const Experiment& experiment, const TrainConfig& config);

metrics::EvalReport evaluate(const model::SimClip& model, const data::Dataset& dataset);
metrics::EvalReport evaluate(const model::SimClip& model, const Experiment& experiment, const std::string& split);

/// One run per fusion variant with identical seed and data. A failing variant
/// yields a record with `error` set rather than aborting the grid.
std::vector<RunRecord> ablate(const Experiment& experiment, const TrainConfig& base);

/// Plain-text table: one row per variant, F1 / accuracy / AUROC per task.
std::string format_ablation_table(std::span<const RunRecord> runs, const std::string& split);
nlohmann::json ablation_json(std::span<const RunRecord> runs, const std::string& split);

struct GridResult {
    std::vector<RunRecord> runs;
    std::size_t best = 0;
};

/// Index of the best successful run by validation macro F1 (mean over tasks),
/// then validation AUROC, then smaller batch size.
std::size_t select_best(std::span<const RunRecord> runs);

/// Batch sizes {64, 32, 16} with derived learning rates.
GridResult hyperparameter_grid(const Experiment& experiment, const TrainConfig& base);

/// Writes one JSON line per record: id plus per-task probabilities and decision.
void predict(const model::SimClip& model, const fs::path& embeddings, const fs::path& out);

}  // namespace simclip::harness
