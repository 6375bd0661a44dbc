#include "simclip/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "byteio.hpp"
#include "simclip/errors.hpp"
#include "simclip/hash.hpp"

namespace simclip::harness {

using nlohmann::json;

// Recipe -------------------------------------------------------------------

double derived_lr(std::size_t batch_size) {
    switch (batch_size) {
        case 64: return 1e-4;
        case 32: return 5e-5;
        case 16: return 2.5e-5;
        default: break;
    }
    throw ConfigError("batch size must be one of 64, 32, 16 to derive a learning rate, got " + std::to_string(batch_size));
}

double lr_schedule(std::size_t step, std::size_t total_steps, double base_lr, double warmup_fraction) {
    // The epsilon keeps e.g. 0.1 * 100 from rounding up to 11 warmup steps.
    const auto warmup = static_cast<std::size_t>(
        std::max(0.0, std::ceil(warmup_fraction * static_cast<double>(total_steps) - 1e-9)));
    if (step < warmup) return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
    return base_lr;
}

void TrainConfig::validate() const {
    if (std::find(kGridBatchSizes.begin(), kGridBatchSizes.end(), batch_size) == kGridBatchSizes.end()) {
        throw ConfigError("batch_size must be one of 64, 32, 16, got " + std::to_string(batch_size));
    }
    if (base_lr && !(*base_lr > 0.0)) throw ConfigError("base_lr must be positive");
    if (epochs == 0) throw ConfigError("epochs must be at least 1");
    if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) throw ConfigError("warmup_fraction must lie in [0, 1]");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    if (hidden == 0) throw ConfigError("hidden must be positive");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0) || !(adam.eps > 0.0)) {
        throw ConfigError("adam betas must lie in [0, 1) and eps must be positive");
    }
}

void to_json(json& j, const TrainConfig& c) {
    j = json{{"batch_size", c.batch_size},
             {"base_lr", c.base_lr ? json(*c.base_lr) : json(nullptr)},
             {"learning_rate", c.learning_rate()},
             {"epochs", c.epochs},
             {"warmup_fraction", c.warmup_fraction},
             {"dropout", c.dropout},
             {"hidden", c.hidden},
             {"proj_dim", c.proj_dim},
             {"seed", c.seed},
             {"variant", model::to_string(c.variant)},
             {"adam_beta1", c.adam.beta1},
             {"adam_beta2", c.adam.beta2},
             {"adam_eps", c.adam.eps},
             {"class_weighting", c.class_weighting}};
}

void from_json(const json& j, TrainConfig& c) {
    try {
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) j.at(key).get_to(field);
        };
        get("batch_size", c.batch_size);
        if (j.contains("base_lr")) {
            if (j.at("base_lr").is_null()) c.base_lr.reset();
            else c.base_lr = j.at("base_lr").get<double>();
        }
        get("epochs", c.epochs);
        get("warmup_fraction", c.warmup_fraction);
        get("dropout", c.dropout);
        get("hidden", c.hidden);
        get("proj_dim", c.proj_dim);
        get("seed", c.seed);
        if (j.contains("variant")) c.variant = model::parse_variant(j.at("variant").get<std::string>());
        get("adam_beta1", c.adam.beta1);
        get("adam_beta2", c.adam.beta2);
        get("adam_eps", c.adam.eps);
        get("class_weighting", c.class_weighting);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("train config: ") + e.what());
    }
}

// Experiment ---------------------------------------------------------------

Experiment Experiment::load(const fs::path& manifest_path) {
    Experiment e;
    e.manifest = data::load_manifest(manifest_path);
    e.input_hashes[manifest_path.filename().string()] = sha256_file(manifest_path);
    for (const auto& [name, files] : e.manifest.splits) {
        e.splits.emplace(name, data::load_split(e.manifest, name));
        for (const auto& f : {files.embeddings, files.labels}) {
            e.input_hashes[f.generic_string()] = sha256_file(e.manifest.resolve(f));
        }
    }
    return e;
}

const data::Dataset& Experiment::split(const std::string& name) const {
    const auto it = splits.find(name);
    if (it == splits.end()) throw DataError("dataset '" + manifest.name + "' has no split '" + name + "'");
    return it->second;
}

std::string Experiment::report_split() const {
    for (const char* name : {"test", "val"}) {
        const auto it = splits.find(name);
        if (it != splits.end() && it->second.size() > 0) return name;
    }
    return "train";
}

// Run records --------------------------------------------------------------

void to_json(json& j, const RunRecord& r) {
    json epochs = json::array();
    for (const auto& e : r.epochs) epochs.push_back({{"total", e.total}, {"components", e.components}});
    json reports = json::object();
    for (const auto& [split, report] : r.reports) reports[split] = report;
    j = json{{"config", r.config},
             {"dataset", r.dataset},
             {"epochs", std::move(epochs)},
             {"initial_train_loss", r.initial_train_loss},
             {"final_train_loss", r.final_train_loss},
             {"reports", std::move(reports)},
             {"wall_seconds", r.wall_seconds},
             {"input_hashes", r.input_hashes},
             {"batch_hash", r.batch_hash},
             {"parameter_hash", r.parameter_hash},
             {"error", r.error ? json(*r.error) : json(nullptr)}};
}

void from_json(const json& j, RunRecord& r) {
    r.config = j.at("config").get<TrainConfig>();
    r.dataset = j.at("dataset").get<std::string>();
    r.epochs.clear();
    for (const auto& e : j.at("epochs")) {
        r.epochs.push_back({e.at("total").get<double>(), e.at("components").get<std::vector<double>>()});
    }
    r.initial_train_loss = j.at("initial_train_loss").get<double>();
    r.final_train_loss = j.at("final_train_loss").get<double>();
    r.reports.clear();
    for (const auto& [split, report] : j.at("reports").items()) r.reports[split] = report.get<metrics::EvalReport>();
    r.wall_seconds = j.at("wall_seconds").get<double>();
    r.input_hashes = j.at("input_hashes").get<std::map<std::string, std::string>>();
    r.batch_hash = j.at("batch_hash").get<std::string>();
    r.parameter_hash = j.at("parameter_hash").get<std::string>();
    if (j.at("error").is_null()) r.error.reset();
    else r.error = j.at("error").get<std::string>();
}

// Losses -------------------------------------------------------------------

model::ModelConfig model_config(const data::DatasetManifest& manifest, const TrainConfig& config) {
    model::ModelConfig mc;
    mc.input_dim = manifest.dim;
    mc.proj_dim = config.proj_dim;
    mc.hidden_dim = config.hidden;
    mc.dropout_rate = config.dropout;
    mc.variant = config.variant;
    mc.tasks = manifest.tasks;
    return mc;
}

std::vector<std::vector<double>> task_weights(const data::DatasetManifest& manifest, const data::Dataset& train,
                                              bool class_weighting) {
    std::vector<std::vector<double>> out;
    for (std::size_t t = 0; t < manifest.tasks.size(); ++t) {
        const auto& task = manifest.tasks[t];
        if (!class_weighting) {
            out.emplace_back(task.outputs(), 1.0);
        } else if (task.kind == data::TaskKind::multiclass) {
            out.push_back(objective::compute_class_weights(data::class_counts(train, t, task.outputs())).weights);
        } else {
            out.push_back(objective::compute_pos_weights(train.targets[t].bits, task.outputs()));
        }
    }
    return out;
}

objective::LossBundle batch_loss(nd::Tape& tape, const model::HeadOutput& logits, const data::DatasetManifest& manifest,
                                 const data::Dataset& dataset, std::span<const std::size_t> rows,
                                 const std::vector<std::vector<double>>& weights) {
    std::vector<nd::Tensor> terms;
    std::vector<std::string> ids;
    ids.reserve(rows.size());
    for (std::size_t r : rows) ids.push_back(dataset.ids[r]);
    for (std::size_t t = 0; t < manifest.tasks.size(); ++t) {
        const auto& task = manifest.tasks[t];
        const auto& targets = dataset.targets[t];
        if (task.kind == data::TaskKind::multiclass) {
            std::vector<std::size_t> y;
            y.reserve(rows.size());
            for (std::size_t r : rows) y.push_back(targets.classes[r]);
            terms.push_back(objective::weighted_cce(tape, logits[t], y, weights[t], ids));
        } else {
            const std::size_t m = task.outputs();
            std::vector<std::uint8_t> y;
            y.reserve(rows.size() * m);
            for (std::size_t r : rows) {
                const auto first = targets.bits.begin() + static_cast<std::ptrdiff_t>(r * m);
                y.insert(y.end(), first, first + static_cast<std::ptrdiff_t>(m));
            }
            terms.push_back(objective::multilabel_bce(tape, logits[t], y, weights[t]));
        }
    }
    return objective::total_loss(tape, std::move(terms));
}

namespace {

constexpr std::size_t kEvalChunk = 512;

template <typename Fn>
void for_each_chunk(std::size_t n, Fn&& fn) {
    std::vector<std::size_t> rows;
    for (std::size_t start = 0; start < n; start += kEvalChunk) {
        rows.resize(std::min(kEvalChunk, n - start));
        std::iota(rows.begin(), rows.end(), start);
        fn(std::span<const std::size_t>(rows));
    }
}

void softmax_rows(std::span<const double> logits, std::size_t k, std::vector<double>& out) {
    for (std::size_t base = 0; base < logits.size(); base += k) {
        const double mx = *std::max_element(logits.begin() + static_cast<std::ptrdiff_t>(base),
                                            logits.begin() + static_cast<std::ptrdiff_t>(base + k));
        double se = 0.0;
        for (std::size_t c = 0; c < k; ++c) se += std::exp(logits[base + c] - mx);
        for (std::size_t c = 0; c < k; ++c) out.push_back(std::exp(logits[base + c] - mx) / se);
    }
}

void sigmoid_all(std::span<const double> logits, std::vector<double>& out) {
    for (double z : logits) out.push_back(z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)));
}

bool all_finite(std::span<const double> values) {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

std::string join(const std::vector<double>& values) {
    std::ostringstream os;
    os << std::setprecision(10);
    for (std::size_t i = 0; i < values.size(); ++i) os << (i ? ", " : "") << values[i];
    return os.str();
}

}  // namespace

double dataset_loss(const model::SimClip& model, const data::DatasetManifest& manifest, const data::Dataset& dataset,
                    const std::vector<std::vector<double>>& weights) {
    if (dataset.size() == 0) throw DataError("cannot compute a loss over an empty split");
    // Chunk losses are batch means, so recombine them weighted by chunk size.
    double total = 0.0;
    Rng unused{0};
    for_each_chunk(dataset.size(), [&](std::span<const std::size_t> rows) {
        nd::Tape tape;
        const auto logits = model.forward(tape, model::make_batch(dataset, rows), nd::Mode::eval, unused);
        const auto loss = batch_loss(tape, logits, manifest, dataset, rows, weights);
        total += loss.total.item() * static_cast<double>(rows.size());
    });
    return total / static_cast<double>(dataset.size());
}

// Training -----------------------------------------------------------------

TrainResult train(const Experiment& experiment, const TrainConfig& config) {
    config.validate();
    const auto started = std::chrono::steady_clock::now();
    const auto& manifest = experiment.manifest;
    const auto& train_split = experiment.split("train");
    if (train_split.size() == 0) throw DataError("train split of '" + manifest.name + "' is empty");

    model::SimClip net(model_config(manifest, config), config.seed);
    const auto weights = task_weights(manifest, train_split, config.class_weighting);

    RunRecord record;
    record.config = config;
    record.dataset = manifest.name;
    record.input_hashes = experiment.input_hashes;
    record.initial_train_loss = dataset_loss(net, manifest, train_split, weights);

    nd::Adam optimizer(net.params().all(), config.adam);
    Rng dropout_rng{config.seed, streams::dropout};
    Sha256 batch_hasher;

    const std::size_t per_epoch = (train_split.size() + config.batch_size - 1) / config.batch_size;
    const std::size_t total_steps = per_epoch * config.epochs;
    const double base_lr = config.learning_rate();
    std::size_t step = 0;
    std::vector<unsigned char> scratch;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        EpochLog log;
        log.components.assign(manifest.tasks.size(), 0.0);
        const auto batches = data::deterministic_batches(train_split.size(), config.batch_size, config.seed, epoch);
        for (const auto& rows : batches) {
            scratch.clear();
            for (std::size_t r : rows) io::put_le<std::uint64_t>(scratch, r);
            batch_hasher.update(scratch);

            nd::Tape tape;
            objective::LossBundle loss;
            try {
                const auto logits = net.forward(tape, model::make_batch(train_split, rows), nd::Mode::train, dropout_rng);
                loss = batch_loss(tape, logits, manifest, train_split, rows, weights);
            } catch (const NumericError& e) {
                throw NumericError("non-finite value at step " + std::to_string(step) + ": " + e.what());
            }
            tape.backward(loss.total);
            for (const auto& p : net.params().all()) {
                if (!all_finite(p.grad())) {
                    throw NumericError("non-finite gradient at step " + std::to_string(step) + "; component losses [" +
                                       join(loss.component_values()) + "]");
                }
            }
            // The first warmup step has a learning rate of exactly zero.
            const double lr = lr_schedule(step, total_steps, base_lr, config.warmup_fraction);
            if (lr > 0.0) optimizer.step(lr);
            optimizer.zero_grad();

            const auto values = loss.component_values();
            for (std::size_t t = 0; t < values.size(); ++t) log.components[t] += values[t];
            log.total += loss.total.item();
            ++step;
        }
        for (auto& c : log.components) c /= static_cast<double>(batches.size());
        log.total /= static_cast<double>(batches.size());
        record.epochs.push_back(std::move(log));
    }

    record.final_train_loss = dataset_loss(net, manifest, train_split, weights);
    if (!std::isfinite(record.final_train_loss)) {
        throw NumericError("non-finite final train loss after " + std::to_string(step) + " steps");
    }
    for (const auto& [name, split] : experiment.splits) {
        if (split.size() > 0) record.reports[name] = evaluate(net, split);
    }
    record.batch_hash = batch_hasher.hex();
    record.parameter_hash = net.parameter_hash();
    record.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return {std::move(net), std::move(record)};
}

// Evaluation ---------------------------------------------------------------

metrics::EvalReport evaluate(const model::SimClip& model, const data::Dataset& dataset) {
    if (dataset.size() == 0) throw DataError("cannot evaluate an empty split");
    const auto& tasks = model.config().tasks;
    if (dataset.targets.size() != tasks.size()) throw DataError("dataset targets do not match the model's tasks");
    if (dataset.dim != model.config().input_dim) {
        throw DimensionError("dataset dim " + std::to_string(dataset.dim) + " differs from model input_dim " +
                             std::to_string(model.config().input_dim));
    }

    std::vector<std::vector<double>> probs(tasks.size());
    Rng unused{0};
    for_each_chunk(dataset.size(), [&](std::span<const std::size_t> rows) {
        nd::Tape tape;
        const auto logits = model.forward(tape, model::make_batch(dataset, rows), nd::Mode::eval, unused);
        for (std::size_t t = 0; t < tasks.size(); ++t) {
            if (tasks[t].kind == data::TaskKind::multiclass) softmax_rows(logits[t].data(), tasks[t].outputs(), probs[t]);
            else sigmoid_all(logits[t].data(), probs[t]);
        }
    });

    metrics::EvalReport report;
    report.records = dataset.size();
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        if (tasks[t].kind == data::TaskKind::multiclass) {
            report.tasks.push_back(
                metrics::multiclass_report(tasks[t].name, probs[t], dataset.targets[t].classes, tasks[t].outputs()));
        } else {
            report.tasks.push_back(
                metrics::multilabel_report(tasks[t].name, probs[t], dataset.targets[t].bits, tasks[t].outputs()));
        }
    }
    return report;
}

metrics::EvalReport evaluate(const model::SimClip& model, const Experiment& experiment, const std::string& split) {
    return evaluate(model, experiment.split(split));
}

// Ablation -----------------------------------------------------------------

std::vector<RunRecord> ablate(const Experiment& experiment, const TrainConfig& base) {
    std::vector<RunRecord> runs;
    for (auto variant : model::kAllVariants) {
        TrainConfig config = base;
        config.variant = variant;
        try {
            runs.push_back(train(experiment, config).record);
        } catch (const Error& e) {
            RunRecord failed;
            failed.config = config;
            failed.dataset = experiment.manifest.name;
            failed.input_hashes = experiment.input_hashes;
            failed.error = e.what();
            runs.push_back(std::move(failed));
        }
    }
    return runs;
}

namespace {

std::string percent(std::optional<double> v) {
    if (!v) return "n/a";
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << 100.0 * *v << '%';
    return os.str();
}

std::vector<std::string> task_names(std::span<const RunRecord> runs, const std::string& split) {
    for (const auto& r : runs) {
        const auto it = r.reports.find(split);
        if (r.ok() && it != r.reports.end()) {
            std::vector<std::string> names;
            for (const auto& t : it->second.tasks) names.push_back(t.name);
            return names;
        }
    }
    return {};
}

const metrics::TaskReport* find_task(const RunRecord& run, const std::string& split, const std::string& task) {
    const auto it = run.reports.find(split);
    if (!run.ok() || it == run.reports.end()) return nullptr;
    for (const auto& t : it->second.tasks)
        if (t.name == task) return &t;
    return nullptr;
}

}  // namespace

std::string format_ablation_table(std::span<const RunRecord> runs, const std::string& split) {
    const auto names = task_names(runs, split);
    constexpr int kMethod = 22, kCell = 10;
    std::ostringstream os;
    os << std::left << std::setw(kMethod) << "Method";
    for (const auto& name : names) {
        os << "| " << std::setw(3 * kCell) << name;
    }
    os << '\n' << std::setw(kMethod) << "";
    for (std::size_t i = 0; i < names.size(); ++i) {
        os << "| " << std::setw(kCell) << "F1" << std::setw(kCell) << "Accuracy" << std::setw(kCell) << "AUROC";
    }
    os << '\n' << std::string(kMethod + names.size() * (2 + 3 * kCell), '-') << '\n';
    for (const auto& run : runs) {
        os << std::setw(kMethod) << model::table_label(run.config.variant);
        if (!run.ok()) {
            os << "| failed: " << *run.error << '\n';
            continue;
        }
        for (const auto& name : names) {
            const auto* t = find_task(run, split, name);
            os << "| " << std::setw(kCell) << percent(t ? std::optional(t->macro_f1) : std::nullopt)
               << std::setw(kCell) << percent(t ? std::optional(t->accuracy) : std::nullopt) << std::setw(kCell)
               << percent(t ? t->auroc : std::nullopt);
        }
        os << '\n';
    }
    return os.str();
}

json ablation_json(std::span<const RunRecord> runs, const std::string& split) {
    json rows = json::array();
    for (const auto& run : runs) {
        json row{{"method", model::table_label(run.config.variant)},
                 {"variant", model::to_string(run.config.variant)},
                 {"error", run.error ? json(*run.error) : json(nullptr)},
                 {"batch_hash", run.batch_hash}};
        const auto it = run.reports.find(split);
        row["report"] = run.ok() && it != run.reports.end() ? json(it->second) : json(nullptr);
        rows.push_back(std::move(row));
    }
    return json{{"split", split}, {"rows", std::move(rows)}, {"runs", runs}};
}

// Grid ---------------------------------------------------------------------

std::size_t select_best(std::span<const RunRecord> runs) {
    struct Key {
        double f1;
        double auroc;
        std::size_t batch;
    };
    std::optional<std::size_t> best;
    Key best_key{};
    for (std::size_t i = 0; i < runs.size(); ++i) {
        const auto& run = runs[i];
        const auto it = run.reports.find("val");
        if (!run.ok() || it == run.reports.end() || it->second.tasks.empty()) continue;
        double f1 = 0.0, auroc = 0.0;
        for (const auto& t : it->second.tasks) {
            f1 += t.macro_f1;
            auroc += t.auroc.value_or(0.0);
        }
        const double n = static_cast<double>(it->second.tasks.size());
        const Key key{f1 / n, auroc / n, run.config.batch_size};
        const bool better = !best || key.f1 > best_key.f1 ||
                            (key.f1 == best_key.f1 &&
                             (key.auroc > best_key.auroc || (key.auroc == best_key.auroc && key.batch < best_key.batch)));
        if (better) {
            best = i;
            best_key = key;
        }
    }
    if (!best) throw DataError("grid search: no run produced a validation report");
    return *best;
}

GridResult hyperparameter_grid(const Experiment& experiment, const TrainConfig& base) {
    if (!experiment.splits.count("val") || experiment.split("val").size() == 0) {
        throw DataError("grid search needs a non-empty val split in '" + experiment.manifest.name + "'");
    }
    GridResult result;
    for (std::size_t batch : kGridBatchSizes) {
        TrainConfig config = base;
        config.batch_size = batch;
        config.base_lr.reset();
        try {
            result.runs.push_back(train(experiment, config).record);
        } catch (const Error& e) {
            RunRecord failed;
            failed.config = config;
            failed.dataset = experiment.manifest.name;
            failed.input_hashes = experiment.input_hashes;
            failed.error = e.what();
            result.runs.push_back(std::move(failed));
        }
    }
    result.best = select_best(result.runs);
    return result;
}

// Prediction ---------------------------------------------------------------

void predict(const model::SimClip& model, const fs::path& embeddings, const fs::path& out) {
    data::EmbeddingReader reader(embeddings);
    if (reader.dim() != model.config().input_dim) {
        throw FormatError(embeddings.string() + " has dim " + std::to_string(reader.dim()) + ", checkpoint expects " +
                          std::to_string(model.config().input_dim));
    }
    const auto& tasks = model.config().tasks;
    std::vector<unsigned char> bytes;
    std::vector<data::EmbeddingRecord> chunk;
    Rng unused{0};

    auto flush = [&] {
        if (chunk.empty()) return;
        nd::Tape tape;
        const auto logits = model.forward(tape, model::make_batch(chunk), nd::Mode::eval, unused);
        std::vector<std::vector<double>> probs(tasks.size());
        for (std::size_t t = 0; t < tasks.size(); ++t) {
            if (tasks[t].kind == data::TaskKind::multiclass) softmax_rows(logits[t].data(), tasks[t].outputs(), probs[t]);
            else sigmoid_all(logits[t].data(), probs[t]);
        }
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            json per_task = json::object();
            for (std::size_t t = 0; t < tasks.size(); ++t) {
                const std::size_t k = tasks[t].outputs();
                const auto first = probs[t].begin() + static_cast<std::ptrdiff_t>(i * k);
                std::vector<double> p(first, first + static_cast<std::ptrdiff_t>(k));
                json decision;
                if (tasks[t].kind == data::TaskKind::multiclass) {
                    decision = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
                } else {
                    decision = json::array();
                    for (double v : p) decision.push_back(v >= 0.5 ? 1 : 0);
                }
                per_task[tasks[t].name] = json{{"probs", p}, {"decision", decision}};
            }
            const std::string line = json{{"id", chunk[i].id}, {"tasks", per_task}}.dump() + "\n";
            io::put_bytes(bytes, line.data(), line.size());
        }
        chunk.clear();
    };

    while (auto rec = reader.next()) {
        chunk.push_back(std::move(*rec));
        if (chunk.size() == kEvalChunk) flush();
    }
    flush();
    io::write_file_atomic(out, bytes);
}

}  // namespace simclip::harness
