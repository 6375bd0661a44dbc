#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "simclip/datastore.hpp"

namespace simclip::metrics {

/// Unweighted mean of per-class F1. Classes absent from both preds and labels
/// are skipped; 0/0 precision or recall counts as 0.
double macro_f1(std::span<const std::size_t> preds, std::span<const std::size_t> labels, std::size_t k);
double accuracy(std::span<const std::size_t> preds, std::span<const std::size_t> labels);

/// Mann-Whitney AUROC: P(pos > neg) + P(tie)/2, by sorting. Throws
/// UndefinedMetric when either class is missing.
double auroc_binary(std::span<const double> scores, std::span<const std::uint8_t> labels);
/// Macro one-vs-rest over classes with both positives and negatives. `probs`
/// is row-major [b, k]. For k = 2 this is the class-1 binary AUROC.
double auroc_multiclass(std::span<const double> probs, std::span<const std::size_t> labels, std::size_t k);

using ConfusionMatrix = std::vector<std::vector<std::uint64_t>>;  // [true][pred]
ConfusionMatrix confusion(std::span<const std::size_t> preds, std::span<const std::size_t> labels, std::size_t k);
/// Recall of one class from a confusion matrix; 0 when the class never occurs.
double recall(const ConfusionMatrix& cm, std::size_t cls);

struct LabelCounts {
    std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
    bool operator==(const LabelCounts&) const = default;
};

struct TaskReport {
    std::string name;
    data::TaskKind kind = data::TaskKind::multiclass;
    double macro_f1 = 0.0;
    double accuracy = 0.0;
    std::optional<double> auroc;     // absent when undefined
    std::optional<double> micro_f1;  // multilabel only
    ConfusionMatrix confusion;       // multiclass only
    std::vector<LabelCounts> label_counts;  // multilabel only

    bool operator==(const TaskReport&) const = default;
};

struct EvalReport {
    std::uint64_t records = 0;
    std::vector<TaskReport> tasks;

    bool operator==(const EvalReport&) const = default;
};

/// Scores for one multiclass task: argmax predictions, softmax AUROC.
TaskReport multiclass_report(const std::string& name, std::span<const double> probs,
                             std::span<const std::size_t> labels, std::size_t k);
/// Scores for one multilabel task at a 0.5 threshold. Accuracy is per cell;
/// macro F1 averages per-label F1 of the positive class; AUROC is the macro
/// average over labels where it is defined.
TaskReport multilabel_report(const std::string& name, std::span<const double> probs,
                             std::span<const std::uint8_t> labels, std::size_t m);

void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);

}  // namespace simclip::metrics
