#include "simclip/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "simclip/errors.hpp"

namespace simclip::metrics {

using nlohmann::json;

namespace {

void check_pairs(std::size_t preds, std::size_t labels, const char* what) {
    if (preds != labels) throw DimensionError(std::string(what) + ": predictions and labels differ in length");
    if (preds == 0) throw DataError(std::string(what) + ": empty input");
}

/// F1 from counts; 0 whenever the denominator vanishes.
double f1_from_counts(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn) {
    const std::uint64_t denom = 2 * tp + fp + fn;
    return denom == 0 ? 0.0 : static_cast<double>(2 * tp) / static_cast<double>(denom);
}

}  // namespace

ConfusionMatrix confusion(std::span<const std::size_t> preds, std::span<const std::size_t> labels, std::size_t k) {
    check_pairs(preds.size(), labels.size(), "confusion");
    ConfusionMatrix cm(k, std::vector<std::uint64_t>(k, 0));
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] >= k || labels[i] >= k) throw DataError("confusion: class index outside [0, " + std::to_string(k) + ")");
        ++cm[labels[i]][preds[i]];
    }
    return cm;
}

double recall(const ConfusionMatrix& cm, std::size_t cls) {
    const auto& row = cm.at(cls);
    const std::uint64_t support = std::accumulate(row.begin(), row.end(), std::uint64_t{0});
    return support == 0 ? 0.0 : static_cast<double>(row[cls]) / static_cast<double>(support);
}

double macro_f1(std::span<const std::size_t> preds, std::span<const std::size_t> labels, std::size_t k) {
    const auto cm = confusion(preds, labels, k);
    double total = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < k; ++c) {
        std::uint64_t fp = 0, fn = 0;
        for (std::size_t o = 0; o < k; ++o) {
            if (o == c) continue;
            fp += cm[o][c];
            fn += cm[c][o];
        }
        const std::uint64_t tp = cm[c][c];
        if (tp + fp + fn == 0) continue;
        total += f1_from_counts(tp, fp, fn);
        ++present;
    }
    return total / static_cast<double>(present);
}

double accuracy(std::span<const std::size_t> preds, std::span<const std::size_t> labels) {
    check_pairs(preds.size(), labels.size(), "accuracy");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == labels[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(preds.size());
}

double auroc_binary(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    if (scores.size() != labels.size()) throw DimensionError("auroc: scores and labels differ in length");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    std::uint64_t positives = 0, negatives = 0, wins = 0, ties = 0;
    for (std::size_t start = 0; start < order.size();) {
        std::size_t stop = start;
        std::uint64_t pos_group = 0, neg_group = 0;
        while (stop < order.size() && scores[order[stop]] == scores[order[start]]) {
            if (labels[order[stop]] > 1) throw DataError("auroc: labels must be 0 or 1");
            (labels[order[stop]] ? pos_group : neg_group) += 1;
            ++stop;
        }
        wins += pos_group * negatives;  // negatives seen so far all score lower
        ties += pos_group * neg_group;
        positives += pos_group;
        negatives += neg_group;
        start = stop;
    }
    if (positives == 0 || negatives == 0) throw UndefinedMetric("auroc: needs at least one positive and one negative");
    return static_cast<double>(2 * wins + ties) / (2.0 * static_cast<double>(positives) * static_cast<double>(negatives));
}

double auroc_multiclass(std::span<const double> probs, std::span<const std::size_t> labels, std::size_t k) {
    if (k < 2) throw DimensionError("auroc_multiclass: need at least 2 classes");
    if (probs.size() != labels.size() * k) throw DimensionError("auroc_multiclass: probability matrix is not [b, k]");
    const std::size_t b = labels.size();
    for (std::size_t i = 0; i < b; ++i) {
        double row = 0.0;
        for (std::size_t c = 0; c < k; ++c) row += probs[i * k + c];
        if (std::abs(row - 1.0) > 1e-6) throw DataError("auroc_multiclass: row " + std::to_string(i) + " does not sum to 1");
        if (labels[i] >= k) throw DataError("auroc_multiclass: label outside [0, " + std::to_string(k) + ")");
    }

    std::vector<double> scores(b);
    std::vector<std::uint8_t> onehot(b);
    auto one_vs_rest = [&](std::size_t c) {
        for (std::size_t i = 0; i < b; ++i) {
            scores[i] = probs[i * k + c];
            onehot[i] = labels[i] == c ? 1 : 0;
        }
        return auroc_binary(scores, onehot);
    };
    if (k == 2) return one_vs_rest(1);

    double total = 0.0;
    std::size_t defined = 0;
    for (std::size_t c = 0; c < k; ++c) {
        try {
            total += one_vs_rest(c);
            ++defined;
        } catch (const UndefinedMetric&) {
        }
    }
    if (defined == 0) throw UndefinedMetric("auroc_multiclass: no class has both positives and negatives");
    return total / static_cast<double>(defined);
}

TaskReport multiclass_report(const std::string& name, std::span<const double> probs,
                             std::span<const std::size_t> labels, std::size_t k) {
    if (probs.size() != labels.size() * k) throw DimensionError("multiclass_report: probability matrix is not [b, k]");
    std::vector<std::size_t> preds(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const double* row = probs.data() + i * k;
        preds[i] = static_cast<std::size_t>(std::max_element(row, row + k) - row);
    }
    TaskReport r;
    r.name = name;
    r.kind = data::TaskKind::multiclass;
    r.macro_f1 = macro_f1(preds, labels, k);
    r.accuracy = accuracy(preds, labels);
    r.confusion = confusion(preds, labels, k);
    try {
        r.auroc = auroc_multiclass(probs, labels, k);
    } catch (const UndefinedMetric&) {
        r.auroc.reset();
    }
    return r;
}

TaskReport multilabel_report(const std::string& name, std::span<const double> probs,
                             std::span<const std::uint8_t> labels, std::size_t m) {
    if (m == 0 || probs.size() != labels.size() || labels.size() % m != 0 || labels.empty()) {
        throw DimensionError("multilabel_report: probability and label matrices must be [b, m] with b > 0");
    }
    const std::size_t b = labels.size() / m;
    TaskReport r;
    r.name = name;
    r.kind = data::TaskKind::multilabel;
    r.label_counts.resize(m);
    std::uint64_t hits = 0;
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            const bool pred = probs[i * m + j] >= 0.5;
            const bool truth = labels[i * m + j] != 0;
            auto& c = r.label_counts[j];
            if (pred && truth) ++c.tp;
            else if (pred) ++c.fp;
            else if (truth) ++c.fn;
            else ++c.tn;
            hits += pred == truth ? 1 : 0;
        }
    }
    r.accuracy = static_cast<double>(hits) / static_cast<double>(b * m);

    LabelCounts all;
    double f1_total = 0.0;
    std::size_t present = 0;
    for (const auto& c : r.label_counts) {
        all.tp += c.tp;
        all.fp += c.fp;
        all.fn += c.fn;
        if (c.tp + c.fp + c.fn == 0) continue;
        f1_total += f1_from_counts(c.tp, c.fp, c.fn);
        ++present;
    }
    r.micro_f1 = f1_from_counts(all.tp, all.fp, all.fn);
    r.macro_f1 = present == 0 ? 0.0 : f1_total / static_cast<double>(present);

    std::vector<double> scores(b);
    std::vector<std::uint8_t> column(b);
    double auc_total = 0.0;
    std::size_t defined = 0;
    for (std::size_t j = 0; j < m; ++j) {
        for (std::size_t i = 0; i < b; ++i) {
            scores[i] = probs[i * m + j];
            column[i] = labels[i * m + j];
        }
        try {
            auc_total += auroc_binary(scores, column);
            ++defined;
        } catch (const UndefinedMetric&) {
        }
    }
    if (defined > 0) r.auroc = auc_total / static_cast<double>(defined);
    return r;
}

// JSON ---------------------------------------------------------------------

void to_json(json& j, const EvalReport& r) {
    json tasks = json::object();
    json order = json::array();
    for (const auto& t : r.tasks) {
        json entry{{"kind", data::to_string(t.kind)},
                   {"macro_f1", t.macro_f1},
                   {"accuracy", t.accuracy},
                   {"auroc", t.auroc ? json(*t.auroc) : json(nullptr)}};
        if (t.kind == data::TaskKind::multilabel) {
            entry["micro_f1"] = t.micro_f1 ? json(*t.micro_f1) : json(nullptr);
            json counts = json::array();
            for (const auto& c : t.label_counts) counts.push_back({{"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}, {"tn", c.tn}});
            entry["label_counts"] = std::move(counts);
        } else {
            entry["confusion"] = t.confusion;
        }
        tasks[t.name] = std::move(entry);
        order.push_back(t.name);
    }
    j = json{{"records", r.records}, {"tasks", std::move(tasks)}, {"task_order", std::move(order)}};
}

void from_json(const json& j, EvalReport& r) {
    r.records = j.at("records").get<std::uint64_t>();
    r.tasks.clear();
    for (const auto& name : j.at("task_order")) {
        const auto& e = j.at("tasks").at(name.get<std::string>());
        TaskReport t;
        t.name = name.get<std::string>();
        t.kind = data::parse_task_kind(e.at("kind").get<std::string>());
        t.macro_f1 = e.at("macro_f1").get<double>();
        t.accuracy = e.at("accuracy").get<double>();
        if (!e.at("auroc").is_null()) t.auroc = e.at("auroc").get<double>();
        if (t.kind == data::TaskKind::multilabel) {
            if (!e.at("micro_f1").is_null()) t.micro_f1 = e.at("micro_f1").get<double>();
            for (const auto& c : e.at("label_counts")) {
                t.label_counts.push_back({c.at("tp").get<std::uint64_t>(), c.at("fp").get<std::uint64_t>(),
                                          c.at("fn").get<std::uint64_t>(), c.at("tn").get<std::uint64_t>()});
            }
        } else {
            t.confusion = e.at("confusion").get<ConfusionMatrix>();
        }
        r.tasks.push_back(std::move(t));
    }
}

}  // namespace simclip::metrics
