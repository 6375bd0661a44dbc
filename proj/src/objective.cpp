#include "simclip/objective.hpp"

#include <algorithm>
#include <cmath>

#include "simclip/errors.hpp"

namespace simclip::objective {

ClassWeights compute_class_weights(std::span<const std::size_t> counts) {
    std::size_t total = 0;
    for (std::size_t c : counts) total += c;
    if (total == 0) throw DataError("class weights: every class count is zero");
    ClassWeights out;
    const double k = static_cast<double>(counts.size());
    for (std::size_t c = 0; c < counts.size(); ++c) {
        if (counts[c] == 0) {
            out.weights.push_back(0.0);
            out.degenerate.push_back(c);
        } else {
            out.weights.push_back(static_cast<double>(total) / (k * static_cast<double>(counts[c])));
        }
    }
    return out;
}

ClassWeights uniform_weights(std::size_t classes) { return {std::vector<double>(classes, 1.0), {}}; }

std::vector<double> compute_pos_weights(std::span<const std::uint8_t> bits, std::size_t labels) {
    if (labels == 0 || bits.size() % labels != 0) throw DimensionError("pos weights: target matrix is not [n, labels]");
    const std::size_t n = bits.size() / labels;
    std::vector<double> out(labels);
    for (std::size_t j = 0; j < labels; ++j) {
        std::size_t pos = 0;
        for (std::size_t r = 0; r < n; ++r) pos += bits[r * labels + j] ? 1 : 0;
        const std::size_t neg = n - pos;
        if (pos == 0) {
            out[j] = kMaxPosWeight;
        } else if (neg == 0) {
            out[j] = 1.0;
        } else {
            out[j] = std::min(kMaxPosWeight, static_cast<double>(neg) / static_cast<double>(pos));
        }
    }
    return out;
}

namespace {

/// log(1 + exp(x)) without overflow.
double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

nd::Tensor weighted_cce(nd::Tape& tape, const nd::Tensor& logits, std::span<const std::size_t> targets,
                        std::span<const double> weights, std::span<const std::string> ids) {
    if (logits.shape().size() != 2) throw DimensionError("weighted_cce: logits must be [b, k]");
    const std::size_t b = logits.rows(), k = logits.cols();
    if (targets.size() != b) {
        throw DimensionError("weighted_cce: " + std::to_string(targets.size()) + " targets for batch of " + std::to_string(b));
    }
    if (weights.size() != k) {
        throw DimensionError("weighted_cce: " + std::to_string(weights.size()) + " class weights for " + std::to_string(k) + " classes");
    }
    for (std::size_t i = 0; i < b; ++i) {
        if (targets[i] >= k) {
            const std::string who = i < ids.size() ? "record '" + ids[i] + "'" : "row " + std::to_string(i);
            throw DataError("weighted_cce: " + who + " has target " + std::to_string(targets[i]) + " outside [0, " +
                            std::to_string(k) + ")");
        }
    }

    const auto z = logits.data();
    std::vector<double> probs(b * k);
    std::vector<double> row_loss(b);
    for (std::size_t i = 0; i < b; ++i) {
        const double* zi = z.data() + i * k;
        const double mx = *std::max_element(zi, zi + k);
        double se = 0.0;
        for (std::size_t c = 0; c < k; ++c) se += std::exp(zi[c] - mx);
        const double lse = mx + std::log(se);
        for (std::size_t c = 0; c < k; ++c) probs[i * k + c] = std::exp(zi[c] - lse);
        row_loss[i] = lse - zi[targets[i]];
    }

    bool uniform = true;
    for (std::size_t i = 1; i < b; ++i) uniform = uniform && weights[targets[i]] == weights[targets[0]];

    // Per-row scale applied to the loss and to the gradient.
    std::vector<double> scale(b);
    double value = 0.0;
    if (uniform) {
        if (!(weights[targets[0]] > 0.0)) throw DataError("weighted_cce: batch contains only zero-weight classes");
        for (double l : row_loss) value += l;
        value /= static_cast<double>(b);
        std::fill(scale.begin(), scale.end(), 1.0 / static_cast<double>(b));
    } else {
        double weight_sum = 0.0;
        for (std::size_t i = 0; i < b; ++i) weight_sum += weights[targets[i]];
        if (!(weight_sum > 0.0)) throw DataError("weighted_cce: batch contains only zero-weight classes");
        for (std::size_t i = 0; i < b; ++i) {
            scale[i] = weights[targets[i]] / weight_sum;
            value += weights[targets[i]] * row_loss[i];
        }
        value /= weight_sum;
    }

    std::vector<std::size_t> y(targets.begin(), targets.end());
    return tape.record("weighted_cce", {1}, {value}, {logits},
                       [logits, b, k, probs = std::move(probs), scale = std::move(scale), y = std::move(y)](
                           std::span<const double> g) {
                           std::vector<double> dz(b * k);
                           for (std::size_t i = 0; i < b; ++i)
                               for (std::size_t c = 0; c < k; ++c)
                                   dz[i * k + c] = g[0] * scale[i] * (probs[i * k + c] - (c == y[i] ? 1.0 : 0.0));
                           nd::accumulate(logits, dz);
                       });
}

nd::Tensor multilabel_bce(nd::Tape& tape, const nd::Tensor& logits, std::span<const std::uint8_t> targets,
                          std::span<const double> pos_weights) {
    if (logits.shape().size() != 2) throw DimensionError("multilabel_bce: logits must be [b, m]");
    const std::size_t b = logits.rows(), m = logits.cols();
    if (targets.size() != b * m) throw DimensionError("multilabel_bce: target matrix does not match logits");
    if (pos_weights.size() != m) throw DimensionError("multilabel_bce: need one pos weight per label");
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] > 1) {
            throw DataError("multilabel_bce: non-binary target " + std::to_string(targets[i]) + " at row " +
                            std::to_string(i / m) + ", label " + std::to_string(i % m));
        }
    }
    const auto z = logits.data();
    const double cells = static_cast<double>(b * m);
    double value = 0.0;
    for (std::size_t i = 0; i < b * m; ++i) {
        const double pw = pos_weights[i % m];
        value += targets[i] ? pw * softplus(-z[i]) : softplus(z[i]);
    }
    value /= cells;

    std::vector<std::uint8_t> y(targets.begin(), targets.end());
    std::vector<double> pw(pos_weights.begin(), pos_weights.end());
    return tape.record("multilabel_bce", {1}, {value}, {logits},
                       [logits, m, cells, y = std::move(y), pw = std::move(pw)](std::span<const double> g) {
                           const auto z = logits.data();
                           std::vector<double> dz(z.size());
                           for (std::size_t i = 0; i < z.size(); ++i) {
                               const double s = sigmoid(z[i]);
                               // d/dz softplus(-z) = s - 1, d/dz softplus(z) = s
                               dz[i] = g[0] * (y[i] ? pw[i % m] * (s - 1.0) : s) / cells;
                           }
                           nd::accumulate(logits, dz);
                       });
}

std::vector<double> LossBundle::component_values() const {
    std::vector<double> out;
    for (const auto& c : components) out.push_back(c.item());
    return out;
}

LossBundle total_loss(nd::Tape& tape, std::vector<nd::Tensor> per_head) {
    if (per_head.empty()) throw ContractError("total_loss: no loss terms");
    double value = 0.0;
    for (const auto& c : per_head) {
        if (c.size() != 1) throw ContractError("total_loss: loss terms must be scalars");
        value += c.item();
    }
    std::vector<nd::Tensor> parents = per_head;
    nd::Tensor total = tape.record("total_loss", {1}, {value}, std::span<const nd::Tensor>(parents),
                                   [parents](std::span<const double> g) {
                                       for (const auto& p : parents) nd::accumulate(p, g);
                                   });
    return {std::move(per_head), std::move(total)};
}

}  // namespace simclip::objective
