#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "simclip/ndgrad.hpp"

namespace simclip::objective {

/// Per-class loss weights. Classes that never occur get weight 0 and are
/// listed in `degenerate`.
struct ClassWeights {
    std::vector<double> weights;
    std::vector<std::size_t> degenerate;
};

/// Inverse frequency w_c = N / (K * n_c).
ClassWeights compute_class_weights(std::span<const std::size_t> counts);
ClassWeights uniform_weights(std::size_t classes);

/// Positive-term weights negatives/positives per label, capped at
/// `kMaxPosWeight`. `bits` is row-major [n, labels].
inline constexpr double kMaxPosWeight = 100.0;
std::vector<double> compute_pos_weights(std::span<const std::uint8_t> bits, std::size_t labels);

/// sum_i w[y_i] * -log softmax(z_i)[y_i] / sum_i w[y_i]. With equal weights
/// this is exactly the plain batch-mean cross-entropy. `ids`, when given,
/// names the offending record in range errors.
nd::Tensor weighted_cce(nd::Tape& tape, const nd::Tensor& logits, std::span<const std::size_t> targets,
                        std::span<const double> weights, std::span<const std::string> ids = {});

/// Mean over all cells of pos_weight * y * softplus(-z) + (1 - y) * softplus(z).
nd::Tensor multilabel_bce(nd::Tape& tape, const nd::Tensor& logits, std::span<const std::uint8_t> targets,
                          std::span<const double> pos_weights);

struct LossBundle {
    std::vector<nd::Tensor> components;
    nd::Tensor total;

    std::vector<double> component_values() const;
};

/// Unweighted sum of the head losses.
LossBundle total_loss(nd::Tape& tape, std::vector<nd::Tensor> per_head);

}  // namespace simclip::objective
