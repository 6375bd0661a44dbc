#pragma once

// Minimal dense tensors with tape-based reverse-mode differentiation. Only the
// primitives the fusion head composes are provided; everything is row-major
// float64.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "simclip/rng.hpp"

namespace simclip::nd {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {
struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    bool leaf = true;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};
}  // namespace detail

/// Shared handle to a tensor. Copies alias the same storage, which is how the
/// two modality branches share one projection.
class Tensor {
public:
    Tensor() = default;

    /// Non-differentiable input.
    static Tensor constant(Shape shape, std::vector<double> data);
    /// Trainable leaf; its grad buffer is allocated up front.
    static Tensor parameter(Shape shape, std::vector<double> data);
    static Tensor zeros(Shape shape, bool requires_grad = false);

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->data.size(); }
    std::size_t rows() const;  // rank-2 only
    std::size_t cols() const;  // rank-2 only

    std::span<const double> data() const { return node_->data; }
    /// Writable view for leaves (optimizer updates, tests). Throws on op outputs.
    std::span<double> mutable_data();
    double item() const;
    double at(std::size_t row, std::size_t col) const { return node_->data[row * cols() + col]; }

    /// Empty span when no gradient has been accumulated.
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad();
    void zero_grad();

    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return node_->leaf; }
    bool same_storage(const Tensor& other) const noexcept { return node_ == other.node_; }

    detail::Node& node() const { return *node_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::Node> node_;
    friend class Tape;
};

enum class Mode { train, eval };

/// Ordered record of differentiable operations. Operations are appended as
/// they execute, so recording order is already a topological order.
class Tape {
public:
    /// Receives the output gradient; accumulates into the captured parents.
    using BackwardFn = std::function<void(std::span<const double> out_grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    /// Creates an op output. Values are checked for finiteness. The backward
    /// closure is stored only when some parent requires a gradient.
    Tensor record(const char* op, Shape shape, std::vector<double> data,
                  std::span<const Tensor> parents, BackwardFn backward);
    Tensor record(const char* op, Shape shape, std::vector<double> data,
                  std::initializer_list<Tensor> parents, BackwardFn backward) {
        return record(op, std::move(shape), std::move(data), std::span<const Tensor>(parents.begin(), parents.size()),
                      std::move(backward));
    }

    /// Populates grads of every requires_grad leaf reachable from `loss`.
    /// Non-leaf grads are reset first; leaf grads accumulate across calls.
    void backward(const Tensor& loss);

    std::size_t size() const noexcept { return entries_.size(); }
    void clear() { entries_.clear(); }

private:
    struct Entry {
        std::shared_ptr<detail::Node> output;
        BackwardFn backward;
    };
    std::vector<Entry> entries_;
};

/// Adds `values` into the tensor's grad buffer when it participates in
/// differentiation. Used by custom ops recorded through Tape::record.
void accumulate(const Tensor& target, std::span<const double> values);

// Primitives ---------------------------------------------------------------

/// x[b,n] * w[n,m] + bias[m]
Tensor affine(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& bias);

enum class Elementwise { abs_diff, hadamard, sub };
Tensor elementwise(Tape& tape, Elementwise kind, const Tensor& a, const Tensor& b);
inline Tensor abs_diff(Tape& t, const Tensor& a, const Tensor& b) { return elementwise(t, Elementwise::abs_diff, a, b); }
inline Tensor hadamard(Tape& t, const Tensor& a, const Tensor& b) { return elementwise(t, Elementwise::hadamard, a, b); }
inline Tensor sub(Tape& t, const Tensor& a, const Tensor& b) { return elementwise(t, Elementwise::sub, a, b); }

/// Feature-axis concatenation of rank-2 tensors sharing a batch extent.
Tensor concat_features(Tape& tape, std::span<const Tensor> parts);
/// Columns [begin, begin + width) of a rank-2 tensor.
Tensor slice_features(Tape& tape, const Tensor& x, std::size_t begin, std::size_t width);

inline constexpr double kL2Eps = 1e-12;
inline constexpr double kLayerNormEps = 1e-5;

/// Divides each row by max(||row||, eps).
Tensor l2_normalize(Tape& tape, const Tensor& x, double eps = kL2Eps);
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& shift,
                  double eps = kLayerNormEps);
/// Exact erf-based GELU.
Tensor gelu(Tape& tape, const Tensor& x);
/// Inverted dropout in train mode; identity in eval mode or at rate 0.
Tensor dropout(Tape& tape, const Tensor& x, double rate, Mode mode, Rng& rng);
/// Sum of all elements as a scalar.
Tensor sum(Tape& tape, const Tensor& x);

// Optimizer ----------------------------------------------------------------

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction. Moment buffers are owned here and indexed
/// like the parameter list passed at construction.
class Adam {
public:
    explicit Adam(std::vector<Tensor> params, AdamConfig config = {});

    /// Applies one update from the parameters' current grads.
    void step(double lr);
    void zero_grad();
    std::size_t steps_taken() const noexcept { return steps_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> first_;
    std::vector<std::vector<double>> second_;
    AdamConfig config_;
    std::size_t steps_ = 0;
};

}  // namespace simclip::nd
