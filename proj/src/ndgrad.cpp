#include "simclip/ndgrad.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <utility>

#include "simclip/errors.hpp"

namespace simclip::nd {

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t extent : shape) n *= extent;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace {

std::shared_ptr<detail::Node> make_node(Shape shape, std::vector<double> data, bool requires_grad) {
    for (std::size_t extent : shape) {
        if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
    }
    if (numel(shape) != data.size()) {
        throw DimensionError("tensor of shape " + shape_string(shape) + " needs " +
                             std::to_string(numel(shape)) + " values, got " + std::to_string(data.size()));
    }
    for (double v : data) {
        if (!std::isfinite(v)) throw NumericError("tensor values must be finite");
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    if (requires_grad) node->ensure_grad();
    return node;
}

void require_rank2(const Tensor& t, const char* op, const char* name) {
    if (t.shape().size() != 2) {
        throw DimensionError(std::string(op) + ": " + name + " must be rank 2, got " + shape_string(t.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
    }
}

}  // namespace

// Tensor -------------------------------------------------------------------

Tensor Tensor::constant(Shape shape, std::vector<double> data) {
    return Tensor(make_node(std::move(shape), std::move(data), false));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
    return Tensor(make_node(std::move(shape), std::move(data), true));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    const std::size_t n = numel(shape);
    return Tensor(make_node(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

std::size_t Tensor::rows() const {
    if (shape().size() != 2) throw DimensionError("rows() on tensor of shape " + shape_string(shape()));
    return shape()[0];
}

std::size_t Tensor::cols() const {
    if (shape().size() != 2) throw DimensionError("cols() on tensor of shape " + shape_string(shape()));
    return shape()[1];
}

std::span<double> Tensor::mutable_data() {
    if (!node_->leaf) throw ContractError("only leaf tensors may be modified in place");
    return node_->data;
}

double Tensor::item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
    return node_->data[0];
}

std::span<double> Tensor::mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
}

void Tensor::zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void accumulate(const Tensor& target, std::span<const double> values) {
    auto& node = target.node();
    if (!node.requires_grad) return;
    node.ensure_grad();
    for (std::size_t i = 0; i < values.size(); ++i) node.grad[i] += values[i];
}

// Tape ---------------------------------------------------------------------

Tensor Tape::record(const char* op, Shape shape, std::vector<double> data,
                    std::span<const Tensor> parents, BackwardFn backward) {
    for (double v : data) {
        if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
    }
    const bool needs_grad =
        std::any_of(parents.begin(), parents.end(), [](const Tensor& p) { return p.requires_grad(); });
    auto node = make_node(std::move(shape), std::move(data), false);
    node->leaf = false;
    node->requires_grad = needs_grad;
    if (needs_grad) entries_.push_back(Entry{node, std::move(backward)});
    return Tensor(std::move(node));
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw ContractError("backward requires a scalar loss, got shape " +
                            (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
    }
    const auto it = std::find_if(entries_.begin(), entries_.end(),
                                 [&](const Entry& e) { return e.output == loss.node_; });
    if (it == entries_.end()) throw ContractError("backward: loss was not recorded on this tape");

    for (auto& entry : entries_) entry.output->grad.assign(entry.output->data.size(), 0.0);
    loss.node_->grad[0] = 1.0;

    for (auto r = std::make_reverse_iterator(std::next(it)); r != entries_.rend(); ++r) {
        r->backward(r->output->grad);
    }
}

// Primitives ---------------------------------------------------------------

Tensor affine(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& bias) {
    require_rank2(x, "affine", "x");
    require_rank2(w, "affine", "w");
    const std::size_t b = x.rows(), n = x.cols(), m = w.cols();
    if (w.rows() != n || bias.size() != m || bias.shape().size() != 1) {
        throw DimensionError("affine: x " + shape_string(x.shape()) + " incompatible with w " +
                             shape_string(w.shape()) + " and bias " + shape_string(bias.shape()));
    }
    const auto xd = x.data();
    const auto wd = w.data();
    const auto bd = bias.data();
    std::vector<double> out(b * m);
    for (std::size_t r = 0; r < b; ++r) {
        double* row = out.data() + r * m;
        std::copy(bd.begin(), bd.end(), row);
        for (std::size_t k = 0; k < n; ++k) {
            const double xv = xd[r * n + k];
            const double* wrow = wd.data() + k * m;
            for (std::size_t c = 0; c < m; ++c) row[c] += xv * wrow[c];
        }
    }
    return tape.record("affine", {b, m}, std::move(out), {x, w, bias},
                       [x, w, bias, b, n, m](std::span<const double> g) {
                           if (x.requires_grad()) {
                               const auto wd = w.data();
                               std::vector<double> dx(b * n, 0.0);
                               for (std::size_t r = 0; r < b; ++r)
                                   for (std::size_t k = 0; k < n; ++k) {
                                       double acc = 0.0;
                                       for (std::size_t c = 0; c < m; ++c) acc += g[r * m + c] * wd[k * m + c];
                                       dx[r * n + k] = acc;
                                   }
                               accumulate(x, dx);
                           }
                           if (w.requires_grad()) {
                               const auto xd = x.data();
                               std::vector<double> dw(n * m, 0.0);
                               for (std::size_t r = 0; r < b; ++r)
                                   for (std::size_t k = 0; k < n; ++k) {
                                       const double xv = xd[r * n + k];
                                       for (std::size_t c = 0; c < m; ++c) dw[k * m + c] += xv * g[r * m + c];
                                   }
                               accumulate(w, dw);
                           }
                           if (bias.requires_grad()) {
                               std::vector<double> db(m, 0.0);
                               for (std::size_t r = 0; r < b; ++r)
                                   for (std::size_t c = 0; c < m; ++c) db[c] += g[r * m + c];
                               accumulate(bias, db);
                           }
                       });
}

Tensor elementwise(Tape& tape, Elementwise kind, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "elementwise");
    const auto ad = a.data();
    const auto bd = b.data();
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        switch (kind) {
            case Elementwise::abs_diff: out[i] = std::abs(ad[i] - bd[i]); break;
            case Elementwise::hadamard: out[i] = ad[i] * bd[i]; break;
            case Elementwise::sub: out[i] = ad[i] - bd[i]; break;
        }
    }
    return tape.record("elementwise", a.shape(), std::move(out), {a, b},
                       [a, b, kind](std::span<const double> g) {
                           const auto ad = a.data();
                           const auto bd = b.data();
                           std::vector<double> da(g.size()), db(g.size());
                           for (std::size_t i = 0; i < g.size(); ++i) {
                               switch (kind) {
                                   case Elementwise::abs_diff: {
                                       const double d = ad[i] - bd[i];
                                       // sign(0) = 0
                                       const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                                       da[i] = g[i] * s;
                                       db[i] = -g[i] * s;
                                       break;
                                   }
                                   case Elementwise::hadamard:
                                       da[i] = g[i] * bd[i];
                                       db[i] = g[i] * ad[i];
                                       break;
                                   case Elementwise::sub:
                                       da[i] = g[i];
                                       db[i] = -g[i];
                                       break;
                               }
                           }
                           accumulate(a, da);
                           accumulate(b, db);
                       });
}

Tensor concat_features(Tape& tape, std::span<const Tensor> parts) {
    if (parts.empty()) throw DimensionError("concat_features: empty part list");
    for (const auto& p : parts) require_rank2(p, "concat_features", "part");
    const std::size_t b = parts.front().rows();
    std::size_t width = 0;
    for (const auto& p : parts) {
        if (p.rows() != b) {
            throw DimensionError("concat_features: batch mismatch " + shape_string(parts.front().shape()) + " vs " +
                                 shape_string(p.shape()));
        }
        width += p.cols();
    }
    std::vector<double> out(b * width);
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.cols();
        const auto pd = p.data();
        for (std::size_t r = 0; r < b; ++r)
            std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(r * w), w, out.begin() + static_cast<std::ptrdiff_t>(r * width + offset));
        offset += w;
    }

    std::vector<Tensor> owned(parts.begin(), parts.end());
    return tape.record("concat_features", {b, width}, std::move(out), parts,
                       [owned = std::move(owned), b, width](std::span<const double> g) {
                           std::size_t offset = 0;
                           for (const auto& p : owned) {
                               const std::size_t w = p.cols();
                               if (p.requires_grad()) {
                                   std::vector<double> dp(b * w);
                                   for (std::size_t r = 0; r < b; ++r)
                                       std::copy_n(g.begin() + static_cast<std::ptrdiff_t>(r * width + offset), w,
                                                   dp.begin() + static_cast<std::ptrdiff_t>(r * w));
                                   accumulate(p, dp);
                               }
                               offset += w;
                           }
                       });
}

Tensor slice_features(Tape& tape, const Tensor& x, std::size_t begin, std::size_t width) {
    require_rank2(x, "slice_features", "x");
    const std::size_t b = x.rows(), n = x.cols();
    if (width == 0 || begin + width > n) {
        throw DimensionError("slice_features: columns [" + std::to_string(begin) + ", " +
                             std::to_string(begin + width) + ") out of range for " + shape_string(x.shape()));
    }
    const auto xd = x.data();
    std::vector<double> out(b * width);
    for (std::size_t r = 0; r < b; ++r)
        std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(r * n + begin), width,
                    out.begin() + static_cast<std::ptrdiff_t>(r * width));
    return tape.record("slice_features", {b, width}, std::move(out), {x},
                       [x, b, n, begin, width](std::span<const double> g) {
                           std::vector<double> dx(b * n, 0.0);
                           for (std::size_t r = 0; r < b; ++r)
                               for (std::size_t c = 0; c < width; ++c) dx[r * n + begin + c] = g[r * width + c];
                           accumulate(x, dx);
                       });
}

Tensor l2_normalize(Tape& tape, const Tensor& x, double eps) {
    if (!(eps > 0.0)) throw ConfigError("l2_normalize: eps must be positive");
    require_rank2(x, "l2_normalize", "x");
    const std::size_t b = x.rows(), p = x.cols();
    const auto xd = x.data();
    std::vector<double> out(b * p);
    std::vector<double> denom(b);
    for (std::size_t r = 0; r < b; ++r) {
        double sq = 0.0;
        for (std::size_t c = 0; c < p; ++c) sq += xd[r * p + c] * xd[r * p + c];
        denom[r] = std::max(std::sqrt(sq), eps);
        for (std::size_t c = 0; c < p; ++c) out[r * p + c] = xd[r * p + c] / denom[r];
    }
    std::vector<double> y = out;
    return tape.record("l2_normalize", {b, p}, std::move(out), {x},
                       [x, b, p, eps, denom = std::move(denom), y = std::move(y)](std::span<const double> g) {
                           std::vector<double> dx(b * p);
                           for (std::size_t r = 0; r < b; ++r) {
                               const double* yr = y.data() + r * p;
                               const double* gr = g.data() + r * p;
                               double* dr = dx.data() + r * p;
                               if (denom[r] > eps) {
                                   double dot = 0.0;
                                   for (std::size_t c = 0; c < p; ++c) dot += yr[c] * gr[c];
                                   for (std::size_t c = 0; c < p; ++c) dr[c] = (gr[c] - yr[c] * dot) / denom[r];
                               } else {
                                   // Clamped branch: the denominator is the constant eps.
                                   for (std::size_t c = 0; c < p; ++c) dr[c] = gr[c] / eps;
                               }
                           }
                           accumulate(x, dx);
                       });
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& shift, double eps) {
    if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
    require_rank2(x, "layer_norm", "x");
    const std::size_t b = x.rows(), p = x.cols();
    if (gain.size() != p || shift.size() != p) {
        throw DimensionError("layer_norm: x " + shape_string(x.shape()) + " with gain " + shape_string(gain.shape()) +
                             " and shift " + shape_string(shift.shape()));
    }
    const auto xd = x.data();
    const auto gd = gain.data();
    const auto sd = shift.data();
    std::vector<double> xhat(b * p), inv_std(b), out(b * p);
    for (std::size_t r = 0; r < b; ++r) {
        double mean = 0.0;
        for (std::size_t c = 0; c < p; ++c) mean += xd[r * p + c];
        mean /= static_cast<double>(p);
        double var = 0.0;
        for (std::size_t c = 0; c < p; ++c) {
            const double d = xd[r * p + c] - mean;
            var += d * d;
        }
        var /= static_cast<double>(p);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < p; ++c) {
            xhat[r * p + c] = (xd[r * p + c] - mean) * inv_std[r];
            out[r * p + c] = gd[c] * xhat[r * p + c] + sd[c];
        }
    }
    return tape.record(
        "layer_norm", {b, p}, std::move(out), {x, gain, shift},
        [x, gain, shift, b, p, xhat = std::move(xhat), inv_std = std::move(inv_std)](std::span<const double> g) {
            const auto gd = gain.data();
            if (x.requires_grad()) {
                std::vector<double> dx(b * p);
                std::vector<double> dxhat(p);
                for (std::size_t r = 0; r < b; ++r) {
                    double mean_d = 0.0, mean_dx = 0.0;
                    for (std::size_t c = 0; c < p; ++c) {
                        dxhat[c] = g[r * p + c] * gd[c];
                        mean_d += dxhat[c];
                        mean_dx += dxhat[c] * xhat[r * p + c];
                    }
                    mean_d /= static_cast<double>(p);
                    mean_dx /= static_cast<double>(p);
                    for (std::size_t c = 0; c < p; ++c)
                        dx[r * p + c] = inv_std[r] * (dxhat[c] - mean_d - xhat[r * p + c] * mean_dx);
                }
                accumulate(x, dx);
            }
            if (gain.requires_grad() || shift.requires_grad()) {
                std::vector<double> dgain(p, 0.0), dshift(p, 0.0);
                for (std::size_t r = 0; r < b; ++r)
                    for (std::size_t c = 0; c < p; ++c) {
                        dgain[c] += g[r * p + c] * xhat[r * p + c];
                        dshift[c] += g[r * p + c];
                    }
                accumulate(gain, dgain);
                accumulate(shift, dshift);
            }
        });
}

Tensor gelu(Tape& tape, const Tensor& x) {
    const auto xd = x.data();
    std::vector<double> out(xd.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = xd[i] * 0.5 * std::erfc(-xd[i] * std::numbers::sqrt2 / 2.0);
    }
    return tape.record("gelu", x.shape(), std::move(out), {x}, [x](std::span<const double> g) {
        const auto xd = x.data();
        constexpr double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
        std::vector<double> dx(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double cdf = 0.5 * std::erfc(-xd[i] * std::numbers::sqrt2 / 2.0);
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * xd[i] * xd[i]);
            dx[i] = g[i] * (cdf + xd[i] * pdf);
        }
        accumulate(x, dx);
    });
}

Tensor dropout(Tape& tape, const Tensor& x, double rate, Mode mode, Rng& rng) {
    if (!(rate >= 0.0 && rate < 1.0)) {
        throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
    }
    if (mode == Mode::eval || rate == 0.0) return x;
    const double scale = 1.0 / (1.0 - rate);
    const auto xd = x.data();
    std::vector<double> mask(xd.size()), out(xd.size());
    for (std::size_t i = 0; i < xd.size(); ++i) {
        mask[i] = rng.uniform() >= rate ? scale : 0.0;
        out[i] = xd[i] * mask[i];
    }
    return tape.record("dropout", x.shape(), std::move(out), {x},
                       [x, mask = std::move(mask)](std::span<const double> g) {
                           std::vector<double> dx(g.size());
                           for (std::size_t i = 0; i < g.size(); ++i) dx[i] = g[i] * mask[i];
                           accumulate(x, dx);
                       });
}

Tensor sum(Tape& tape, const Tensor& x) {
    double total = 0.0;
    for (double v : x.data()) total += v;
    return tape.record("sum", {1}, {total}, {x}, [x](std::span<const double> g) {
        accumulate(x, std::vector<double>(x.size(), g[0]));
    });
}

// Adam ---------------------------------------------------------------------

Adam::Adam(std::vector<Tensor> params, AdamConfig config) : params_(std::move(params)), config_(config) {
    if (!(config_.beta1 >= 0.0 && config_.beta1 < 1.0) || !(config_.beta2 >= 0.0 && config_.beta2 < 1.0) ||
        !(config_.eps > 0.0)) {
        throw ConfigError("adam: betas must lie in [0, 1) and eps must be positive");
    }
    for (const auto& p : params_) {
        if (!p.is_leaf() || !p.requires_grad()) throw ContractError("adam: parameters must be trainable leaves");
        first_.emplace_back(p.size(), 0.0);
        second_.emplace_back(p.size(), 0.0);
    }
}

void Adam::step(double lr) {
    if (!(lr > 0.0)) throw ConfigError("adam: learning rate must be positive, got " + std::to_string(lr));
    ++steps_;
    const double t = static_cast<double>(steps_);
    const double correction1 = 1.0 - std::pow(config_.beta1, t);
    const double correction2 = 1.0 - std::pow(config_.beta2, t);
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto theta = params_[k].mutable_data();
        const auto grad = params_[k].mutable_grad();
        auto& m = first_[k];
        auto& v = second_[k];
        for (std::size_t i = 0; i < theta.size(); ++i) {
            m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * grad[i];
            v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * grad[i] * grad[i];
            const double m_hat = m[i] / correction1;
            const double v_hat = v[i] / correction2;
            theta[i] -= lr * m_hat / (std::sqrt(v_hat) + config_.eps);
        }
    }
}

void Adam::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

}  // namespace simclip::nd
