#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "simclip/ndgrad.hpp"
#include "simclip/rng.hpp"

namespace simclip::testing {

inline nd::Tensor random_tensor(Rng& rng, nd::Shape shape, bool trainable, double scale = 1.0) {
    std::vector<double> values(nd::numel(shape));
    for (auto& v : values) v = scale * rng.normal();
    return trainable ? nd::Tensor::parameter(std::move(shape), std::move(values))
                     : nd::Tensor::constant(std::move(shape), std::move(values));
}

/// Builds a scalar loss on a fresh tape from the current parameter values.
using LossFn = std::function<nd::Tensor(nd::Tape&)>;

struct GradCheck {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
};

/// Compares backward() against central differences for every entry of
/// `params`. Relative error is |a - n| / max(|a|, |n|, floor).
inline GradCheck check_gradients(const LossFn& loss, const std::vector<nd::Tensor>& params, double h = 1e-5,
                                 double floor = 1e-6) {
    for (auto p : params) p.zero_grad();
    {
        nd::Tape tape;
        tape.backward(loss(tape));
    }
    auto value = [&] {
        nd::Tape tape;
        return loss(tape).item();
    };
    GradCheck out;
    for (auto p : params) {
        const std::vector<double> analytic(p.grad().begin(), p.grad().end());
        auto data = p.mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            data[i] = saved + h;
            const double up = value();
            data[i] = saved - h;
            const double down = value();
            data[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
            out.max_rel_error = std::max(out.max_rel_error, std::abs(analytic[i] - numeric) / denom);
            ++out.checked;
        }
    }
    return out;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("simclip_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace simclip::testing
