#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "kiunet/ops.hpp"
#include "kiunet/random.hpp"
#include "kiunet/tensor.hpp"

namespace kiunet {

struct GradcheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
    /// Set when a non-finite value was met; names the offending coordinate.
    std::optional<std::string> failure;

    bool passed(double tolerance) const { return !failure && max_relative_error < tolerance; }
};

/// Compares reverse-mode gradients with central finite differences.
///
/// `fn` recomputes the output from the current values of `inputs` (which must
/// be double-precision leaves; they are perturbed in place and restored).
/// Non-scalar outputs are reduced with a fixed random projection so that the
/// whole Jacobian participates. Error per coordinate is
/// |analytic - numeric| / max(1, |numeric|).
inline GradcheckResult gradcheck(const std::function<Tensor<double>()>& fn,
                                 std::vector<Tensor<double>> inputs, double epsilon = 1e-5,
                                 std::uint64_t projection_seed = 0x5eed) {
    GradcheckResult result;
    std::vector<double> projection;

    auto scalar_of = [&](const Tensor<double>& out) {
        if (out.numel() == 1) {
            return out;
        }
        if (projection.empty()) {
            Rng rng(projection_seed);
            projection.resize(out.numel());
            for (double& p : projection) {
                p = rng.normal();
            }
        }
        return weighted_sum(out, projection);
    };

    for (auto& t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    Tensor<double> loss = scalar_of(fn());
    loss.backward();

    NoGradGuard no_grad;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        Tensor<double>& t = inputs[i];
        std::vector<double> analytic(t.grad().begin(), t.grad().end());
        if (analytic.empty()) {
            analytic.assign(t.numel(), 0.0);
        }
        auto values = t.mutable_values();
        for (std::size_t j = 0; j < values.size(); ++j) {
            const double original = values[j];
            values[j] = original + epsilon;
            const double plus = scalar_of(fn()).item();
            values[j] = original - epsilon;
            const double minus = scalar_of(fn()).item();
            values[j] = original;

            const double numeric = (plus - minus) / (2.0 * epsilon);
            if (!std::isfinite(numeric) || !std::isfinite(analytic[j])) {
                result.failure = "non-finite gradient at input " + std::to_string(i) + ", index " +
                                 std::to_string(j);
                return result;
            }
            const double err = std::abs(analytic[j] - numeric) / std::max(1.0, std::abs(numeric));
            ++result.checked;
            if (err > result.max_relative_error) {
                result.max_relative_error = err;
                result.worst_input = i;
                result.worst_index = j;
            }
        }
    }
    return result;
}

}  // namespace kiunet
