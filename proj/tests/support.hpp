#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <span>
#include <cmath>
#include <functional>
#include <vector>

#include "peftqa/ops.hpp"
#include "peftqa/tensor.hpp"

namespace peftqa::testing {

struct GradCheckResult {
    double max_rel = 0.0;     // worst per-tensor ||analytic - numeric|| / ||numeric||
    double max_coord = 0.0;   // worst per-coordinate |a - n| / max(|a|, |n|, floor)
};

// Projects the output of `fn` onto fixed random weights, so the scalar under
// test is sum(out * w). Finite differences evaluate that sum in double.
inline GradCheckResult gradcheck(const std::vector<Tensor>& inputs, const std::function<Tensor()>& fn,
                                 double eps = 1e-3, std::uint64_t seed = 99, double floor = 1e-2) {
    Tensor probe = fn();
    Rng rng(seed);
    Tensor w = Tensor::randn(probe.shape(), 1.0f, rng);
    auto project = [&](const Tensor& out) {
        double s = 0.0;
        for (std::size_t i = 0; i < out.numel(); ++i) s += static_cast<double>(out.data()[i]) * w.data()[i];
        return s;
    };
    for (auto t : inputs) t.zero_grad();
    ops::sum(ops::mul(fn(), w)).backward();

    GradCheckResult r;
    for (auto t : inputs) {
        std::vector<double> analytic(t.numel(), 0.0);
        if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
        double diff2 = 0.0, ref2 = 0.0;
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const float saved = t.data()[i];
            t.data()[i] = saved + static_cast<float>(eps);
            const double up = project(fn());
            t.data()[i] = saved - static_cast<float>(eps);
            const double down = project(fn());
            t.data()[i] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
            ref2 += numeric * numeric;
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
            r.max_coord = std::max(r.max_coord, std::abs(analytic[i] - numeric) / denom);
        }
        r.max_rel = std::max(r.max_rel, std::sqrt(diff2) / std::max(std::sqrt(ref2), 1e-12));
    }
    return r;
}

// Checks `samples` random coordinates per input. Errors are relative with an
// absolute floor of `floor_frac` times the largest analytic gradient: float32
// forwards put a noise floor under coordinates whose gradient is near zero.
inline double gradcheck_sampled(const std::vector<Tensor>& inputs, const std::function<Tensor()>& fn,
                                std::size_t samples = 20, double eps = 2e-3, double floor_frac = 1e-3,
                                std::uint64_t seed = 99) {
    Tensor probe = fn();
    Rng rng(seed);
    Tensor w = Tensor::randn(probe.shape(), 1.0f, rng);
    auto project = [&](const Tensor& out) {
        double s = 0.0;
        for (std::size_t i = 0; i < out.numel(); ++i) s += static_cast<double>(out.data()[i]) * w.data()[i];
        return s;
    };
    for (auto t : inputs) t.zero_grad();
    ops::sum(ops::mul(fn(), w)).backward();

    double gmax = 0.0;
    for (const auto& t : inputs) {
        if (!t.has_grad()) continue;
        for (float g : t.grad()) gmax = std::max(gmax, static_cast<double>(std::abs(g)));
    }
    double worst = 0.0;
    for (auto t : inputs) {
        std::vector<double> analytic(t.numel(), 0.0);
        if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
        for (std::size_t s = 0; s < samples; ++s) {
            const std::size_t i = rng() % t.numel();
            const float saved = t.data()[i];
            t.data()[i] = saved + static_cast<float>(eps);
            const double up = project(fn());
            t.data()[i] = saved - static_cast<float>(eps);
            const double down = project(fn());
            t.data()[i] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor_frac * gmax, 1e-12});
            worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
        }
    }
    return worst;
}

inline double max_abs_diff(std::span<const float> a, std::span<const float> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    }
    return a.size() == b.size() ? m : INFINITY;
}

inline bool bit_identical(std::span<const float> a, std::span<const float> b) {
    return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](float x, float y) {
               return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y);
           });
}

}  // namespace peftqa::testing
