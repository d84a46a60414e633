#pragma once

// Shared helpers for the test binaries: approximate comparisons and a
// central-difference gradient checker.

#include "samba/ops.hpp"
#include "samba/tensor.hpp"

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

namespace testutil {

inline bool near(float a, float b, float tol = 1e-5f) { return std::fabs(a - b) <= tol; }

// Smallest-magnitude shift s such that every |v + s| > margin.  Used before
// finite-difference checks to move piecewise-linear breakpoints (ReLU
// inputs, pool ties) away from the probe interval; throws when the values
// leave no usable gap.
inline float shift_clear(const std::vector<float>& vals, float margin) {
    auto ok = [&](float s) {
        for (float v : vals)
            if (std::fabs(v + s) <= margin) return false;
        return true;
    };
    if (ok(0.0f)) return 0.0f;
    float best = 1e30f;
    for (float v : vals)
        for (float side : {-1.0f, 1.0f}) {
            const float s = -v + side * (1.5f * margin);
            if (ok(s) && std::fabs(s) < std::fabs(best)) best = s;
        }
    if (best >= 1e30f) throw std::runtime_error("shift_clear: no kink-free shift exists");
    return best;
}

// Relative distance between two gradient vectors:
//   ||a - b||_2 / max(||a||_2, ||b||_2, eps)
// Robust where individual entries are near zero.
inline double grad_distance(const std::vector<float>& a, const std::vector<float>& b) {
    double da = 0.0, db = 0.0, dd = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        da += static_cast<double>(a[i]) * a[i];
        db += static_cast<double>(b[i]) * b[i];
        const double d = static_cast<double>(a[i]) - b[i];
        dd += d * d;
    }
    const double denom = std::max(std::sqrt(std::max(da, db)), 1e-8);
    return std::sqrt(dd) / denom;
}

// Checks the gradient of sum(out_fn()) for every listed parameter against
// central finite differences and returns the worst relative distance.
//
// `out_fn` may return a tensor of any shape and must rebuild the whole graph
// from the current parameter values on every call.  The finite-difference
// side sums the elementwise output difference in double precision, so the
// check stays meaningful at float32 even when the summed loss is orders of
// magnitude larger than a single-element sensitivity.
inline double gradcheck(const std::function<samba::Tensor()>& out_fn,
                        std::vector<samba::Tensor> params, float h = 1e-3f) {
    for (auto& p : params) p.zero_grad();
    samba::Tensor loss = samba::sum_all(out_fn());
    loss.backward();

    std::vector<std::vector<float>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) {
        const float* g = p.grad_data();
        analytic.emplace_back(g, g + p.numel());
    }

    double worst = 0.0;
    samba::NoGradGuard guard;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        samba::Tensor& p = params[pi];
        float* data = p.data();
        std::vector<float> fd(static_cast<size_t>(p.numel()));
        for (int64_t i = 0; i < p.numel(); ++i) {
            const float saved = data[i];
            data[i] = saved + h;
            const std::vector<float> up = out_fn().vec();
            data[i] = saved - h;
            const std::vector<float> dn = out_fn().vec();
            data[i] = saved;
            double diff = 0.0;
            for (size_t j = 0; j < up.size(); ++j) diff += static_cast<double>(up[j]) - dn[j];
            fd[static_cast<size_t>(i)] = static_cast<float>(diff / (2.0 * h));
        }
        worst = std::max(worst, grad_distance(analytic[pi], fd));
    }
    return worst;
}

}  // namespace testutil
