#pragma once

// A branch-light exponential for numeric inner loops.
//
// Libm's scalar expf is correctly rounded but opaque to the vectorizer, so
// loops that call it per element serialize.  This version reduces x to
// x = k*ln2 + g with |g| <= ln2/2 via round-to-nearest, evaluates exp(g)
// with a degree-7 polynomial, and scales by 2^k through exponent bits.
// Relative error stays below ~1e-8 (well under a float ulp of the result
// after the final rounding), it returns exactly 1 at 0, and the whole body
// is a plain multiply-add chain the compiler can inline and vectorize.
// Inputs are clamped to the finite range of float exp, so the result is
// always finite for finite input.

#include <bit>
#include <cstdint>

namespace samba {

inline float fast_expf(float x) {
    x = x < -87.0f ? -87.0f : (x > 88.0f ? 88.0f : x);
    const float t = x * 1.4426950408889634f;  // x / ln 2
    // Adding 1.5 * 2^23 snaps t to the nearest integer in float (valid while
    // |t| < 2^22, guaranteed by the clamp) without a branch or int round.
    const float shifted = t + 12582912.0f;
    const float kf = shifted - 12582912.0f;
    // Two-part ln 2 keeps the residual accurate after the large subtraction.
    const float g = (x - kf * 0.693359375f) - kf * -2.12194440e-4f;
    float p = 1.9841270e-4f;  // 1/7!
    p = p * g + 1.3888889e-3f;
    p = p * g + 8.3333333e-3f;
    p = p * g + 4.1666667e-2f;
    p = p * g + 1.6666667e-1f;
    p = p * g + 0.5f;
    p = p * g + 1.0f;
    p = p * g + 1.0f;
    const int32_t k = static_cast<int32_t>(kf);
    const float scale = std::bit_cast<float>(static_cast<uint32_t>(k + 127) << 23);
    return p * scale;
}

}  // namespace samba
