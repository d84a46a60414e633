#pragma once

// Channel-gated feature refiner and a residual MLP adapter.
//
// The refiner takes a channels-last feature map [B, H, W, C], scales each
// channel by a learned gate computed from pooled channel statistics, adds a
// strided conv / transpose-conv spatial path and the original input, and
// normalizes over the channel axis.  The adapter is a pointwise bottleneck
// MLP added back to its input with a fixed scale; its up-projection starts
// at zero so a freshly built adapter is exactly the identity.

#include "samba/layers.hpp"
#include "samba/rng.hpp"
#include "samba/tensor.hpp"

#include <string>

namespace samba {

struct RefinerConfig {
    int64_t channels = 0;
    float ratio = 0.25f;     // gate-MLP bottleneck = floor(channels * ratio)
    int kernel = 3;          // spatial path kernel (odd), stride fixed at 2
    float eps = 1e-5f;       // channel normalization epsilon
    bool channel_gate = true;

    // Validates and returns the gate bottleneck width.
    int64_t hidden() const;
};

struct MlpAdapterConfig {
    int64_t channels = 0;
    float ratio = 0.25f;  // bottleneck = floor(channels * ratio)
    float scale = 1.0f;   // residual scale in [0, 1]

    int64_t hidden() const;
};

class Refiner {
public:
    Refiner() = default;
    Refiner(const RefinerConfig& cfg, Rng& rng);

    // Pooled channel statistics: global average over space for the first
    // `channels` entries, global max for the second. x: [B, H, W, C].
    Tensor descriptor(const Tensor& x) const;

    // Per-channel gate in (0, 1): sigmoid over the bottleneck MLP of a
    // descriptor. desc: [B, 2C] -> [B, C].
    Tensor gate_values(const Tensor& desc) const;

    // x scaled per channel by gate_values(desc), broadcast over space.
    Tensor apply_gate(const Tensor& desc, const Tensor& x) const;

    // Full pipeline; preserves [B, H, W, C]. H and W must be even so the
    // stride-2 down/up pair reproduces the spatial extents.
    Tensor forward(const Tensor& x) const;

    void visit(const std::string& name, const ParamVisitor& v);
    int64_t param_count() const;

    RefinerConfig config;
    LinearLayer squeeze;   // [2C -> hidden]
    LinearLayer excite;    // [hidden -> C]
    Conv2DLayer down;      // stride 2
    ConvTranspose2DLayer up;  // stride 2, restores extents
    LayerNormLayer norm;   // over the channel axis (channels-last)
};

class MlpAdapter {
public:
    MlpAdapter() = default;
    MlpAdapter(const MlpAdapterConfig& cfg, Rng& rng);

    // scale * up(gelu(down(x))) over the last axis of [B, H, W, C]: the
    // adapter's contribution alone, for callers that manage the residual
    // sum themselves (e.g. a block adding several parallel branches).
    Tensor delta(const Tensor& x) const;

    // x + delta(x).
    Tensor forward(const Tensor& x) const;

    void visit(const std::string& name, const ParamVisitor& v);
    int64_t param_count() const;

    MlpAdapterConfig config;
    LinearLayer down;  // [C -> hidden]
    LinearLayer up;    // [hidden -> C], zero-initialized
};

}  // namespace samba
