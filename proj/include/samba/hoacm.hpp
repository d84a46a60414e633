#pragma once

// Skip-fusion attention stack joining the two encoder branches at every
// stage: a dual-pooled channel-affinity gate on the state-space branch
// (Bsea), a cascaded global-context sigmoid gate on the windowed-attention
// branch (Oca), and a convergence step that merges the two gated maps into
// the decoder skip.

#include "samba/layers.hpp"
#include "samba/rng.hpp"
#include "samba/tensor.hpp"

#include <string>

namespace samba {

struct BseaConfig {
    int64_t channels = 0;
    int64_t height = 0;  // nominal map extent; fixes the gate-scale init
    int64_t width = 0;
    bool affinity = true;  // the shared-projection channel-affinity core

    void validate() const;  // positive channels, even extents >= 2
};

// Optional intermediate products for invariant checks.
struct BseaTrace {
    Tensor affinity_avg;  // [B,C,C], rows sum to 1 (affinity mode only)
    Tensor affinity_max;  // [B,C,C]
    Tensor spatial_map;   // [B,C,H,W] pre-scale; sums to 1 over H*W per (b,c)
};

// Dual-path pooled attention producing a spatial gate:
//   avg-pool and max-pool the map 2x; push both through one shared set of
//   1x1 query/key/value projections; per path, the [C,C] row-softmax of
//   Q*K^T mixes channels of V; the two mixed maps are summed, upsampled
//   back, spatially softmax-normalized per channel, rescaled by a learned
//   positive scalar (so the gate starts magnitude-preserving on constant
//   maps), and multiplied into the input.
class Bsea {
public:
    Bsea() = default;
    Bsea(const BseaConfig& cfg, Rng& rng);

    Tensor forward(const Tensor& x) const { return forward_traced(x, nullptr); }
    Tensor forward_traced(const Tensor& x, BseaTrace* trace) const;

    void visit(const std::string& name, const ParamVisitor& v);
    int64_t param_count() const;

    BseaConfig config;
    Conv2DLayer query;  // 1x1, no bias, shared by both pooled paths
    Conv2DLayer key;    // 1x1, no bias
    Conv2DLayer value;  // 1x1, no bias
    Tensor log_scale;   // [1], init log(H*W); gate scale = exp(log_scale)
};

struct OcaConfig {
    bool gsa_gate = true;  // the intermediate 2-channel sigmoid gate
};

// Global-context gate on the attention branch: channel max and mean maps
// (max first) are concatenated, contrast-enhanced by their own global
// average, optionally passed through a 7x7 2->2 sigmoid gate, then squeezed
// by a 7x7 conv + instance norm + ReLU into a single-channel sigmoid gate
// broadcast over all input channels.
class Oca {
public:
    Oca() = default;
    Oca(const OcaConfig& cfg, Rng& rng);

    // global_out, when non-null, receives the contrast-enhanced 2-channel
    // map (pre-gates) for invariant checks.
    Tensor forward(const Tensor& x, Tensor* global_out = nullptr) const;

    void visit(const std::string& name, const ParamVisitor& v);
    int64_t param_count() const;

    OcaConfig config;
    Conv2DLayer gsa;                   // 7x7, 2->2, pad 3; live when gsa_gate
    Conv2DLayer squeeze;               // 7x7, 2->1, pad 3
    InstanceNorm2DLayer squeeze_norm;  // normalization inside the squeeze
};

enum class HoacmFuseMode {
    Full,     // concat -> pointwise conv -> channel LayerNorm, with residual
    Average,  // parameter-free mean of the two gated maps
};

struct HoacmConfig {
    int64_t channels = 0;
    int64_t height = 0;
    int64_t width = 0;
    bool use_oca = true;
    bool use_bsea = true;
    bool oca_gsa_gate = true;   // inner OCA gate
    bool bsea_affinity = true;  // inner BSEA affinity core
    HoacmFuseMode fuse_mode = HoacmFuseMode::Full;

    void validate() const;
};

// Convergence step: gate each branch, then fuse.  In Full mode
//   fused = LayerNorm_channels(PW(concat(oca_out, bsea_out)) + (f_sam + f_mamba)/2)
// and in Average mode fused = (oca_out + bsea_out)/2.  Disabled gates pass
// their branch through untouched and drop their parameters entirely.
class HoacmFuse {
public:
    HoacmFuse() = default;
    HoacmFuse(const HoacmConfig& cfg, Rng& rng);

    Tensor forward(const Tensor& f_sam, const Tensor& f_mamba) const;

    void visit(const std::string& name, const ParamVisitor& v);
    int64_t param_count() const;

    HoacmConfig config;
    Oca oca;            // live when use_oca
    Bsea bsea;          // live when use_bsea
    Conv2DLayer pw;     // 1x1 2C->C; Full mode only
    LayerNormLayer norm;  // over channels; Full mode only
};

}  // namespace samba
