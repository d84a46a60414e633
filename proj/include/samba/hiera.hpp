#pragma once

// Windowed-attention encoder branch: partition/merge between feature maps
// and per-window token batches, multi-head self-attention inside fixed
// windows with a learned position table shared by all windows, residual
// blocks with optional refiner / MLP-adapter inserts, and stage-level
// strided downsampling.  Because every window reuses the same position
// table, features carry no cross-window position signal — the gap the
// fusion module downstream is built to compensate.

#include "samba/layers.hpp"
#include "samba/refiner.hpp"
#include "samba/rng.hpp"
#include "samba/tensor.hpp"

#include <string>
#include <vector>

namespace samba {

// [B,C,H,W] -> [B*(H/w)*(W/w), w*w, C]: cuts the map into non-overlapping
// w x w windows and flattens each into a row-major token sequence.  H and W
// must be divisible by w.  Lossless: window_unpartition inverts it exactly.
Tensor window_partition(const Tensor& x, int window);

// Inverse of window_partition; b/h/w_extent name the original map extents
// (they cannot be recovered from the token batch alone).
Tensor window_unpartition(const Tensor& tokens, int window, int64_t b, int64_t h,
                          int64_t w_extent);

struct WindowAttentionConfig {
    int64_t channels = 0;
    int heads = 4;
    int window = 4;

    void validate() const;  // heads >= 1 and dividing channels; window >= 1
    int64_t head_dim() const { return channels / heads; }
    int64_t tokens_per_window() const {
        return static_cast<int64_t>(window) * static_cast<int64_t>(window);
    }
};

// Multi-head scaled dot-product attention over one window's tokens, with a
// learned [w*w, C] position table added to every window identically before
// the projections.  Windows are independent batch entries, so information
// never crosses a window boundary here.
class WindowAttention {
public:
    WindowAttention() = default;
    WindowAttention(const WindowAttentionConfig& cfg, Rng& rng);

    // tokens: [Bw, w*w, C] -> [Bw, w*w, C].  When weights_out is non-null it
    // receives the post-softmax attention maps as [Bw, heads, w*w, w*w]
    // (every query row sums to 1).
    Tensor forward(const Tensor& tokens, Tensor* weights_out = nullptr) const;

    void visit(const std::string& name, const ParamVisitor& v);
    int64_t param_count() const;

    WindowAttentionConfig config;
    Tensor pos;         // [w*w, C], learned, shared across windows
    LinearLayer query;  // [C -> C]
    LinearLayer key;    // [C -> C]
    LinearLayer value;  // [C -> C]
    LinearLayer proj;   // [C -> C] output projection
};

struct HieraBlockConfig {
    int64_t channels = 0;
    int window = 4;
    int heads = 4;
    int mlp_ratio = 4;
    bool use_refiner = true;      // refiner on the attention output
    bool use_mlp_adapter = true;  // bottleneck adapter parallel to the MLP
    bool channel_gate = true;     // the refiner's channel-gate MLP

    void validate() const;
    int64_t mlp_hidden() const { return channels * mlp_ratio; }
};

// Pre-norm residual block over [B,C,H,W]:
//   x <- x + Refiner(WindowAttention(Norm(x)))     (refiner optional)
//   x <- x + Mlp(Norm(x)) + AdapterDelta(Norm(x))  (adapter optional)
// With both inserts disabled the block is a plain windowed-attention
// transformer block.
class HieraBlock {
public:
    HieraBlock() = default;
    HieraBlock(const HieraBlockConfig& cfg, Rng& rng);

    Tensor forward(const Tensor& x) const;

    // Trunk = norms, attention, MLP; adapters = refiner + MLP-adapter.  The
    // split lets a trainer freeze the trunk while leaving inserts live.
    void visit_trunk(const std::string& name, const ParamVisitor& v);
    void visit_adapters(const std::string& name, const ParamVisitor& v);
    void visit(const std::string& name, const ParamVisitor& v);
    int64_t param_count() const;

    HieraBlockConfig config;
    LayerNormLayer norm1;  // over channels, channels-last internally
    WindowAttention attn;
    Refiner refiner;       // live only when config.use_refiner
    LayerNormLayer norm2;
    LinearLayer fc1;       // [C -> mlp_ratio*C]
    LinearLayer fc2;       // [mlp_ratio*C -> C]
    MlpAdapter adapter;    // live only when config.use_mlp_adapter
};

struct HieraStageConfig {
    int64_t channels = 0;
    int blocks = 2;
    int window = 4;
    int heads = 4;
    int downsample = 2;  // spatial factor to the next stage; channels widen by it
    int mlp_ratio = 4;
    bool use_refiner = true;
    bool use_mlp_adapter = true;
    bool channel_gate = true;

    void validate() const;
    int64_t out_channels() const { return channels * downsample; }
};

// A run of blocks at constant resolution followed by a strided-conv
// downsample that widens channels by the same factor.
class HieraStage {
public:
    HieraStage() = default;
    HieraStage(const HieraStageConfig& cfg, Rng& rng);

    // Blocks only; preserves [B,C,H,W].  The pre-downsample output is what
    // feeds the skip connection at this resolution.
    Tensor forward_blocks(const Tensor& x) const;

    // Strided conv: [B,C,H,W] -> [B, C*f, H/f, W/f].
    Tensor downsample(const Tensor& x) const;

    Tensor forward(const Tensor& x) const { return downsample(forward_blocks(x)); }

    void visit_trunk(const std::string& name, const ParamVisitor& v);
    void visit_adapters(const std::string& name, const ParamVisitor& v);
    void visit(const std::string& name, const ParamVisitor& v);
    int64_t param_count() const;

    HieraStageConfig config;
    std::vector<HieraBlock> blocks;
    Conv2DLayer down;  // kernel = stride = downsample factor
};

}  // namespace samba
