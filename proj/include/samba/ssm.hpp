#pragma once

// State-space sequence blocks over 2-D feature maps.
//
// A 1-D selective scan runs a per-channel linear recurrence whose step size,
// input map, and output map are projected from the input itself.  The 2-D
// form unfolds a [B, C, H, W] map into four traversals (row-major, reversed
// row-major, column-major, reversed column-major), scans each with its own
// parameters, folds the results back, and sums them.  A VSS block wraps that
// in a pre-norm residual: norm, expand, depthwise conv, activate, scan, and
// project back.  The decoder stacks transpose-conv upsampling, skip fusion,
// and VSS blocks into per-class logits.

#include "samba/layers.hpp"
#include "samba/rng.hpp"
#include "samba/tensor.hpp"

#include <string>
#include <vector>

namespace samba {

// One traversal direction: data-dependent projections plus the channel
// recurrence parameters.
struct ScanDirection {
    LinearLayer step;      // [C -> C], softplus of its output is the step size
    LinearLayer input_map;   // [C -> N]
    LinearLayer output_map;  // [C -> N]
    Tensor decay;          // [C, N], negative-leaning state matrix diagonal
    Tensor skip;           // [C], direct input passthrough

    ScanDirection() = default;
    ScanDirection(int64_t channels, int64_t state, Rng& rng);

    // u: [B, L, C] -> same shape.
    Tensor forward(const Tensor& u) const;
    void visit(const std::string& name, const ParamVisitor& v);
    int64_t param_count() const;
};

// Four-direction 2-D scan over [B, C, H, W].
class Ss2d {
public:
    Ss2d() = default;
    Ss2d(int64_t channels, int64_t state, Rng& rng);

    Tensor forward(const Tensor& x) const;
    void visit(const std::string& name, const ParamVisitor& v);
    int64_t param_count() const;

    int64_t channels = 0;
    ScanDirection dirs[4];  // row, row-reversed, column, column-reversed
};

struct VssBlockConfig {
    int64_t channels = 0;
    int64_t state = 8;
    int64_t expand = 2;  // inner width = channels * expand
    int dw_kernel = 3;

    void validate() const;
};

// Pre-norm residual block: x + out(SS2D(silu(dwconv(in(norm(x)))))).
class VssBlock {
public:
    VssBlock() = default;
    VssBlock(const VssBlockConfig& cfg, Rng& rng);

    // x: [B, C, H, W] -> same shape.
    Tensor forward(const Tensor& x) const;
    void visit(const std::string& name, const ParamVisitor& v);
    int64_t param_count() const;

    VssBlockConfig config;
    LayerNormLayer norm;          // over channels
    LinearLayer expand_in;        // [C -> C*expand]
    DepthwiseConv2DLayer dwconv;  // per-channel spatial mixing
    Ss2d scan;
    LinearLayer project_out;      // [C*expand -> C]
};

struct DecoderConfig {
    int64_t bottleneck_channels = 0;
    std::vector<int64_t> skip_channels;  // deepest first; one per stage
    int64_t classes = 0;
    int blocks_per_stage = 1;
    int64_t state = 8;
    int64_t expand = 2;
    int dw_kernel = 3;

    void validate() const;
};

// Progressive upsampling decoder: per stage, a stride-2 transpose conv
// doubles resolution, the stage's fused skip is concatenated, a pointwise
// conv folds the channels, and VSS blocks mix. A final 1x1 head emits
// per-class logits.
class SsmDecoder {
public:
    SsmDecoder() = default;
    SsmDecoder(const DecoderConfig& cfg, Rng& rng);

    // bottleneck: [B, Cb, H, W]; skips deepest-first, each twice the spatial
    // extent of the previous level. Returns [B, classes, H*2^stages, W*2^stages].
    Tensor forward(const Tensor& bottleneck, const std::vector<Tensor>& skips) const;
    void visit(const std::string& name, const ParamVisitor& v);
    int64_t param_count() const;

    DecoderConfig config;
    std::vector<ConvTranspose2DLayer> ups;   // one per stage
    std::vector<Conv2DLayer> folds;          // pointwise, 2C -> C
    std::vector<std::vector<VssBlock>> blocks;
    Conv2DLayer head;                        // 1x1 -> classes
};

}  // namespace samba
