#pragma once

// Full segmentation model: two encoder branches walk the same image pyramid
// side by side — a windowed-attention branch and a state-space scan branch —
// and at every resolution their pre-downsample features are fused by the
// convergence module.  The fused skips and the fused bottleneck feed a
// progressive-upsampling scan-block decoder that emits per-class logits at
// input resolution.  Both branches share stage geometry so the fusion is
// shape-exact; the branches are independent up to the fusion points, but
// evaluation order is fixed here for bitwise reproducibility.

#include "samba/hiera.hpp"
#include "samba/hoacm.hpp"
#include "samba/layers.hpp"
#include "samba/rng.hpp"
#include "samba/ssm.hpp"
#include "samba/tensor.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace samba {

struct NetConfig {
    int64_t in_channels = 1;
    int64_t height = 64;
    int64_t width = 64;
    int64_t classes = 4;

    // Stage widths double with every 2x downsample (the strided stage exits
    // widen by their spatial factor), so consecutive entries must double.
    std::vector<int64_t> stage_channels = {8, 16, 32};
    std::vector<int> attn_blocks = {1, 1, 1};  // attention-branch depth per stage
    std::vector<int> scan_blocks = {1, 1, 1};  // scan-branch depth per stage
    int decoder_blocks = 1;

    int heads = 4;
    int window = 4;
    int mlp_ratio = 4;
    int64_t state = 8;
    int64_t expand = 2;
    int dw_kernel = 3;

    // Ablation switches.  Every switch only removes parameters.  Three carry
    // a second name in reports: the MLP adapter is also reported as IRMLP,
    // the affinity core of the scan-branch gate as AdaptAttn, and the global
    // context gate of the attention-branch gate as GCAA.
    bool refiner = true;       // per-block feature refiner on attention outputs
    bool channel_attn = true;  // the refiner's pooled channel gate
    bool mlp_adapter = true;   // bottleneck insert beside each block MLP (IRMLP)
    bool adapt_attn = true;    // affinity attention inside the scan-branch gate
    bool gcaa = true;          // global-context gate inside the attention-branch gate
    bool oca = true;           // attention-branch gate in the fusion module
    bool bsea = true;          // scan-branch gate in the fusion module
    HoacmFuseMode fuse_mode = HoacmFuseMode::Full;

    // When set, the attention branch's stem, blocks, norms, and downsamples
    // are excluded from the trainable set; only its inserted adapters train.
    bool freeze_trunk = false;

    uint64_t seed = 1;

    int stages() const { return static_cast<int>(stage_channels.size()); }
    int64_t bottleneck_channels() const { return stage_channels.back() * 2; }
    int64_t stage_height(int i) const { return height >> i; }
    int64_t stage_width(int i) const { return width >> i; }
    void validate() const;
};

class SambaNet {
public:
    SambaNet() = default;
    explicit SambaNet(const NetConfig& cfg);

    // image: [B, in_channels, height, width] -> logits [B, classes, height, width].
    Tensor forward(const Tensor& image) const;

    // Every parameter, under stable fully-qualified names (checkpoint order).
    void visit(const ParamVisitor& v);

    // The optimizer-visible subset: everything, unless config.freeze_trunk
    // is set, in which case the attention branch contributes only its
    // refiner and MLP-adapter inserts.
    void visit_trainable(const ParamVisitor& v);

    int64_t param_count() const;

    // Component name -> parameter count; values sum to param_count().
    std::map<std::string, int64_t> parameter_census() const;

    NetConfig config;

    Conv2DLayer attn_stem;  // 3x3, image channels -> first stage width
    Conv2DLayer scan_stem;
    std::vector<HieraStage> attn_stages;

    // Scan-branch stage: shape-preserving scan blocks, then the same 2x
    // strided downsample geometry as the attention branch.
    struct ScanStage {
        std::vector<VssBlock> blocks;
        Conv2DLayer down;  // 2x2 stride 2, C -> 2C

        Tensor forward_blocks(const Tensor& x) const;
        void visit(const std::string& name, const ParamVisitor& v);
        int64_t param_count() const;
    };
    std::vector<ScanStage> scan_stages;

    std::vector<HoacmFuse> fuses;  // one per stage, bottleneck fuse last
    SsmDecoder decoder;
};

}  // namespace samba
