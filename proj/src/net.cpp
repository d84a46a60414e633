#include "samba/net.hpp"

#include <string>
#include <utility>

namespace samba {

void NetConfig::validate() const {
    if (in_channels < 1) throw ConfigError("net input channels must be positive");
    if (classes < 1) throw ConfigError("net class count must be positive");
    if (stage_channels.empty()) throw ConfigError("net needs at least one stage");
    if (attn_blocks.size() != stage_channels.size() ||
        scan_blocks.size() != stage_channels.size()) {
        throw ConfigError("per-stage block counts must match the stage count");
    }
    if (decoder_blocks < 1) throw ConfigError("decoder blocks per stage must be positive");
    if (heads < 1 || window < 1 || mlp_ratio < 1 || state < 1 || expand < 1 || dw_kernel < 1)
        throw ConfigError("net block hyperparameters must be positive");
    for (size_t i = 0; i + 1 < stage_channels.size(); ++i) {
        if (stage_channels[i + 1] != stage_channels[i] * 2) {
            throw ConfigError("stage channels must double with each downsample, got " +
                              std::to_string(stage_channels[i]) + " -> " +
                              std::to_string(stage_channels[i + 1]));
        }
    }
    for (int i = 0; i < stages(); ++i) {
        const int64_t c = stage_channels[i];
        const int64_t h = stage_height(i);
        const int64_t w = stage_width(i);
        const std::string where = "stage " + std::to_string(i);
        if (c < 1) throw ConfigError(where + " channels must be positive");
        if (attn_blocks[i] < 1 || scan_blocks[i] < 1)
            throw ConfigError(where + " block counts must be positive");
        if (c % heads != 0) {
            throw ConfigError(where + " channels " + std::to_string(c) +
                              " not divisible by " + std::to_string(heads) + " heads");
        }
        // Even extents >= 2 keep the 2x downsample, the refiner's stride-2
        // round trip, and the fusion module's 2x pooling all exact.  The
        // constraints are switch-independent so any valid geometry stays
        // valid under every ablation combination.
        if (h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0) {
            throw ConfigError(where + " extents " + std::to_string(h) + "x" +
                              std::to_string(w) + " must be even and at least 2");
        }
        if (h % window != 0 || w % window != 0) {
            throw ConfigError(where + " extents " + std::to_string(h) + "x" +
                              std::to_string(w) + " not divisible by window " +
                              std::to_string(window));
        }
    }
    const int64_t hb = height >> stages();
    const int64_t wb = width >> stages();
    if (hb < 2 || wb < 2 || hb % 2 != 0 || wb % 2 != 0) {
        throw ConfigError("bottleneck extents " + std::to_string(hb) + "x" +
                          std::to_string(wb) + " must be even and at least 2");
    }
}

SambaNet::SambaNet(const NetConfig& cfg) : config(cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    attn_stem = Conv2DLayer(cfg.in_channels, cfg.stage_channels[0], 3, 1, 1, true, rng);
    for (int i = 0; i < cfg.stages(); ++i) {
        HieraStageConfig sc;
        sc.channels = cfg.stage_channels[i];
        sc.blocks = cfg.attn_blocks[i];
        sc.window = cfg.window;
        sc.heads = cfg.heads;
        sc.downsample = 2;
        sc.mlp_ratio = cfg.mlp_ratio;
        sc.use_refiner = cfg.refiner;
        sc.use_mlp_adapter = cfg.mlp_adapter;
        sc.channel_gate = cfg.channel_attn;
        attn_stages.emplace_back(sc, rng);
    }
    scan_stem = Conv2DLayer(cfg.in_channels, cfg.stage_channels[0], 3, 1, 1, true, rng);
    for (int i = 0; i < cfg.stages(); ++i) {
        VssBlockConfig bc;
        bc.channels = cfg.stage_channels[i];
        bc.state = cfg.state;
        bc.expand = cfg.expand;
        bc.dw_kernel = cfg.dw_kernel;
        ScanStage stage;
        for (int j = 0; j < cfg.scan_blocks[i]; ++j) stage.blocks.emplace_back(bc, rng);
        stage.down = Conv2DLayer(bc.channels, bc.channels * 2, 2, 2, 0, true, rng);
        scan_stages.push_back(std::move(stage));
    }
    for (int i = 0; i <= cfg.stages(); ++i) {
        HoacmConfig hc;
        const bool bottleneck = i == cfg.stages();
        hc.channels = bottleneck ? cfg.bottleneck_channels() : cfg.stage_channels[i];
        hc.height = cfg.stage_height(i);
        hc.width = cfg.stage_width(i);
        hc.use_oca = cfg.oca;
        hc.use_bsea = cfg.bsea;
        hc.oca_gsa_gate = cfg.gcaa;
        hc.bsea_affinity = cfg.adapt_attn;
        hc.fuse_mode = cfg.fuse_mode;
        fuses.emplace_back(hc, rng);
    }
    DecoderConfig dc;
    dc.bottleneck_channels = cfg.bottleneck_channels();
    dc.skip_channels.assign(cfg.stage_channels.rbegin(), cfg.stage_channels.rend());
    dc.classes = cfg.classes;
    dc.blocks_per_stage = cfg.decoder_blocks;
    dc.state = cfg.state;
    dc.expand = cfg.expand;
    dc.dw_kernel = cfg.dw_kernel;
    decoder = SsmDecoder(dc, rng);
}

Tensor SambaNet::ScanStage::forward_blocks(const Tensor& x) const {
    Tensor cur = x;
    for (const auto& block : blocks) cur = block.forward(cur);
    return cur;
}

void SambaNet::ScanStage::visit(const std::string& name, const ParamVisitor& v) {
    for (size_t j = 0; j < blocks.size(); ++j)
        blocks[j].visit(name + ".block" + std::to_string(j), v);
    down.visit(name + ".down", v);
}

int64_t SambaNet::ScanStage::param_count() const {
    int64_t total = down.param_count();
    for (const auto& block : blocks) total += block.param_count();
    return total;
}

Tensor SambaNet::forward(const Tensor& image) const {
    const Shape& s = image.shape();
    if (s.size() != 4 || s[1] != config.in_channels) {
        throw ShapeError("net expects [B, " + std::to_string(config.in_channels) +
                         ", H, W], got " + shape_str(s));
    }
    if (s[2] != config.height || s[3] != config.width) {
        throw ConfigError("net built for " + std::to_string(config.height) + "x" +
                          std::to_string(config.width) + " inputs, got " + shape_str(s));
    }
    Tensor fa = attn_stem.forward(image);
    Tensor fs = scan_stem.forward(image);
    std::vector<Tensor> fused(static_cast<size_t>(config.stages()));
    for (int i = 0; i < config.stages(); ++i) {
        Tensor sa = attn_stages[i].forward_blocks(fa);
        Tensor ss = scan_stages[i].forward_blocks(fs);
        fused[i] = fuses[i].forward(sa, ss);
        fa = attn_stages[i].downsample(sa);
        fs = scan_stages[i].down.forward(ss);
    }
    Tensor bottleneck = fuses.back().forward(fa, fs);
    std::vector<Tensor> skips(fused.rbegin(), fused.rend());
    return decoder.forward(bottleneck, skips);
}

void SambaNet::visit(const ParamVisitor& v) {
    attn_stem.visit("attn.stem", v);
    for (size_t i = 0; i < attn_stages.size(); ++i)
        attn_stages[i].visit("attn.stage" + std::to_string(i), v);
    scan_stem.visit("scan.stem", v);
    for (size_t i = 0; i < scan_stages.size(); ++i)
        scan_stages[i].visit("scan.stage" + std::to_string(i), v);
    for (size_t i = 0; i + 1 < fuses.size(); ++i)
        fuses[i].visit("fuse.stage" + std::to_string(i), v);
    fuses.back().visit("fuse.bottleneck", v);
    decoder.visit("decoder", v);
}

void SambaNet::visit_trainable(const ParamVisitor& v) {
    if (!config.freeze_trunk) {
        visit(v);
        return;
    }
    for (size_t i = 0; i < attn_stages.size(); ++i)
        attn_stages[i].visit_adapters("attn.stage" + std::to_string(i), v);
    scan_stem.visit("scan.stem", v);
    for (size_t i = 0; i < scan_stages.size(); ++i)
        scan_stages[i].visit("scan.stage" + std::to_string(i), v);
    for (size_t i = 0; i + 1 < fuses.size(); ++i)
        fuses[i].visit("fuse.stage" + std::to_string(i), v);
    fuses.back().visit("fuse.bottleneck", v);
    decoder.visit("decoder", v);
}

int64_t SambaNet::param_count() const {
    int64_t total = attn_stem.param_count() + scan_stem.param_count() + decoder.param_count();
    for (const auto& stage : attn_stages) total += stage.param_count();
    for (const auto& stage : scan_stages) total += stage.param_count();
    for (const auto& fuse : fuses) total += fuse.param_count();
    return total;
}

std::map<std::string, int64_t> SambaNet::parameter_census() const {
    std::map<std::string, int64_t> census;
    census["attn.stem"] = attn_stem.param_count();
    for (size_t i = 0; i < attn_stages.size(); ++i)
        census["attn.stage" + std::to_string(i)] = attn_stages[i].param_count();
    census["scan.stem"] = scan_stem.param_count();
    for (size_t i = 0; i < scan_stages.size(); ++i)
        census["scan.stage" + std::to_string(i)] = scan_stages[i].param_count();
    for (size_t i = 0; i + 1 < fuses.size(); ++i)
        census["fuse.stage" + std::to_string(i)] = fuses[i].param_count();
    census["fuse.bottleneck"] = fuses.back().param_count();
    census["decoder"] = decoder.param_count();
    return census;
}

}  // namespace samba
