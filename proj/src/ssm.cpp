#include "samba/ssm.hpp"

#include "samba/error.hpp"
#include "samba/nnops.hpp"
#include "samba/ops.hpp"

#include <cmath>

namespace samba {

namespace {

// Softplus of the step projection's zero-initialized bias starts the step
// size near this value.
constexpr float kInitialStep = 0.1f;

void check_channels_first(const Tensor& x, int64_t channels, const char* who) {
    if (x.rank() != 4) {
        throw ShapeError(std::string(who) + " expects [B,C,H,W], got " + shape_str(x.shape()));
    }
    if (x.shape()[1] != channels) {
        throw ShapeError(std::string(who) + " built for " + std::to_string(channels) +
                         " channels, got " + shape_str(x.shape()));
    }
}

}  // namespace

ScanDirection::ScanDirection(int64_t channels, int64_t state, Rng& rng) {
    step = LinearLayer(channels, channels, true, rng);
    const float b0 = std::log(std::exp(kInitialStep) - 1.0f);
    for (int64_t i = 0; i < step.bias.numel(); ++i) step.bias.data()[i] = b0;
    input_map = LinearLayer(channels, state, true, rng);
    output_map = LinearLayer(channels, state, true, rng);
    decay = Tensor::full({channels, state}, -1.0f, /*requires_grad=*/true);
    skip = Tensor::full({channels}, 1.0f, /*requires_grad=*/true);
}

Tensor ScanDirection::forward(const Tensor& u) const {
    Tensor delta = softplus(step.forward(u));
    Tensor b_in = input_map.forward(u);
    Tensor c_in = output_map.forward(u);
    return selective_scan(u, delta, decay, b_in, c_in, skip);
}

void ScanDirection::visit(const std::string& name, const ParamVisitor& v) {
    step.visit(name + ".step", v);
    input_map.visit(name + ".input_map", v);
    output_map.visit(name + ".output_map", v);
    v(name + ".decay", decay);
    v(name + ".skip", skip);
}

int64_t ScanDirection::param_count() const {
    return step.param_count() + input_map.param_count() + output_map.param_count() + decay.numel() +
           skip.numel();
}

Ss2d::Ss2d(int64_t channels_, int64_t state, Rng& rng) : channels(channels_) {
    for (auto& d : dirs) d = ScanDirection(channels_, state, rng);
}

Tensor Ss2d::forward(const Tensor& x) const {
    check_channels_first(x, channels, "ss2d");
    const int64_t b = x.shape()[0], c = channels, h = x.shape()[2], w = x.shape()[3];
    const int64_t l = h * w;

    Tensor row_seq = reshape(permute(x, {0, 2, 3, 1}), {b, l, c});
    Tensor col_seq = reshape(permute(x, {0, 3, 2, 1}), {b, l, c});
    Tensor y0 = dirs[0].forward(row_seq);
    Tensor y1 = flip(dirs[1].forward(flip(row_seq, 1)), 1);
    Tensor y2 = dirs[2].forward(col_seq);
    Tensor y3 = flip(dirs[3].forward(flip(col_seq, 1)), 1);

    Tensor row_sum = add(y0, y1);
    Tensor col_sum = add(y2, y3);
    Tensor row_map = permute(reshape(row_sum, {b, h, w, c}), {0, 3, 1, 2});
    Tensor col_map = permute(reshape(col_sum, {b, w, h, c}), {0, 3, 2, 1});
    return add(row_map, col_map);
}

void Ss2d::visit(const std::string& name, const ParamVisitor& v) {
    static const char* kDirNames[4] = {".row", ".row_rev", ".col", ".col_rev"};
    for (int i = 0; i < 4; ++i) dirs[i].visit(name + kDirNames[i], v);
}

int64_t Ss2d::param_count() const {
    int64_t n = 0;
    for (const auto& d : dirs) n += d.param_count();
    return n;
}

void VssBlockConfig::validate() const {
    if (channels < 1) throw ConfigError("vss block channels must be positive");
    if (state < 1) throw ConfigError("vss block state size must be positive");
    if (expand < 1) throw ConfigError("vss block expansion must be at least 1");
    if (dw_kernel < 1 || dw_kernel % 2 == 0) throw ConfigError("vss block kernel must be odd");
}

VssBlock::VssBlock(const VssBlockConfig& cfg, Rng& rng) : config(cfg) {
    cfg.validate();
    const int64_t inner = cfg.channels * cfg.expand;
    norm = LayerNormLayer(cfg.channels);
    expand_in = LinearLayer(cfg.channels, inner, true, rng);
    dwconv = DepthwiseConv2DLayer(inner, cfg.dw_kernel, 1, cfg.dw_kernel / 2, true, rng);
    scan = Ss2d(inner, cfg.state, rng);
    project_out = LinearLayer(inner, cfg.channels, true, rng);
}

Tensor VssBlock::forward(const Tensor& x) const {
    check_channels_first(x, config.channels, "vss block");
    const int64_t b = x.shape()[0], c = config.channels, h = x.shape()[2], w = x.shape()[3];
    const int64_t inner = c * config.expand;

    Tensor rows = reshape(permute(x, {0, 2, 3, 1}), {b, h * w, c});
    Tensor widened = expand_in.forward(norm.forward(rows));
    Tensor widened_map = permute(reshape(widened, {b, h, w, inner}), {0, 3, 1, 2});
    Tensor mixed = scan.forward(silu(dwconv.forward(widened_map)));
    Tensor mixed_rows = reshape(permute(mixed, {0, 2, 3, 1}), {b, h * w, inner});
    Tensor delta = permute(reshape(project_out.forward(mixed_rows), {b, h, w, c}), {0, 3, 1, 2});
    return add(x, delta);
}

void VssBlock::visit(const std::string& name, const ParamVisitor& v) {
    norm.visit(name + ".norm", v);
    expand_in.visit(name + ".expand_in", v);
    dwconv.visit(name + ".dwconv", v);
    scan.visit(name + ".scan", v);
    project_out.visit(name + ".project_out", v);
}

int64_t VssBlock::param_count() const {
    return norm.param_count() + expand_in.param_count() + dwconv.param_count() +
           scan.param_count() + project_out.param_count();
}

void DecoderConfig::validate() const {
    if (bottleneck_channels < 1) throw ConfigError("decoder bottleneck channels must be positive");
    if (classes < 1) throw ConfigError("decoder class count must be positive");
    if (skip_channels.empty()) throw ConfigError("decoder needs at least one stage");
    if (blocks_per_stage < 1) throw ConfigError("decoder blocks per stage must be positive");
    for (int64_t c : skip_channels)
        if (c < 1) throw ConfigError("decoder skip channels must be positive");
}

SsmDecoder::SsmDecoder(const DecoderConfig& cfg, Rng& rng) : config(cfg) {
    cfg.validate();
    int64_t in_ch = cfg.bottleneck_channels;
    for (int64_t out_ch : cfg.skip_channels) {
        ups.emplace_back(in_ch, out_ch, 2, 2, 0, 0, true, rng);
        folds.emplace_back(2 * out_ch, out_ch, 1, 1, 0, true, rng);
        VssBlockConfig bc;
        bc.channels = out_ch;
        bc.state = cfg.state;
        bc.expand = cfg.expand;
        bc.dw_kernel = cfg.dw_kernel;
        std::vector<VssBlock> stage;
        for (int i = 0; i < cfg.blocks_per_stage; ++i) stage.emplace_back(bc, rng);
        blocks.push_back(std::move(stage));
        in_ch = out_ch;
    }
    head = Conv2DLayer(cfg.skip_channels.back(), cfg.classes, 1, 1, 0, true, rng);
}

Tensor SsmDecoder::forward(const Tensor& bottleneck, const std::vector<Tensor>& skips) const {
    if (skips.size() != config.skip_channels.size()) {
        throw ConfigError("decoder built for " + std::to_string(config.skip_channels.size()) +
                          " skips, got " + std::to_string(skips.size()));
    }
    check_channels_first(bottleneck, config.bottleneck_channels, "decoder");
    Tensor cur = bottleneck;
    for (size_t i = 0; i < ups.size(); ++i) {
        cur = ups[i].forward(cur);
        if (skips[i].shape() != cur.shape() || skips[i].shape()[1] != config.skip_channels[i]) {
            throw ShapeError("decoder stage " + std::to_string(i) + " expects skip " +
                             shape_str(cur.shape()) + ", got " + shape_str(skips[i].shape()));
        }
        cur = folds[i].forward(concat({cur, skips[i]}, 1));
        for (const auto& blk : blocks[i]) cur = blk.forward(cur);
    }
    return head.forward(cur);
}

void SsmDecoder::visit(const std::string& name, const ParamVisitor& v) {
    for (size_t i = 0; i < ups.size(); ++i) {
        const std::string stage = name + ".stage" + std::to_string(i);
        ups[i].visit(stage + ".up", v);
        folds[i].visit(stage + ".fold", v);
        for (size_t j = 0; j < blocks[i].size(); ++j)
            blocks[i][j].visit(stage + ".block" + std::to_string(j), v);
    }
    head.visit(name + ".head", v);
}

int64_t SsmDecoder::param_count() const {
    int64_t n = head.param_count();
    for (size_t i = 0; i < ups.size(); ++i) {
        n += ups[i].param_count() + folds[i].param_count();
        for (const auto& blk : blocks[i]) n += blk.param_count();
    }
    return n;
}

}  // namespace samba
