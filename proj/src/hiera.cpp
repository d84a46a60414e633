#include "samba/hiera.hpp"

#include "samba/error.hpp"
#include "samba/nnops.hpp"
#include "samba/ops.hpp"

#include <cmath>
#include <string>

namespace samba {

namespace {

// Channels-last partition core: [B,H,W,C] -> [B*nh*nw, w*w, C].  The public
// entry points wrap it with the layout permutes so composite blocks that
// already hold channels-last maps can share the arithmetic.
Tensor partition_tokens(const Tensor& xl, int window) {
    const int64_t b = xl.shape()[0];
    const int64_t h = xl.shape()[1];
    const int64_t w = xl.shape()[2];
    const int64_t c = xl.shape()[3];
    const int64_t win = window;
    Tensor grid = reshape(xl, {b, h / win, win, w / win, win, c});
    Tensor ordered = permute(grid, {0, 1, 3, 2, 4, 5});
    return reshape(ordered, {b * (h / win) * (w / win), win * win, c});
}

// Inverse of partition_tokens: token batch -> [B,H,W,C].
Tensor merge_tokens(const Tensor& tokens, int window, int64_t b, int64_t h, int64_t w) {
    const int64_t win = window;
    const int64_t c = tokens.shape()[2];
    Tensor grid = reshape(tokens, {b, h / win, w / win, win, win, c});
    Tensor ordered = permute(grid, {0, 1, 3, 2, 4, 5});
    return reshape(ordered, {b, h, w, c});
}

void require_window_divides(const Tensor& x, int window, const char* who) {
    if (x.rank() != 4) {
        throw ShapeError(std::string(who) + " expects a rank-4 map, got " + shape_str(x.shape()));
    }
    if (window < 1) throw ConfigError(std::string(who) + ": window must be positive");
    if (x.shape()[2] % window != 0 || x.shape()[3] % window != 0) {
        throw ConfigError(std::string(who) + ": window " + std::to_string(window) +
                          " must divide the spatial extents of " + shape_str(x.shape()));
    }
}

}  // namespace

Tensor window_partition(const Tensor& x, int window) {
    require_window_divides(x, window, "window_partition");
    return partition_tokens(permute(x, {0, 2, 3, 1}), window);
}

Tensor window_unpartition(const Tensor& tokens, int window, int64_t b, int64_t h,
                          int64_t w_extent) {
    if (tokens.rank() != 3) {
        throw ShapeError("window_unpartition expects [Bw, w*w, C] tokens, got " +
                         shape_str(tokens.shape()));
    }
    if (window < 1 || h % window != 0 || w_extent % window != 0) {
        throw ConfigError("window_unpartition: window " + std::to_string(window) +
                          " must divide " + std::to_string(h) + "x" + std::to_string(w_extent));
    }
    const int64_t windows = b * (h / window) * (w_extent / window);
    const int64_t n = static_cast<int64_t>(window) * window;
    if (tokens.shape()[0] != windows || tokens.shape()[1] != n) {
        throw ShapeError("window_unpartition: token batch " + shape_str(tokens.shape()) +
                         " does not match " + std::to_string(windows) + " windows of " +
                         std::to_string(n) + " tokens");
    }
    return permute(merge_tokens(tokens, window, b, h, w_extent), {0, 3, 1, 2});
}

void WindowAttentionConfig::validate() const {
    if (channels < 1) throw ConfigError("attention channels must be positive");
    if (window < 1) throw ConfigError("attention window must be positive");
    if (heads < 1 || channels % heads != 0) {
        throw ConfigError("attention heads (" + std::to_string(heads) +
                          ") must divide channels (" + std::to_string(channels) + ")");
    }
}

WindowAttention::WindowAttention(const WindowAttentionConfig& cfg, Rng& rng) : config(cfg) {
    cfg.validate();
    pos = Tensor::uniform({cfg.tokens_per_window(), cfg.channels}, -0.02f, 0.02f, rng, true);
    query = LinearLayer(cfg.channels, cfg.channels, true, rng);
    // No key bias: shifting every key by a constant adds the same value to
    // each score in a softmax row, which softmax ignores — such a bias would
    // be a dead parameter with an identically zero gradient.
    key = LinearLayer(cfg.channels, cfg.channels, false, rng);
    value = LinearLayer(cfg.channels, cfg.channels, true, rng);
    proj = LinearLayer(cfg.channels, cfg.channels, true, rng);
}

Tensor WindowAttention::forward(const Tensor& tokens, Tensor* weights_out) const {
    const int64_t n = config.tokens_per_window();
    if (tokens.rank() != 3 || tokens.shape()[1] != n || tokens.shape()[2] != config.channels) {
        throw ShapeError("window attention expects [Bw," + std::to_string(n) + "," +
                         std::to_string(config.channels) + "] tokens, got " +
                         shape_str(tokens.shape()));
    }
    const int64_t bw = tokens.shape()[0];
    const int64_t heads = config.heads;
    const int64_t d = config.head_dim();

    Tensor t = add(tokens, pos);  // same table for every window
    auto split_heads = [&](const Tensor& m) {
        return reshape(permute(reshape(m, {bw, n, heads, d}), {0, 2, 1, 3}), {bw * heads, n, d});
    };
    Tensor q = split_heads(query.forward(t));
    Tensor k = split_heads(key.forward(t));
    Tensor v = split_heads(value.forward(t));

    const float scale = 1.0f / std::sqrt(static_cast<float>(d));
    Tensor scores = mul_scalar(matmul(q, permute(k, {0, 2, 1})), scale);
    Tensor weights = softmax(scores, 2);  // [bw*heads, n, n], rows sum to 1
    if (weights_out != nullptr) *weights_out = reshape(weights, {bw, heads, n, n});

    Tensor ctx = matmul(weights, v);  // [bw*heads, n, d]
    Tensor merged = reshape(permute(reshape(ctx, {bw, heads, n, d}), {0, 2, 1, 3}), {bw, n, config.channels});
    return proj.forward(merged);
}

void WindowAttention::visit(const std::string& name, const ParamVisitor& v) {
    v(name + ".pos", pos);
    query.visit(name + ".query", v);
    key.visit(name + ".key", v);
    value.visit(name + ".value", v);
    proj.visit(name + ".proj", v);
}

int64_t WindowAttention::param_count() const {
    return pos.numel() + query.param_count() + key.param_count() + value.param_count() +
           proj.param_count();
}

void HieraBlockConfig::validate() const {
    WindowAttentionConfig att;
    att.channels = channels;
    att.heads = heads;
    att.window = window;
    att.validate();
    if (mlp_ratio < 1) throw ConfigError("block mlp_ratio must be positive");
}

HieraBlock::HieraBlock(const HieraBlockConfig& cfg, Rng& rng) : config(cfg) {
    cfg.validate();
    norm1 = LayerNormLayer(cfg.channels);
    WindowAttentionConfig att;
    att.channels = cfg.channels;
    att.heads = cfg.heads;
    att.window = cfg.window;
    attn = WindowAttention(att, rng);
    if (cfg.use_refiner) {
        RefinerConfig rc;
        rc.channels = cfg.channels;
        rc.channel_gate = cfg.channel_gate;
        refiner = Refiner(rc, rng);
    }
    norm2 = LayerNormLayer(cfg.channels);
    fc1 = LinearLayer(cfg.channels, cfg.mlp_hidden(), true, rng);
    fc2 = LinearLayer(cfg.mlp_hidden(), cfg.channels, true, rng);
    if (cfg.use_mlp_adapter) {
        MlpAdapterConfig ac;
        ac.channels = cfg.channels;
        adapter = MlpAdapter(ac, rng);
    }
}

Tensor HieraBlock::forward(const Tensor& x) const {
    require_window_divides(x, config.window, "hiera block");
    if (x.shape()[1] != config.channels) {
        throw ShapeError("hiera block built for " + std::to_string(config.channels) +
                         " channels, got " + shape_str(x.shape()));
    }
    const int64_t b = x.shape()[0];
    const int64_t h = x.shape()[2];
    const int64_t w = x.shape()[3];

    Tensor xl = permute(x, {0, 2, 3, 1});  // [B,H,W,C]

    // Attention sub-block: per-window self-attention, then the refiner on
    // the merged map (it pools and convolves across the whole extent).
    Tensor att = merge_tokens(attn.forward(partition_tokens(norm1.forward(xl), config.window)),
                              config.window, b, h, w);
    if (config.use_refiner) att = refiner.forward(att);
    xl = add(xl, att);

    // MLP sub-block with the bottleneck adapter in parallel on the same
    // normalized input; the adapter contributes only its delta here because
    // the residual sum is owned by the block.
    Tensor pre = norm2.forward(xl);
    Tensor rows = reshape(pre, {b * h * w, config.channels});
    Tensor mlp = reshape(fc2.forward(gelu(fc1.forward(rows))), {b, h, w, config.channels});
    Tensor out = add(xl, mlp);
    if (config.use_mlp_adapter) out = add(out, adapter.delta(pre));
    return permute(out, {0, 3, 1, 2});
}

void HieraBlock::visit_trunk(const std::string& name, const ParamVisitor& v) {
    norm1.visit(name + ".norm1", v);
    attn.visit(name + ".attn", v);
    norm2.visit(name + ".norm2", v);
    fc1.visit(name + ".fc1", v);
    fc2.visit(name + ".fc2", v);
}

void HieraBlock::visit_adapters(const std::string& name, const ParamVisitor& v) {
    if (config.use_refiner) refiner.visit(name + ".refiner", v);
    if (config.use_mlp_adapter) adapter.visit(name + ".adapter", v);
}

void HieraBlock::visit(const std::string& name, const ParamVisitor& v) {
    visit_trunk(name, v);
    visit_adapters(name, v);
}

int64_t HieraBlock::param_count() const {
    int64_t n = norm1.param_count() + attn.param_count() + norm2.param_count() +
                fc1.param_count() + fc2.param_count();
    if (config.use_refiner) n += refiner.param_count();
    if (config.use_mlp_adapter) n += adapter.param_count();
    return n;
}

void HieraStageConfig::validate() const {
    HieraBlockConfig bc;
    bc.channels = channels;
    bc.window = window;
    bc.heads = heads;
    bc.mlp_ratio = mlp_ratio;
    bc.validate();
    if (blocks < 1) throw ConfigError("stage needs at least one block");
    if (downsample < 2) throw ConfigError("stage downsample factor must be at least 2");
}

HieraStage::HieraStage(const HieraStageConfig& cfg, Rng& rng) : config(cfg) {
    cfg.validate();
    HieraBlockConfig bc;
    bc.channels = cfg.channels;
    bc.window = cfg.window;
    bc.heads = cfg.heads;
    bc.mlp_ratio = cfg.mlp_ratio;
    bc.use_refiner = cfg.use_refiner;
    bc.use_mlp_adapter = cfg.use_mlp_adapter;
    bc.channel_gate = cfg.channel_gate;
    blocks.reserve(static_cast<size_t>(cfg.blocks));
    for (int i = 0; i < cfg.blocks; ++i) blocks.emplace_back(bc, rng);
    down = Conv2DLayer(cfg.channels, cfg.out_channels(), cfg.downsample, cfg.downsample, 0, true,
                       rng);
}

Tensor HieraStage::forward_blocks(const Tensor& x) const {
    Tensor cur = x;
    for (const auto& blk : blocks) cur = blk.forward(cur);
    return cur;
}

Tensor HieraStage::downsample(const Tensor& x) const {
    if (x.rank() != 4 || x.shape()[2] % config.downsample != 0 ||
        x.shape()[3] % config.downsample != 0) {
        throw ConfigError("stage downsample by " + std::to_string(config.downsample) +
                          " needs divisible extents, got " + shape_str(x.shape()));
    }
    return down.forward(x);
}

void HieraStage::visit_trunk(const std::string& name, const ParamVisitor& v) {
    for (size_t i = 0; i < blocks.size(); ++i) {
        blocks[i].visit_trunk(name + ".block" + std::to_string(i), v);
    }
    down.visit(name + ".down", v);
}

void HieraStage::visit_adapters(const std::string& name, const ParamVisitor& v) {
    for (size_t i = 0; i < blocks.size(); ++i) {
        blocks[i].visit_adapters(name + ".block" + std::to_string(i), v);
    }
}

void HieraStage::visit(const std::string& name, const ParamVisitor& v) {
    for (size_t i = 0; i < blocks.size(); ++i) {
        blocks[i].visit(name + ".block" + std::to_string(i), v);
    }
    down.visit(name + ".down", v);
}

int64_t HieraStage::param_count() const {
    int64_t n = down.param_count();
    for (const auto& blk : blocks) n += blk.param_count();
    return n;
}

}  // namespace samba
