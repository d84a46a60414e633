#include "samba/refiner.hpp"

#include "samba/error.hpp"
#include "samba/nnops.hpp"
#include "samba/ops.hpp"

#include <algorithm>
#include <cmath>

namespace samba {

int64_t RefinerConfig::hidden() const {
    if (channels < 1) throw ConfigError("refiner channels must be positive");
    if (!(ratio > 0.0f) || ratio > 1.0f) throw ConfigError("refiner ratio must be in (0, 1]");
    if (kernel < 1 || kernel % 2 == 0) throw ConfigError("refiner kernel must be odd");
    const int64_t h = static_cast<int64_t>(std::floor(static_cast<double>(channels) * ratio));
    if (h < 1) {
        throw ConfigError("refiner bottleneck floor(" + std::to_string(channels) + " * " +
                          std::to_string(ratio) + ") must be at least 1");
    }
    return h;
}

int64_t MlpAdapterConfig::hidden() const {
    if (channels < 1) throw ConfigError("adapter channels must be positive");
    if (!(ratio > 0.0f) || ratio > 1.0f) throw ConfigError("adapter ratio must be in (0, 1]");
    if (scale < 0.0f || scale > 1.0f) throw ConfigError("adapter scale must be in [0, 1]");
    const int64_t h = static_cast<int64_t>(std::floor(static_cast<double>(channels) * ratio));
    if (h < 1) {
        throw ConfigError("adapter bottleneck floor(" + std::to_string(channels) + " * " +
                          std::to_string(ratio) + ") must be at least 1");
    }
    return h;
}

namespace {

void require_channels_last(const Tensor& x, int64_t channels, const char* who) {
    if (x.rank() != 4) {
        throw ShapeError(std::string(who) + " expects [B,H,W,C], got " + shape_str(x.shape()));
    }
    if (x.shape()[3] != channels) {
        throw ShapeError(std::string(who) + " built for " + std::to_string(channels) +
                         " channels, got " + shape_str(x.shape()));
    }
}

}  // namespace

Refiner::Refiner(const RefinerConfig& cfg, Rng& rng) : config(cfg) {
    const int64_t c = cfg.channels;
    const int64_t h = cfg.hidden();  // validates the whole config
    if (cfg.channel_gate) {
        squeeze = LinearLayer(2 * c, h, true, rng);
        excite = LinearLayer(h, c, true, rng);
    }
    const int pad = cfg.kernel / 2;
    down = Conv2DLayer(c, c, cfg.kernel, 2, pad, true, rng);
    up = ConvTranspose2DLayer(c, c, cfg.kernel, 2, pad, 1, true, rng);
    norm = LayerNormLayer(c);
}

Tensor Refiner::descriptor(const Tensor& x) const {
    require_channels_last(x, config.channels, "descriptor");
    const int64_t b = x.shape()[0];
    const int64_t c = config.channels;
    Tensor cf = permute(x, {0, 3, 1, 2});
    Tensor avg = reshape(adaptive_avgpool2d(cf, 1, 1), {b, c});
    Tensor mx = reshape(adaptive_maxpool2d(cf, 1, 1), {b, c});
    return concat({avg, mx}, 1);
}

Tensor Refiner::gate_values(const Tensor& desc) const {
    if (!config.channel_gate) throw ConfigError("channel gate is disabled in this refiner");
    if (desc.rank() != 2 || desc.shape()[1] != 2 * config.channels) {
        throw ShapeError("gate expects [B," + std::to_string(2 * config.channels) + "] descriptor, got " +
                         shape_str(desc.shape()));
    }
    return sigmoid(excite.forward(relu(squeeze.forward(desc))));
}

Tensor Refiner::apply_gate(const Tensor& desc, const Tensor& x) const {
    require_channels_last(x, config.channels, "apply_gate");
    Tensor g = gate_values(desc);
    return mul(x, reshape(g, {x.shape()[0], 1, 1, config.channels}));
}

Tensor Refiner::forward(const Tensor& x) const {
    require_channels_last(x, config.channels, "refiner");
    if (x.shape()[1] % 2 != 0 || x.shape()[2] % 2 != 0) {
        throw ConfigError("refiner needs even spatial extents for the stride-2 round trip, got " +
                          shape_str(x.shape()));
    }
    Tensor gated = config.channel_gate ? apply_gate(descriptor(x), x) : x;
    Tensor cf = permute(gated, {0, 3, 1, 2});
    Tensor spatial = relu(up.forward(relu(down.forward(cf))));
    Tensor residual = add(add(gated, permute(spatial, {0, 2, 3, 1})), x);
    return norm.forward(residual);
}

void Refiner::visit(const std::string& name, const ParamVisitor& v) {
    if (config.channel_gate) {
        squeeze.visit(name + ".squeeze", v);
        excite.visit(name + ".excite", v);
    }
    down.visit(name + ".down", v);
    up.visit(name + ".up", v);
    norm.visit(name + ".norm", v);
}

int64_t Refiner::param_count() const {
    int64_t n = down.param_count() + up.param_count() + norm.param_count();
    if (config.channel_gate) n += squeeze.param_count() + excite.param_count();
    return n;
}

MlpAdapter::MlpAdapter(const MlpAdapterConfig& cfg, Rng& rng) : config(cfg) {
    const int64_t h = cfg.hidden();
    down = LinearLayer(cfg.channels, h, true, rng);
    up = LinearLayer(h, cfg.channels, true, rng);
    // Zero up-projection makes the adapter an exact identity at start, so
    // inserting one into a trained trunk cannot perturb its behavior.
    std::fill(up.weight.data(), up.weight.data() + up.weight.numel(), 0.0f);
}

Tensor MlpAdapter::delta(const Tensor& x) const {
    require_channels_last(x, config.channels, "adapter");
    const Shape s = x.shape();
    Tensor rows = reshape(x, {s[0] * s[1] * s[2], s[3]});
    Tensor d = up.forward(gelu(down.forward(rows)));
    return mul_scalar(reshape(d, s), config.scale);
}

Tensor MlpAdapter::forward(const Tensor& x) const { return add(x, delta(x)); }

void MlpAdapter::visit(const std::string& name, const ParamVisitor& v) {
    down.visit(name + ".down", v);
    up.visit(name + ".up", v);
}

int64_t MlpAdapter::param_count() const { return down.param_count() + up.param_count(); }

}  // namespace samba
