#include "samba/hoacm.hpp"

#include "samba/error.hpp"
#include "samba/nnops.hpp"
#include "samba/ops.hpp"

#include <cmath>
#include <string>

namespace samba {

namespace {

void require_map(const Tensor& x, int64_t c, int64_t h, int64_t w, const char* who) {
    if (x.rank() != 4) {
        throw ShapeError(std::string(who) + " expects [B,C,H,W], got " + shape_str(x.shape()));
    }
    if (x.shape()[1] != c || x.shape()[2] != h || x.shape()[3] != w) {
        throw ShapeError(std::string(who) + " built for [*," + std::to_string(c) + "," +
                         std::to_string(h) + "," + std::to_string(w) + "], got " +
                         shape_str(x.shape()));
    }
}

}  // namespace

void BseaConfig::validate() const {
    if (channels < 1) throw ConfigError("bsea channels must be positive");
    if (height < 2 || width < 2 || height % 2 != 0 || width % 2 != 0) {
        throw ConfigError("bsea needs even extents >= 2 for the 2x pooled paths, got " +
                          std::to_string(height) + "x" + std::to_string(width));
    }
}

Bsea::Bsea(const BseaConfig& cfg, Rng& rng) : config(cfg) {
    cfg.validate();
    if (cfg.affinity) {
        // Pure projections shared by the avg and max paths.
        query = Conv2DLayer(cfg.channels, cfg.channels, 1, 1, 0, false, rng);
        key = Conv2DLayer(cfg.channels, cfg.channels, 1, 1, 0, false, rng);
        value = Conv2DLayer(cfg.channels, cfg.channels, 1, 1, 0, false, rng);
    }
    // exp(log_scale) starts at H*W, cancelling the 1/(H*W) magnitude of the
    // spatial softmax so an untrained gate preserves constant-map magnitude.
    log_scale = Tensor::full({1}, std::log(static_cast<float>(cfg.height * cfg.width)), true);
}

Tensor Bsea::forward_traced(const Tensor& x, BseaTrace* trace) const {
    require_map(x, config.channels, config.height, config.width, "bsea");
    const int64_t b = x.shape()[0];
    const int64_t c = config.channels;
    const int64_t hp = config.height / 2;
    const int64_t wp = config.width / 2;
    const int64_t np = hp * wp;

    Tensor pooled[2] = {avgpool2d(x, 2, 2), maxpool2d(x, 2, 2)};
    Tensor mixed[2];
    for (int p = 0; p < 2; ++p) {
        if (config.affinity) {
            Tensor q = reshape(query.forward(pooled[p]), {b, c, np});
            Tensor k = reshape(key.forward(pooled[p]), {b, c, np});
            Tensor v = reshape(value.forward(pooled[p]), {b, c, np});
            Tensor affinity = softmax(matmul(q, permute(k, {0, 2, 1})), 2);  // [B,C,C]
            if (trace != nullptr) (p == 0 ? trace->affinity_avg : trace->affinity_max) = affinity;
            mixed[p] = matmul(affinity, v);  // [B,C,N']
        } else {
            mixed[p] = reshape(pooled[p], {b, c, np});
        }
    }
    Tensor folded = reshape(add(mixed[0], mixed[1]), {b, c, hp, wp});
    Tensor restored = upsample_nearest2x(folded);
    Tensor map = reshape(softmax(reshape(restored, {b, c, config.height * config.width}), 2),
                         {b, c, config.height, config.width});
    if (trace != nullptr) trace->spatial_map = map;
    return mul(x, mul(map, exp_op(log_scale)));
}

void Bsea::visit(const std::string& name, const ParamVisitor& v) {
    if (config.affinity) {
        query.visit(name + ".query", v);
        key.visit(name + ".key", v);
        value.visit(name + ".value", v);
    }
    v(name + ".log_scale", log_scale);
}

int64_t Bsea::param_count() const {
    int64_t n = log_scale.numel();
    if (config.affinity) n += query.param_count() + key.param_count() + value.param_count();
    return n;
}

Oca::Oca(const OcaConfig& cfg, Rng& rng) : config(cfg) {
    if (cfg.gsa_gate) gsa = Conv2DLayer(2, 2, 7, 1, 3, true, rng);
    // No squeeze bias: the instance norm right behind it subtracts the plane
    // mean, so a conv bias there would be a dead parameter.
    squeeze = Conv2DLayer(2, 1, 7, 1, 3, false, rng);
    squeeze_norm = InstanceNorm2DLayer(1);
}

Tensor Oca::forward(const Tensor& x, Tensor* global_out) const {
    if (x.rank() != 4) throw ShapeError("oca expects [B,C,H,W], got " + shape_str(x.shape()));

    Tensor mx = reduce(x, 1, Reduce::Max, /*keepdim=*/true);   // [B,1,H,W]
    Tensor mean = reduce(x, 1, Reduce::Mean, /*keepdim=*/true);
    Tensor cat = concat({mx, mean}, 1);  // [B,2,H,W], max first

    // Contrastive enhancement: each of the two maps is multiplied by its own
    // global spatial average.
    Tensor g = reduce(reduce(cat, 3, Reduce::Mean, true), 2, Reduce::Mean, true);  // [B,2,1,1]
    Tensor global = mul(cat, g);
    if (global_out != nullptr) *global_out = global;

    Tensor gated = config.gsa_gate ? mul(global, sigmoid(gsa.forward(global))) : global;
    Tensor gate = sigmoid(relu(squeeze_norm.forward(squeeze.forward(gated))));  // [B,1,H,W]
    return mul(x, gate);
}

void Oca::visit(const std::string& name, const ParamVisitor& v) {
    if (config.gsa_gate) gsa.visit(name + ".gsa", v);
    squeeze.visit(name + ".squeeze", v);
    squeeze_norm.visit(name + ".squeeze_norm", v);
}

int64_t Oca::param_count() const {
    int64_t n = squeeze.param_count() + squeeze_norm.param_count();
    if (config.gsa_gate) n += gsa.param_count();
    return n;
}

void HoacmConfig::validate() const {
    if (use_bsea) {
        BseaConfig bc;
        bc.channels = channels;
        bc.height = height;
        bc.width = width;
        bc.validate();
    } else if (channels < 1 || height < 1 || width < 1) {
        throw ConfigError("hoacm needs positive channels and extents");
    }
}

HoacmFuse::HoacmFuse(const HoacmConfig& cfg, Rng& rng) : config(cfg) {
    cfg.validate();
    if (cfg.use_oca) {
        OcaConfig oc;
        oc.gsa_gate = cfg.oca_gsa_gate;
        oca = Oca(oc, rng);
    }
    if (cfg.use_bsea) {
        BseaConfig bc;
        bc.channels = cfg.channels;
        bc.height = cfg.height;
        bc.width = cfg.width;
        bc.affinity = cfg.bsea_affinity;
        bsea = Bsea(bc, rng);
    }
    if (cfg.fuse_mode == HoacmFuseMode::Full) {
        pw = Conv2DLayer(2 * cfg.channels, cfg.channels, 1, 1, 0, true, rng);
        norm = LayerNormLayer(cfg.channels);
    }
}

Tensor HoacmFuse::forward(const Tensor& f_sam, const Tensor& f_mamba) const {
    require_map(f_sam, config.channels, config.height, config.width, "hoacm fuse");
    if (f_sam.shape() != f_mamba.shape()) {
        throw ShapeError("hoacm fuse needs matching branch shapes, got " +
                         shape_str(f_sam.shape()) + " vs " + shape_str(f_mamba.shape()));
    }
    Tensor a = config.use_oca ? oca.forward(f_sam) : f_sam;
    Tensor b = config.use_bsea ? bsea.forward(f_mamba) : f_mamba;
    if (config.fuse_mode == HoacmFuseMode::Average) return mul_scalar(add(a, b), 0.5f);

    Tensor merged = pw.forward(concat({a, b}, 1));
    Tensor residual = mul_scalar(add(f_sam, f_mamba), 0.5f);
    Tensor pre = permute(add(merged, residual), {0, 2, 3, 1});
    return permute(norm.forward(pre), {0, 3, 1, 2});
}

void HoacmFuse::visit(const std::string& name, const ParamVisitor& v) {
    if (config.use_oca) oca.visit(name + ".oca", v);
    if (config.use_bsea) bsea.visit(name + ".bsea", v);
    if (config.fuse_mode == HoacmFuseMode::Full) {
        pw.visit(name + ".pw", v);
        norm.visit(name + ".norm", v);
    }
}

int64_t HoacmFuse::param_count() const {
    int64_t n = 0;
    if (config.use_oca) n += oca.param_count();
    if (config.use_bsea) n += bsea.param_count();
    if (config.fuse_mode == HoacmFuseMode::Full) n += pw.param_count() + norm.param_count();
    return n;
}

}  // namespace samba
