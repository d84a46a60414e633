#pragma once

// Parameterized building blocks.  Each layer owns its tensors, initializes
// them deterministically from a caller-supplied generator (weights uniform
// in [-a, a] with a = sqrt(1/fan_in), biases zero), and exposes its
// parameters through a named visitor so optimizers and checkpoints can
// enumerate them without knowing layer internals.

#include "samba/nnops.hpp"
#include "samba/rng.hpp"
#include "samba/tensor.hpp"

#include <functional>
#include <string>

namespace samba {

// Receives (fully-qualified parameter name, parameter tensor).
using ParamVisitor = std::function<void(const std::string&, Tensor&)>;

struct Conv2DLayer {
    Tensor weight;  // [cout, cin, k, k]
    Tensor bias;    // [cout], undefined when constructed without bias
    int stride = 1;
    int pad = 0;

    Conv2DLayer() = default;
    Conv2DLayer(int64_t cin, int64_t cout, int k, int stride, int pad, bool with_bias, Rng& rng);

    Tensor forward(const Tensor& x) const { return conv2d(x, weight, bias, stride, pad); }
    void visit(const std::string& name, const ParamVisitor& v);
    int64_t param_count() const { return weight.numel() + (bias.defined() ? bias.numel() : 0); }
};

struct DepthwiseConv2DLayer {
    Tensor weight;  // [c, 1, k, k]
    Tensor bias;    // [c], undefined when constructed without bias
    int stride = 1;
    int pad = 0;

    DepthwiseConv2DLayer() = default;
    DepthwiseConv2DLayer(int64_t c, int k, int stride, int pad, bool with_bias, Rng& rng);

    Tensor forward(const Tensor& x) const { return depthwise_conv2d(x, weight, bias, stride, pad); }
    void visit(const std::string& name, const ParamVisitor& v);
    int64_t param_count() const { return weight.numel() + (bias.defined() ? bias.numel() : 0); }
};

struct ConvTranspose2DLayer {
    Tensor weight;  // [cin, cout, k, k]
    Tensor bias;    // [cout], undefined when constructed without bias
    int stride = 1;
    int pad = 0;
    int output_pad = 0;

    ConvTranspose2DLayer() = default;
    ConvTranspose2DLayer(int64_t cin, int64_t cout, int k, int stride, int pad, int output_pad,
                         bool with_bias, Rng& rng);

    Tensor forward(const Tensor& x) const {
        return conv_transpose2d(x, weight, bias, stride, pad, output_pad);
    }
    void visit(const std::string& name, const ParamVisitor& v);
    int64_t param_count() const { return weight.numel() + (bias.defined() ? bias.numel() : 0); }
};

struct LinearLayer {
    Tensor weight;  // [in, out] so forward is a plain matmul on row vectors
    Tensor bias;    // [out], undefined when constructed without bias

    LinearLayer() = default;
    LinearLayer(int64_t in, int64_t out, bool with_bias, Rng& rng);

    // x: [..., in] with rank 2 or 3.
    Tensor forward(const Tensor& x) const;
    void visit(const std::string& name, const ParamVisitor& v);
    int64_t param_count() const { return weight.numel() + (bias.defined() ? bias.numel() : 0); }
};

struct LayerNormLayer {
    Tensor gamma;  // [c], ones at init
    Tensor beta;   // [c], zeros at init
    float eps = 1e-5f;

    LayerNormLayer() = default;
    explicit LayerNormLayer(int64_t c);

    Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }
    void visit(const std::string& name, const ParamVisitor& v);
    int64_t param_count() const { return gamma.numel() + beta.numel(); }
};

struct InstanceNorm2DLayer {
    Tensor gamma;  // [c], ones at init
    Tensor beta;   // [c], zeros at init
    float eps = 1e-5f;

    InstanceNorm2DLayer() = default;
    explicit InstanceNorm2DLayer(int64_t c);

    Tensor forward(const Tensor& x) const { return instance_norm2d(x, gamma, beta, eps); }
    void visit(const std::string& name, const ParamVisitor& v);
    int64_t param_count() const { return gamma.numel() + beta.numel(); }
};

}  // namespace samba
