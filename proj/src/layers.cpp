#include "samba/layers.hpp"

#include <cmath>

namespace samba {

namespace {

Tensor init_weight(Shape shape, int64_t fan_in, Rng& rng) {
    const float a = std::sqrt(1.0f / static_cast<float>(fan_in));
    return Tensor::uniform(std::move(shape), -a, a, rng, /*requires_grad=*/true);
}

}  // namespace

Conv2DLayer::Conv2DLayer(int64_t cin, int64_t cout, int k, int stride_, int pad_, bool with_bias,
                         Rng& rng)
    : stride(stride_), pad(pad_) {
    weight = init_weight({cout, cin, k, k}, cin * k * k, rng);
    if (with_bias) bias = Tensor::zeros({cout}, /*requires_grad=*/true);
}

void Conv2DLayer::visit(const std::string& name, const ParamVisitor& v) {
    v(name + ".weight", weight);
    if (bias.defined()) v(name + ".bias", bias);
}

DepthwiseConv2DLayer::DepthwiseConv2DLayer(int64_t c, int k, int stride_, int pad_, bool with_bias,
                                           Rng& rng)
    : stride(stride_), pad(pad_) {
    weight = init_weight({c, 1, k, k}, k * k, rng);
    if (with_bias) bias = Tensor::zeros({c}, /*requires_grad=*/true);
}

void DepthwiseConv2DLayer::visit(const std::string& name, const ParamVisitor& v) {
    v(name + ".weight", weight);
    if (bias.defined()) v(name + ".bias", bias);
}

ConvTranspose2DLayer::ConvTranspose2DLayer(int64_t cin, int64_t cout, int k, int stride_, int pad_,
                                           int output_pad_, bool with_bias, Rng& rng)
    : stride(stride_), pad(pad_), output_pad(output_pad_) {
    if (output_pad_ < 0 || output_pad_ >= stride_) {
        throw ConfigError("transpose conv output_pad must lie in [0, stride)");
    }
    weight = init_weight({cin, cout, k, k}, cin * k * k, rng);
    if (with_bias) bias = Tensor::zeros({cout}, /*requires_grad=*/true);
}

void ConvTranspose2DLayer::visit(const std::string& name, const ParamVisitor& v) {
    v(name + ".weight", weight);
    if (bias.defined()) v(name + ".bias", bias);
}

LinearLayer::LinearLayer(int64_t in, int64_t out, bool with_bias, Rng& rng) {
    weight = init_weight({in, out}, in, rng);
    if (with_bias) bias = Tensor::zeros({out}, /*requires_grad=*/true);
}

Tensor LinearLayer::forward(const Tensor& x) const {
    Tensor y = matmul(x, weight);
    if (bias.defined()) y = add(y, bias);
    return y;
}

void LinearLayer::visit(const std::string& name, const ParamVisitor& v) {
    v(name + ".weight", weight);
    if (bias.defined()) v(name + ".bias", bias);
}

LayerNormLayer::LayerNormLayer(int64_t c) {
    gamma = Tensor::full({c}, 1.0f, /*requires_grad=*/true);
    beta = Tensor::zeros({c}, /*requires_grad=*/true);
}

void LayerNormLayer::visit(const std::string& name, const ParamVisitor& v) {
    v(name + ".gamma", gamma);
    v(name + ".beta", beta);
}

InstanceNorm2DLayer::InstanceNorm2DLayer(int64_t c) {
    gamma = Tensor::full({c}, 1.0f, /*requires_grad=*/true);
    beta = Tensor::zeros({c}, /*requires_grad=*/true);
}

void InstanceNorm2DLayer::visit(const std::string& name, const ParamVisitor& v) {
    v(name + ".gamma", gamma);
    v(name + ".beta", beta);
}

}  // namespace samba
