#pragma once

// Structured ops for image networks: convolutions, pooling, normalization,
// resampling, the pixel-wise cross-entropy loss, and the selective state
// scan.  All of them record tape nodes with hand-written backward passes.

#include "samba/ops.hpp"
#include "samba/tensor.hpp"

#include <cstdint>
#include <vector>

namespace samba {

// x: [B,Cin,H,W], w: [Cout,Cin,kh,kw], bias: [Cout] or undefined.
// Output: [B,Cout,Ho,Wo] with Ho = (H + 2*pad - kh)/stride + 1.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);

// x: [B,Cin,H,W], w: [Cin,Cout,kh,kw], bias: [Cout] or undefined.
// Output: [B,Cout,Ho,Wo] with Ho = (H-1)*stride - 2*pad + kh + output_pad.
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad,
                        int output_pad);

// Window pooling without padding: Ho = (H - k)/stride + 1.
// Per-channel correlation: each channel is filtered independently.
// x: [B, C, H, W], w: [C, 1, kh, kw], bias: [C] or undefined.
Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);

Tensor maxpool2d(const Tensor& x, int k, int stride);
Tensor avgpool2d(const Tensor& x, int k, int stride);

// Pools [B,C,H,W] to [B,C,oh,ow]; window i spans [floor(i*H/oh), ceil((i+1)*H/oh)).
Tensor adaptive_avgpool2d(const Tensor& x, int64_t oh, int64_t ow);
Tensor adaptive_maxpool2d(const Tensor& x, int64_t oh, int64_t ow);

// Doubles both spatial extents of [B,C,H,W] by pixel replication.
Tensor upsample_nearest2x(const Tensor& x);

// Normalizes over the last axis; gamma/beta have that axis's extent.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);

// Standardizes each (sample, channel) plane of [B,C,H,W] over its H*W
// values, then applies a per-channel affine.
Tensor instance_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);

// Mean pixel-wise cross entropy. logits: [B,K,H,W]; target: B*H*W class ids
// in row-major (b,h,w) order, each < K.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<uint8_t>& target);

// Selective state scan along the sequence axis.
//   u, delta : [B,L,D]   (delta must already be positive)
//   a        : [D,N]     state transition log-rates
//   b_in,c_in: [B,L,N]   input/output projections per step
//   d_skip   : [D]       passthrough weight
// Per (b,d): h_0 = 0; h_t = exp(delta_t*a_d) * h_{t-1} + delta_t*b_t*u_t;
//            y_t = <c_t, h_t> + d_skip_d * u_t.  Output: [B,L,D].
Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& a, const Tensor& b_in,
                      const Tensor& c_in, const Tensor& d_skip);

}  // namespace samba
