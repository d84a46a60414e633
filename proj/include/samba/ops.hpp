#pragma once

#include <vector>

#include "samba/tensor.hpp"

namespace samba {

// ---- shape ops ------------------------------------------------------------

// Row-major relayout; total element count must be preserved. One extent may
// be -1 and is inferred.
Tensor reshape(const Tensor& x, Shape new_shape);

// Axis reordering (copies). order must be a permutation of 0..rank-1.
Tensor permute(const Tensor& x, const std::vector<int>& order);

Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len);

// Reverses the order of elements along one axis.
Tensor flip(const Tensor& x, int axis);

// ---- elementwise ----------------------------------------------------------

// Binary ops broadcast by stretching size-1 axes after aligning ranks on the
// leading side. Mismatched non-1 extents raise ShapeError naming both shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& x, float s);
Tensor mul_scalar(const Tensor& x, float s);

Tensor neg(const Tensor& x);
Tensor exp_op(const Tensor& x);
Tensor log_op(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor softplus(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// ---- matmul ---------------------------------------------------------------

// Batched matrix product. Accepts [B,M,K]x[B,K,N], [M,K]x[K,N], and the
// mixed forms where one operand is unbatched and reused across the batch.
Tensor matmul(const Tensor& a, const Tensor& b);

// ---- softmax --------------------------------------------------------------

// Max-shifted softmax along `axis`; output sums to 1 along that axis.
Tensor softmax(const Tensor& x, int axis);

// ---- reductions -----------------------------------------------------------

enum class Reduce { Sum, Mean, Max };

// Reduces one axis. Sum/Mean accumulate in double; Max routes its gradient
// to the first maximal element in row-major scan order.
Tensor reduce(const Tensor& x, int axis, Reduce mode, bool keepdim = false);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// ---- raw gemm helpers (exposed for reuse by conv/linear kernels) ----------

void gemm_nn(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c);
void gemm_nt(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c);
void gemm_tn(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c);

}  // namespace samba
