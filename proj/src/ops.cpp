#include "samba/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace samba {

namespace {

std::vector<int64_t> row_major_strides(const Shape& shape) {
    std::vector<int64_t> s(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
        s[static_cast<size_t>(i)] = s[static_cast<size_t>(i + 1)] * shape[static_cast<size_t>(i + 1)];
    }
    return s;
}

int normalize_axis(int axis, int rank, const Shape& shape) {
    const int a = axis < 0 ? axis + rank : axis;
    if (a < 0 || a >= rank) {
        throw ShapeError("axis " + std::to_string(axis) + " invalid for shape " + shape_str(shape));
    }
    return a;
}

// Strides of `shape` aligned to a broadcast output of rank `out_rank`;
// axes that stretch get stride 0.
struct BroadcastPlan {
    Shape out_shape;
    std::vector<int64_t> a_strides;
    std::vector<int64_t> b_strides;
};

BroadcastPlan make_broadcast_plan(const Shape& a, const Shape& b) {
    const int ra = static_cast<int>(a.size());
    const int rb = static_cast<int>(b.size());
    const int r = std::max(ra, rb);
    BroadcastPlan plan;
    plan.out_shape.resize(static_cast<size_t>(r));
    const auto sa = row_major_strides(a);
    const auto sb = row_major_strides(b);
    plan.a_strides.assign(static_cast<size_t>(r), 0);
    plan.b_strides.assign(static_cast<size_t>(r), 0);
    for (int ax = 0; ax < r; ++ax) {
        const int ia = ax - (r - ra);
        const int ib = ax - (r - rb);
        const int64_t da = ia >= 0 ? a[static_cast<size_t>(ia)] : 1;
        const int64_t db = ib >= 0 ? b[static_cast<size_t>(ib)] : 1;
        if (da != db && da != 1 && db != 1) {
            throw ShapeError("shapes not broadcast-compatible: " + shape_str(a) + " vs " + shape_str(b));
        }
        const int64_t d = std::max(da, db);
        plan.out_shape[static_cast<size_t>(ax)] = d;
        if (ia >= 0 && da != 1) plan.a_strides[static_cast<size_t>(ax)] = sa[static_cast<size_t>(ia)];
        if (ib >= 0 && db != 1) plan.b_strides[static_cast<size_t>(ax)] = sb[static_cast<size_t>(ib)];
    }
    return plan;
}

// Walks the broadcast output once, handing (out_index, a_offset, b_offset)
// to `fn`.
template <class Fn>
void for_each_broadcast(const BroadcastPlan& plan, Fn&& fn) {
    const int r = static_cast<int>(plan.out_shape.size());
    const int64_t total = numel_of(plan.out_shape);
    if (r == 0) {
        fn(0, 0, 0);
        return;
    }
    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    int64_t ao = 0;
    int64_t bo = 0;
    for (int64_t i = 0; i < total; ++i) {
        fn(i, ao, bo);
        for (int ax = r - 1; ax >= 0; --ax) {
            idx[static_cast<size_t>(ax)]++;
            ao += plan.a_strides[static_cast<size_t>(ax)];
            bo += plan.b_strides[static_cast<size_t>(ax)];
            if (idx[static_cast<size_t>(ax)] < plan.out_shape[static_cast<size_t>(ax)]) break;
            idx[static_cast<size_t>(ax)] = 0;
            ao -= plan.a_strides[static_cast<size_t>(ax)] * plan.out_shape[static_cast<size_t>(ax)];
            bo -= plan.b_strides[static_cast<size_t>(ax)] * plan.out_shape[static_cast<size_t>(ax)];
        }
    }
}

template <class FwdFn, class BwdFn>
Tensor broadcast_binary(const Tensor& a, const Tensor& b, const char* name, FwdFn fwd, BwdFn bwd) {
    const BroadcastPlan plan = make_broadcast_plan(a.shape(), b.shape());
    const int64_t total = numel_of(plan.out_shape);
    std::vector<float> out(static_cast<size_t>(total));
    const float* pa = a.data();
    const float* pb = b.data();

    if (a.shape() == b.shape()) {
        for (int64_t i = 0; i < total; ++i) out[static_cast<size_t>(i)] = fwd(pa[i], pb[i]);
    } else {
        float* po = out.data();
        for_each_broadcast(plan, [&](int64_t i, int64_t ao, int64_t bo) { po[i] = fwd(pa[ao], pb[bo]); });
    }

    Tensor av = a;
    Tensor bv = b;
    return make_op_result(
        plan.out_shape, std::move(out), name, {a, b},
        [av, bv, plan, bwd](TensorImpl& o) mutable {
            const float* g = o.grad.data();
            const float* pa2 = av.data();
            const float* pb2 = bv.data();
            const float* po2 = o.data.data();
            const bool need_a = av.requires_grad();
            const bool need_b = bv.requires_grad();
            std::vector<float> ga(need_a ? av.vec().size() : 0, 0.0f);
            std::vector<float> gb(need_b ? bv.vec().size() : 0, 0.0f);
            for_each_broadcast(plan, [&](int64_t i, int64_t ao, int64_t bo) {
                float da, db;
                bwd(pa2[ao], pb2[bo], po2[i], g[i], da, db);
                if (need_a) ga[static_cast<size_t>(ao)] += da;
                if (need_b) gb[static_cast<size_t>(bo)] += db;
            });
            if (need_a) av.accumulate_grad(ga.data(), av.numel());
            if (need_b) bv.accumulate_grad(gb.data(), bv.numel());
        });
}

template <class FwdFn, class BwdFn>
Tensor unary_op(const Tensor& x, const char* name, FwdFn fwd, BwdFn bwd) {
    const int64_t n = x.numel();
    std::vector<float> out(static_cast<size_t>(n));
    const float* px = x.data();
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = fwd(px[i]);
    Tensor xv = x;
    return make_op_result(x.shape(), std::move(out), name, {x}, [xv, bwd](TensorImpl& o) mutable {
        const float* g = o.grad.data();
        const float* px2 = xv.data();
        const float* py = o.data.data();
        const int64_t n2 = xv.numel();
        std::vector<float> gx(static_cast<size_t>(n2));
        for (int64_t i = 0; i < n2; ++i) gx[static_cast<size_t>(i)] = g[i] * bwd(px2[i], py[i]);
        xv.accumulate_grad(gx.data(), n2);
    });
}

float sigmoid_scalar(float x) {
    if (x >= 0.0f) {
        return 1.0f / (1.0f + std::exp(-x));
    }
    const float e = std::exp(x);
    return e / (1.0f + e);
}

}  // namespace

// ---- shape ops ------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape new_shape) {
    int infer = -1;
    int64_t known = 1;
    for (size_t i = 0; i < new_shape.size(); ++i) {
        if (new_shape[i] == -1) {
            if (infer >= 0) throw ShapeError("reshape allows at most one inferred extent");
            infer = static_cast<int>(i);
        } else {
            known *= new_shape[i];
        }
    }
    if (infer >= 0) {
        if (known == 0 || x.numel() % known != 0) {
            throw ShapeError("cannot infer reshape extent from " + shape_str(x.shape()));
        }
        new_shape[static_cast<size_t>(infer)] = x.numel() / known;
    }
    if (numel_of(new_shape) != x.numel()) {
        throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(new_shape) +
                         " changes element count");
    }
    Tensor xv = x;
    Shape old_shape = x.shape();
    return make_op_result(std::move(new_shape), x.vec(), "reshape", {x}, [xv](TensorImpl& o) mutable {
        xv.accumulate_grad(o.grad.data(), xv.numel());
    });
}

Tensor permute(const Tensor& x, const std::vector<int>& order) {
    const int r = x.rank();
    if (static_cast<int>(order.size()) != r) {
        throw ShapeError("permute order rank mismatch for " + shape_str(x.shape()));
    }
    std::vector<bool> seen(static_cast<size_t>(r), false);
    for (int o : order) {
        if (o < 0 || o >= r || seen[static_cast<size_t>(o)]) throw ShapeError("permute order is not a permutation");
        seen[static_cast<size_t>(o)] = true;
    }
    Shape out_shape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = x.dim(order[static_cast<size_t>(i)]);

    const auto in_strides = row_major_strides(x.shape());
    std::vector<int64_t> strides(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(order[static_cast<size_t>(i)])];

    const int64_t total = x.numel();
    std::vector<float> out(static_cast<size_t>(total));
    {
        const float* px = x.data();
        std::vector<int64_t> idx(static_cast<size_t>(r), 0);
        int64_t off = 0;
        for (int64_t i = 0; i < total; ++i) {
            out[static_cast<size_t>(i)] = px[off];
            for (int ax = r - 1; ax >= 0; --ax) {
                idx[static_cast<size_t>(ax)]++;
                off += strides[static_cast<size_t>(ax)];
                if (idx[static_cast<size_t>(ax)] < out_shape[static_cast<size_t>(ax)]) break;
                idx[static_cast<size_t>(ax)] = 0;
                off -= strides[static_cast<size_t>(ax)] * out_shape[static_cast<size_t>(ax)];
            }
        }
    }

    std::vector<int> inv(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) inv[static_cast<size_t>(order[static_cast<size_t>(i)])] = i;
    Tensor xv = x;
    return make_op_result(out_shape, std::move(out), "permute", {x},
                          [xv, out_shape, strides, r](TensorImpl& o) mutable {
                              const float* g = o.grad.data();
                              const int64_t total2 = numel_of(out_shape);
                              std::vector<float> gx(static_cast<size_t>(xv.numel()), 0.0f);
                              std::vector<int64_t> idx(static_cast<size_t>(r), 0);
                              int64_t off = 0;
                              for (int64_t i = 0; i < total2; ++i) {
                                  gx[static_cast<size_t>(off)] += g[i];
                                  for (int ax = r - 1; ax >= 0; --ax) {
                                      idx[static_cast<size_t>(ax)]++;
                                      off += strides[static_cast<size_t>(ax)];
                                      if (idx[static_cast<size_t>(ax)] < out_shape[static_cast<size_t>(ax)]) break;
                                      idx[static_cast<size_t>(ax)] = 0;
                                      off -= strides[static_cast<size_t>(ax)] * out_shape[static_cast<size_t>(ax)];
                                  }
                              }
                              xv.accumulate_grad(gx.data(), xv.numel());
                          });
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
    if (xs.empty()) throw ContractError("concat requires at least one input");
    const int r = xs[0].rank();
    const int ax = normalize_axis(axis, r, xs[0].shape());
    Shape out_shape = xs[0].shape();
    int64_t axis_total = 0;
    for (const Tensor& t : xs) {
        if (t.rank() != r) throw ShapeError("concat rank mismatch");
        for (int i = 0; i < r; ++i) {
            if (i != ax && t.dim(i) != out_shape[static_cast<size_t>(i)]) {
                throw ShapeError("concat shape mismatch: " + shape_str(t.shape()) + " vs " +
                                 shape_str(xs[0].shape()));
            }
        }
        axis_total += t.dim(ax);
    }
    out_shape[static_cast<size_t>(ax)] = axis_total;

    int64_t outer = 1;
    for (int i = 0; i < ax; ++i) outer *= out_shape[static_cast<size_t>(i)];
    int64_t inner = 1;
    for (int i = ax + 1; i < r; ++i) inner *= out_shape[static_cast<size_t>(i)];

    std::vector<float> out(static_cast<size_t>(numel_of(out_shape)));
    const int64_t out_row = axis_total * inner;
    int64_t off = 0;
    for (const Tensor& t : xs) {
        const int64_t rows = t.dim(ax) * inner;
        const float* p = t.data();
        for (int64_t o = 0; o < outer; ++o) {
            std::memcpy(out.data() + o * out_row + off, p + o * rows, static_cast<size_t>(rows) * sizeof(float));
        }
        off += rows;
    }

    std::vector<Tensor> inputs = xs;
    return make_op_result(out_shape, std::move(out), "concat", inputs,
                          [inputs, outer, inner, out_row, ax](TensorImpl& o) mutable {
                              const float* g = o.grad.data();
                              int64_t off2 = 0;
                              for (Tensor& t : inputs) {
                                  const int64_t rows = t.dim(ax) * inner;
                                  if (t.requires_grad()) {
                                      std::vector<float> gt(static_cast<size_t>(t.numel()));
                                      for (int64_t ou = 0; ou < outer; ++ou) {
                                          std::memcpy(gt.data() + ou * rows, g + ou * out_row + off2,
                                                      static_cast<size_t>(rows) * sizeof(float));
                                      }
                                      t.accumulate_grad(gt.data(), t.numel());
                                  }
                                  off2 += rows;
                              }
                          });
}

Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len) {
    const int r = x.rank();
    const int ax = normalize_axis(axis, r, x.shape());
    const int64_t d = x.dim(ax);
    if (start < 0 || len <= 0 || start + len > d) {
        throw ShapeError("slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of range for axis extent " + std::to_string(d));
    }
    Shape out_shape = x.shape();
    out_shape[static_cast<size_t>(ax)] = len;
    int64_t outer = 1;
    for (int i = 0; i < ax; ++i) outer *= x.dim(i);
    int64_t inner = 1;
    for (int i = ax + 1; i < r; ++i) inner *= x.dim(i);

    std::vector<float> out(static_cast<size_t>(outer * len * inner));
    const float* p = x.data();
    for (int64_t o = 0; o < outer; ++o) {
        std::memcpy(out.data() + o * len * inner, p + (o * d + start) * inner,
                    static_cast<size_t>(len * inner) * sizeof(float));
    }
    Tensor xv = x;
    return make_op_result(out_shape, std::move(out), "slice", {x},
                          [xv, outer, inner, d, start, len](TensorImpl& o) mutable {
                              const float* g = o.grad.data();
                              std::vector<float> gx(static_cast<size_t>(xv.numel()), 0.0f);
                              for (int64_t ou = 0; ou < outer; ++ou) {
                                  std::memcpy(gx.data() + (ou * d + start) * inner, g + ou * len * inner,
                                              static_cast<size_t>(len * inner) * sizeof(float));
                              }
                              xv.accumulate_grad(gx.data(), xv.numel());
                          });
}

namespace {

// Shared by forward and backward: reversing an axis is its own inverse.
std::vector<float> reverse_axis(const float* p, int64_t outer, int64_t d, int64_t inner) {
    std::vector<float> out(static_cast<size_t>(outer * d * inner));
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < d; ++i) {
            std::memcpy(out.data() + (o * d + i) * inner, p + (o * d + (d - 1 - i)) * inner,
                        static_cast<size_t>(inner) * sizeof(float));
        }
    return out;
}

}  // namespace

Tensor flip(const Tensor& x, int axis) {
    const int r = x.rank();
    const int ax = normalize_axis(axis, r, x.shape());
    const int64_t d = x.dim(ax);
    int64_t outer = 1;
    for (int i = 0; i < ax; ++i) outer *= x.dim(i);
    int64_t inner = 1;
    for (int i = ax + 1; i < r; ++i) inner *= x.dim(i);

    std::vector<float> out = reverse_axis(x.data(), outer, d, inner);
    Tensor xv = x;
    return make_op_result(x.shape(), std::move(out), "flip", {x},
                          [xv, outer, d, inner](TensorImpl& o) mutable {
                              std::vector<float> gx = reverse_axis(o.grad.data(), outer, d, inner);
                              xv.accumulate_grad(gx.data(), xv.numel());
                          });
}

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    return broadcast_binary(
        a, b, "add", [](float x, float y) { return x + y; },
        [](float, float, float, float g, float& da, float& db) {
            da = g;
            db = g;
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return broadcast_binary(
        a, b, "sub", [](float x, float y) { return x - y; },
        [](float, float, float, float g, float& da, float& db) {
            da = g;
            db = -g;
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return broadcast_binary(
        a, b, "mul", [](float x, float y) { return x * y; },
        [](float x, float y, float, float g, float& da, float& db) {
            da = g * y;
            db = g * x;
        });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return broadcast_binary(
        a, b, "div", [](float x, float y) { return x / y; },
        [](float x, float y, float, float g, float& da, float& db) {
            da = g / y;
            db = -g * x / (y * y);
        });
}

Tensor add_scalar(const Tensor& x, float s) {
    return unary_op(
        x, "add_scalar", [s](float v) { return v + s; }, [](float, float) { return 1.0f; });
}

Tensor mul_scalar(const Tensor& x, float s) {
    return unary_op(
        x, "mul_scalar", [s](float v) { return v * s; }, [s](float, float) { return s; });
}

Tensor neg(const Tensor& x) {
    return unary_op(
        x, "neg", [](float v) { return -v; }, [](float, float) { return -1.0f; });
}

Tensor exp_op(const Tensor& x) {
    return unary_op(
        x, "exp", [](float v) { return std::exp(v); }, [](float, float y) { return y; });
}

Tensor log_op(const Tensor& x) {
    return unary_op(
        x, "log", [](float v) { return std::log(v); }, [](float v, float) { return 1.0f / v; });
}

Tensor relu(const Tensor& x) {
    return unary_op(
        x, "relu", [](float v) { return v > 0.0f ? v : 0.0f; },
        [](float v, float) { return v > 0.0f ? 1.0f : 0.0f; });
}

Tensor sigmoid(const Tensor& x) {
    return unary_op(
        x, "sigmoid", [](float v) { return sigmoid_scalar(v); },
        [](float, float y) { return y * (1.0f - y); });
}

Tensor silu(const Tensor& x) {
    return unary_op(
        x, "silu", [](float v) { return v * sigmoid_scalar(v); },
        [](float v, float) {
            const float s = sigmoid_scalar(v);
            return s * (1.0f + v * (1.0f - s));
        });
}

Tensor gelu(const Tensor& x) {
    constexpr float kInvSqrt2 = 0.7071067811865476f;
    constexpr float kInvSqrt2Pi = 0.3989422804014327f;
    return unary_op(
        x, "gelu", [](float v) { return 0.5f * v * (1.0f + std::erf(v * kInvSqrt2)); },
        [](float v, float) {
            const float cdf = 0.5f * (1.0f + std::erf(v * kInvSqrt2));
            const float pdf = kInvSqrt2Pi * std::exp(-0.5f * v * v);
            return cdf + v * pdf;
        });
}

Tensor softplus(const Tensor& x) {
    auto sp = [](float v) {
        if (v > 20.0f) return v;
        if (v < -20.0f) return std::exp(v);
        return std::log1p(std::exp(v));
    };
    return unary_op(
        x, "softplus", sp, [](float v, float) { return sigmoid_scalar(v); });
}

// ---- gemm -----------------------------------------------------------------

void gemm_nn(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c) {
    for (int64_t i = 0; i < m; ++i) {
        float* __restrict ci = c + i * n;
        const float* ai = a + i * k;
        for (int64_t l = 0; l < k; ++l) {
            const float av = ai[l];
            const float* __restrict bl = b + l * n;
            for (int64_t j = 0; j < n; ++j) ci[j] += av * bl[j];
        }
    }
}

void gemm_nt(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c) {
    for (int64_t i = 0; i < m; ++i) {
        const float* ai = a + i * k;
        float* ci = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const float* bj = b + j * k;
            float acc = 0.0f;
            for (int64_t l = 0; l < k; ++l) acc += ai[l] * bj[l];
            ci[j] += acc;
        }
    }
}

void gemm_tn(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c) {
    for (int64_t l = 0; l < k; ++l) {
        const float* al = a + l * m;
        const float* __restrict bl = b + l * n;
        for (int64_t i = 0; i < m; ++i) {
            const float av = al[i];
            float* __restrict ci = c + i * n;
            for (int64_t j = 0; j < n; ++j) ci[j] += av * bl[j];
        }
    }
}

// ---- matmul ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    const int ra = a.rank();
    const int rb = b.rank();
    if ((ra != 2 && ra != 3) || (rb != 2 && rb != 3)) {
        throw ShapeError("matmul expects rank-2 or rank-3 operands, got " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
    }
    const int64_t batch_a = ra == 3 ? a.dim(0) : 1;
    const int64_t batch_b = rb == 3 ? b.dim(0) : 1;
    if (ra == 3 && rb == 3 && batch_a != batch_b) {
        throw ShapeError("matmul batch mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const int64_t m = a.dim(ra - 2);
    const int64_t k = a.dim(ra - 1);
    const int64_t k2 = b.dim(rb - 2);
    const int64_t n = b.dim(rb - 1);
    if (k != k2) {
        throw ShapeError("matmul inner extents disagree: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const int64_t batch = std::max(batch_a, batch_b);
    Shape out_shape = (ra == 3 || rb == 3) ? Shape{batch, m, n} : Shape{m, n};

    std::vector<float> out(static_cast<size_t>(batch * m * n), 0.0f);
    const float* pa = a.data();
    const float* pb = b.data();
    for (int64_t i = 0; i < batch; ++i) {
        gemm_nn(m, n, k, pa + (batch_a == 1 ? 0 : i * m * k), pb + (batch_b == 1 ? 0 : i * k * n),
                out.data() + i * m * n);
    }

    Tensor av = a;
    Tensor bv = b;
    return make_op_result(std::move(out_shape), std::move(out), "matmul", {a, b},
                          [av, bv, batch, batch_a, batch_b, m, n, k](TensorImpl& o) mutable {
                              const float* g = o.grad.data();
                              const float* pa2 = av.data();
                              const float* pb2 = bv.data();
                              if (av.requires_grad()) {
                                  std::vector<float> ga(static_cast<size_t>(av.numel()), 0.0f);
                                  for (int64_t i = 0; i < batch; ++i) {
                                      gemm_nt(m, k, n, g + i * m * n, pb2 + (batch_b == 1 ? 0 : i * k * n),
                                              ga.data() + (batch_a == 1 ? 0 : i * m * k));
                                  }
                                  av.accumulate_grad(ga.data(), av.numel());
                              }
                              if (bv.requires_grad()) {
                                  std::vector<float> gb(static_cast<size_t>(bv.numel()), 0.0f);
                                  for (int64_t i = 0; i < batch; ++i) {
                                      gemm_tn(k, n, m, pa2 + (batch_a == 1 ? 0 : i * m * k), g + i * m * n,
                                              gb.data() + (batch_b == 1 ? 0 : i * k * n));
                                  }
                                  bv.accumulate_grad(gb.data(), bv.numel());
                              }
                          });
}

// ---- softmax --------------------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
    const int r = x.rank();
    const int ax = normalize_axis(axis, r, x.shape());
    const int64_t d = x.dim(ax);
    int64_t outer = 1;
    for (int i = 0; i < ax; ++i) outer *= x.dim(i);
    int64_t inner = 1;
    for (int i = ax + 1; i < r; ++i) inner *= x.dim(i);

    std::vector<float> out(static_cast<size_t>(x.numel()));
    const float* px = x.data();
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * d * inner + in;
            float mx = -std::numeric_limits<float>::infinity();
            for (int64_t j = 0; j < d; ++j) mx = std::max(mx, px[base + j * inner]);
            double sum = 0.0;
            for (int64_t j = 0; j < d; ++j) {
                const float e = std::exp(px[base + j * inner] - mx);
                out[static_cast<size_t>(base + j * inner)] = e;
                sum += e;
            }
            const float inv = static_cast<float>(1.0 / sum);
            for (int64_t j = 0; j < d; ++j) out[static_cast<size_t>(base + j * inner)] *= inv;
        }
    }

    Tensor xv = x;
    return make_op_result(x.shape(), std::move(out), "softmax", {x},
                          [xv, outer, inner, d](TensorImpl& o) mutable {
                              const float* g = o.grad.data();
                              const float* y = o.data.data();
                              std::vector<float> gx(static_cast<size_t>(xv.numel()));
                              for (int64_t ou = 0; ou < outer; ++ou) {
                                  for (int64_t in = 0; in < inner; ++in) {
                                      const int64_t base = ou * d * inner + in;
                                      double s = 0.0;
                                      for (int64_t j = 0; j < d; ++j) s += static_cast<double>(g[base + j * inner]) * y[base + j * inner];
                                      const float fs = static_cast<float>(s);
                                      for (int64_t j = 0; j < d; ++j) {
                                          const int64_t p = base + j * inner;
                                          gx[static_cast<size_t>(p)] = y[p] * (g[p] - fs);
                                      }
                                  }
                              }
                              xv.accumulate_grad(gx.data(), xv.numel());
                          });
}

// ---- reductions -----------------------------------------------------------

Tensor reduce(const Tensor& x, int axis, Reduce mode, bool keepdim) {
    const int r = x.rank();
    const int ax = normalize_axis(axis, r, x.shape());
    const int64_t d = x.dim(ax);
    int64_t outer = 1;
    for (int i = 0; i < ax; ++i) outer *= x.dim(i);
    int64_t inner = 1;
    for (int i = ax + 1; i < r; ++i) inner *= x.dim(i);

    Shape out_shape;
    for (int i = 0; i < r; ++i) {
        if (i == ax) {
            if (keepdim) out_shape.push_back(1);
        } else {
            out_shape.push_back(x.dim(i));
        }
    }
    if (out_shape.empty()) out_shape.push_back(1);

    std::vector<float> out(static_cast<size_t>(outer * inner));
    std::vector<int64_t> argmax;
    const float* px = x.data();
    if (mode == Reduce::Max) {
        argmax.resize(static_cast<size_t>(outer * inner));
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = o * d * inner + in;
                float best = px[base];
                int64_t bj = 0;
                for (int64_t j = 1; j < d; ++j) {
                    const float v = px[base + j * inner];
                    if (v > best) {  // strict: ties keep the first scan-order index
                        best = v;
                        bj = j;
                    }
                }
                out[static_cast<size_t>(o * inner + in)] = best;
                argmax[static_cast<size_t>(o * inner + in)] = bj;
            }
        }
    } else {
        const double scale = mode == Reduce::Mean ? 1.0 / static_cast<double>(d) : 1.0;
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = o * d * inner + in;
                double acc = 0.0;
                for (int64_t j = 0; j < d; ++j) acc += px[base + j * inner];
                out[static_cast<size_t>(o * inner + in)] = static_cast<float>(acc * scale);
            }
        }
    }

    Tensor xv = x;
    return make_op_result(std::move(out_shape), std::move(out), "reduce", {x},
                          [xv, outer, inner, d, mode, argmax](TensorImpl& o) mutable {
                              const float* g = o.grad.data();
                              std::vector<float> gx(static_cast<size_t>(xv.numel()), 0.0f);
                              if (mode == Reduce::Max) {
                                  for (int64_t ou = 0; ou < outer; ++ou) {
                                      for (int64_t in = 0; in < inner; ++in) {
                                          const int64_t j = argmax[static_cast<size_t>(ou * inner + in)];
                                          gx[static_cast<size_t>(ou * d * inner + j * inner + in)] = g[ou * inner + in];
                                      }
                                  }
                              } else {
                                  const float scale = mode == Reduce::Mean ? 1.0f / static_cast<float>(d) : 1.0f;
                                  for (int64_t ou = 0; ou < outer; ++ou) {
                                      for (int64_t in = 0; in < inner; ++in) {
                                          const float gv = g[ou * inner + in] * scale;
                                          for (int64_t j = 0; j < d; ++j) {
                                              gx[static_cast<size_t>(ou * d * inner + j * inner + in)] = gv;
                                          }
                                      }
                                  }
                              }
                              xv.accumulate_grad(gx.data(), xv.numel());
                          });
}

Tensor sum_all(const Tensor& x) {
    double acc = 0.0;
    const float* px = x.data();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) acc += px[i];
    Tensor xv = x;
    return make_op_result(Shape{1}, {static_cast<float>(acc)}, "sum_all", {x}, [xv](TensorImpl& o) mutable {
        const float g = o.grad[0];
        std::vector<float> gx(static_cast<size_t>(xv.numel()), g);
        xv.accumulate_grad(gx.data(), xv.numel());
    });
}

Tensor mean_all(const Tensor& x) {
    double acc = 0.0;
    const float* px = x.data();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) acc += px[i];
    Tensor xv = x;
    return make_op_result(Shape{1}, {static_cast<float>(acc / static_cast<double>(n))}, "mean_all", {x},
                          [xv, n](TensorImpl& o) mutable {
                              const float g = o.grad[0] / static_cast<float>(n);
                              std::vector<float> gx(static_cast<size_t>(n), g);
                              xv.accumulate_grad(gx.data(), xv.numel());
                          });
}

}  // namespace samba
