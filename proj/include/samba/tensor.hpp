#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "samba/error.hpp"
#include "samba/rng.hpp"

namespace samba {

using Shape = std::vector<int64_t>;

int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;
struct TensorImpl;

// One recorded operation on the tape. `backward` reads the output's gradient
// and accumulates contributions into the inputs' gradients (always +=, so a
// tensor consumed k times receives the sum of k contributions).
struct TapeNode {
    const char* op = "";
    std::vector<Tensor> inputs;
    std::function<void(TensorImpl&)> backward;
};

struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::shared_ptr<TapeNode> node;  // null for leaves / detached results

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    void ensure_grad();
};

// Global autograd switch. Scoped off during evaluation so forward passes
// record nothing.
bool grad_enabled();
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Dense float32 tensor with value semantics over a shared payload.
// Immutable-after-construction by convention: ops return fresh tensors, and
// only the optimizer and gradient accumulation write in place.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, bool requires_grad = false);
    Tensor(Shape shape, std::vector<float> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);
    static Tensor uniform(Shape shape, float lo, float hi, Rng& rng, bool requires_grad = false);
    static Tensor normal(Shape shape, float mean, float stddev, Rng& rng, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int64_t dim(int i) const;
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int64_t numel() const { return impl_->numel(); }

    float* data() { return impl_->data.data(); }
    const float* data() const { return impl_->data.data(); }
    std::vector<float>& vec() { return impl_->data; }
    const std::vector<float>& vec() const { return impl_->data; }

    float item() const;
    float at(std::initializer_list<int64_t> idx) const;

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v);

    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    float* grad_data();
    const float* grad_data() const;
    const std::vector<float>& grad_vec() const { return impl_->grad; }
    void zero_grad();
    void accumulate_grad(const float* g, int64_t n);

    // Same payload, detached from the tape and with requires_grad off.
    Tensor detach() const;

    // Reverse-mode sweep from a scalar. Seeds d(loss)/d(loss) = 1 and visits
    // each tape node exactly once in reverse topological order.
    void backward() const;

    bool all_finite() const;

    TensorImpl* impl() { return impl_.get(); }
    const TensorImpl* impl() const { return impl_.get(); }
    const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

    // Internal: attach a tape node to this result tensor.
    void set_node(std::shared_ptr<TapeNode> node);

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Helper used by every op: builds the result tensor and records a tape node
// when grad mode is on and at least one input requires grad.
Tensor make_op_result(Shape shape, std::vector<float> data, const char* op,
                      std::vector<Tensor> inputs,
                      std::function<void(TensorImpl&)> backward);

}  // namespace samba
