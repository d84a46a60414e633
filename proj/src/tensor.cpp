#include "samba/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <unordered_set>

namespace samba {

int64_t numel_of(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

void TensorImpl::ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor::Tensor(Shape shape, bool requires_grad) : impl_(std::make_shared<TensorImpl>()) {
    for (int64_t d : shape) {
        if (d <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data.assign(static_cast<size_t>(numel_of(impl_->shape)), 0.0f);
    impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<float> data, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
    for (int64_t d : shape) {
        if (d <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (numel_of(shape) != static_cast<int64_t>(data.size())) {
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return Tensor(std::move(shape), requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    Tensor t(std::move(shape), requires_grad);
    std::fill(t.vec().begin(), t.vec().end(), value);
    return t;
}

Tensor Tensor::scalar(float value, bool requires_grad) {
    return Tensor(Shape{1}, std::vector<float>{value}, requires_grad);
}

Tensor Tensor::uniform(Shape shape, float lo, float hi, Rng& rng, bool requires_grad) {
    Tensor t(std::move(shape), requires_grad);
    for (auto& v : t.vec()) v = rng.uniform(lo, hi);
    return t;
}

Tensor Tensor::normal(Shape shape, float mean, float stddev, Rng& rng, bool requires_grad) {
    Tensor t(std::move(shape), requires_grad);
    for (auto& v : t.vec()) v = mean + stddev * rng.normal();
    return t;
}

int64_t Tensor::dim(int i) const {
    if (i < 0) i += rank();
    if (i < 0 || i >= rank()) throw ShapeError("axis " + std::to_string(i) + " out of range for " + shape_str(shape()));
    return impl_->shape[static_cast<size_t>(i)];
}

float Tensor::item() const {
    if (numel() != 1) throw ContractError("item() requires a single-element tensor, got " + shape_str(shape()));
    return impl_->data[0];
}

float Tensor::at(std::initializer_list<int64_t> idx) const {
    if (static_cast<int>(idx.size()) != rank()) {
        throw ShapeError("index rank mismatch for " + shape_str(shape()));
    }
    int64_t flat = 0;
    int i = 0;
    for (int64_t v : idx) {
        const int64_t d = impl_->shape[static_cast<size_t>(i)];
        if (v < 0 || v >= d) throw ShapeError("index out of bounds");
        flat = flat * d + v;
        ++i;
    }
    return impl_->data[static_cast<size_t>(flat)];
}

Tensor& Tensor::set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
}

float* Tensor::grad_data() {
    impl_->ensure_grad();
    return impl_->grad.data();
}

const float* Tensor::grad_data() const {
    const_cast<TensorImpl*>(impl_.get())->ensure_grad();
    return impl_->grad.data();
}

void Tensor::zero_grad() {
    impl_->grad.assign(impl_->data.size(), 0.0f);
}

void Tensor::accumulate_grad(const float* g, int64_t n) {
    impl_->ensure_grad();
    float* dst = impl_->grad.data();
    for (int64_t i = 0; i < n; ++i) dst[i] += g[i];
}

Tensor Tensor::detach() const {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    t.impl_->requires_grad = false;
    return t;
}

void Tensor::set_node(std::shared_ptr<TapeNode> node) { impl_->node = std::move(node); }

void Tensor::backward() const {
    if (numel() != 1) {
        throw ContractError("backward() requires a scalar loss, got " + shape_str(shape()));
    }
    if (!impl_->node && !impl_->requires_grad) {
        std::fprintf(stderr, "samba: warning: backward() on a detached tensor is a no-op\n");
        return;
    }

    // Iterative post-order DFS: children (inputs) first, so `order` ends up
    // topologically sorted and the reverse visit sees each output before its
    // inputs.
    std::vector<std::shared_ptr<TensorImpl>> order;
    std::unordered_set<TensorImpl*> visited;
    struct Frame {
        std::shared_ptr<TensorImpl> impl;
        size_t next_input;
    };
    std::vector<Frame> stack;
    stack.push_back({impl_, 0});
    visited.insert(impl_.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        TapeNode* node = f.impl->node.get();
        const size_t n_inputs = node ? node->inputs.size() : 0;
        if (f.next_input < n_inputs) {
            const Tensor& in = node->inputs[f.next_input++];
            TensorImpl* raw = const_cast<TensorImpl*>(in.impl());
            if (raw && !visited.count(raw)) {
                visited.insert(raw);
                stack.push_back({in.impl_ptr(), 0});
            }
        } else {
            order.push_back(f.impl);
            stack.pop_back();
        }
    }

    impl_->ensure_grad();
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
    impl_->grad[0] = 1.0f;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* impl = it->get();
        if (impl->node && impl->node->backward) {
            impl->ensure_grad();
            impl->node->backward(*impl);
        }
    }
}

bool Tensor::all_finite() const {
    for (float v : impl_->data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Tensor make_op_result(Shape shape, std::vector<float> data, const char* op,
                      std::vector<Tensor> inputs, std::function<void(TensorImpl&)> backward) {
    Tensor out(std::move(shape), std::move(data), false);
    bool needs_grad = false;
    if (grad_enabled()) {
        for (const Tensor& in : inputs) {
            if (in.defined() && in.requires_grad()) {
                needs_grad = true;
                break;
            }
        }
    }
    if (needs_grad) {
        out.set_requires_grad(true);
        auto node = std::make_shared<TapeNode>();
        node->op = op;
        node->inputs = std::move(inputs);
        node->backward = std::move(backward);
        out.set_node(std::move(node));
    }
    return out;
}

}  // namespace samba
