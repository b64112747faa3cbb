#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace tabdl {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {
struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until first accumulation
};
}  // namespace detail

// Dense 64-bit float tensor. Value-semantic handle over shared storage:
// copies alias the same buffer, which is what the tape relies on to reach
// gradients of earlier nodes. Data is immutable once created except for
// gradient accumulation and explicit in-place parameter updates by the
// optimizer (which never run under an active tape).
class Tensor {
public:
    Tensor() = default;

    static Tensor from_data(std::vector<double> data, Shape shape, bool requires_grad = false);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value);
    static Tensor uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = false);
    static Tensor normal(Shape shape, double mean, double stddev, Rng& rng, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t size() const { return impl_->data.size(); }

    std::span<const double> data() const { return impl_->data; }
    std::span<double> mutable_data() { return impl_->data; }

    double item() const;
    double at(std::size_t i) const { return impl_->data[i]; }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }

    // Gradient state lives on the shared storage; the handle is shallow-const,
    // so accumulation is allowed through const handles (it is the one mutation
    // the tape performs).
    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    std::span<const double> grad() const;
    std::span<double> grad_buffer() const;  // allocates (zero-filled) on demand
    void zero_grad() const;
    void accumulate_grad(std::span<const double> g) const;

    // Same data, detached from gradient tracking.
    Tensor detach() const;
    // Deep copy of the data (no grad, no tracking).
    Tensor clone() const;

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

// Records the backward rule of every differentiable operation executed while
// the tape is the innermost active scope. Execution order is topological by
// construction, so backward() is a single reverse sweep that visits each
// recorded operation exactly once. Gradients accumulate additively; callers
// own zeroing between steps.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::function<void()> backward_step);
    std::size_t size() const { return steps_.size(); }
    void clear() { steps_.clear(); }

    // Seeds d(loss)/d(loss) = 1 and runs every recorded rule once, in reverse.
    void backward(Tensor loss);

    static Tape* active();

private:
    std::vector<std::function<void()>> steps_;
    Tape* previous_ = nullptr;
};

// Masks any active tape for its lifetime; operations run without recording.
class NoGrad {
public:
    NoGrad();
    ~NoGrad();
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;
};

// Convenience: backward through the innermost active tape.
void backward(const Tensor& loss);

// True when the result of an op on these inputs should be tracked.
bool grad_enabled(std::initializer_list<const Tensor*> inputs);

// ---------------------------------------------------------------------------
// Primitives. All of them record backward rules when a tape is active and at
// least one input requires grad.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);          // same shape
Tensor add_bias(const Tensor& x, const Tensor& bias);  // bias over the last axis
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise, same shape
Tensor scale(const Tensor& a, double factor);

Tensor matmul(const Tensor& a, const Tensor& b);  // (m,k) x (k,n)
// Batched matmul on rank-3 tensors: (B,m,k) x (B,k,n); transpose_b swaps the
// last two axes of b, i.e. (B,m,k) x (B,n,k) -> (B,m,n).
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor relu(const Tensor& x);
Tensor reglu(const Tensor& x);  // split last axis in halves: a * relu(b)
Tensor softmax_last_axis(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

struct BatchNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;
};

// 2D input (rows, features). Training mode normalizes with batch statistics
// and updates the running ones; eval mode uses the running statistics.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, bool training, double eps, double momentum);

Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng);

Tensor embedding_lookup(const Tensor& table, std::span<const std::int64_t> indices);

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> labels);
Tensor binary_cross_entropy_with_logits(const Tensor& logits, std::span<const double> targets);
Tensor mse(const Tensor& pred, std::span<const double> target);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor reshape(const Tensor& x, Shape new_shape);
Tensor transpose(const Tensor& x, const std::vector<std::size_t>& perm);
// Contiguous slice along one axis.
Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
// Concatenate 2D tensors along the column axis.
Tensor concat_cols(const std::vector<Tensor>& parts);

// Raw kernels, shared by forward and backward paths. C (m,n) += or = A x B
// with optional transposes encoded by the variant.
namespace kernels {
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate);
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate);  // C = A (m,k) x B^T, B is (n,k)
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate);  // C = A^T x B, A is (k,m), B is (k,n)
}  // namespace kernels

}  // namespace tabdl
