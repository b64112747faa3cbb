#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace tabdl {

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

namespace {

void check(bool cond, ErrorKind kind, const std::string& message) {
    if (!cond) fail(kind, message);
}

std::size_t last_extent(const Tensor& t) {
    check(t.rank() >= 1, ErrorKind::Shape, "tensor must have rank >= 1");
    return t.shape().back();
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::from_data(std::vector<double> data, Shape shape, bool requires_grad) {
    check(data.size() == shape_size(shape), ErrorKind::Shape,
          "data length " + std::to_string(data.size()) + " does not match shape " +
              shape_to_string(shape));
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return from_data(std::vector<double>(shape_size(shape), 0.0), std::move(shape), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    return from_data(std::vector<double>(shape_size(shape), value), std::move(shape), requires_grad);
}

Tensor Tensor::scalar(double value) { return from_data({value}, Shape{}); }

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad) {
    std::vector<double> d(shape_size(shape));
    for (auto& v : d) v = rng.uniform(lo, hi);
    return from_data(std::move(d), std::move(shape), requires_grad);
}

Tensor Tensor::normal(Shape shape, double mean, double stddev, Rng& rng, bool requires_grad) {
    std::vector<double> d(shape_size(shape));
    for (auto& v : d) v = rng.normal(mean, stddev);
    return from_data(std::move(d), std::move(shape), requires_grad);
}

double Tensor::item() const {
    check(size() == 1, ErrorKind::Contract, "item() requires a single-element tensor");
    return impl_->data[0];
}

std::span<const double> Tensor::grad() const {
    if (!impl_ || impl_->grad.empty()) return {};
    return impl_->grad;
}

std::span<double> Tensor::grad_buffer() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
}

void Tensor::zero_grad() const {
    if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

void Tensor::accumulate_grad(std::span<const double> g) const {
    if (!impl_ || !impl_->requires_grad) return;
    check(g.size() == impl_->data.size(), ErrorKind::Shape, "gradient size mismatch");
    auto buf = grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

Tensor Tensor::detach() const {
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    t.impl_->requires_grad = false;
    return t;
}

Tensor Tensor::clone() const { return detach(); }

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

namespace {
thread_local std::vector<Tape*> g_tape_stack;
}

Tape::Tape() { g_tape_stack.push_back(this); }

Tape::~Tape() {
    // Scopes must nest; the innermost tape is destroyed first.
    if (!g_tape_stack.empty() && g_tape_stack.back() == this) g_tape_stack.pop_back();
}

Tape* Tape::active() { return g_tape_stack.empty() ? nullptr : g_tape_stack.back(); }

void Tape::record(std::function<void()> backward_step) { steps_.push_back(std::move(backward_step)); }

void Tape::backward(Tensor loss) {
    check(loss.defined() && loss.size() == 1, ErrorKind::Contract,
          "backward expects a scalar loss tensor");
    check(loss.requires_grad(), ErrorKind::Contract,
          "backward expects a loss produced under an active tape");
    loss.grad_buffer()[0] += 1.0;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
}

NoGrad::NoGrad() { g_tape_stack.push_back(nullptr); }

NoGrad::~NoGrad() {
    if (!g_tape_stack.empty() && g_tape_stack.back() == nullptr) g_tape_stack.pop_back();
}

void backward(const Tensor& loss) {
    Tape* tape = Tape::active();
    check(tape != nullptr, ErrorKind::Contract, "backward called without an active tape");
    tape->backward(loss);
}

bool grad_enabled(std::initializer_list<const Tensor*> inputs) {
    if (Tape::active() == nullptr) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

namespace {

Tensor tracked(std::vector<double> data, Shape shape, bool track) {
    return Tensor::from_data(std::move(data), std::move(shape), track);
}

void record_if(bool track, std::function<void()> bw) {
    if (track) Tape::active()->record(std::move(bw));
}

}  // namespace

// ---------------------------------------------------------------------------
// GEMM kernels
// ---------------------------------------------------------------------------

namespace kernels {

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        const double* ai = a + i * k;
        for (std::size_t l = 0; l < k; ++l) {
            const double ail = ai[l];
            const double* bl = b + l * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += ail * bl[j];
        }
    }
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double acc = 0.0;
            for (std::size_t l = 0; l < k; ++l) acc += ai[l] * bj[l];
            if (accumulate)
                ci[j] += acc;
            else
                ci[j] = acc;
        }
    }
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    for (std::size_t l = 0; l < k; ++l) {
        const double* al = a + l * m;
        const double* bl = b + l * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double ali = al[i];
            if (ali == 0.0) continue;
            double* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += ali * bl[j];
        }
    }
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), ErrorKind::Shape,
          "add: shape mismatch " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
    const bool track = grad_enabled({&a, &b});
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
    Tensor result = tracked(std::move(out), a.shape(), track);
    record_if(track, [a, b, result]() mutable {
        if (!result.has_grad()) return;
        a.accumulate_grad(result.grad());
        b.accumulate_grad(result.grad());
    });
    return result;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    const std::size_t n = last_extent(x);
    check(bias.rank() == 1 && bias.shape()[0] == n, ErrorKind::Shape,
          "add_bias: bias length must equal the last extent");
    const bool track = grad_enabled({&x, &bias});
    std::vector<double> out(x.size());
    const std::size_t rows = x.size() / n;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x.at(r * n + j) + bias.at(j);
    Tensor result = tracked(std::move(out), x.shape(), track);
    record_if(track, [x, bias, result, rows, n]() mutable {
        if (!result.has_grad()) return;
        auto g = result.grad();
        x.accumulate_grad(g);
        if (bias.requires_grad()) {
            std::vector<double> gb(n, 0.0);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
            bias.accumulate_grad(gb);
        }
    });
    return result;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), ErrorKind::Shape, "sub: shape mismatch");
    const bool track = grad_enabled({&a, &b});
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
    Tensor result = tracked(std::move(out), a.shape(), track);
    record_if(track, [a, b, result]() mutable {
        if (!result.has_grad()) return;
        auto g = result.grad();
        a.accumulate_grad(g);
        if (b.requires_grad()) {
            std::vector<double> gb(g.size());
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = -g[i];
            b.accumulate_grad(gb);
        }
    });
    return result;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), ErrorKind::Shape, "mul: shape mismatch");
    const bool track = grad_enabled({&a, &b});
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
    Tensor result = tracked(std::move(out), a.shape(), track);
    record_if(track, [a, b, result]() mutable {
        if (!result.has_grad()) return;
        auto g = result.grad();
        if (a.requires_grad()) {
            std::vector<double> ga(g.size());
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = g[i] * b.at(i);
            a.accumulate_grad(ga);
        }
        if (b.requires_grad()) {
            std::vector<double> gb(g.size());
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = g[i] * a.at(i);
            b.accumulate_grad(gb);
        }
    });
    return result;
}

Tensor scale(const Tensor& a, double factor) {
    const bool track = grad_enabled({&a});
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * factor;
    Tensor result = tracked(std::move(out), a.shape(), track);
    record_if(track, [a, result, factor]() mutable {
        if (!result.has_grad()) return;
        auto g = result.grad();
        std::vector<double> ga(g.size());
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = g[i] * factor;
        a.accumulate_grad(ga);
    });
    return result;
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    check(a.rank() == 2 && b.rank() == 2, ErrorKind::Shape, "matmul expects rank-2 tensors");
    const std::size_t m = a.shape()[0], k = a.shape()[1];
    check(b.shape()[0] == k, ErrorKind::Shape,
          "matmul: inner extents differ: " + shape_to_string(a.shape()) + " x " +
              shape_to_string(b.shape()));
    const std::size_t n = b.shape()[1];
    const bool track = grad_enabled({&a, &b});
    std::vector<double> out(m * n);
    kernels::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n, false);
    Tensor result = tracked(std::move(out), {m, n}, track);
    record_if(track, [a, b, result, m, k, n]() mutable {
        if (!result.has_grad()) return;
        const double* g = result.grad().data();
        if (a.requires_grad())
            kernels::gemm_nt(g, b.data().data(), a.grad_buffer().data(), m, n, k, true);
        if (b.requires_grad())
            kernels::gemm_tn(a.data().data(), g, b.grad_buffer().data(), k, m, n, true);
    });
    return result;
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
    check(a.rank() == 3 && b.rank() == 3, ErrorKind::Shape, "bmm expects rank-3 tensors");
    const std::size_t nb = a.shape()[0];
    check(b.shape()[0] == nb, ErrorKind::Shape, "bmm: batch extents differ");
    const std::size_t m = a.shape()[1], k = a.shape()[2];
    const std::size_t n = transpose_b ? b.shape()[1] : b.shape()[2];
    const std::size_t bk = transpose_b ? b.shape()[2] : b.shape()[1];
    check(bk == k, ErrorKind::Shape, "bmm: inner extents differ");
    const bool track = grad_enabled({&a, &b});
    std::vector<double> out(nb * m * n);
    for (std::size_t i = 0; i < nb; ++i) {
        const double* ai = a.data().data() + i * m * k;
        const double* bi = b.data().data() + i * (transpose_b ? n * k : k * n);
        double* ci = out.data() + i * m * n;
        if (transpose_b)
            kernels::gemm_nt(ai, bi, ci, m, k, n, false);
        else
            kernels::gemm_nn(ai, bi, ci, m, k, n, false);
    }
    Tensor result = tracked(std::move(out), {nb, m, n}, track);
    record_if(track, [a, b, result, nb, m, k, n, transpose_b]() mutable {
        if (!result.has_grad()) return;
        const double* g = result.grad().data();
        for (std::size_t i = 0; i < nb; ++i) {
            const double* gi = g + i * m * n;
            const double* ai = a.data().data() + i * m * k;
            const double* bi = b.data().data() + i * (transpose_b ? n * k : k * n);
            if (a.requires_grad()) {
                double* gai = a.grad_buffer().data() + i * m * k;
                if (transpose_b)
                    kernels::gemm_nn(gi, bi, gai, m, n, k, true);  // dA = dC x B
                else
                    kernels::gemm_nt(gi, bi, gai, m, n, k, true);  // dA = dC x B^T
            }
            if (b.requires_grad()) {
                double* gbi = b.grad_buffer().data() + i * (transpose_b ? n * k : k * n);
                if (transpose_b)
                    kernels::gemm_tn(gi, ai, gbi, n, m, k, true);  // dB = dC^T x A
                else
                    kernels::gemm_tn(ai, gi, gbi, k, m, n, true);  // dB = A^T x dC
            }
        }
    });
    return result;
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalizations
// ---------------------------------------------------------------------------

Tensor relu(const Tensor& x) {
    const bool track = grad_enabled({&x});
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) > 0.0 ? x.at(i) : 0.0;
    Tensor result = tracked(std::move(out), x.shape(), track);
    record_if(track, [x, result]() mutable {
        if (!result.has_grad() || !x.requires_grad()) return;
        auto g = result.grad();
        std::vector<double> gx(g.size());
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = x.at(i) > 0.0 ? g[i] : 0.0;
        x.accumulate_grad(gx);
    });
    return result;
}

Tensor reglu(const Tensor& x) {
    const std::size_t last = last_extent(x);
    check(last % 2 == 0, ErrorKind::Shape, "reglu requires an even last extent, got " +
                                               std::to_string(last));
    const std::size_t h = last / 2;
    const std::size_t rows = x.size() / last;
    const bool track = grad_enabled({&x});
    std::vector<double> out(rows * h);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * last;
        double* yr = out.data() + r * h;
        for (std::size_t j = 0; j < h; ++j) {
            const double gate = xr[h + j];
            yr[j] = xr[j] * (gate > 0.0 ? gate : 0.0);
        }
    }
    Shape out_shape = x.shape();
    out_shape.back() = h;
    Tensor result = tracked(std::move(out), std::move(out_shape), track);
    record_if(track, [x, result, rows, h, last]() mutable {
        if (!result.has_grad() || !x.requires_grad()) return;
        auto g = result.grad();
        std::vector<double> gx(x.size(), 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* xr = x.data().data() + r * last;
            const double* gr = g.data() + r * h;
            double* gxr = gx.data() + r * last;
            for (std::size_t j = 0; j < h; ++j) {
                const double gate = xr[h + j];
                gxr[j] = gr[j] * (gate > 0.0 ? gate : 0.0);
                gxr[h + j] = gate > 0.0 ? gr[j] * xr[j] : 0.0;
            }
        }
        x.accumulate_grad(gx);
    });
    return result;
}

Tensor softmax_last_axis(const Tensor& x) {
    const std::size_t n = last_extent(x);
    check(n > 0, ErrorKind::Shape, "softmax over empty rows");
    const std::size_t rows = x.size() / n;
    const bool track = grad_enabled({&x});
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * n;
        double* yr = out.data() + r * n;
        double mx = xr[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            denom += yr[j];
        }
        for (std::size_t j = 0; j < n; ++j) yr[j] /= denom;
    }
    Tensor result = tracked(std::move(out), x.shape(), track);
    record_if(track, [x, result, rows, n]() mutable {
        if (!result.has_grad() || !x.requires_grad()) return;
        auto g = result.grad();
        std::vector<double> gx(x.size());
        for (std::size_t r = 0; r < rows; ++r) {
            const double* yr = result.data().data() + r * n;
            const double* gr = g.data() + r * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
            double* gxr = gx.data() + r * n;
            for (std::size_t j = 0; j < n; ++j) gxr[j] = yr[j] * (gr[j] - dot);
        }
        x.accumulate_grad(gx);
    });
    return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const std::size_t n = last_extent(x);
    check(n > 0, ErrorKind::Shape, "layer_norm over empty rows");
    check(gamma.rank() == 1 && gamma.shape()[0] == n && beta.rank() == 1 && beta.shape()[0] == n,
          ErrorKind::Shape, "layer_norm: gamma/beta length must equal the last extent");
    const std::size_t rows = x.size() / n;
    const bool track = grad_enabled({&x, &gamma, &beta});
    std::vector<double> out(x.size());
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += xr[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        double* hr = xhat->data() + r * n;
        double* yr = out.data() + r * n;
        for (std::size_t j = 0; j < n; ++j) {
            hr[j] = (xr[j] - mu) * is;
            yr[j] = gamma.at(j) * hr[j] + beta.at(j);
        }
    }
    Tensor result = tracked(std::move(out), x.shape(), track);
    record_if(track, [x, gamma, beta, result, xhat, inv_std, rows, n]() mutable {
        if (!result.has_grad()) return;
        auto g = result.grad();
        if (gamma.requires_grad() || beta.requires_grad()) {
            std::vector<double> gg(n, 0.0), gb(n, 0.0);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < n; ++j) {
                    gg[j] += g[r * n + j] * (*xhat)[r * n + j];
                    gb[j] += g[r * n + j];
                }
            gamma.accumulate_grad(gg);
            beta.accumulate_grad(gb);
        }
        if (x.requires_grad()) {
            std::vector<double> gx(x.size());
            for (std::size_t r = 0; r < rows; ++r) {
                const double* hr = xhat->data() + r * n;
                const double* gr = g.data() + r * n;
                double m1 = 0.0, m2 = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    const double gj = gamma.at(j) * gr[j];
                    m1 += gj;
                    m2 += gj * hr[j];
                }
                m1 /= static_cast<double>(n);
                m2 /= static_cast<double>(n);
                const double is = (*inv_std)[r];
                double* gxr = gx.data() + r * n;
                for (std::size_t j = 0; j < n; ++j)
                    gxr[j] = (gamma.at(j) * gr[j] - m1 - hr[j] * m2) * is;
            }
            x.accumulate_grad(gx);
        }
    });
    return result;
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                  bool training, double eps, double momentum) {
    check(x.rank() == 2, ErrorKind::Shape, "batch_norm expects a 2D input");
    const std::size_t rows = x.shape()[0], n = x.shape()[1];
    check(rows > 0, ErrorKind::Shape, "batch_norm over an empty batch");
    check(gamma.shape() == Shape{n} && beta.shape() == Shape{n}, ErrorKind::Shape,
          "batch_norm: gamma/beta length mismatch");
    check(state.running_mean.size() == n && state.running_var.size() == n, ErrorKind::Shape,
          "batch_norm: running statistics not initialized to the feature width");
    const bool track = grad_enabled({&x, &gamma, &beta});
    std::vector<double> out(x.size());

    if (!training) {
        auto scale_v = std::make_shared<std::vector<double>>(n);
        for (std::size_t j = 0; j < n; ++j)
            (*scale_v)[j] = 1.0 / std::sqrt(state.running_var[j] + eps);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j)
                out[r * n + j] =
                    gamma.at(j) * (x.at(r * n + j) - state.running_mean[j]) * (*scale_v)[j] +
                    beta.at(j);
        Tensor result = tracked(std::move(out), x.shape(), track);
        record_if(track, [x, gamma, beta, result, scale_v, rows, n]() mutable {
            if (!result.has_grad()) return;
            auto g = result.grad();
            if (x.requires_grad()) {
                std::vector<double> gx(x.size());
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < n; ++j)
                        gx[r * n + j] = g[r * n + j] * gamma.at(j) * (*scale_v)[j];
                x.accumulate_grad(gx);
            }
        });
        return result;
    }

    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto inv_std = std::make_shared<std::vector<double>>(n);
    for (std::size_t j = 0; j < n; ++j) {
        double mu = 0.0;
        for (std::size_t r = 0; r < rows; ++r) mu += x.at(r * n + j);
        mu /= static_cast<double>(rows);
        double var = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
            const double d = x.at(r * n + j) - mu;
            var += d * d;
        }
        var /= static_cast<double>(rows);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[j] = is;
        for (std::size_t r = 0; r < rows; ++r) {
            const double h = (x.at(r * n + j) - mu) * is;
            (*xhat)[r * n + j] = h;
            out[r * n + j] = gamma.at(j) * h + beta.at(j);
        }
        // Running stats track the unbiased variance, like common frameworks.
        const double var_unbiased =
            rows > 1 ? var * static_cast<double>(rows) / static_cast<double>(rows - 1) : var;
        state.running_mean[j] = (1.0 - momentum) * state.running_mean[j] + momentum * mu;
        state.running_var[j] = (1.0 - momentum) * state.running_var[j] + momentum * var_unbiased;
    }
    Tensor result = tracked(std::move(out), x.shape(), track);
    record_if(track, [x, gamma, beta, result, xhat, inv_std, rows, n]() mutable {
        if (!result.has_grad()) return;
        auto g = result.grad();
        if (gamma.requires_grad() || beta.requires_grad()) {
            std::vector<double> gg(n, 0.0), gb(n, 0.0);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < n; ++j) {
                    gg[j] += g[r * n + j] * (*xhat)[r * n + j];
                    gb[j] += g[r * n + j];
                }
            gamma.accumulate_grad(gg);
            beta.accumulate_grad(gb);
        }
        if (x.requires_grad()) {
            std::vector<double> gx(x.size());
            for (std::size_t j = 0; j < n; ++j) {
                double m1 = 0.0, m2 = 0.0;
                for (std::size_t r = 0; r < rows; ++r) {
                    m1 += g[r * n + j];
                    m2 += g[r * n + j] * (*xhat)[r * n + j];
                }
                m1 /= static_cast<double>(rows);
                m2 /= static_cast<double>(rows);
                const double k = gamma.at(j) * (*inv_std)[j];
                for (std::size_t r = 0; r < rows; ++r)
                    gx[r * n + j] =
                        k * (g[r * n + j] - m1 - (*xhat)[r * n + j] * m2);
            }
            x.accumulate_grad(gx);
        }
    });
    return result;
}

Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng) {
    check(rate >= 0.0 && rate < 1.0, ErrorKind::Config,
          "dropout rate must lie in [0, 1), got " + std::to_string(rate));
    if (!training || rate == 0.0) return x;  // identity, bit-exact
    const bool track = grad_enabled({&x});
    const double keep_scale = 1.0 / (1.0 - rate);
    auto mask = std::make_shared<std::vector<double>>(x.size());
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double m = rng.uniform() >= rate ? keep_scale : 0.0;
        (*mask)[i] = m;
        out[i] = x.at(i) * m;
    }
    Tensor result = tracked(std::move(out), x.shape(), track);
    record_if(track, [x, result, mask]() mutable {
        if (!result.has_grad() || !x.requires_grad()) return;
        auto g = result.grad();
        std::vector<double> gx(g.size());
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = g[i] * (*mask)[i];
        x.accumulate_grad(gx);
    });
    return result;
}

Tensor embedding_lookup(const Tensor& table, std::span<const std::int64_t> indices) {
    check(table.rank() == 2, ErrorKind::Shape, "embedding_lookup expects a 2D table");
    const std::size_t s = table.shape()[0], d = table.shape()[1];
    for (std::int64_t idx : indices)
        check(idx >= 0 && static_cast<std::size_t>(idx) < s, ErrorKind::Contract,
              "embedding index " + std::to_string(idx) + " out of range [0, " + std::to_string(s) +
                  ")");
    const bool track = grad_enabled({&table});
    const std::size_t b = indices.size();
    std::vector<double> out(b * d);
    for (std::size_t i = 0; i < b; ++i) {
        const double* row = table.data().data() + static_cast<std::size_t>(indices[i]) * d;
        std::copy(row, row + d, out.data() + i * d);
    }
    auto idx_copy = std::make_shared<std::vector<std::int64_t>>(indices.begin(), indices.end());
    Tensor result = tracked(std::move(out), {b, d}, track);
    record_if(track, [table, result, idx_copy, d]() mutable {
        if (!result.has_grad() || !table.requires_grad()) return;
        auto g = result.grad();
        auto gt = table.grad_buffer();
        for (std::size_t i = 0; i < idx_copy->size(); ++i) {
            double* dst = gt.data() + static_cast<std::size_t>((*idx_copy)[i]) * d;
            const double* src = g.data() + i * d;
            for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
    return result;
}

// ---------------------------------------------------------------------------
// Losses and reductions
// ---------------------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> labels) {
    check(logits.rank() == 2, ErrorKind::Shape, "cross_entropy expects 2D logits");
    const std::size_t b = logits.shape()[0], c = logits.shape()[1];
    check(labels.size() == b, ErrorKind::Shape, "cross_entropy: label count mismatch");
    for (std::int64_t y : labels)
        check(y >= 0 && static_cast<std::size_t>(y) < c, ErrorKind::Contract,
              "label out of range: " + std::to_string(y));
    const bool track = grad_enabled({&logits});
    auto probs = std::make_shared<std::vector<double>>(logits.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        const double* zi = logits.data().data() + i * c;
        double mx = zi[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, zi[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < c; ++j) denom += std::exp(zi[j] - mx);
        const double lse = mx + std::log(denom);
        loss += lse - zi[static_cast<std::size_t>(labels[i])];
        double* pi = probs->data() + i * c;
        for (std::size_t j = 0; j < c; ++j) pi[j] = std::exp(zi[j] - lse);
    }
    loss /= static_cast<double>(b);
    auto labels_copy = std::make_shared<std::vector<std::int64_t>>(labels.begin(), labels.end());
    Tensor result = tracked({loss}, Shape{}, track);
    record_if(track, [logits, result, probs, labels_copy, b, c]() mutable {
        if (!result.has_grad() || !logits.requires_grad()) return;
        const double g = result.grad()[0] / static_cast<double>(b);
        std::vector<double> gz(logits.size());
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < c; ++j) {
                double v = (*probs)[i * c + j];
                if (static_cast<std::size_t>((*labels_copy)[i]) == j) v -= 1.0;
                gz[i * c + j] = v * g;
            }
        logits.accumulate_grad(gz);
    });
    return result;
}

Tensor binary_cross_entropy_with_logits(const Tensor& logits, std::span<const double> targets) {
    check(logits.size() == targets.size(), ErrorKind::Shape,
          "binary cross entropy: size mismatch");
    const std::size_t b = logits.size();
    check(b > 0, ErrorKind::Shape, "binary cross entropy on empty input");
    const bool track = grad_enabled({&logits});
    double loss = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        const double z = logits.at(i), y = targets[i];
        loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    loss /= static_cast<double>(b);
    auto targets_copy = std::make_shared<std::vector<double>>(targets.begin(), targets.end());
    Tensor result = tracked({loss}, Shape{}, track);
    record_if(track, [logits, result, targets_copy, b]() mutable {
        if (!result.has_grad() || !logits.requires_grad()) return;
        const double g = result.grad()[0] / static_cast<double>(b);
        std::vector<double> gz(b);
        for (std::size_t i = 0; i < b; ++i) {
            const double sig = 1.0 / (1.0 + std::exp(-logits.at(i)));
            gz[i] = (sig - (*targets_copy)[i]) * g;
        }
        logits.accumulate_grad(gz);
    });
    return result;
}

Tensor mse(const Tensor& pred, std::span<const double> target) {
    check(pred.size() == target.size(), ErrorKind::Shape, "mse: size mismatch");
    const std::size_t n = pred.size();
    check(n > 0, ErrorKind::Shape, "mse on empty input");
    const bool track = grad_enabled({&pred});
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = pred.at(i) - target[i];
        loss += d * d;
    }
    loss /= static_cast<double>(n);
    auto target_copy = std::make_shared<std::vector<double>>(target.begin(), target.end());
    Tensor result = tracked({loss}, Shape{}, track);
    record_if(track, [pred, result, target_copy, n]() mutable {
        if (!result.has_grad() || !pred.requires_grad()) return;
        const double g = result.grad()[0] * 2.0 / static_cast<double>(n);
        std::vector<double> gp(n);
        for (std::size_t i = 0; i < n; ++i) gp[i] = (pred.at(i) - (*target_copy)[i]) * g;
        pred.accumulate_grad(gp);
    });
    return result;
}

Tensor sum(const Tensor& x) {
    const bool track = grad_enabled({&x});
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x.at(i);
    Tensor result = tracked({s}, Shape{}, track);
    record_if(track, [x, result]() mutable {
        if (!result.has_grad() || !x.requires_grad()) return;
        const double g = result.grad()[0];
        std::vector<double> gx(x.size(), g);
        x.accumulate_grad(gx);
    });
    return result;
}

Tensor mean(const Tensor& x) {
    check(x.size() > 0, ErrorKind::Shape, "mean of empty tensor");
    const bool track = grad_enabled({&x});
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x.at(i);
    s /= static_cast<double>(x.size());
    Tensor result = tracked({s}, Shape{}, track);
    record_if(track, [x, result]() mutable {
        if (!result.has_grad() || !x.requires_grad()) return;
        const double g = result.grad()[0] / static_cast<double>(x.size());
        std::vector<double> gx(x.size(), g);
        x.accumulate_grad(gx);
    });
    return result;
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape new_shape) {
    check(shape_size(new_shape) == x.size(), ErrorKind::Shape,
          "reshape: element count mismatch for " + shape_to_string(new_shape));
    const bool track = grad_enabled({&x});
    std::vector<double> out(x.data().begin(), x.data().end());
    Tensor result = tracked(std::move(out), std::move(new_shape), track);
    record_if(track, [x, result]() mutable {
        if (!result.has_grad() || !x.requires_grad()) return;
        x.accumulate_grad(result.grad());  // same flat order
    });
    return result;
}

namespace {

std::vector<std::size_t> strides_for(const Shape& shape) {
    std::vector<std::size_t> st(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) st[i - 1] = st[i] * shape[i];
    return st;
}

void permute_copy(const double* src, double* dst, const Shape& src_shape,
                  const std::vector<std::size_t>& perm, bool accumulate) {
    const std::size_t r = src_shape.size();
    Shape dst_shape(r);
    for (std::size_t i = 0; i < r; ++i) dst_shape[i] = src_shape[perm[i]];
    const auto src_strides = strides_for(src_shape);
    const auto dst_strides = strides_for(dst_shape);
    const std::size_t total = shape_size(src_shape);
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t flat = 0; flat < total; ++flat) {
        std::size_t rem = flat;
        std::size_t src_off = 0;
        for (std::size_t i = 0; i < r; ++i) {
            idx[i] = rem / dst_strides[i];
            rem %= dst_strides[i];
            src_off += idx[i] * src_strides[perm[i]];
        }
        if (accumulate)
            dst[flat] += src[src_off];
        else
            dst[flat] = src[src_off];
    }
}

}  // namespace

Tensor transpose(const Tensor& x, const std::vector<std::size_t>& perm) {
    const std::size_t r = x.rank();
    check(perm.size() == r, ErrorKind::Shape, "transpose: permutation rank mismatch");
    std::vector<bool> seen(r, false);
    for (std::size_t p : perm) {
        check(p < r && !seen[p], ErrorKind::Shape, "transpose: invalid permutation");
        seen[p] = true;
    }
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.shape()[perm[i]];
    const bool track = grad_enabled({&x});
    std::vector<double> out(x.size());
    permute_copy(x.data().data(), out.data(), x.shape(), perm, false);
    Tensor result = tracked(std::move(out), std::move(out_shape), track);
    record_if(track, [x, result, perm]() mutable {
        if (!result.has_grad() || !x.requires_grad()) return;
        // Scatter back: walking the output in order with the same perm mapping
        // hits each source slot exactly once.
        auto gx = x.grad_buffer();
        const auto src_strides = strides_for(x.shape());
        const auto dst_strides = strides_for(result.shape());
        auto g = result.grad();
        const std::size_t r = x.rank();
        for (std::size_t flat = 0; flat < g.size(); ++flat) {
            std::size_t rem = flat;
            std::size_t src_off = 0;
            for (std::size_t i = 0; i < r; ++i) {
                const std::size_t ii = rem / dst_strides[i];
                rem %= dst_strides[i];
                src_off += ii * src_strides[perm[i]];
            }
            gx[src_off] += g[flat];
        }
    });
    return result;
}

Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
    check(axis < x.rank(), ErrorKind::Shape, "narrow: axis out of range");
    check(start + length <= x.shape()[axis] && length > 0, ErrorKind::Shape,
          "narrow: slice out of range");
    Shape out_shape = x.shape();
    out_shape[axis] = length;
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
    const std::size_t src_axis = x.shape()[axis];
    const bool track = grad_enabled({&x});
    std::vector<double> out(outer * length * inner);
    for (std::size_t o = 0; o < outer; ++o)
        std::copy(x.data().data() + (o * src_axis + start) * inner,
                  x.data().data() + (o * src_axis + start + length) * inner,
                  out.data() + o * length * inner);
    Tensor result = tracked(std::move(out), std::move(out_shape), track);
    record_if(track, [x, result, outer, inner, src_axis, start, length]() mutable {
        if (!result.has_grad() || !x.requires_grad()) return;
        auto gx = x.grad_buffer();
        auto g = result.grad();
        for (std::size_t o = 0; o < outer; ++o) {
            const double* src = g.data() + o * length * inner;
            double* dst = gx.data() + (o * src_axis + start) * inner;
            for (std::size_t i = 0; i < length * inner; ++i) dst[i] += src[i];
        }
    });
    return result;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    check(!parts.empty(), ErrorKind::Shape, "concat_cols on empty list");
    const std::size_t rows = parts[0].shape()[0];
    std::size_t cols = 0;
    for (const Tensor& p : parts) {
        check(p.rank() == 2 && p.shape()[0] == rows, ErrorKind::Shape,
              "concat_cols: all parts must be 2D with equal row counts");
        cols += p.shape()[1];
    }
    bool track = Tape::active() != nullptr &&
                 std::any_of(parts.begin(), parts.end(),
                             [](const Tensor& t) { return t.requires_grad(); });
    std::vector<double> out(rows * cols);
    std::size_t col_off = 0;
    for (const Tensor& p : parts) {
        const std::size_t pc = p.shape()[1];
        for (std::size_t r = 0; r < rows; ++r)
            std::copy(p.data().data() + r * pc, p.data().data() + (r + 1) * pc,
                      out.data() + r * cols + col_off);
        col_off += pc;
    }
    Tensor result = tracked(std::move(out), {rows, cols}, track);
    record_if(track, [parts, result, rows, cols]() mutable {
        if (!result.has_grad()) return;
        auto g = result.grad();
        std::size_t col_off = 0;
        for (Tensor& p : parts) {
            const std::size_t pc = p.shape()[1];
            if (p.requires_grad()) {
                std::vector<double> gp(rows * pc);
                for (std::size_t r = 0; r < rows; ++r)
                    std::copy(g.data() + r * cols + col_off, g.data() + r * cols + col_off + pc,
                              gp.data() + r * pc);
                p.accumulate_grad(gp);
            }
            col_off += pc;
        }
    });
    return result;
}

}  // namespace tabdl
