#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "cal/errors.hpp"

namespace cal {

// ---------------------------------------------------------------------------
// Tensor: dense row-major f64 storage with an optional gradient buffer.
// Tensors are cheap handles; copying shares the underlying storage.
// ---------------------------------------------------------------------------

struct TensorData {
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;  // sized lazily on first accumulation
    bool requires_grad = false;
    bool traced = false;  // set when an op produced this tensor on a tape
};

class Tensor {
public:
    Tensor() : d_(std::make_shared<TensorData>()) {}

    explicit Tensor(std::vector<std::size_t> shape, bool requires_grad = false)
        : d_(std::make_shared<TensorData>()) {
        d_->shape = std::move(shape);
        d_->value.assign(count(d_->shape), 0.0);
        d_->requires_grad = requires_grad;
    }

    static Tensor from(std::vector<std::size_t> shape, std::vector<double> value,
                       bool requires_grad = false) {
        if (count(shape) != value.size())
            throw ValidationError("tensor value size does not match shape");
        Tensor t;
        t.d_->shape = std::move(shape);
        t.d_->value = std::move(value);
        t.d_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    const std::vector<std::size_t>& shape() const { return d_->shape; }
    std::size_t numel() const { return d_->value.size(); }
    std::size_t ndim() const { return d_->shape.size(); }

    // Row/column view of 1-D and 2-D tensors. A 1-D tensor acts as one row.
    std::size_t rows() const { return d_->shape.size() == 2 ? d_->shape[0] : 1; }
    std::size_t cols() const {
        return d_->shape.size() == 2 ? d_->shape[1] : (d_->shape.empty() ? 1 : d_->shape[0]);
    }

    // The handle is shared; mutation goes through const handles too, the way
    // copies captured inside backward closures use them.
    std::vector<double>& value() const { return d_->value; }
    double* data() const { return d_->value.data(); }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool rg) const { d_->requires_grad = rg; }
    bool traced() const { return d_->traced; }
    void set_traced(bool t) const { d_->traced = t; }

    // True when backward must deliver a gradient here: trainable leaves and
    // tape-produced intermediates. Plain constants are skipped.
    bool wants_grad() const { return d_->requires_grad || d_->traced; }

    bool has_grad() const { return !d_->grad.empty(); }
    const std::vector<double>& grad_view() const { return d_->grad; }
    void clear_grad() const { d_->grad.clear(); }

    std::vector<double>& ensure_grad() const {
        if (d_->grad.size() != d_->value.size()) d_->grad.assign(d_->value.size(), 0.0);
        return d_->grad;
    }

    double item() const {
        if (numel() != 1) throw ValidationError("item() on non-scalar tensor");
        return d_->value[0];
    }

    bool same_storage(const Tensor& other) const { return d_ == other.d_; }

    static std::size_t count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t s : shape) n *= s;
        return n;
    }

private:
    std::shared_ptr<TensorData> d_;
};

// ---------------------------------------------------------------------------
// Tape: define-by-run record of backward rules. A fresh tape is built for
// every forward pass; backward() replays the rules in reverse and accumulates
// into each participating tensor's grad buffer exactly once per call.
// ---------------------------------------------------------------------------

class Tape {
public:
    void record(std::function<void()> back) { back_.push_back(std::move(back)); }

    // Ops register their outputs here. Marking them traced makes upstream
    // rules deliver gradients; remembering them lets backward() start every
    // call from clean intermediate grads, which keeps repeated backward calls
    // over one tape accumulating exactly once per parameter per call.
    void trace(const Tensor& out) {
        out.set_traced(true);
        produced_.push_back(out);
    }

    std::size_t size() const { return back_.size(); }

    void backward(Tensor loss) {
        if (loss.numel() != 1) throw ValidationError("backward() expects a scalar loss");
        for (const Tensor& t : produced_) t.clear_grad();
        loss.ensure_grad()[0] += 1.0;
        for (auto it = back_.rbegin(); it != back_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> back_;
    std::vector<Tensor> produced_;
};

// ---------------------------------------------------------------------------
// Raw matmul kernels. The ikj loop order keeps the inner loop contiguous in
// both operands so it vectorizes; shapes here are small (n <= 64) and batch
// dimensions large, which this order favors.
// ---------------------------------------------------------------------------

namespace detail {

// c[m x n] = a[m x k] * b[k x n]
inline void matmul_nn(const double* a, const double* b, double* c, std::size_t m,
                      std::size_t k, std::size_t n, bool accumulate = false) {
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
}

// c[m x n] = a[m x k] * b[n x k]^T
inline void matmul_nt(const double* a, const double* b, double* c, std::size_t m,
                      std::size_t k, std::size_t n, bool accumulate = false) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] = accumulate ? crow[j] + acc : acc;
        }
    }
}

// c[k x n] = a[m x k]^T * b[m x n]
inline void matmul_tn(const double* a, const double* b, double* c, std::size_t m,
                      std::size_t k, std::size_t n, bool accumulate = false) {
    if (!accumulate) std::fill(c, c + k * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = arow[p];
            double* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
}

inline void require_2d(const Tensor& t, const char* what) {
    if (t.ndim() > 2) throw ValidationError(std::string(what) + ": expected 1-D or 2-D tensor");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Differentiable operations. Every op takes a Tape pointer; passing nullptr
// computes the forward value only, which is the inference fast path.
// ---------------------------------------------------------------------------

// [m x k] * [k x n] -> [m x n]. dA = G * B^T, dB = A^T * G.
inline Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
    detail::require_2d(a, "matmul lhs");
    detail::require_2d(b, "matmul rhs");
    const std::size_t m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
    if (k != k2) throw ValidationError("matmul: inner dimensions differ");
    Tensor out({m, n});
    detail::matmul_nn(a.data(), b.data(), out.data(), m, k, n);
    if (tape) {
        tape->trace(out);
        tape->record([a, b, out, m, k, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_view().data();
            if (a.wants_grad())
                detail::matmul_nt(g, b.data(), a.ensure_grad().data(), m, n, k, true);
            if (b.wants_grad())
                detail::matmul_tn(a.data(), g, b.ensure_grad().data(), m, k, n, true);
        });
    }
    return out;
}

// Elementwise sum of same-shape tensors.
inline Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ValidationError("add: shape mismatch");
    Tensor out(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (tape) {
        tape->trace(out);
        tape->record([a, b, out]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_view();
            if (a.wants_grad()) {
                auto& ga = a.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.wants_grad()) {
                auto& gb = b.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

inline Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ValidationError("sub: shape mismatch");
    Tensor out(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    if (tape) {
        tape->trace(out);
        tape->record([a, b, out]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad_view();
            if (a.wants_grad()) {
                auto& ga = a.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.wants_grad()) {
                auto& gb = b.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return out;
}

inline Tensor scale(Tape* tape, const Tensor& a, double c) {
    Tensor out(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
    if (tape) {
        tape->trace(out);
        tape->record([a, out, c]() mutable {
            if (!out.has_grad() || !a.wants_grad()) return;
            const auto& g = out.grad_view();
            auto& ga = a.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
        });
    }
    return out;
}

// Broadcast a length-n bias row over an [m x n] matrix. The only broadcast
// the engine supports.
inline Tensor add_rowvec(Tape* tape, const Tensor& x, const Tensor& bias) {
    const std::size_t m = x.rows(), n = x.cols();
    if (bias.numel() != n) throw ValidationError("add_rowvec: bias length mismatch");
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            out.data()[i * n + j] = x.data()[i * n + j] + bias.data()[j];
    if (tape) {
        tape->trace(out);
        tape->record([x, bias, out, m, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_view().data();
            if (x.wants_grad()) {
                auto& gx = x.ensure_grad();
                for (std::size_t i = 0; i < m * n; ++i) gx[i] += g[i];
            }
            if (bias.wants_grad()) {
                auto& gb = bias.ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
            }
        });
    }
    return out;
}

// ReLU with subgradient 0 at exactly 0 (mask is value > 0).
inline Tensor relu(Tape* tape, const Tensor& x) {
    Tensor out(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
    if (tape) {
        tape->trace(out);
        tape->record([x, out]() mutable {
            if (!out.has_grad() || !x.wants_grad()) return;
            const auto& g = out.grad_view();
            auto& gx = x.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (x.data()[i] > 0.0) gx[i] += g[i];
        });
    }
    return out;
}

inline Tensor transpose(Tape* tape, const Tensor& a) {
    detail::require_2d(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data()[j * m + i] = a.data()[i * n + j];
    if (tape) {
        tape->trace(out);
        tape->record([a, out, m, n]() mutable {
            if (!out.has_grad() || !a.wants_grad()) return;
            const double* g = out.grad_view().data();
            auto& ga = a.ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
        });
    }
    return out;
}

// Columns [c0, c1) of a matrix as a new [m x (c1-c0)] tensor.
inline Tensor slice_cols(Tape* tape, const Tensor& x, std::size_t c0, std::size_t c1) {
    const std::size_t m = x.rows(), n = x.cols();
    if (c0 >= c1 || c1 > n) throw ValidationError("slice_cols: bad column range");
    const std::size_t w = c1 - c0;
    Tensor out({m, w});
    for (std::size_t i = 0; i < m; ++i)
        std::copy(x.data() + i * n + c0, x.data() + i * n + c1, out.data() + i * w);
    if (tape) {
        tape->trace(out);
        tape->record([x, out, m, n, c0, w]() mutable {
            if (!out.has_grad() || !x.wants_grad()) return;
            const double* g = out.grad_view().data();
            auto& gx = x.ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < w; ++j) gx[i * n + c0 + j] += g[i * w + j];
        });
    }
    return out;
}

inline Tensor concat_cols(Tape* tape, const Tensor& a, const Tensor& b) {
    const std::size_t m = a.rows();
    if (b.rows() != m) throw ValidationError("concat_cols: row count mismatch");
    const std::size_t na = a.cols(), nb = b.cols(), n = na + nb;
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        std::copy(a.data() + i * na, a.data() + (i + 1) * na, out.data() + i * n);
        std::copy(b.data() + i * nb, b.data() + (i + 1) * nb, out.data() + i * n + na);
    }
    if (tape) {
        tape->trace(out);
        tape->record([a, b, out, m, na, nb, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_view().data();
            if (a.wants_grad()) {
                auto& ga = a.ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < na; ++j) ga[i * na + j] += g[i * n + j];
            }
            if (b.wants_grad()) {
                auto& gb = b.ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < nb; ++j) gb[i * nb + j] += g[i * n + na + j];
            }
        });
    }
    return out;
}

// base with the listed columns replaced by src's values at those columns.
// Gradient routes to src on the listed columns and to base elsewhere.
inline Tensor overwrite_cols(Tape* tape, const Tensor& base, const Tensor& src,
                             const std::vector<std::size_t>& cols) {
    if (base.shape() != src.shape()) throw ValidationError("overwrite_cols: shape mismatch");
    const std::size_t m = base.rows(), n = base.cols();
    for (std::size_t c : cols)
        if (c >= n) throw ValidationError("overwrite_cols: column out of range");
    Tensor out(base.shape());
    out.value() = base.value();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t c : cols) out.data()[i * n + c] = src.data()[i * n + c];
    if (tape) {
        tape->trace(out);
        tape->record([base, src, out, cols, m, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_view().data();
            std::vector<bool> taken(n, false);
            for (std::size_t c : cols) taken[c] = true;
            if (base.wants_grad()) {
                auto& gb = base.ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        if (!taken[j]) gb[i * n + j] += g[i * n + j];
            }
            if (src.wants_grad()) {
                auto& gs = src.ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t c : cols) gs[i * n + c] += g[i * n + c];
            }
        });
    }
    return out;
}

// Mean cross-entropy of softmax(logits) against integer labels, numerically
// stabilized by the row max. Returns a scalar tensor.
inline Tensor softmax_cross_entropy(Tape* tape, const Tensor& logits,
                                    const std::vector<int>& labels) {
    const std::size_t m = logits.rows(), n = logits.cols();
    if (labels.size() != m) throw ValidationError("softmax_cross_entropy: label count mismatch");
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= n)
            throw ValidationError("softmax_cross_entropy: label out of range");
    Tensor probs({m, n});
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = logits.data() + i * n;
        double mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
        const double lse = mx + std::log(sum);
        for (std::size_t j = 0; j < n; ++j) probs.data()[i * n + j] = std::exp(row[j] - lse);
        total += lse - row[labels[i]];
    }
    const double loss = total / static_cast<double>(m);
    if (!std::isfinite(loss)) throw NumericError("softmax_cross_entropy: non-finite loss");
    Tensor out = Tensor::scalar(loss);
    if (tape) {
        tape->trace(out);
        tape->record([logits, probs, labels, out, m, n]() mutable {
            if (!out.has_grad() || !logits.wants_grad()) return;
            const double up = out.grad_view()[0] / static_cast<double>(m);
            auto& gl = logits.ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) gl[i * n + j] += up * probs.data()[i * n + j];
                gl[i * n + static_cast<std::size_t>(labels[i])] -= up;
            }
        });
    }
    return out;
}

// Solve a X = b by Gaussian elimination with partial pivoting.
// a is [n x n], b is [n x m]. Backward: dB = A^-T G, dA = -dB X^T.
inline Tensor gauss_solve(Tape* tape, const Tensor& a, const Tensor& b) {
    const std::size_t n = a.rows();
    if (a.ndim() != 2 || a.cols() != n) throw ValidationError("gauss_solve: matrix not square");
    if (b.rows() != n) throw ValidationError("gauss_solve: rhs row count mismatch");
    const std::size_t m = b.cols();

    // LU with partial pivoting on a copy.
    std::vector<double> lu = a.value();
    std::vector<std::size_t> piv(n);
    for (std::size_t k = 0; k < n; ++k) {
        std::size_t p = k;
        for (std::size_t i = k + 1; i < n; ++i)
            if (std::fabs(lu[i * n + k]) > std::fabs(lu[p * n + k])) p = i;
        if (std::fabs(lu[p * n + k]) < 1e-12)
            throw SingularMatrixError("gauss_solve: pivot below 1e-12");
        piv[k] = p;
        if (p != k)
            for (std::size_t j = 0; j < n; ++j) std::swap(lu[k * n + j], lu[p * n + j]);
        for (std::size_t i = k + 1; i < n; ++i) {
            const double f = lu[i * n + k] / lu[k * n + k];
            lu[i * n + k] = f;
            for (std::size_t j = k + 1; j < n; ++j) lu[i * n + j] -= f * lu[k * n + j];
        }
    }

    auto lu_solve = [n](const std::vector<double>& LU, const std::vector<std::size_t>& P,
                        std::vector<double> rhs, std::size_t w) {
        for (std::size_t k = 0; k < n; ++k)
            if (P[k] != k)
                for (std::size_t j = 0; j < w; ++j) std::swap(rhs[k * w + j], rhs[P[k] * w + j]);
        for (std::size_t i = 1; i < n; ++i)
            for (std::size_t k = 0; k < i; ++k) {
                const double f = LU[i * n + k];
                for (std::size_t j = 0; j < w; ++j) rhs[i * w + j] -= f * rhs[k * w + j];
            }
        for (std::size_t i = n; i-- > 0;) {
            for (std::size_t k = i + 1; k < n; ++k) {
                const double f = LU[i * n + k];
                for (std::size_t j = 0; j < w; ++j) rhs[i * w + j] -= f * rhs[k * w + j];
            }
            const double d = LU[i * n + i];
            for (std::size_t j = 0; j < w; ++j) rhs[i * w + j] /= d;
        }
        return rhs;
    };

    Tensor x = Tensor::from({n, m}, lu_solve(lu, piv, b.value(), m));

    if (tape) {
        tape->trace(x);
        // The backward pass solves with A^T, so LU-factor the transpose once.
        Tensor at = transpose(nullptr, a);
        tape->record([a, b, x, at, n, m]() mutable {
            if (!x.has_grad()) return;
            Tensor g = Tensor::from({n, m}, x.grad_view());
            Tensor db = gauss_solve(nullptr, at, g);
            if (b.wants_grad()) {
                auto& gb = b.ensure_grad();
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += db.data()[i];
            }
            if (a.wants_grad()) {
                Tensor da({n, n});
                detail::matmul_nt(db.data(), x.data(), da.data(), n, m, n);
                auto& ga = a.ensure_grad();
                for (std::size_t i = 0; i < n * n; ++i) ga[i] -= da.data()[i];
            }
        });
    }
    return x;
}

// ---------------------------------------------------------------------------
// Non-tape helpers used by evaluation paths.
// ---------------------------------------------------------------------------

inline void softmax_rows_inplace(Tensor& t) {
    const std::size_t m = t.rows(), n = t.cols();
    for (std::size_t i = 0; i < m; ++i) {
        double* row = t.data() + i * n;
        double mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (std::size_t j = 0; j < n; ++j) row[j] /= sum;
    }
}

// Strict argmax per row: returns -1 when the max is tied, so a tie never
// counts as a correct prediction.
inline std::vector<int> strict_argmax_rows(const Tensor& t) {
    const std::size_t m = t.rows(), n = t.cols();
    std::vector<int> out(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = t.data() + i * n;
        std::size_t best = 0;
        bool tied = false;
        for (std::size_t j = 1; j < n; ++j) {
            if (row[j] > row[best]) {
                best = j;
                tied = false;
            } else if (row[j] == row[best]) {
                tied = true;
            }
        }
        out[i] = tied ? -1 : static_cast<int>(best);
    }
    return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ValidationError("max_abs_diff: shape mismatch");
    double mx = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i)
        mx = std::max(mx, std::fabs(a.data()[i] - b.data()[i]));
    return mx;
}

}  // namespace cal
