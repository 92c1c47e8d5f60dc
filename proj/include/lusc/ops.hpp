#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "lusc/rng.hpp"
#include "lusc/tensor.hpp"

namespace lusc {

namespace detail {

// C[m x n] (+)= A[m x k] * B[k x n]. i-p-j order keeps the inner loop over
// contiguous rows of B and C.
template <class S>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n,
             const S* a, const S* b, S* c, bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, S(0));
    for (std::size_t i = 0; i < m; ++i) {
        const S* arow = a + i * k;
        S* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            S av = arow[p];
            if (av == S(0)) continue;
            const S* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x n] (+)= A[m x k] * Bt^T where Bt is stored [n x k]. Row-row dot
// products; eight fixed accumulators so the reduction order is deterministic.
template <class S>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n,
             const S* a, const S* bt, S* c, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        const S* arow = a + i * k;
        S* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const S* brow = bt + j * k;
            S acc[8] = {S(0), S(0), S(0), S(0), S(0), S(0), S(0), S(0)};
            std::size_t p = 0;
            for (; p + 8 <= k; p += 8) {
                for (int l = 0; l < 8; ++l) acc[l] += arow[p + l] * brow[p + l];
            }
            S dot = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
            for (; p < k; ++p) dot += arow[p] * brow[p];
            if (accumulate) crow[j] += dot; else crow[j] = dot;
        }
    }
}

// C[m x n] (+)= At^T * B where At is stored [k x m]. Rank-one updates per p.
template <class S>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n,
             const S* at, const S* b, S* c, bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, S(0));
    for (std::size_t p = 0; p < k; ++p) {
        const S* atrow = at + p * m;
        const S* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            S av = atrow[i];
            if (av == S(0)) continue;
            S* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <class S>
bool can_accumulate(const std::shared_ptr<Node<S>>& n) {
    return !n->grad.empty();
}

template <class S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (strict shapes; the only broadcasts in the library
// are add_rowvec for biases and the affine pair inside layernorm).
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<S> out(a.size());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return detail::make_op<S>(a.shape(), std::move(out), {a, b}, [](Node<S>& n) {
        auto& pa = n.parents[0];
        auto& pb = n.parents[1];
        if (detail::can_accumulate(pa))
            for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
        if (detail::can_accumulate(pb))
            for (std::size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += n.grad[i];
    });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<S> out(a.size());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return detail::make_op<S>(a.shape(), std::move(out), {a, b}, [](Node<S>& n) {
        auto& pa = n.parents[0];
        auto& pb = n.parents[1];
        if (detail::can_accumulate(pa))
            for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
        if (detail::can_accumulate(pb))
            for (std::size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] -= n.grad[i];
    });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<S> out(a.size());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return detail::make_op<S>(a.shape(), std::move(out), {a, b}, [](Node<S>& n) {
        auto& pa = n.parents[0];
        auto& pb = n.parents[1];
        if (detail::can_accumulate(pa))
            for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * pb->value[i];
        if (detail::can_accumulate(pb))
            for (std::size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += n.grad[i] * pa->value[i];
    });
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
    std::vector<S> out(a.size());
    const auto& av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    return detail::make_op<S>(a.shape(), std::move(out), {a}, [c](Node<S>& n) {
        auto& pa = n.parents[0];
        if (detail::can_accumulate(pa))
            for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * c;
    });
}

// out[r, c] = m[r, c] + v[c]; the bias broadcast.
template <class S>
Tensor<S> add_rowvec(const Tensor<S>& m, const Tensor<S>& v) {
    if (m.rank() != 2 || v.rank() != 1 || m.dim(1) != v.dim(0)) {
        throw ShapeError("add_rowvec: shape mismatch " + shape_str(m.shape()) + " vs " +
                         shape_str(v.shape()));
    }
    std::size_t rows = m.dim(0), cols = m.dim(1);
    std::vector<S> out(m.size());
    const auto& mv = m.data();
    const auto& vv = v.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = mv[r * cols + c] + vv[c];
    return detail::make_op<S>(m.shape(), std::move(out), {m, v}, [rows, cols](Node<S>& n) {
        auto& pm = n.parents[0];
        auto& pv = n.parents[1];
        if (detail::can_accumulate(pm))
            for (std::size_t i = 0; i < n.grad.size(); ++i) pm->grad[i] += n.grad[i];
        if (detail::can_accumulate(pv))
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) pv->grad[c] += n.grad[r * cols + c];
    });
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<S> out(m * n);
    detail::gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data(), false);
    return detail::make_op<S>({m, n}, std::move(out), {a, b}, [m, k, n](Node<S>& node) {
        auto& pa = node.parents[0];
        auto& pb = node.parents[1];
        if (detail::can_accumulate(pa))
            detail::gemm_nt(m, n, k, node.grad.data(), pb->value.data(), pa->grad.data(), true);
        if (detail::can_accumulate(pb))
            detail::gemm_tn(k, m, n, pa->value.data(), node.grad.data(), pb->grad.data(), true);
    });
}

template <class S>
Tensor<S> transpose(const Tensor<S>& a) {
    if (a.rank() != 2) throw ShapeError("transpose: expected 2-d tensor, got " + shape_str(a.shape()));
    std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<S> out(a.size());
    const auto& av = a.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
    return detail::make_op<S>({c, r}, std::move(out), {a}, [r, c](Node<S>& n) {
        auto& pa = n.parents[0];
        if (!detail::can_accumulate(pa)) return;
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) pa->grad[i * c + j] += n.grad[j * r + i];
    });
}

template <class S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
    if (shape_numel(shape) != a.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    return detail::make_op<S>(std::move(shape), std::vector<S>(a.data()), {a}, [](Node<S>& n) {
        auto& pa = n.parents[0];
        if (!detail::can_accumulate(pa)) return;
        for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
    });
}

template <class S>
Tensor<S> slice_rows(const Tensor<S>& a, std::size_t r0, std::size_t r1) {
    if (a.rank() != 2 || r1 > a.dim(0) || r0 >= r1) {
        throw ShapeError("slice_rows: invalid range [" + std::to_string(r0) + "," +
                         std::to_string(r1) + ") for " + shape_str(a.shape()));
    }
    std::size_t cols = a.dim(1);
    std::vector<S> out(a.data().begin() + r0 * cols, a.data().begin() + r1 * cols);
    return detail::make_op<S>({r1 - r0, cols}, std::move(out), {a}, [r0, cols](Node<S>& n) {
        auto& pa = n.parents[0];
        if (!detail::can_accumulate(pa)) return;
        for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[r0 * cols + i] += n.grad[i];
    });
}

template <class S>
Tensor<S> slice_cols(const Tensor<S>& a, std::size_t c0, std::size_t c1) {
    if (a.rank() != 2 || c1 > a.dim(1) || c0 >= c1) {
        throw ShapeError("slice_cols: invalid range [" + std::to_string(c0) + "," +
                         std::to_string(c1) + ") for " + shape_str(a.shape()));
    }
    std::size_t rows = a.dim(0), cols = a.dim(1), w = c1 - c0;
    std::vector<S> out(rows * w);
    const auto& av = a.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < w; ++j) out[r * w + j] = av[r * cols + c0 + j];
    return detail::make_op<S>({rows, w}, std::move(out), {a}, [rows, cols, c0, w](Node<S>& n) {
        auto& pa = n.parents[0];
        if (!detail::can_accumulate(pa)) return;
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < w; ++j) pa->grad[r * cols + c0 + j] += n.grad[r * w + j];
    });
}

template <class S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty input");
    std::size_t cols = parts[0].dim(1), rows = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(1) != cols) {
            throw ShapeError("concat_rows: column mismatch " + shape_str(parts[0].shape()) +
                             " vs " + shape_str(p.shape()));
        }
        rows += p.dim(0);
    }
    std::vector<S> out;
    out.reserve(rows * cols);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    return detail::make_op<S>({rows, cols}, std::move(out), parts, [](Node<S>& n) {
        std::size_t off = 0;
        for (auto& p : n.parents) {
            std::size_t len = p->value.size();
            if (detail::can_accumulate(p))
                for (std::size_t i = 0; i < len; ++i) p->grad[i] += n.grad[off + i];
            off += len;
        }
    });
}

template <class S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty input");
    std::size_t rows = parts[0].dim(0), cols = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != rows) {
            throw ShapeError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        }
        cols += p.dim(1);
    }
    std::vector<S> out(rows * cols);
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::size_t w = p.dim(1);
        const auto& pv = p.data();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < w; ++j) out[r * cols + off + j] = pv[r * w + j];
        off += w;
    }
    return detail::make_op<S>({rows, cols}, std::move(out), parts, [rows, cols](Node<S>& n) {
        std::size_t off = 0;
        for (auto& p : n.parents) {
            std::size_t w = p->shape[1];
            if (detail::can_accumulate(p))
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < w; ++j)
                        p->grad[r * w + j] += n.grad[r * cols + off + j];
            off += w;
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> sum(const Tensor<S>& a) {
    S total = S(0);
    for (S v : a.data()) total += v;
    return detail::make_op<S>({1}, {total}, {a}, [](Node<S>& n) {
        auto& pa = n.parents[0];
        if (!detail::can_accumulate(pa)) return;
        for (std::size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += n.grad[0];
    });
}

template <class S>
Tensor<S> mean(const Tensor<S>& a) {
    S total = S(0);
    for (S v : a.data()) total += v;
    S inv = S(1) / static_cast<S>(a.size());
    return detail::make_op<S>({1}, {total * inv}, {a}, [inv](Node<S>& n) {
        auto& pa = n.parents[0];
        if (!detail::can_accumulate(pa)) return;
        for (std::size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += n.grad[0] * inv;
    });
}

// ---------------------------------------------------------------------------
// Normalizations
// ---------------------------------------------------------------------------

// Softmax over the last axis, stabilized by max subtraction.
template <class S>
Tensor<S> softmax(const Tensor<S>& a) {
    if (a.rank() < 1 || a.shape().back() < 1) {
        throw ShapeError("softmax: need a non-empty last axis, got " + shape_str(a.shape()));
    }
    std::size_t k = a.shape().back();
    std::size_t rows = a.size() / k;
    std::vector<S> out(a.size());
    const auto& av = a.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const S* x = av.data() + r * k;
        S* y = out.data() + r * k;
        S mx = x[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, x[j]);
        S denom = S(0);
        for (std::size_t j = 0; j < k; ++j) {
            y[j] = std::exp(x[j] - mx);
            denom += y[j];
        }
        S inv = S(1) / denom;
        for (std::size_t j = 0; j < k; ++j) y[j] *= inv;
    }
    auto y_keep = std::make_shared<std::vector<S>>(out);
    return detail::make_op<S>(a.shape(), std::move(out), {a}, [rows, k, y_keep](Node<S>& n) {
        auto& pa = n.parents[0];
        if (!detail::can_accumulate(pa)) return;
        const auto& y = *y_keep;
        for (std::size_t r = 0; r < rows; ++r) {
            const S* g = n.grad.data() + r * k;
            const S* yr = y.data() + r * k;
            S dot = S(0);
            for (std::size_t j = 0; j < k; ++j) dot += g[j] * yr[j];
            S* dx = pa->grad.data() + r * k;
            for (std::size_t j = 0; j < k; ++j) dx[j] += yr[j] * (g[j] - dot);
        }
    });
}

// Per-token normalization over the last axis, then affine gain/shift.
template <class S>
Tensor<S> layernorm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& shift, S eps) {
    if (x.rank() < 1) throw ShapeError("layernorm: scalar input");
    std::size_t d = x.shape().back();
    if (gain.shape() != Shape{d} || shift.shape() != Shape{d}) {
        throw ShapeError("layernorm: gain/shift must be [" + std::to_string(d) + "], got " +
                         shape_str(gain.shape()) + " and " + shape_str(shift.shape()));
    }
    if (!(eps > S(0))) throw ValueError("layernorm: eps must be positive");
    std::size_t rows = x.size() / d;
    std::vector<S> out(x.size());
    auto xhat = std::make_shared<std::vector<S>>(x.size());
    auto inv_sigma = std::make_shared<std::vector<S>>(rows);
    const auto& xv = x.data();
    const auto& gv = gain.data();
    const auto& bv = shift.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const S* xr = xv.data() + r * d;
        S mu = S(0);
        for (std::size_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<S>(d);
        S var = S(0);
        for (std::size_t j = 0; j < d; ++j) {
            S c = xr[j] - mu;
            var += c * c;
        }
        var /= static_cast<S>(d);
        S inv = S(1) / std::sqrt(var + eps);
        (*inv_sigma)[r] = inv;
        for (std::size_t j = 0; j < d; ++j) {
            S h = (xr[j] - mu) * inv;
            (*xhat)[r * d + j] = h;
            out[r * d + j] = gv[j] * h + bv[j];
        }
    }
    return detail::make_op<S>(x.shape(), std::move(out), {x, gain, shift},
                              [rows, d, xhat, inv_sigma](Node<S>& n) {
        auto& px = n.parents[0];
        auto& pg = n.parents[1];
        auto& pb = n.parents[2];
        const auto& h = *xhat;
        for (std::size_t r = 0; r < rows; ++r) {
            const S* g = n.grad.data() + r * d;
            const S* hr = h.data() + r * d;
            if (detail::can_accumulate(pg))
                for (std::size_t j = 0; j < d; ++j) pg->grad[j] += g[j] * hr[j];
            if (detail::can_accumulate(pb))
                for (std::size_t j = 0; j < d; ++j) pb->grad[j] += g[j];
            if (detail::can_accumulate(px)) {
                S m1 = S(0), m2 = S(0);
                std::vector<S> dh(d);
                for (std::size_t j = 0; j < d; ++j) {
                    dh[j] = g[j] * pg->value[j];
                    m1 += dh[j];
                    m2 += dh[j] * hr[j];
                }
                m1 /= static_cast<S>(d);
                m2 /= static_cast<S>(d);
                S inv = (*inv_sigma)[r];
                S* dx = px->grad.data() + r * d;
                for (std::size_t j = 0; j < d; ++j) dx[j] += inv * (dh[j] - m1 - hr[j] * m2);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities
// ---------------------------------------------------------------------------

enum class PointwiseFn { kRelu, kGelu };

namespace detail {
// tanh form of gelu.
template <class S>
S gelu_value(S x) {
    const S c = S(0.7978845608028653558798921198687637);  // sqrt(2/pi)
    const S a = S(0.044715);
    return S(0.5) * x * (S(1) + std::tanh(c * (x + a * x * x * x)));
}

template <class S>
S gelu_derivative(S x) {
    const S c = S(0.7978845608028653558798921198687637);
    const S a = S(0.044715);
    S u = c * (x + a * x * x * x);
    S t = std::tanh(u);
    S du = c * (S(1) + S(3) * a * x * x);
    return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * du;
}
}  // namespace detail

template <class S>
Tensor<S> pointwise(const Tensor<S>& x, PointwiseFn fn) {
    std::vector<S> out(x.size());
    const auto& xv = x.data();
    if (fn == PointwiseFn::kRelu) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > S(0) ? xv[i] : S(0);
    } else {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::gelu_value(xv[i]);
    }
    return detail::make_op<S>(x.shape(), std::move(out), {x}, [fn](Node<S>& n) {
        auto& px = n.parents[0];
        if (!detail::can_accumulate(px)) return;
        if (fn == PointwiseFn::kRelu) {
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                if (px->value[i] > S(0)) px->grad[i] += n.grad[i];
        } else {
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                px->grad[i] += n.grad[i] * detail::gelu_derivative(px->value[i]);
        }
    });
}

template <class S>
Tensor<S> relu(const Tensor<S>& x) { return pointwise(x, PointwiseFn::kRelu); }

template <class S>
Tensor<S> gelu(const Tensor<S>& x) { return pointwise(x, PointwiseFn::kGelu); }

// Inverted dropout: train mode zeroes with probability `rate` and rescales
// survivors by 1/(1-rate); eval mode is the identity.
template <class S>
Tensor<S> dropout(const Tensor<S>& x, double rate, RunMode mode, Rng& rng) {
    if (rate >= 1.0 || rate < 0.0) throw ValueError("dropout: rate must be in [0, 1)");
    if (mode == RunMode::kEval || rate == 0.0) return x;
    auto mult = std::make_shared<std::vector<S>>(x.size());
    S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
    std::vector<S> out(x.size());
    const auto& xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        S m = rng.uniform() < rate ? S(0) : keep_scale;
        (*mult)[i] = m;
        out[i] = xv[i] * m;
    }
    return detail::make_op<S>(x.shape(), std::move(out), {x}, [mult](Node<S>& n) {
        auto& px = n.parents[0];
        if (!detail::can_accumulate(px)) return;
        for (std::size_t i = 0; i < n.grad.size(); ++i) px->grad[i] += n.grad[i] * (*mult)[i];
    });
}

// ---------------------------------------------------------------------------
// Spatial ops (channels-last H x W x C layout)
// ---------------------------------------------------------------------------

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                   std::size_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

// Cross-correlation with per-layer zero padding. kernels are [k x k x Cin x Cout].
template <class S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& kernels, const Tensor<S>& bias,
                 std::size_t stride, std::size_t pad = 0) {
    if (input.rank() != 3) throw ShapeError("conv2d: input must be HxWxC, got " + shape_str(input.shape()));
    if (kernels.rank() != 4 || kernels.dim(0) != kernels.dim(1)) {
        throw ShapeError("conv2d: kernels must be kxkxCinxCout, got " + shape_str(kernels.shape()));
    }
    if (stride == 0) throw ValueError("conv2d: stride must be positive");
    std::size_t h = input.dim(0), w = input.dim(1), cin = input.dim(2);
    std::size_t k = kernels.dim(0), cout = kernels.dim(3);
    if (kernels.dim(2) != cin) {
        throw ShapeError("conv2d: input channels " + shape_str(input.shape()) +
                         " do not match kernels " + shape_str(kernels.shape()));
    }
    if (bias.shape() != Shape{cout}) {
        throw ShapeError("conv2d: bias must be [" + std::to_string(cout) + "], got " +
                         shape_str(bias.shape()));
    }
    if (k > h + 2 * pad || k > w + 2 * pad) {
        throw ShapeError("conv2d: kernel " + shape_str(kernels.shape()) + " larger than input " +
                         shape_str(input.shape()) + " with pad " + std::to_string(pad));
    }
    std::size_t ho = conv_out_extent(h, k, stride, pad);
    std::size_t wo = conv_out_extent(w, k, stride, pad);
    std::size_t patch = k * k * cin;
    std::size_t rows = ho * wo;

    auto cols = std::make_shared<std::vector<S>>(rows * patch, S(0));
    const auto& xv = input.data();
    for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox) {
            S* crow = cols->data() + (oy * wo + ox) * patch;
            for (std::size_t ky = 0; ky < k; ++ky) {
                std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                    static_cast<std::ptrdiff_t>(pad);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t kx = 0; kx < k; ++kx) {
                    std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                        static_cast<std::ptrdiff_t>(pad);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                    const S* src = xv.data() + (static_cast<std::size_t>(iy) * w +
                                                static_cast<std::size_t>(ix)) * cin;
                    S* dst = crow + (ky * k + kx) * cin;
                    for (std::size_t c = 0; c < cin; ++c) dst[c] = src[c];
                }
            }
        }
    }

    // out rows start at the bias, then accumulate cols * kernel-matrix.
    std::vector<S> out(rows * cout);
    const auto& bv = bias.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cout; ++c) out[r * cout + c] = bv[c];
    detail::gemm_nn(rows, patch, cout, cols->data(), kernels.data().data(), out.data(), true);

    return detail::make_op<S>({ho, wo, cout}, std::move(out), {input, kernels, bias},
                              [h, w, cin, k, cout, stride, pad, ho, wo, patch, rows, cols](Node<S>& n) {
        auto& px = n.parents[0];
        auto& pk = n.parents[1];
        auto& pb = n.parents[2];
        const S* g = n.grad.data();
        if (detail::can_accumulate(pb)) {
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cout; ++c) pb->grad[c] += g[r * cout + c];
        }
        if (detail::can_accumulate(pk)) {
            detail::gemm_tn(patch, rows, cout, cols->data(), g, pk->grad.data(), true);
        }
        if (detail::can_accumulate(px)) {
            std::vector<S> dcols(rows * patch);
            detail::gemm_nt(rows, cout, patch, g, pk->value.data(), dcols.data(), false);
            for (std::size_t oy = 0; oy < ho; ++oy) {
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    const S* crow = dcols.data() + (oy * wo + ox) * patch;
                    for (std::size_t ky = 0; ky < k; ++ky) {
                        std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                            static_cast<std::ptrdiff_t>(pad);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                                static_cast<std::ptrdiff_t>(pad);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                            S* dst = px->grad.data() + (static_cast<std::size_t>(iy) * w +
                                                        static_cast<std::size_t>(ix)) * cin;
                            const S* src = crow + (ky * k + kx) * cin;
                            for (std::size_t c = 0; c < cin; ++c) dst[c] += src[c];
                        }
                    }
                }
            }
        }
    });
}

// Per-channel sliding-window max. Gradient routes to the argmax position;
// ties resolve to the first occurrence in row-major scan order.
template <class S>
Tensor<S> maxpool2d(const Tensor<S>& input, std::size_t window, std::size_t stride) {
    if (input.rank() != 3) throw ShapeError("maxpool2d: input must be HxWxC, got " + shape_str(input.shape()));
    if (stride == 0 || window == 0) throw ValueError("maxpool2d: window and stride must be positive");
    std::size_t h = input.dim(0), w = input.dim(1), c = input.dim(2);
    if (window > h || window > w) {
        throw ShapeError("maxpool2d: window " + std::to_string(window) + " exceeds input " +
                         shape_str(input.shape()));
    }
    std::size_t ho = (h - window) / stride + 1;
    std::size_t wo = (w - window) / stride + 1;
    std::vector<S> out(ho * wo * c);
    auto argmax = std::make_shared<std::vector<std::size_t>>(ho * wo * c);
    const auto& xv = input.data();
    for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                S best = xv[(oy * stride * w + ox * stride) * c + ch];
                std::size_t best_idx = (oy * stride * w + ox * stride) * c + ch;
                for (std::size_t ky = 0; ky < window; ++ky) {
                    for (std::size_t kx = 0; kx < window; ++kx) {
                        std::size_t idx = ((oy * stride + ky) * w + (ox * stride + kx)) * c + ch;
                        if (xv[idx] > best) {
                            best = xv[idx];
                            best_idx = idx;
                        }
                    }
                }
                std::size_t o = (oy * wo + ox) * c + ch;
                out[o] = best;
                (*argmax)[o] = best_idx;
            }
        }
    }
    return detail::make_op<S>({ho, wo, c}, std::move(out), {input}, [argmax](Node<S>& n) {
        auto& px = n.parents[0];
        if (!detail::can_accumulate(px)) return;
        for (std::size_t i = 0; i < n.grad.size(); ++i) px->grad[(*argmax)[i]] += n.grad[i];
    });
}

// H x W x C image -> [Np x (P*P*C)] rows of flattened non-overlapping patches,
// in row-major patch order.
template <class S>
Tensor<S> patchify(const Tensor<S>& image, std::size_t p) {
    if (image.rank() != 3) throw ShapeError("patchify: input must be HxWxC, got " + shape_str(image.shape()));
    std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
    if (p == 0 || h % p != 0 || w % p != 0) {
        throw ShapeError("patchify: image " + shape_str(image.shape()) +
                         " not divisible by patch size " + std::to_string(p));
    }
    std::size_t gy = h / p, gx = w / p;
    std::size_t np = gy * gx, plen = p * p * c;
    std::vector<S> out(np * plen);
    const auto& xv = image.data();
    for (std::size_t py = 0; py < gy; ++py)
        for (std::size_t px_ = 0; px_ < gx; ++px_) {
            S* row = out.data() + (py * gx + px_) * plen;
            for (std::size_t dy = 0; dy < p; ++dy)
                for (std::size_t dx = 0; dx < p; ++dx) {
                    const S* src = xv.data() + ((py * p + dy) * w + (px_ * p + dx)) * c;
                    S* dst = row + (dy * p + dx) * c;
                    for (std::size_t ch = 0; ch < c; ++ch) dst[ch] = src[ch];
                }
        }
    return detail::make_op<S>({np, plen}, std::move(out), {image}, [h, w, c, p, gx](Node<S>& n) {
        auto& pi = n.parents[0];
        if (!detail::can_accumulate(pi)) return;
        std::size_t plen = p * p * c;
        for (std::size_t patch = 0; patch < n.shape[0]; ++patch) {
            std::size_t py = patch / gx, px_ = patch % gx;
            const S* row = n.grad.data() + patch * plen;
            for (std::size_t dy = 0; dy < p; ++dy)
                for (std::size_t dx = 0; dx < p; ++dx) {
                    S* dst = pi->grad.data() + ((py * p + dy) * w + (px_ * p + dx)) * c;
                    const S* src = row + (dy * p + dx) * c;
                    for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
                }
        }
    });
}

// Index of the row maximum; lowest index wins ties.
template <class S>
std::size_t argmax_row(const Tensor<S>& m, std::size_t row) {
    std::size_t k = m.shape().back();
    const S* x = m.data().data() + row * k;
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
        if (x[j] > x[best]) best = j;
    return best;
}

}  // namespace lusc
