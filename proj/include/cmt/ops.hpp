#pragma once

#include <cmath>
#include <limits>

#include "cmt/tensor.hpp"

namespace cmt {

namespace detail {

template <class T>
void check_finite(const std::vector<T>& v, const char* op) {
#ifndef NDEBUG
    for (T x : v) {
        if (!std::isfinite(static_cast<double>(x)))
            throw std::runtime_error(std::string("non-finite value produced by op '") + op + "'");
    }
#else
    (void)v;
    (void)op;
#endif
}

template <class T>
Tensor<T> make_op(Shape shape, std::vector<T> data, std::vector<Tensor<T>> parents,
                  std::function<void(TensorNode<T>&)> bwd, const char* name) {
    check_finite(data, name);
    bool rg = false;
    for (auto& p : parents) rg = rg || p.requires_grad();
    Tensor<T> out = Tensor<T>::from(std::move(shape), std::move(data), rg);
    if (rg) {
        for (auto& p : parents) out.node()->parents.push_back(p.node_ptr());
        out.node()->backward_fn = std::move(bwd);
    }
    return out;
}

// Accumulate `g` into the parent's gradient if gradients flow through it.
template <class T>
void accum(const std::shared_ptr<TensorNode<T>>& p, const T* g, size_t n) {
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < n; ++i) p->grad[i] += g[i];
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    auto an = a.node_ptr(), bn = b.node_ptr();
    return detail::make_op<T>(
        a.shape(), std::move(out), {a, b},
        [an, bn](TensorNode<T>& n) {
            detail::accum(an, n.grad.data(), n.grad.size());
            detail::accum(bn, n.grad.data(), n.grad.size());
        },
        "add");
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    auto an = a.node_ptr(), bn = b.node_ptr();
    return detail::make_op<T>(
        a.shape(), std::move(out), {a, b},
        [an, bn](TensorNode<T>& n) {
            detail::accum(an, n.grad.data(), n.grad.size());
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] -= n.grad[i];
            }
        },
        "sub");
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    auto an = a.node_ptr(), bn = b.node_ptr();
    return detail::make_op<T>(
        a.shape(), std::move(out), {a, b},
        [an, bn](TensorNode<T>& n) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * bn->data[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] += n.grad[i] * an->data[i];
            }
        },
        "mul");
}

/// Broadcast-add a length-c vector to every row of an r x c matrix.
template <class T>
Tensor<T> add_rowvec(const Tensor<T>& a, const Tensor<T>& v) {
    const int r = a.rows(), c = a.cols();
    if (v.size() != c)
        throw std::invalid_argument("add_rowvec: vector length " + std::to_string(v.size()) +
                                    " != cols " + std::to_string(c));
    std::vector<T> out(a.data().size());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[i * c + j] = a.data()[i * c + j] + v.data()[j];
    auto an = a.node_ptr(), vn = v.node_ptr();
    return detail::make_op<T>(
        a.shape(), std::move(out), {a, v},
        [an, vn, r, c](TensorNode<T>& n) {
            detail::accum(an, n.grad.data(), n.grad.size());
            if (vn->requires_grad) {
                vn->ensure_grad();
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) vn->grad[j] += n.grad[i * c + j];
            }
        },
        "add_rowvec");
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
    auto an = a.node_ptr();
    return detail::make_op<T>(
        a.shape(), std::move(out), {a},
        [an, s](TensorNode<T>& n) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * s;
        },
        "scale");
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + s;
    auto an = a.node_ptr();
    return detail::make_op<T>(
        a.shape(), std::move(out), {a},
        [an](TensorNode<T>& n) { detail::accum(an, n.grad.data(), n.grad.size()); }, "add_scalar");
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
    return scale(a, T(-1));
}

namespace detail {

template <class T, class Fwd, class Dfn>
Tensor<T> unary_op(const Tensor<T>& a, Fwd f, Dfn df, const char* name) {
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = f(a.data()[i]);
    auto an = a.node_ptr();
    std::vector<T> saved = out;
    return detail::make_op<T>(
        a.shape(), std::move(out), {a},
        [an, df, saved = std::move(saved)](TensorNode<T>& n) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i)
                an->grad[i] += n.grad[i] * df(an->data[i], saved[i]);
        },
        name);
}

}  // namespace detail

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
    return detail::unary_op(
        a, [](T x) { return x > T(0) ? x : T(0); },
        [](T x, T) { return x > T(0) ? T(1) : T(0); }, "relu");
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    return detail::unary_op(
        a,
        [](T x) {
            return x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                             : std::exp(x) / (T(1) + std::exp(x));
        },
        [](T, T y) { return y * (T(1) - y); }, "sigmoid");
}

template <class T>
Tensor<T> sin(const Tensor<T>& a) {
    return detail::unary_op(
        a, [](T x) { return std::sin(x); }, [](T x, T) { return std::cos(x); }, "sin");
}

template <class T>
Tensor<T> cos(const Tensor<T>& a) {
    return detail::unary_op(
        a, [](T x) { return std::cos(x); }, [](T x, T) { return -std::sin(x); }, "cos");
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
    return detail::unary_op(
        a, [](T x) { return std::exp(x); }, [](T, T y) { return y; }, "exp");
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
    return detail::unary_op(
        a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; }, "log");
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
    return detail::unary_op(
        a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; }, "square");
}

/// |x| with subgradient 0 at the kink.
template <class T>
Tensor<T> abs(const Tensor<T>& a) {
    return detail::unary_op(
        a, [](T x) { return std::fabs(x); },
        [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); }, "abs");
}

/// Clamp; gradient is zero outside [lo, hi].
template <class T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
    return detail::unary_op(
        a, [lo, hi](T x) { return std::min(hi, std::max(lo, x)); },
        [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); }, "clamp");
}

// ---------------------------------------------------------------------------
// Reductions / reshaping
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
    T s = 0;
    for (T x : a.data()) s += x;
    auto an = a.node_ptr();
    return detail::make_op<T>(
        {1}, {s}, {a},
        [an](TensorNode<T>& n) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (auto& g : an->grad) g += n.grad[0];
        },
        "sum");
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (numel(shape) != a.size())
        throw std::invalid_argument("reshape: element count mismatch");
    auto an = a.node_ptr();
    std::vector<T> out = a.data();
    return detail::make_op<T>(
        std::move(shape), std::move(out), {a},
        [an](TensorNode<T>& n) { detail::accum(an, n.grad.data(), n.grad.size()); }, "reshape");
}

// ---------------------------------------------------------------------------
// Matrix product (Eigen-backed)
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
                 bool trans_b = false) {
    using CMap = typename Tensor<T>::CMap;
    using EigenMat = typename Tensor<T>::EigenMat;
    const int am = trans_a ? a.cols() : a.rows();
    const int ak = trans_a ? a.rows() : a.cols();
    const int bk = trans_b ? b.cols() : b.rows();
    const int bn = trans_b ? b.rows() : b.cols();
    if (ak != bk)
        throw std::invalid_argument("matmul: inner dims disagree " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    CMap A(a.data().data(), a.rows(), a.cols());
    CMap B(b.data().data(), b.rows(), b.cols());
    EigenMat C(am, bn);
    if (!trans_a && !trans_b)
        C.noalias() = A * B;
    else if (trans_a && !trans_b)
        C.noalias() = A.transpose() * B;
    else if (!trans_a && trans_b)
        C.noalias() = A * B.transpose();
    else
        C.noalias() = A.transpose() * B.transpose();

    std::vector<T> out(C.data(), C.data() + static_cast<std::int64_t>(am) * bn);
    auto an = a.node_ptr(), bnp = b.node_ptr();
    return detail::make_op<T>(
        {am, bn}, std::move(out), {a, b},
        [an, bnp, trans_a, trans_b, am, bn](TensorNode<T>& n) {
            using Map = typename Tensor<T>::Map;
            CMap dC(n.grad.data(), am, bn);
            CMap A(an->data.data(), an->rows(), an->cols());
            CMap B(bnp->data.data(), bnp->rows(), bnp->cols());
            if (an->requires_grad) {
                an->ensure_grad();
                Map dA(an->grad.data(), an->rows(), an->cols());
                if (!trans_a && !trans_b)
                    dA.noalias() += dC * B.transpose();
                else if (!trans_a && trans_b)
                    dA.noalias() += dC * B;
                else if (trans_a && !trans_b)
                    dA.noalias() += B * dC.transpose();
                else
                    dA.noalias() += B.transpose() * dC.transpose();
            }
            if (bnp->requires_grad) {
                bnp->ensure_grad();
                Map dB(bnp->grad.data(), bnp->rows(), bnp->cols());
                if (!trans_a && !trans_b)
                    dB.noalias() += A.transpose() * dC;
                else if (!trans_a && trans_b)
                    dB.noalias() += dC.transpose() * A;
                else if (trans_a && !trans_b)
                    dB.noalias() += A * dC;
                else
                    dB.noalias() += dC.transpose() * A.transpose();
            }
        },
        "matmul");
}

// ---------------------------------------------------------------------------
// Softmax / layer norm
// ---------------------------------------------------------------------------

/// Row softmax over the trailing axis. `mask`, when given, has one flag per
/// element; true forbids that position (logit treated as -inf). A fully
/// forbidden row yields zeros and a one-time warning.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& a, const std::vector<std::uint8_t>* mask = nullptr) {
    const int r = a.rows(), c = a.cols();
    if (mask && static_cast<std::int64_t>(mask->size()) != a.size())
        throw std::invalid_argument("softmax_rows: mask size mismatch");
    std::vector<T> out(a.data().size());
    static std::atomic<bool> warned{false};
    for (int i = 0; i < r; ++i) {
        const T* row = a.data().data() + static_cast<size_t>(i) * c;
        T mx = -std::numeric_limits<T>::infinity();
        bool any = false;
        for (int j = 0; j < c; ++j) {
            if (mask && (*mask)[i * c + j]) continue;
            any = true;
            mx = std::max(mx, row[j]);
        }
        T* orow = out.data() + static_cast<size_t>(i) * c;
        if (!any) {
            for (int j = 0; j < c; ++j) orow[j] = T(0);
            if (!warned.exchange(true))
                std::cerr << "[cmt] warning: softmax over fully-masked row; emitting zeros\n";
            continue;
        }
        T denom = 0;
        for (int j = 0; j < c; ++j) {
            if (mask && (*mask)[i * c + j]) {
                orow[j] = T(0);
            } else {
                orow[j] = std::exp(row[j] - mx);
                denom += orow[j];
            }
        }
        for (int j = 0; j < c; ++j) orow[j] /= denom;
    }
    auto an = a.node_ptr();
    std::vector<T> saved = out;
    return detail::make_op<T>(
        a.shape(), std::move(out), {a},
        [an, r, c, saved = std::move(saved)](TensorNode<T>& n) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (int i = 0; i < r; ++i) {
                const T* y = saved.data() + static_cast<size_t>(i) * c;
                const T* dy = n.grad.data() + static_cast<size_t>(i) * c;
                T dot = 0;
                for (int j = 0; j < c; ++j) dot += dy[j] * y[j];
                T* dx = an->grad.data() + static_cast<size_t>(i) * c;
                for (int j = 0; j < c; ++j) dx[j] += y[j] * (dy[j] - dot);
            }
        },
        "softmax_rows");
}

/// Layer norm over the trailing axis with learned gain/bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
    const int r = x.rows(), c = x.cols();
    if (gamma.size() != c || beta.size() != c)
        throw std::invalid_argument("layer_norm: gain/bias length mismatch");
    std::vector<T> out(x.data().size());
    std::vector<T> xhat(x.data().size());
    std::vector<T> inv_sigma(r);
    for (int i = 0; i < r; ++i) {
        const T* row = x.data().data() + static_cast<size_t>(i) * c;
        T mu = 0;
        for (int j = 0; j < c; ++j) mu += row[j];
        mu /= c;
        T var = 0;
        for (int j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= c;
        T is = T(1) / std::sqrt(var + eps);
        inv_sigma[i] = is;
        for (int j = 0; j < c; ++j) {
            T xh = (row[j] - mu) * is;
            xhat[i * c + j] = xh;
            out[i * c + j] = xh * gamma.data()[j] + beta.data()[j];
        }
    }
    auto xn = x.node_ptr(), gn = gamma.node_ptr(), bn = beta.node_ptr();
    return detail::make_op<T>(
        x.shape(), std::move(out), {x, gamma, beta},
        [xn, gn, bn, r, c, xhat = std::move(xhat),
         inv_sigma = std::move(inv_sigma)](TensorNode<T>& n) {
            if (gn->requires_grad) {
                gn->ensure_grad();
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j)
                        gn->grad[j] += n.grad[i * c + j] * xhat[i * c + j];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) bn->grad[j] += n.grad[i * c + j];
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (int i = 0; i < r; ++i) {
                    const T* dy = n.grad.data() + static_cast<size_t>(i) * c;
                    const T* xh = xhat.data() + static_cast<size_t>(i) * c;
                    T m1 = 0, m2 = 0;
                    for (int j = 0; j < c; ++j) {
                        T dxh = dy[j] * gn->data[j];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                    }
                    m1 /= c;
                    m2 /= c;
                    T* dx = xn->grad.data() + static_cast<size_t>(i) * c;
                    for (int j = 0; j < c; ++j) {
                        T dxh = dy[j] * gn->data[j];
                        dx[j] += inv_sigma[i] * (dxh - m1 - xh[j] * m2);
                    }
                }
            }
        },
        "layer_norm");
}

// ---------------------------------------------------------------------------
// Slicing / concatenation / gathering
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> slice_cols(const Tensor<T>& a, int c0, int len) {
    const int r = a.rows(), c = a.cols();
    if (c0 < 0 || c0 + len > c) throw std::invalid_argument("slice_cols: range out of bounds");
    std::vector<T> out(static_cast<size_t>(r) * len);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < len; ++j) out[i * len + j] = a.data()[i * c + c0 + j];
    auto an = a.node_ptr();
    return detail::make_op<T>(
        {r, len}, std::move(out), {a},
        [an, r, c, c0, len](TensorNode<T>& n) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < len; ++j) an->grad[i * c + c0 + j] += n.grad[i * len + j];
        },
        "slice_cols");
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& a, int r0, int len) {
    const int r = a.rows(), c = a.cols();
    if (r0 < 0 || r0 + len > r) throw std::invalid_argument("slice_rows: range out of bounds");
    std::vector<T> out(a.data().begin() + static_cast<size_t>(r0) * c,
                       a.data().begin() + static_cast<size_t>(r0 + len) * c);
    auto an = a.node_ptr();
    return detail::make_op<T>(
        {len, c}, std::move(out), {a},
        [an, c, r0, len](TensorNode<T>& n) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (int i = 0; i < len; ++i)
                for (int j = 0; j < c; ++j) an->grad[(r0 + i) * c + j] += n.grad[i * c + j];
        },
        "slice_rows");
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
    const int c = parts[0].cols();
    int r = 0;
    for (auto& p : parts) {
        if (p.cols() != c) throw std::invalid_argument("concat_rows: column mismatch");
        r += p.rows();
    }
    std::vector<T> out;
    out.reserve(static_cast<size_t>(r) * c);
    for (auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    std::vector<std::shared_ptr<TensorNode<T>>> pnodes;
    for (auto& p : parts) pnodes.push_back(p.node_ptr());
    return detail::make_op<T>(
        {r, c}, std::move(out), parts,
        [pnodes, c](TensorNode<T>& n) {
            size_t off = 0;
            for (auto& p : pnodes) {
                size_t cnt = p->data.size();
                detail::accum(p, n.grad.data() + off, cnt);
                off += cnt;
            }
        },
        "concat_rows");
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
    const int r = parts[0].rows();
    int c = 0;
    for (auto& p : parts) {
        if (p.rows() != r) throw std::invalid_argument("concat_cols: row mismatch");
        c += p.cols();
    }
    std::vector<T> out(static_cast<size_t>(r) * c);
    int off = 0;
    for (auto& p : parts) {
        const int pc = p.cols();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < pc; ++j) out[i * c + off + j] = p.data()[i * pc + j];
        off += pc;
    }
    std::vector<std::shared_ptr<TensorNode<T>>> pnodes;
    for (auto& p : parts) pnodes.push_back(p.node_ptr());
    return detail::make_op<T>(
        {r, c}, std::move(out), parts,
        [pnodes, r, c](TensorNode<T>& n) {
            int off = 0;
            for (auto& p : pnodes) {
                const int pc = p->cols();
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < pc; ++j) p->grad[i * pc + j] += n.grad[i * c + off + j];
                }
                off += pc;
            }
        },
        "concat_cols");
}

/// Select rows by index; backward scatter-adds (indices may repeat).
template <class T>
Tensor<T> gather_rows(const Tensor<T>& a, std::vector<int> idx) {
    const int r = a.rows(), c = a.cols();
    std::vector<T> out(idx.size() * static_cast<size_t>(c));
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= r) throw std::invalid_argument("gather_rows: index out of range");
        std::copy_n(a.data().data() + static_cast<size_t>(idx[i]) * c, c, out.data() + i * c);
    }
    auto an = a.node_ptr();
    const int nout = static_cast<int>(idx.size());
    return detail::make_op<T>(
        {nout, c}, std::move(out), {a},
        [an, c, idx = std::move(idx)](TensorNode<T>& n) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (size_t i = 0; i < idx.size(); ++i)
                for (int j = 0; j < c; ++j)
                    an->grad[static_cast<size_t>(idx[i]) * c + j] += n.grad[i * c + j];
        },
        "gather_rows");
}

// ---------------------------------------------------------------------------
// Structured ops used by the encoders
// ---------------------------------------------------------------------------

/// 3x3 same-padding convolution over an H x W grid stored as (H*W) x C_in.
/// `weight` is (9*C_in) x C_out, `bias` is C_out.
template <class T>
Tensor<T> conv3x3(const Tensor<T>& x, int h, int w, const Tensor<T>& weight,
                  const Tensor<T>& bias) {
    using CMap = typename Tensor<T>::CMap;
    using EigenMat = typename Tensor<T>::EigenMat;
    const int cin = x.cols();
    if (x.rows() != h * w) throw std::invalid_argument("conv3x3: grid size mismatch");
    if (weight.rows() != 9 * cin) throw std::invalid_argument("conv3x3: weight rows != 9*C_in");
    const int cout = weight.cols();
    if (bias.size() != cout) throw std::invalid_argument("conv3x3: bias length mismatch");

    // im2col with zero padding
    std::vector<T> col(static_cast<size_t>(h) * w * 9 * cin, T(0));
    const int cw = 9 * cin;
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            T* crow = col.data() + static_cast<size_t>(i * w + j) * cw;
            int tap = 0;
            for (int di = -1; di <= 1; ++di) {
                for (int dj = -1; dj <= 1; ++dj, ++tap) {
                    int ii = i + di, jj = j + dj;
                    if (ii < 0 || ii >= h || jj < 0 || jj >= w) continue;
                    std::copy_n(x.data().data() + static_cast<size_t>(ii * w + jj) * cin, cin,
                                crow + tap * cin);
                }
            }
        }
    }
    CMap Col(col.data(), h * w, cw);
    CMap W(weight.data().data(), 9 * cin, cout);
    EigenMat Y = Col * W;
    std::vector<T> out(Y.data(), Y.data() + static_cast<std::int64_t>(h) * w * cout);
    for (int i = 0; i < h * w; ++i)
        for (int j = 0; j < cout; ++j) out[i * cout + j] += bias.data()[j];

    auto xn = x.node_ptr(), wn = weight.node_ptr(), bn = bias.node_ptr();
    return detail::make_op<T>(
        {h * w, cout}, std::move(out), {x, weight, bias},
        [xn, wn, bn, h, w, cin, cout, col = std::move(col)](TensorNode<T>& n) {
            using Map = typename Tensor<T>::Map;
            const int cw = 9 * cin;
            CMap dY(n.grad.data(), h * w, cout);
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int i = 0; i < h * w; ++i)
                    for (int j = 0; j < cout; ++j) bn->grad[j] += n.grad[i * cout + j];
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                CMap Col(col.data(), h * w, cw);
                Map dW(wn->grad.data(), cw, cout);
                dW.noalias() += Col.transpose() * dY;
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                CMap W(wn->data.data(), cw, cout);
                EigenMat dCol = dY * W.transpose();
                for (int i = 0; i < h; ++i) {
                    for (int j = 0; j < w; ++j) {
                        int tap = 0;
                        for (int di = -1; di <= 1; ++di) {
                            for (int dj = -1; dj <= 1; ++dj, ++tap) {
                                int ii = i + di, jj = j + dj;
                                if (ii < 0 || ii >= h || jj < 0 || jj >= w) continue;
                                T* dst = xn->grad.data() + static_cast<size_t>(ii * w + jj) * cin;
                                const T* src = dCol.data() +
                                               static_cast<size_t>(i * w + j) * cw +
                                               static_cast<size_t>(tap) * cin;
                                for (int k = 0; k < cin; ++k) dst[k] += src[k];
                            }
                        }
                    }
                }
            }
        },
        "conv3x3");
}

/// Per-group max pooling: rows of `x` (m x c) are pooled by `group` id into
/// an n_groups x c output. Rows with group < 0 are ignored; empty groups are
/// zero. Ties pick the lowest row index, so the result is order-stable.
template <class T>
Tensor<T> maxpool_groups(const Tensor<T>& x, const std::vector<int>& group, int n_groups) {
    const int m = x.rows(), c = x.cols();
    if (static_cast<int>(group.size()) != m)
        throw std::invalid_argument("maxpool_groups: group size mismatch");
    std::vector<T> out(static_cast<size_t>(n_groups) * c, T(0));
    std::vector<int> arg(static_cast<size_t>(n_groups) * c, -1);
    for (int i = 0; i < m; ++i) {
        int g = group[i];
        if (g < 0) continue;
        if (g >= n_groups) throw std::invalid_argument("maxpool_groups: group id out of range");
        for (int j = 0; j < c; ++j) {
            size_t o = static_cast<size_t>(g) * c + j;
            T v = x.data()[static_cast<size_t>(i) * c + j];
            if (arg[o] < 0 || v > out[o]) {
                out[o] = v;
                arg[o] = i;
            }
        }
    }
    auto xn = x.node_ptr();
    return detail::make_op<T>(
        {n_groups, c}, std::move(out), {x},
        [xn, c, n_groups, arg = std::move(arg)](TensorNode<T>& n) {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (int g = 0; g < n_groups; ++g)
                for (int j = 0; j < c; ++j) {
                    int i = arg[static_cast<size_t>(g) * c + j];
                    if (i >= 0) xn->grad[static_cast<size_t>(i) * c + j] += n.grad[g * c + j];
                }
        },
        "maxpool_groups");
}

}  // namespace cmt
