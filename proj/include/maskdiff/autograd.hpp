#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "maskdiff/tensor.hpp"

namespace maskdiff::ag {

// Reverse-mode automatic differentiation over Tensor<T>. Operations build a
// DAG of shared_ptr nodes; backward() runs the recorded closures in reverse
// creation order. Scalar losses only.
//
// Thread model: the tape is implicit in the node links, so independent graphs
// on different threads never interact. grad_enabled() is thread_local.

template <typename T>
struct Node {
    Tensor<T> val;
    Tensor<T> grad;  // allocated on first accumulation
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;
    bool needs_grad = false;
    std::uint64_t id = 0;
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

inline bool& grad_enabled() {
    thread_local bool on = true;
    return on;
}

// RAII guard disabling graph recording (inference paths).
struct NoGrad {
    bool prev;
    NoGrad() : prev(grad_enabled()) { grad_enabled() = false; }
    ~NoGrad() { grad_enabled() = prev; }
};

inline std::uint64_t next_node_id() {
    thread_local std::uint64_t counter = 0;
    return ++counter;
}

template <typename T>
Var<T> make_node(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->val = std::move(value);
    n->id = next_node_id();
    return n;
}

template <typename T>
Var<T> leaf(Tensor<T> value) {
    auto n = make_node(std::move(value));
    n->needs_grad = grad_enabled();
    return n;
}

template <typename T>
Var<T> constant(Tensor<T> value) {
    return make_node(std::move(value));
}

template <typename T>
void ensure_grad(Node<T>& n) {
    if (n.grad.v.empty()) n.grad = Tensor<T>::zeros(n.val.shape);
}

namespace detail {

template <typename T>
bool track(const std::initializer_list<Var<T>>& parents) {
    if (!grad_enabled()) return false;
    for (const auto& p : parents)
        if (p && p->needs_grad) return true;
    return false;
}

template <typename T, typename F>
void wire(Var<T>& out, std::initializer_list<Var<T>> parents, F&& fn) {
    if (!track(parents)) return;
    out->needs_grad = true;
    out->parents.assign(parents);
    out->backprop = std::forward<F>(fn);
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

}  // namespace detail

// ============================================================================
// Elementwise
// ============================================================================

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    if (!a->val.same_shape(b->val)) throw argument_error("add: shape mismatch");
    Tensor<T> out = a->val;
    for (long long i = 0; i < out.numel(); ++i) out[i] += b->val[i];
    auto r = make_node(std::move(out));
    detail::wire(r, {a, b}, [ap = a.get(), bp = b.get()](Node<T>& self) {
        if (ap->needs_grad) {
            ensure_grad(*ap);
            for (long long i = 0; i < self.grad.numel(); ++i) ap->grad[i] += self.grad[i];
        }
        if (bp->needs_grad) {
            ensure_grad(*bp);
            for (long long i = 0; i < self.grad.numel(); ++i) bp->grad[i] += self.grad[i];
        }
    });
    return r;
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    if (!a->val.same_shape(b->val)) throw argument_error("sub: shape mismatch");
    Tensor<T> out = a->val;
    for (long long i = 0; i < out.numel(); ++i) out[i] -= b->val[i];
    auto r = make_node(std::move(out));
    detail::wire(r, {a, b}, [ap = a.get(), bp = b.get()](Node<T>& self) {
        if (ap->needs_grad) {
            ensure_grad(*ap);
            for (long long i = 0; i < self.grad.numel(); ++i) ap->grad[i] += self.grad[i];
        }
        if (bp->needs_grad) {
            ensure_grad(*bp);
            for (long long i = 0; i < self.grad.numel(); ++i) bp->grad[i] -= self.grad[i];
        }
    });
    return r;
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    if (!a->val.same_shape(b->val)) throw argument_error("mul: shape mismatch");
    Tensor<T> out = a->val;
    for (long long i = 0; i < out.numel(); ++i) out[i] *= b->val[i];
    auto r = make_node(std::move(out));
    detail::wire(r, {a, b}, [ap = a.get(), bp = b.get()](Node<T>& self) {
        if (ap->needs_grad) {
            ensure_grad(*ap);
            for (long long i = 0; i < self.grad.numel(); ++i)
                ap->grad[i] += self.grad[i] * bp->val[i];
        }
        if (bp->needs_grad) {
            ensure_grad(*bp);
            for (long long i = 0; i < self.grad.numel(); ++i)
                bp->grad[i] += self.grad[i] * ap->val[i];
        }
    });
    return r;
}

template <typename T>
Var<T> mul_scalar(const Var<T>& a, T c) {
    Tensor<T> out = a->val;
    for (auto& x : out.v) x *= c;
    auto r = make_node(std::move(out));
    detail::wire(r, {a}, [ap = a.get(), c](Node<T>& self) {
        ensure_grad(*ap);
        for (long long i = 0; i < self.grad.numel(); ++i) ap->grad[i] += self.grad[i] * c;
    });
    return r;
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T c) {
    Tensor<T> out = a->val;
    for (auto& x : out.v) x += c;
    auto r = make_node(std::move(out));
    detail::wire(r, {a}, [ap = a.get()](Node<T>& self) {
        ensure_grad(*ap);
        for (long long i = 0; i < self.grad.numel(); ++i) ap->grad[i] += self.grad[i];
    });
    return r;
}

template <typename T>
Var<T> silu(const Var<T>& a) {
    Tensor<T> out = a->val;
    Tensor<T> sig = a->val;
    for (long long i = 0; i < out.numel(); ++i) {
        const T s = T(1) / (T(1) + std::exp(-a->val[i]));
        sig[i] = s;
        out[i] = a->val[i] * s;
    }
    auto r = make_node(std::move(out));
    detail::wire(r, {a}, [ap = a.get(), sig = std::move(sig)](Node<T>& self) {
        ensure_grad(*ap);
        for (long long i = 0; i < self.grad.numel(); ++i) {
            const T s = sig[i];
            const T x = ap->val[i];
            ap->grad[i] += self.grad[i] * (s * (T(1) + x * (T(1) - s)));
        }
    });
    return r;
}

// ============================================================================
// Shape plumbing
// ============================================================================

template <typename T>
Var<T> reshape(const Var<T>& a, std::vector<int> shape) {
    auto r = make_node(a->val.reshaped(shape));
    detail::wire(r, {a}, [ap = a.get()](Node<T>& self) {
        ensure_grad(*ap);
        for (long long i = 0; i < self.grad.numel(); ++i) ap->grad[i] += self.grad[i];
    });
    return r;
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
    if (a->val.rank() != 2) throw argument_error("transpose: rank-2 tensor expected");
    const int rows = a->val.dim(0), cols = a->val.dim(1);
    Tensor<T> out({cols, rows});
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) out.at(j, i) = a->val.at(i, j);
    auto r = make_node(std::move(out));
    detail::wire(r, {a}, [ap = a.get(), rows, cols](Node<T>& self) {
        ensure_grad(*ap);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) ap->grad.at(i, j) += self.grad.at(j, i);
    });
    return r;
}

template <typename T>
Var<T> slice_cols(const Var<T>& a, int c0, int len) {
    if (a->val.rank() != 2) throw argument_error("slice_cols: rank-2 tensor expected");
    const int rows = a->val.dim(0), cols = a->val.dim(1);
    if (c0 < 0 || c0 + len > cols) throw argument_error("slice_cols: range out of bounds");
    Tensor<T> out({rows, len});
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < len; ++j) out.at(i, j) = a->val.at(i, c0 + j);
    auto r = make_node(std::move(out));
    detail::wire(r, {a}, [ap = a.get(), c0, len, rows](Node<T>& self) {
        ensure_grad(*ap);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < len; ++j) ap->grad.at(i, c0 + j) += self.grad.at(i, j);
    });
    return r;
}

template <typename T>
Var<T> col(const Var<T>& a, int j) {
    if (a->val.rank() != 2) throw argument_error("col: rank-2 tensor expected");
    const int rows = a->val.dim(0), cols = a->val.dim(1);
    if (j < 0 || j >= cols) throw argument_error("col: index out of bounds");
    Tensor<T> out({rows});
    for (int i = 0; i < rows; ++i) out[i] = a->val.at(i, j);
    auto r = make_node(std::move(out));
    detail::wire(r, {a}, [ap = a.get(), j, rows](Node<T>& self) {
        ensure_grad(*ap);
        for (int i = 0; i < rows; ++i) ap->grad.at(i, j) += self.grad[i];
    });
    return r;
}

template <typename T>
Var<T> row(const Var<T>& a, int i) {
    if (a->val.rank() != 2) throw argument_error("row: rank-2 tensor expected");
    const int rows = a->val.dim(0), cols = a->val.dim(1);
    if (i < 0 || i >= rows) throw argument_error("row: index out of bounds");
    Tensor<T> out({cols});
    for (int j = 0; j < cols; ++j) out[j] = a->val.at(i, j);
    auto r = make_node(std::move(out));
    detail::wire(r, {a}, [ap = a.get(), i, cols](Node<T>& self) {
        ensure_grad(*ap);
        for (int j = 0; j < cols; ++j) ap->grad.at(i, j) += self.grad[j];
    });
    return r;
}

template <typename T>
Var<T> stack_rows(const std::vector<Var<T>>& rows) {
    if (rows.empty()) throw argument_error("stack_rows: empty input");
    const int d = static_cast<int>(rows[0]->val.numel());
    for (const auto& r : rows)
        if (r->val.rank() != 1 || r->val.numel() != d)
            throw argument_error("stack_rows: rows must be rank-1 of equal length");
    const int n = static_cast<int>(rows.size());
    Tensor<T> out({n, d});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out.at(i, j) = rows[static_cast<size_t>(i)]->val[j];
    auto r = make_node(std::move(out));
    bool any = false;
    if (grad_enabled())
        for (const auto& p : rows) any = any || p->needs_grad;
    if (any) {
        r->needs_grad = true;
        r->parents.assign(rows.begin(), rows.end());
        std::vector<Node<T>*> raw;
        raw.reserve(rows.size());
        for (const auto& p : rows) raw.push_back(p.get());
        r->backprop = [raw = std::move(raw), d](Node<T>& self) {
            for (int i = 0; i < static_cast<int>(raw.size()); ++i) {
                if (!raw[static_cast<size_t>(i)]->needs_grad) continue;
                ensure_grad(*raw[static_cast<size_t>(i)]);
                for (int j = 0; j < d; ++j)
                    raw[static_cast<size_t>(i)]->grad[j] += self.grad.at(i, j);
            }
        };
    }
    return r;
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw argument_error("concat_cols: empty input");
    const int rows = parts[0]->val.dim(0);
    int total = 0;
    for (const auto& p : parts) {
        if (p->val.rank() != 2 || p->val.dim(0) != rows)
            throw argument_error("concat_cols: row count mismatch");
        total += p->val.dim(1);
    }
    Tensor<T> out({rows, total});
    int off = 0;
    for (const auto& p : parts) {
        const int c = p->val.dim(1);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < c; ++j) out.at(i, off + j) = p->val.at(i, j);
        off += c;
    }
    auto r = make_node(std::move(out));
    bool any = false;
    if (grad_enabled())
        for (const auto& p : parts) any = any || p->needs_grad;
    if (any) {
        r->needs_grad = true;
        r->parents.assign(parts.begin(), parts.end());
        std::vector<Node<T>*> raw;
        std::vector<int> offs;
        int o = 0;
        for (const auto& p : parts) {
            raw.push_back(p.get());
            offs.push_back(o);
            o += p->val.dim(1);
        }
        r->backprop = [raw = std::move(raw), offs = std::move(offs), rows](Node<T>& self) {
            for (size_t k = 0; k < raw.size(); ++k) {
                if (!raw[k]->needs_grad) continue;
                ensure_grad(*raw[k]);
                const int c = raw[k]->val.dim(1);
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < c; ++j)
                        raw[k]->grad.at(i, j) += self.grad.at(i, offs[k] + j);
            }
        };
    }
    return r;
}

template <typename T>
Var<T> concat_rows(const Var<T>& a, const Var<T>& b) {
    if (a->val.rank() != 2 || b->val.rank() != 2 || a->val.dim(1) != b->val.dim(1))
        throw argument_error("concat_rows: column count mismatch");
    const int ra = a->val.dim(0), rb = b->val.dim(0), c = a->val.dim(1);
    Tensor<T> out({ra + rb, c});
    std::copy(a->val.v.begin(), a->val.v.end(), out.v.begin());
    std::copy(b->val.v.begin(), b->val.v.end(), out.v.begin() + a->val.numel());
    auto r = make_node(std::move(out));
    detail::wire(r, {a, b}, [ap = a.get(), bp = b.get()](Node<T>& self) {
        const long long na = ap->val.numel();
        if (ap->needs_grad) {
            ensure_grad(*ap);
            for (long long i = 0; i < na; ++i) ap->grad[i] += self.grad[i];
        }
        if (bp->needs_grad) {
            ensure_grad(*bp);
            for (long long i = 0; i < bp->val.numel(); ++i) bp->grad[i] += self.grad[na + i];
        }
    });
    return r;
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    if (a->val.rank() != 3 || b->val.rank() != 3 || a->val.dim(1) != b->val.dim(1) ||
        a->val.dim(2) != b->val.dim(2))
        throw argument_error("concat_channels: spatial shape mismatch");
    const int ca = a->val.dim(0), cb = b->val.dim(0);
    const int h = a->val.dim(1), w = a->val.dim(2);
    Tensor<T> out({ca + cb, h, w});
    std::copy(a->val.v.begin(), a->val.v.end(), out.v.begin());
    std::copy(b->val.v.begin(), b->val.v.end(), out.v.begin() + a->val.numel());
    auto r = make_node(std::move(out));
    detail::wire(r, {a, b}, [ap = a.get(), bp = b.get()](Node<T>& self) {
        const long long na = ap->val.numel();
        if (ap->needs_grad) {
            ensure_grad(*ap);
            for (long long i = 0; i < na; ++i) ap->grad[i] += self.grad[i];
        }
        if (bp->needs_grad) {
            ensure_grad(*bp);
            for (long long i = 0; i < bp->val.numel(); ++i) bp->grad[i] += self.grad[na + i];
        }
    });
    return r;
}

// ============================================================================
// Linear algebra
// ============================================================================

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    if (a->val.rank() != 2 || b->val.rank() != 2 || a->val.dim(1) != b->val.dim(0))
        throw argument_error("matmul: inner dimension mismatch");
    const int m = a->val.dim(0), k = a->val.dim(1), n = b->val.dim(1);
    Tensor<T> out({m, n});
    detail::MapMat<T>(out.data(), m, n).noalias() =
        detail::CMapMat<T>(a->val.data(), m, k) * detail::CMapMat<T>(b->val.data(), k, n);
    auto r = make_node(std::move(out));
    detail::wire(r, {a, b}, [ap = a.get(), bp = b.get(), m, k, n](Node<T>& self) {
        detail::CMapMat<T> g(self.grad.data(), m, n);
        if (ap->needs_grad) {
            ensure_grad(*ap);
            detail::MapMat<T>(ap->grad.data(), m, k).noalias() +=
                g * detail::CMapMat<T>(bp->val.data(), k, n).transpose();
        }
        if (bp->needs_grad) {
            ensure_grad(*bp);
            detail::MapMat<T>(bp->grad.data(), k, n).noalias() +=
                detail::CMapMat<T>(ap->val.data(), m, k).transpose() * g;
        }
    });
    return r;
}

// y[n, dout] = x[n, din] * w[dout, din]^T (+ b)
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    if (x->val.rank() != 2 || w->val.rank() != 2 || x->val.dim(1) != w->val.dim(1))
        throw argument_error("linear: dimension mismatch");
    const int n = x->val.dim(0), din = x->val.dim(1), dout = w->val.dim(0);
    if (b && b->val.numel() != dout) throw argument_error("linear: bias size mismatch");
    Tensor<T> out({n, dout});
    detail::MapMat<T>(out.data(), n, dout).noalias() =
        detail::CMapMat<T>(x->val.data(), n, din) *
        detail::CMapMat<T>(w->val.data(), dout, din).transpose();
    if (b)
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < dout; ++j) out.at(i, j) += b->val[j];
    auto r = make_node(std::move(out));
    auto fn = [xp = x.get(), wp = w.get(), bp = b ? b.get() : nullptr, n, din,
               dout](Node<T>& self) {
        detail::CMapMat<T> g(self.grad.data(), n, dout);
        if (xp->needs_grad) {
            ensure_grad(*xp);
            detail::MapMat<T>(xp->grad.data(), n, din).noalias() +=
                g * detail::CMapMat<T>(wp->val.data(), dout, din);
        }
        if (wp->needs_grad) {
            ensure_grad(*wp);
            detail::MapMat<T>(wp->grad.data(), dout, din).noalias() +=
                g.transpose() * detail::CMapMat<T>(xp->val.data(), n, din);
        }
        if (bp && bp->needs_grad) {
            ensure_grad(*bp);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < dout; ++j) bp->grad[j] += self.grad.at(i, j);
        }
    };
    if (b)
        detail::wire(r, {x, w, b}, fn);
    else
        detail::wire(r, {x, w}, fn);
    return r;
}

template <typename T>
Var<T> linear_nb(const Var<T>& x, const Var<T>& w) {
    return linear(x, w, Var<T>());
}

// ============================================================================
// Convolution (im2col + GEMM)
// ============================================================================

namespace detail {

template <typename T>
void im2col(const Tensor<T>& x, int kh, int kw, int stride, int pad, int ho, int wo,
            std::vector<T>& cols) {
    const int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
    cols.assign(static_cast<size_t>(ci) * kh * kw * ho * wo, T(0));
    const int span = ho * wo;
    for (int c = 0; c < ci; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                T* dst = cols.data() + (static_cast<size_t>(c) * kh * kw + ky * kw + kx) * span;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) {
                        dst += wo;
                        continue;
                    }
                    const T* src = &x.at(c, iy, 0);
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        *dst++ = (ix >= 0 && ix < w) ? src[ix] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const std::vector<T>& cols, int ci, int h, int w, int kh, int kw, int stride,
                int pad, int ho, int wo, Tensor<T>& dx) {
    const int span = ho * wo;
    for (int c = 0; c < ci; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const T* src = cols.data() + (static_cast<size_t>(c) * kh * kw + ky * kw + kx) * span;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) {
                        src += wo;
                        continue;
                    }
                    T* dst = &dx.at(c, iy, 0);
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        if (ix >= 0 && ix < w) dst[ix] += *src;
                        ++src;
                    }
                }
            }
        }
    }
}

}  // namespace detail

// x: [ci, h, w], w: [co, ci, kh, kw], b: [co] (optional empty Var).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
    if (x->val.rank() != 3 || w->val.rank() != 4 || x->val.dim(0) != w->val.dim(1))
        throw argument_error("conv2d: channel mismatch");
    const int ci = x->val.dim(0), h = x->val.dim(1), wd = x->val.dim(2);
    const int co = w->val.dim(0), kh = w->val.dim(2), kw = w->val.dim(3);
    const int ho = (h + 2 * pad - kh) / stride + 1;
    const int wo = (wd + 2 * pad - kw) / stride + 1;
    if (ho <= 0 || wo <= 0) throw argument_error("conv2d: output would be empty");
    std::vector<T> cols;
    detail::im2col(x->val, kh, kw, stride, pad, ho, wo, cols);
    const int kdim = ci * kh * kw, span = ho * wo;
    Tensor<T> out({co, ho, wo});
    detail::MapMat<T>(out.data(), co, span).noalias() =
        detail::CMapMat<T>(w->val.data(), co, kdim) * detail::CMapMat<T>(cols.data(), kdim, span);
    if (b) {
        if (b->val.numel() != co) throw argument_error("conv2d: bias size mismatch");
        for (int c = 0; c < co; ++c) {
            const T bias = b->val[c];
            T* p = out.data() + static_cast<size_t>(c) * span;
            for (int i = 0; i < span; ++i) p[i] += bias;
        }
    }
    auto r = make_node(std::move(out));
    auto fn = [xp = x.get(), wp = w.get(), bp = b ? b.get() : nullptr, cols = std::move(cols),
               ci, h, wd, co, kh, kw, stride, pad, ho, wo, kdim, span](Node<T>& self) {
        detail::CMapMat<T> g(self.grad.data(), co, span);
        if (wp->needs_grad) {
            ensure_grad(*wp);
            detail::MapMat<T>(wp->grad.data(), co, kdim).noalias() +=
                g * detail::CMapMat<T>(cols.data(), kdim, span).transpose();
        }
        if (bp && bp->needs_grad) {
            ensure_grad(*bp);
            for (int c = 0; c < co; ++c) {
                T s = T(0);
                const T* p = self.grad.data() + static_cast<size_t>(c) * span;
                for (int i = 0; i < span; ++i) s += p[i];
                bp->grad[c] += s;
            }
        }
        if (xp->needs_grad) {
            ensure_grad(*xp);
            std::vector<T> dcols(static_cast<size_t>(kdim) * span);
            detail::MapMat<T>(dcols.data(), kdim, span).noalias() =
                detail::CMapMat<T>(wp->val.data(), co, kdim).transpose() * g;
            detail::col2im_add(dcols, ci, h, wd, kh, kw, stride, pad, ho, wo, xp->grad);
        }
    };
    if (b)
        detail::wire(r, {x, w, b}, fn);
    else
        detail::wire(r, {x, w}, fn);
    return r;
}

template <typename T>
Var<T> upsample_nearest2(const Var<T>& x) {
    if (x->val.rank() != 3) throw argument_error("upsample_nearest2: rank-3 tensor expected");
    const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
    Tensor<T> out({c, 2 * h, 2 * w});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx) out.at(ch, y, xx) = x->val.at(ch, y / 2, xx / 2);
    auto r = make_node(std::move(out));
    detail::wire(r, {x}, [xp = x.get(), c, h, w](Node<T>& self) {
        ensure_grad(*xp);
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < 2 * h; ++y)
                for (int xx = 0; xx < 2 * w; ++xx)
                    xp->grad.at(ch, y / 2, xx / 2) += self.grad.at(ch, y, xx);
    });
    return r;
}

// Per-channel bias broadcast over the spatial grid: y[c,h,w] = x[c,h,w] + s[c].
template <typename T>
Var<T> add_channel_vec(const Var<T>& x, const Var<T>& s) {
    if (x->val.rank() != 3 || s->val.numel() != x->val.dim(0))
        throw argument_error("add_channel_vec: shape mismatch");
    const int c = x->val.dim(0);
    const long long span = static_cast<long long>(x->val.dim(1)) * x->val.dim(2);
    Tensor<T> out = x->val;
    for (int ch = 0; ch < c; ++ch) {
        const T bias = s->val[ch];
        T* p = out.data() + ch * span;
        for (long long i = 0; i < span; ++i) p[i] += bias;
    }
    auto r = make_node(std::move(out));
    detail::wire(r, {x, s}, [xp = x.get(), sp = s.get(), c, span](Node<T>& self) {
        if (xp->needs_grad) {
            ensure_grad(*xp);
            for (long long i = 0; i < self.grad.numel(); ++i) xp->grad[i] += self.grad[i];
        }
        if (sp->needs_grad) {
            ensure_grad(*sp);
            for (int ch = 0; ch < c; ++ch) {
                T acc = T(0);
                const T* p = self.grad.data() + ch * span;
                for (long long i = 0; i < span; ++i) acc += p[i];
                sp->grad[ch] += acc;
            }
        }
    });
    return r;
}

// ============================================================================
// Normalization and nonlinearity blocks
// ============================================================================

template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups,
                  T eps = T(1e-5)) {
    if (x->val.rank() != 3) throw argument_error("group_norm: rank-3 tensor expected");
    const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
    if (c % groups != 0) throw argument_error("group_norm: channels not divisible by groups");
    if (gamma->val.numel() != c || beta->val.numel() != c)
        throw argument_error("group_norm: affine parameter size mismatch");
    const int cg = c / groups;
    const long long span = static_cast<long long>(h) * w;
    const long long gsize = cg * span;
    Tensor<T> xhat({c, h, w});
    std::vector<T> inv_sigma(static_cast<size_t>(groups));
    for (int g = 0; g < groups; ++g) {
        const T* p = x->val.data() + static_cast<long long>(g) * gsize;
        T mean = T(0);
        for (long long i = 0; i < gsize; ++i) mean += p[i];
        mean /= static_cast<T>(gsize);
        T var = T(0);
        for (long long i = 0; i < gsize; ++i) {
            const T d = p[i] - mean;
            var += d * d;
        }
        var /= static_cast<T>(gsize);
        const T is = T(1) / std::sqrt(var + eps);
        inv_sigma[static_cast<size_t>(g)] = is;
        T* q = xhat.data() + static_cast<long long>(g) * gsize;
        for (long long i = 0; i < gsize; ++i) q[i] = (p[i] - mean) * is;
    }
    Tensor<T> out({c, h, w});
    for (int ch = 0; ch < c; ++ch) {
        const T gm = gamma->val[ch], bt = beta->val[ch];
        const T* p = xhat.data() + ch * span;
        T* q = out.data() + ch * span;
        for (long long i = 0; i < span; ++i) q[i] = gm * p[i] + bt;
    }
    auto r = make_node(std::move(out));
    detail::wire(r, {x, gamma, beta},
                 [xp = x.get(), gp = gamma.get(), bp = beta.get(), xhat = std::move(xhat),
                  inv_sigma = std::move(inv_sigma), groups, cg, span, gsize, c](Node<T>& self) {
                     if (gp->needs_grad) {
                         ensure_grad(*gp);
                         for (int ch = 0; ch < c; ++ch) {
                             T acc = T(0);
                             const T* gr = self.grad.data() + ch * span;
                             const T* xh = xhat.data() + ch * span;
                             for (long long i = 0; i < span; ++i) acc += gr[i] * xh[i];
                             gp->grad[ch] += acc;
                         }
                     }
                     if (bp->needs_grad) {
                         ensure_grad(*bp);
                         for (int ch = 0; ch < c; ++ch) {
                             T acc = T(0);
                             const T* gr = self.grad.data() + ch * span;
                             for (long long i = 0; i < span; ++i) acc += gr[i];
                             bp->grad[ch] += acc;
                         }
                     }
                     if (xp->needs_grad) {
                         ensure_grad(*xp);
                         // dx = inv_sigma * (dxh - mean(dxh) - xhat * mean(dxh*xhat))
                         // with dxh = dy * gamma, means over the group.
                         std::vector<T> dxh(static_cast<size_t>(gsize));
                         for (int g = 0; g < groups; ++g) {
                             const long long base = static_cast<long long>(g) * gsize;
                             T s1 = T(0), s2 = T(0);
                             for (int j = 0; j < cg; ++j) {
                                 const int ch = g * cg + j;
                                 const T gm = gp->val[ch];
                                 const T* gr = self.grad.data() + ch * span;
                                 T* dq = dxh.data() + static_cast<long long>(j) * span;
                                 const T* xh = xhat.data() + ch * span;
                                 for (long long i = 0; i < span; ++i) {
                                     const T d = gr[i] * gm;
                                     dq[i] = d;
                                     s1 += d;
                                     s2 += d * xh[i];
                                 }
                             }
                             const T m1 = s1 / static_cast<T>(gsize);
                             const T m2 = s2 / static_cast<T>(gsize);
                             const T is = inv_sigma[static_cast<size_t>(g)];
                             const T* xh = xhat.data() + base;
                             T* dx = xp->grad.data() + base;
                             for (long long i = 0; i < gsize; ++i)
                                 dx[i] += is * (dxh[static_cast<size_t>(i)] - m1 - xh[i] * m2);
                         }
                     }
                 });
    return r;
}

template <typename T>
Var<T> softmax_rows(const Var<T>& x) {
    if (x->val.rank() != 2) throw argument_error("softmax_rows: rank-2 tensor expected");
    const int rows = x->val.dim(0), cols = x->val.dim(1);
    Tensor<T> out({rows, cols});
    for (int i = 0; i < rows; ++i) {
        T mx = x->val.at(i, 0);
        for (int j = 1; j < cols; ++j) mx = std::max(mx, x->val.at(i, j));
        T sum = T(0);
        for (int j = 0; j < cols; ++j) {
            const T e = std::exp(x->val.at(i, j) - mx);
            out.at(i, j) = e;
            sum += e;
        }
        const T inv = T(1) / sum;
        for (int j = 0; j < cols; ++j) out.at(i, j) *= inv;
    }
    auto r = make_node(std::move(out));
    detail::wire(r, {x}, [xp = x.get(), rp = r.get(), rows, cols](Node<T>& self) {
        ensure_grad(*xp);
        for (int i = 0; i < rows; ++i) {
            T dot = T(0);
            for (int j = 0; j < cols; ++j) dot += self.grad.at(i, j) * rp->val.at(i, j);
            for (int j = 0; j < cols; ++j)
                xp->grad.at(i, j) += rp->val.at(i, j) * (self.grad.at(i, j) - dot);
        }
    });
    return r;
}

// ============================================================================
// Reductions
// ============================================================================

template <typename T>
Var<T> sum_all(const Var<T>& x) {
    T s = T(0);
    for (T v : x->val.v) s += v;
    auto r = make_node(Tensor<T>({1}, {s}));
    detail::wire(r, {x}, [xp = x.get()](Node<T>& self) {
        ensure_grad(*xp);
        const T g = self.grad[0];
        for (long long i = 0; i < xp->grad.numel(); ++i) xp->grad[i] += g;
    });
    return r;
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
    const T inv = T(1) / static_cast<T>(x->val.numel());
    T s = T(0);
    for (T v : x->val.v) s += v;
    auto r = make_node(Tensor<T>({1}, {s * inv}));
    detail::wire(r, {x}, [xp = x.get(), inv](Node<T>& self) {
        ensure_grad(*xp);
        const T g = self.grad[0] * inv;
        for (long long i = 0; i < xp->grad.numel(); ++i) xp->grad[i] += g;
    });
    return r;
}

// Min-max normalization over all elements: (x - min) / (max - min).
// A constant input maps to all zeros and propagates no gradient, which keeps
// the degenerate case well defined.
template <typename T>
Var<T> minmax_normalize(const Var<T>& x) {
    const long long n = x->val.numel();
    if (n == 0) throw argument_error("minmax_normalize: empty tensor");
    long long imin = 0, imax = 0;
    for (long long i = 1; i < n; ++i) {
        if (x->val[i] < x->val[imin]) imin = i;
        if (x->val[i] > x->val[imax]) imax = i;
    }
    const T mn = x->val[imin], mx = x->val[imax];
    const T range = mx - mn;
    Tensor<T> out(x->val.shape);
    const bool degenerate = !(range > T(1e-20));
    if (!degenerate) {
        const T inv = T(1) / range;
        for (long long i = 0; i < n; ++i) out[i] = (x->val[i] - mn) * inv;
    }
    auto r = make_node(std::move(out));
    if (!degenerate) {
        detail::wire(r, {x}, [xp = x.get(), imin, imax, mn, mx, range, n](Node<T>& self) {
            ensure_grad(*xp);
            const T inv = T(1) / range;
            const T inv2 = inv * inv;
            T acc_min = T(0), acc_max = T(0);
            for (long long i = 0; i < n; ++i) {
                const T g = self.grad[i];
                xp->grad[i] += g * inv;
                acc_min += g * (xp->val[i] - mx) * inv2;
                acc_max -= g * (xp->val[i] - mn) * inv2;
            }
            xp->grad[imin] += acc_min;
            xp->grad[imax] += acc_max;
        });
    }
    return r;
}

// ============================================================================
// Backward pass
// ============================================================================

template <typename T>
void backward(const Var<T>& root) {
    if (root->val.numel() != 1) throw argument_error("backward: scalar root expected");
    if (!root->needs_grad) return;
    // Topological order via iterative DFS, then reverse creation order.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<Node<T>*> stack{root.get()};
    seen.insert(root.get());
    while (!stack.empty()) {
        Node<T>* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (auto& p : n->parents) {
            if (p->needs_grad && seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(),
              [](const Node<T>* a, const Node<T>* b) { return a->id > b->id; });
    ensure_grad(*root);
    root->grad[0] = T(1);
    for (Node<T>* n : order) {
        if (n->backprop && !n->grad.v.empty()) n->backprop(*n);
    }
}

}  // namespace maskdiff::ag
