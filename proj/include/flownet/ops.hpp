#pragma once

#include <algorithm>
#include <array>
#include <cstdint>

#include "flownet/tensor.hpp"

namespace flownet {

// ---------------------------------------------------------------------------
// Broadcasting utilities (numpy semantics, right-aligned, extent-1 stretches).
// ---------------------------------------------------------------------------

inline Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (ea != eb && ea != 1 && eb != 1)
            throw std::invalid_argument(std::string(op) + ": shapes " + shape_str(a) + " and " +
                                        shape_str(b) + " do not broadcast");
        out[i] = std::max(ea, eb);
    }
    return out;
}

// Strides of `in` aligned to `out`'s rank; zero on broadcast dimensions.
inline std::vector<std::size_t> aligned_strides(const Shape& in, const Shape& out, const char* op) {
    if (in.size() > out.size())
        throw std::invalid_argument(std::string(op) + ": rank " + std::to_string(in.size()) +
                                    " exceeds target rank " + std::to_string(out.size()));
    const auto dense = row_major_strides(in);
    std::vector<std::size_t> s(out.size(), 0);
    const std::size_t pad = out.size() - in.size();
    for (std::size_t i = 0; i < in.size(); ++i) {
        const std::size_t e = in[i];
        if (e == out[pad + i]) {
            s[pad + i] = dense[i];
        } else if (e == 1) {
            s[pad + i] = 0;
        } else {
            throw std::invalid_argument(std::string(op) + ": cannot broadcast " + shape_str(in) +
                                        " to " + shape_str(out));
        }
    }
    return s;
}

// Walks the dense multi-index of `shape`, maintaining K flat offsets given
// per-dimension strides (zeros mark broadcast dims).
template <std::size_t K, typename F>
inline void for_each_offsets(const Shape& shape, const std::array<const std::size_t*, K>& strides, F&& f) {
    if (numel(shape) == 0) return;
    const std::size_t rank = shape.size();
    std::array<std::size_t, K> off{};
    if (rank == 0) {
        f(off);
        return;
    }
    std::vector<std::size_t> idx(rank, 0);
    for (;;) {
        f(off);
        std::size_t d = rank;
        for (;;) {
            if (d == 0) return;
            --d;
            ++idx[d];
            for (std::size_t s = 0; s < K; ++s) off[s] += strides[s][d];
            if (idx[d] < shape[d]) break;
            idx[d] = 0;
            for (std::size_t s = 0; s < K; ++s) off[s] -= strides[s][d] * shape[d];
        }
    }
}

namespace detail {

template <typename T>
inline bool taping(std::initializer_list<const Tensor<T>*> inputs) {
    if (!Tape<T>::current()) return false;
    for (const auto* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops
// ---------------------------------------------------------------------------

namespace detail {

enum class BinKind { add, sub, mul };

template <typename T>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, BinKind kind, const char* name) {
    const Shape oshape = broadcast_shapes(a.shape(), b.shape(), name);
    Tensor<T> out(oshape);
    const bool same = a.shape() == b.shape();
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    if (same) {
        const std::size_t n = out.size();
        switch (kind) {
            case BinKind::add:
                for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
                break;
            case BinKind::sub:
                for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
                break;
            case BinKind::mul:
                for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
                break;
        }
    } else {
        const auto sa = aligned_strides(a.shape(), oshape, name);
        const auto sb = aligned_strides(b.shape(), oshape, name);
        const auto so = row_major_strides(oshape);
        std::size_t fo = 0;
        for_each_offsets<2>(oshape, {sa.data(), sb.data()}, [&](const std::array<std::size_t, 2>& off) {
            switch (kind) {
                case BinKind::add: po[fo] = pa[off[0]] + pb[off[1]]; break;
                case BinKind::sub: po[fo] = pa[off[0]] - pb[off[1]]; break;
                case BinKind::mul: po[fo] = pa[off[0]] * pb[off[1]]; break;
            }
            ++fo;
        });
        (void)so;
    }
    if (detail::taping<T>({&a, &b})) {
        out.set_requires_grad(true);
        auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
        Shape osh = oshape;
        Tape<T>::current()->record(
            [ad, bd, od, osh, kind, name]() {
                const T* g = od->grad.data();
                const bool same2 = ad->shape == bd->shape;
                if (same2) {
                    const std::size_t n = od->values.size();
                    if (ad->requires_grad) {
                        T* ga = ad->grad.data();
                        if (kind == BinKind::mul) {
                            const T* pb2 = bd->values.data();
                            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * pb2[i];
                        } else {
                            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
                        }
                    }
                    if (bd->requires_grad) {
                        T* gb = bd->grad.data();
                        if (kind == BinKind::mul) {
                            const T* pa2 = ad->values.data();
                            for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * pa2[i];
                        } else if (kind == BinKind::sub) {
                            for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
                        } else {
                            for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
                        }
                    }
                    return;
                }
                const auto sa = aligned_strides(ad->shape, osh, name);
                const auto sb = aligned_strides(bd->shape, osh, name);
                T* ga = ad->requires_grad ? ad->grad.data() : nullptr;
                T* gb = bd->requires_grad ? bd->grad.data() : nullptr;
                const T* pa2 = ad->values.data();
                const T* pb2 = bd->values.data();
                std::size_t fo = 0;
                for_each_offsets<2>(osh, {sa.data(), sb.data()}, [&](const std::array<std::size_t, 2>& off) {
                    const T gv = g[fo];
                    switch (kind) {
                        case BinKind::add:
                            if (ga) ga[off[0]] += gv;
                            if (gb) gb[off[1]] += gv;
                            break;
                        case BinKind::sub:
                            if (ga) ga[off[0]] += gv;
                            if (gb) gb[off[1]] -= gv;
                            break;
                        case BinKind::mul:
                            if (ga) ga[off[0]] += gv * pb2[off[1]];
                            if (gb) gb[off[1]] += gv * pa2[off[0]];
                            break;
                    }
                    ++fo;
                });
            },
            {a.ptr(), b.ptr(), out.ptr()});
    }
    debug_check_finite(out, name);
    return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(a, b, detail::BinKind::add, "add");
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(a, b, detail::BinKind::sub, "sub");
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(a, b, detail::BinKind::mul, "mul");
}

// y = c * x for a plain (non-learnable) constant c.
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    Tensor<T> out(x.shape());
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t i = 0; i < x.size(); ++i) po[i] = c * px[i];
    if (detail::taping<T>({&x})) {
        out.set_requires_grad(true);
        auto xd = x.ptr(), od = out.ptr();
        Tape<T>::current()->record(
            [xd, od, c]() {
                if (!xd->requires_grad) return;
                const T* g = od->grad.data();
                T* gx = xd->grad.data();
                for (std::size_t i = 0; i < xd->values.size(); ++i) gx[i] += c * g[i];
            },
            {x.ptr(), out.ptr()});
    }
    debug_check_finite(out, "scale");
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (numel(shape) != x.size())
        throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape) +
                                    " changes element count");
    Tensor<T> out(std::move(shape), x.values());
    if (detail::taping<T>({&x})) {
        out.set_requires_grad(true);
        auto xd = x.ptr(), od = out.ptr();
        Tape<T>::current()->record(
            [xd, od]() {
                if (!xd->requires_grad) return;
                const T* g = od->grad.data();
                T* gx = xd->grad.data();
                for (std::size_t i = 0; i < xd->values.size(); ++i) gx[i] += g[i];
            },
            {x.ptr(), out.ptr()});
    }
    return out;
}

// Out axis i takes input axis perm[i].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
    const std::size_t rank = x.rank();
    if (perm.size() != rank) throw std::invalid_argument("permute: perm rank mismatch");
    std::vector<bool> seen(rank, false);
    Shape oshape(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        if (perm[i] >= rank || seen[perm[i]]) throw std::invalid_argument("permute: invalid permutation");
        seen[perm[i]] = true;
        oshape[i] = x.shape()[perm[i]];
    }
    const auto xstrides = row_major_strides(x.shape());
    std::vector<std::size_t> instrides(rank);
    for (std::size_t i = 0; i < rank; ++i) instrides[i] = xstrides[perm[i]];

    Tensor<T> out(oshape);
    const T* px = x.data();
    T* po = out.data();
    std::size_t fo = 0;
    for_each_offsets<1>(oshape, {instrides.data()}, [&](const std::array<std::size_t, 1>& off) {
        po[fo++] = px[off[0]];
    });
    if (detail::taping<T>({&x})) {
        out.set_requires_grad(true);
        auto xd = x.ptr(), od = out.ptr();
        Tape<T>::current()->record(
            [xd, od, oshape, instrides]() {
                if (!xd->requires_grad) return;
                const T* g = od->grad.data();
                T* gx = xd->grad.data();
                std::size_t fo2 = 0;
                for_each_offsets<1>(oshape, {instrides.data()}, [&](const std::array<std::size_t, 1>& off) {
                    gx[off[0]] += g[fo2++];
                });
            },
            {x.ptr(), out.ptr()});
    }
    return out;
}

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& x, Shape shape) {
    const auto sx = aligned_strides(x.shape(), shape, "broadcast_to");
    Tensor<T> out(shape);
    const T* px = x.data();
    T* po = out.data();
    std::size_t fo = 0;
    for_each_offsets<1>(shape, {sx.data()}, [&](const std::array<std::size_t, 1>& off) {
        po[fo++] = px[off[0]];
    });
    if (detail::taping<T>({&x})) {
        out.set_requires_grad(true);
        auto xd = x.ptr(), od = out.ptr();
        Shape osh = out.shape();
        Tape<T>::current()->record(
            [xd, od, osh, sx]() {
                if (!xd->requires_grad) return;
                const T* g = od->grad.data();
                T* gx = xd->grad.data();
                std::size_t fo2 = 0;
                for_each_offsets<1>(osh, {sx.data()}, [&](const std::array<std::size_t, 1>& off) {
                    gx[off[0]] += g[fo2++];
                });
            },
            {x.ptr(), out.ptr()});
    }
    return out;
}

// Concatenates along the last axis; all leading extents must match.
template <typename T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != b.rank() || a.rank() == 0)
        throw std::invalid_argument("concat_last: rank mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    for (std::size_t i = 0; i + 1 < a.rank(); ++i)
        if (a.shape()[i] != b.shape()[i])
            throw std::invalid_argument("concat_last: leading extents differ at axis " + std::to_string(i));
    const std::size_t ca = a.shape().back();
    const std::size_t cb = b.shape().back();
    Shape oshape = a.shape();
    oshape.back() = ca + cb;
    Tensor<T> out(oshape);
    const std::size_t rows = out.size() / (ca + cb);
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy(pa + r * ca, pa + (r + 1) * ca, po + r * (ca + cb));
        std::copy(pb + r * cb, pb + (r + 1) * cb, po + r * (ca + cb) + ca);
    }
    if (detail::taping<T>({&a, &b})) {
        out.set_requires_grad(true);
        auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
        Tape<T>::current()->record(
            [ad, bd, od, rows, ca, cb]() {
                const T* g = od->grad.data();
                if (ad->requires_grad) {
                    T* ga = ad->grad.data();
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < ca; ++j) ga[r * ca + j] += g[r * (ca + cb) + j];
                }
                if (bd->requires_grad) {
                    T* gb = bd->grad.data();
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < cb; ++j) gb[r * cb + j] += g[r * (ca + cb) + ca + j];
                }
            },
            {a.ptr(), b.ptr(), out.ptr()});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batched matrix multiply with broadcast leading dimensions.
// ---------------------------------------------------------------------------

namespace detail {

// Y[m,n] += opA(A) * opB(B); A is [m,k] (or [k,m] if ta), B is [k,n] (or [n,k] if tb).
template <typename T>
inline void gemm_acc(const T* A, const T* B, T* Y, std::size_t m, std::size_t k, std::size_t n,
                     bool ta, bool tb) {
    if (!ta && !tb) {
        for (std::size_t i = 0; i < m; ++i) {
            T* y = Y + i * n;
            const T* arow = A + i * k;
            for (std::size_t l = 0; l < k; ++l) {
                const T av = arow[l];
                const T* brow = B + l * n;
                for (std::size_t j = 0; j < n; ++j) y[j] += av * brow[j];
            }
        }
    } else if (!ta && tb) {
        for (std::size_t i = 0; i < m; ++i) {
            const T* arow = A + i * k;
            T* y = Y + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                const T* brow = B + j * k;
                T s = 0;
                for (std::size_t l = 0; l < k; ++l) s += arow[l] * brow[l];
                y[j] += s;
            }
        }
    } else if (ta && !tb) {
        for (std::size_t l = 0; l < k; ++l) {
            const T* arow = A + l * m;
            const T* brow = B + l * n;
            for (std::size_t i = 0; i < m; ++i) {
                const T av = arow[i];
                T* y = Y + i * n;
                for (std::size_t j = 0; j < n; ++j) y[j] += av * brow[j];
            }
        }
    } else {
        for (std::size_t i = 0; i < m; ++i) {
            T* y = Y + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                const T* brow = B + j * k;
                T s = 0;
                for (std::size_t l = 0; l < k; ++l) s += A[l * m + i] * brow[l];
                y[j] += s;
            }
        }
    }
}

struct MatmulPlan {
    Shape lead;                          // broadcast leading dims
    std::vector<std::size_t> a_step;     // per leading dim, element step into a
    std::vector<std::size_t> b_step;
    std::size_t m, k, n;
    std::size_t a_block, b_block, y_block;
};

inline MatmulPlan matmul_plan(const Shape& ashape, const Shape& bshape, bool ta, bool tb) {
    if (ashape.size() < 2 || bshape.size() < 2)
        throw std::invalid_argument("matmul: operands must have rank >= 2, got " + shape_str(ashape) +
                                    " and " + shape_str(bshape));
    MatmulPlan p;
    const std::size_t ar1 = ashape[ashape.size() - 2], ar2 = ashape.back();
    const std::size_t br1 = bshape[bshape.size() - 2], br2 = bshape.back();
    p.m = ta ? ar2 : ar1;
    p.k = ta ? ar1 : ar2;
    const std::size_t kb = tb ? br2 : br1;
    p.n = tb ? br1 : br2;
    if (p.k != kb)
        throw std::invalid_argument("matmul: inner extents differ, " + shape_str(ashape) + " x " +
                                    shape_str(bshape));
    Shape alead(ashape.begin(), ashape.end() - 2);
    Shape blead(bshape.begin(), bshape.end() - 2);
    p.lead = broadcast_shapes(alead, blead, "matmul");
    p.a_block = ar1 * ar2;
    p.b_block = br1 * br2;
    p.y_block = p.m * p.n;
    auto sa = aligned_strides(alead, p.lead, "matmul");
    auto sb = aligned_strides(blead, p.lead, "matmul");
    for (auto& s : sa) s *= p.a_block;
    for (auto& s : sb) s *= p.b_block;
    p.a_step = std::move(sa);
    p.b_step = std::move(sb);
    return p;
}

// Runs gemm over every broadcast batch. y_step zeros make batches accumulate
// into a shared output block (used for gradient reduction).
template <typename T>
inline void batched_gemm_acc(const T* a, const T* b, T* y, const Shape& lead,
                             const std::vector<std::size_t>& a_step, const std::vector<std::size_t>& b_step,
                             const std::vector<std::size_t>& y_step, std::size_t m, std::size_t k,
                             std::size_t n, bool ta, bool tb) {
    if (lead.empty()) {
        gemm_acc(a, b, y, m, k, n, ta, tb);
        return;
    }
    for_each_offsets<3>(lead, {a_step.data(), b_step.data(), y_step.data()},
                        [&](const std::array<std::size_t, 3>& off) {
                            gemm_acc(a + off[0], b + off[1], y + off[2], m, k, n, ta, tb);
                        });
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool ta = false, bool tb = false) {
    const auto plan = detail::matmul_plan(a.shape(), b.shape(), ta, tb);
    Shape oshape = plan.lead;
    oshape.push_back(plan.m);
    oshape.push_back(plan.n);
    Tensor<T> out(oshape);

    std::vector<std::size_t> y_step(plan.lead.size());
    {
        const auto dense = row_major_strides(plan.lead);
        for (std::size_t i = 0; i < y_step.size(); ++i) y_step[i] = dense[i] * plan.y_block;
    }
    detail::batched_gemm_acc(a.data(), b.data(), out.data(), plan.lead, plan.a_step, plan.b_step, y_step,
                             plan.m, plan.k, plan.n, ta, tb);

    if (detail::taping<T>({&a, &b})) {
        out.set_requires_grad(true);
        auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
        Tape<T>::current()->record(
            [ad, bd, od, plan, y_step, ta, tb]() {
                const T* g = od->grad.data();
                if (ad->requires_grad) {
                    // dA = dY * opB(B)^T, transposed back into A's storage layout.
                    if (!ta) {
                        detail::batched_gemm_acc(g, bd->values.data(), ad->grad.data(), plan.lead, y_step,
                                                 plan.b_step, plan.a_step, plan.m, plan.n, plan.k, false, !tb);
                    } else {
                        detail::batched_gemm_acc(bd->values.data(), g, ad->grad.data(), plan.lead, plan.b_step,
                                                 y_step, plan.a_step, plan.k, plan.n, plan.m, tb, true);
                    }
                }
                if (bd->requires_grad) {
                    if (!tb) {
                        detail::batched_gemm_acc(ad->values.data(), g, bd->grad.data(), plan.lead, plan.a_step,
                                                 y_step, plan.b_step, plan.k, plan.m, plan.n, !ta, false);
                    } else {
                        detail::batched_gemm_acc(g, ad->values.data(), bd->grad.data(), plan.lead, y_step,
                                                 plan.a_step, plan.b_step, plan.n, plan.m, plan.k, true, ta);
                    }
                }
            },
            {a.ptr(), b.ptr(), out.ptr()});
    }
    debug_check_finite(out, "matmul");
    return out;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
inline T sigmoid_scalar(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
inline T softplus_scalar(T x) {
    // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace detail

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t i = 0; i < x.size(); ++i) po[i] = detail::sigmoid_scalar(px[i]);
    if (detail::taping<T>({&x})) {
        out.set_requires_grad(true);
        auto xd = x.ptr(), od = out.ptr();
        Tape<T>::current()->record(
            [xd, od]() {
                if (!xd->requires_grad) return;
                const T* g = od->grad.data();
                const T* y = od->values.data();
                T* gx = xd->grad.data();
                for (std::size_t i = 0; i < xd->values.size(); ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
            },
            {x.ptr(), out.ptr()});
    }
    debug_check_finite(out, "sigmoid");
    return out;
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t i = 0; i < x.size(); ++i) po[i] = detail::softplus_scalar(px[i]);
    if (detail::taping<T>({&x})) {
        out.set_requires_grad(true);
        auto xd = x.ptr(), od = out.ptr();
        Tape<T>::current()->record(
            [xd, od]() {
                if (!xd->requires_grad) return;
                const T* g = od->grad.data();
                const T* px2 = xd->values.data();
                T* gx = xd->grad.data();
                for (std::size_t i = 0; i < xd->values.size(); ++i)
                    gx[i] += g[i] * detail::sigmoid_scalar(px2[i]);
            },
            {x.ptr(), out.ptr()});
    }
    debug_check_finite(out, "softplus");
    return out;
}

// Exact (erf-based) GeLU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr double kInvSqrt2 = 0.7071067811865475244;
    constexpr double kInvSqrt2Pi = 0.3989422804014326779;
    Tensor<T> out(x.shape());
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = static_cast<double>(px[i]);
        po[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * kInvSqrt2)));
    }
    if (detail::taping<T>({&x})) {
        out.set_requires_grad(true);
        auto xd = x.ptr(), od = out.ptr();
        Tape<T>::current()->record(
            [xd, od]() {
                if (!xd->requires_grad) return;
                const T* g = od->grad.data();
                const T* px2 = xd->values.data();
                T* gx = xd->grad.data();
                for (std::size_t i = 0; i < xd->values.size(); ++i) {
                    const double v = static_cast<double>(px2[i]);
                    const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                    gx[i] += g[i] * static_cast<T>(cdf + v * pdf);
                }
            },
            {x.ptr(), out.ptr()});
    }
    debug_check_finite(out, "gelu");
    return out;
}

// ---------------------------------------------------------------------------
// Softmax over the last axis with an optional hard support mask.
// ---------------------------------------------------------------------------

struct BoolMask {
    Shape shape;
    std::vector<std::uint8_t> on;

    BoolMask() = default;
    BoolMask(Shape s, std::vector<std::uint8_t> v) : shape(std::move(s)), on(std::move(v)) {
        if (on.size() != numel(shape)) throw std::invalid_argument("BoolMask: size mismatch");
    }
};

template <typename T>
Tensor<T> softmax_last(const Tensor<T>& x, const BoolMask* support = nullptr) {
    if (x.rank() == 0) throw std::invalid_argument("softmax_last: scalar input");
    const std::size_t cols = x.shape().back();
    const std::size_t rows = x.size() / cols;

    std::vector<std::size_t> sup_stride;
    if (support) {
        if (support->shape.empty() || support->shape.back() != cols)
            throw std::invalid_argument("softmax_last: support last extent " +
                                        shape_str(support->shape) + " vs cols " + std::to_string(cols));
        sup_stride = aligned_strides(support->shape, x.shape(), "softmax_last");
    }

    Tensor<T> out(x.shape());
    const T* px = x.data();
    T* po = out.data();

    // Per-row support base offsets, derived once (rows iterate leading dims).
    std::vector<std::size_t> sup_base;
    if (support) {
        sup_base.resize(rows);
        Shape lead(x.shape().begin(), x.shape().end() - 1);
        std::vector<std::size_t> lead_stride(sup_stride.begin(), sup_stride.end() - 1);
        std::size_t r = 0;
        if (lead.empty()) {
            sup_base[0] = 0;
        } else {
            for_each_offsets<1>(lead, {lead_stride.data()},
                                [&](const std::array<std::size_t, 1>& off) { sup_base[r++] = off[0]; });
        }
    }
    const std::size_t sup_last = support ? sup_stride.back() : 0;

    for (std::size_t r = 0; r < rows; ++r) {
        const T* xin = px + r * cols;
        T* yout = po + r * cols;
        const std::uint8_t* sup = support ? support->on.data() + sup_base[r] : nullptr;
        T mx = -std::numeric_limits<T>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < cols; ++j) {
            if (sup && !sup[j * sup_last]) continue;
            any = true;
            mx = std::max(mx, xin[j]);
        }
        if (!any) throw std::invalid_argument("softmax_last: support row " + std::to_string(r) + " is empty");
        T sum = 0;
        for (std::size_t j = 0; j < cols; ++j) {
            if (sup && !sup[j * sup_last]) {
                yout[j] = T(0);
                continue;
            }
            yout[j] = std::exp(xin[j] - mx);
            sum += yout[j];
        }
        const T inv = T(1) / sum;
        for (std::size_t j = 0; j < cols; ++j) yout[j] *= inv;
    }

    if (detail::taping<T>({&x})) {
        out.set_requires_grad(true);
        auto xd = x.ptr(), od = out.ptr();
        Tape<T>::current()->record(
            [xd, od, rows, cols]() {
                if (!xd->requires_grad) return;
                const T* g = od->grad.data();
                const T* y = od->values.data();
                T* gx = xd->grad.data();
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* yr = y + r * cols;
                    const T* gr = g + r * cols;
                    T dot = 0;
                    for (std::size_t j = 0; j < cols; ++j) dot += yr[j] * gr[j];
                    T* gxr = gx + r * cols;
                    for (std::size_t j = 0; j < cols; ++j) gxr[j] += yr[j] * (gr[j] - dot);
                }
            },
            {x.ptr(), out.ptr()});
    }
    debug_check_finite(out, "softmax_last");
    return out;
}

// ---------------------------------------------------------------------------
// Layer normalization over the last axis (population variance).
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> layer_norm_last(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                          T eps = T(1e-5)) {
    if (x.rank() == 0) throw std::invalid_argument("layer_norm_last: scalar input");
    const std::size_t cols = x.shape().back();
    if (gain.size() != cols || bias.size() != cols)
        throw std::invalid_argument("layer_norm_last: gain/bias extent must equal last axis (" +
                                    std::to_string(cols) + "), got " + shape_str(gain.shape()) + " / " +
                                    shape_str(bias.shape()));
    const std::size_t rows = x.size() / cols;
    Tensor<T> out(x.shape());
    std::vector<T> xhat(x.size());
    std::vector<T> invstd(rows);
    const T* px = x.data();
    const T* pg = gain.data();
    const T* pb = bias.data();
    T* po = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = px + r * cols;
        T mu = 0;
        for (std::size_t j = 0; j < cols; ++j) mu += xr[j];
        mu /= static_cast<T>(cols);
        T var = 0;
        for (std::size_t j = 0; j < cols; ++j) {
            const T d = xr[j] - mu;
            var += d * d;
        }
        var /= static_cast<T>(cols);
        const T is = T(1) / std::sqrt(var + eps);
        invstd[r] = is;
        T* xh = xhat.data() + r * cols;
        T* yr = po + r * cols;
        for (std::size_t j = 0; j < cols; ++j) {
            xh[j] = (xr[j] - mu) * is;
            yr[j] = pg[j] * xh[j] + pb[j];
        }
    }
    if (detail::taping<T>({&x, &gain, &bias})) {
        out.set_requires_grad(true);
        auto xd = x.ptr(), gd = gain.ptr(), bd = bias.ptr(), od = out.ptr();
        auto xhat_s = std::make_shared<std::vector<T>>(std::move(xhat));
        auto invstd_s = std::make_shared<std::vector<T>>(std::move(invstd));
        Tape<T>::current()->record(
            [xd, gd, bd, od, xhat_s, invstd_s, rows, cols]() {
                const T* g = od->grad.data();
                const T* xh = xhat_s->data();
                const T* pg2 = gd->values.data();
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* gr = g + r * cols;
                    const T* xhr = xh + r * cols;
                    if (gd->requires_grad || bd->requires_grad) {
                        for (std::size_t j = 0; j < cols; ++j) {
                            if (gd->requires_grad) gd->grad[j] += gr[j] * xhr[j];
                            if (bd->requires_grad) bd->grad[j] += gr[j];
                        }
                    }
                    if (xd->requires_grad) {
                        // dxhat = g * gain; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * invstd
                        T mean_dxh = 0, mean_dxh_xh = 0;
                        for (std::size_t j = 0; j < cols; ++j) {
                            const T dxh = gr[j] * pg2[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhr[j];
                        }
                        mean_dxh /= static_cast<T>(cols);
                        mean_dxh_xh /= static_cast<T>(cols);
                        const T is = (*invstd_s)[r];
                        T* gxr = xd->grad.data() + r * cols;
                        for (std::size_t j = 0; j < cols; ++j) {
                            const T dxh = gr[j] * pg2[j];
                            gxr[j] += (dxh - mean_dxh - xhr[j] * mean_dxh_xh) * is;
                        }
                    }
                }
            },
            {x.ptr(), gain.ptr(), bias.ptr(), out.ptr()});
    }
    debug_check_finite(out, "layer_norm_last");
    return out;
}

// ---------------------------------------------------------------------------
// Sliding-window patch partition: [B,N,T] -> [B,N,P,M], patch p = [pS, pS+M).
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> partition_patches(const Tensor<T>& x, std::size_t patch_len, std::size_t stride) {
    if (x.rank() != 3)
        throw std::invalid_argument("partition_patches: want [B,N,T], got " + shape_str(x.shape()));
    const std::size_t B = x.shape()[0], N = x.shape()[1], Tlen = x.shape()[2];
    if (patch_len == 0 || stride == 0 || patch_len > Tlen)
        throw std::invalid_argument("partition_patches: invalid patch_len/stride for T=" +
                                    std::to_string(Tlen));
    if ((Tlen - patch_len) % stride != 0)
        throw std::invalid_argument("partition_patches: (T - M) must be divisible by S; T=" +
                                    std::to_string(Tlen) + " M=" + std::to_string(patch_len) +
                                    " S=" + std::to_string(stride));
    const std::size_t P = (Tlen - patch_len) / stride + 1;
    Tensor<T> out(Shape{B, N, P, patch_len});
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t bn = 0; bn < B * N; ++bn) {
        const T* series = px + bn * Tlen;
        T* dst = po + bn * P * patch_len;
        for (std::size_t p = 0; p < P; ++p)
            std::copy(series + p * stride, series + p * stride + patch_len, dst + p * patch_len);
    }
    if (detail::taping<T>({&x})) {
        out.set_requires_grad(true);
        auto xd = x.ptr(), od = out.ptr();
        Tape<T>::current()->record(
            [xd, od, B, N, Tlen, P, patch_len, stride]() {
                if (!xd->requires_grad) return;
                const T* g = od->grad.data();
                T* gx = xd->grad.data();
                for (std::size_t bn = 0; bn < B * N; ++bn) {
                    T* gs = gx + bn * Tlen;
                    const T* gp = g + bn * P * patch_len;
                    for (std::size_t p = 0; p < P; ++p)
                        for (std::size_t mth = 0; mth < patch_len; ++mth)
                            gs[p * stride + mth] += gp[p * patch_len + mth];
                }
            },
            {x.ptr(), out.ptr()});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    T s = 0;
    const T* px = x.data();
    for (std::size_t i = 0; i < x.size(); ++i) s += px[i];
    Tensor<T> out = Tensor<T>::scalar(s);
    if (detail::taping<T>({&x})) {
        out.set_requires_grad(true);
        auto xd = x.ptr(), od = out.ptr();
        Tape<T>::current()->record(
            [xd, od]() {
                if (!xd->requires_grad) return;
                const T g = od->grad[0];
                T* gx = xd->grad.data();
                for (std::size_t i = 0; i < xd->values.size(); ++i) gx[i] += g;
            },
            {x.ptr(), out.ptr()});
    }
    return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    if (x.size() == 0) throw std::invalid_argument("mean_all: empty tensor");
    return scale(sum_all(x), T(1) / static_cast<T>(x.size()));
}

// Mean absolute error; the subgradient at zero residual is zero.
template <typename T>
Tensor<T> mae_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    if (pred.shape() != target.shape())
        throw std::invalid_argument("mae_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                                    shape_str(target.shape()));
    if (pred.size() == 0) throw std::invalid_argument("mae_loss: empty input");
    const T* pp = pred.data();
    const T* pt = target.data();
    T s = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pp[i] - pt[i]);
    Tensor<T> out = Tensor<T>::scalar(s / static_cast<T>(pred.size()));
    if (detail::taping<T>({&pred, &target})) {
        out.set_requires_grad(true);
        auto pd = pred.ptr(), td = target.ptr(), od = out.ptr();
        Tape<T>::current()->record(
            [pd, td, od]() {
                const T g = od->grad[0] / static_cast<T>(pd->values.size());
                const T* pp2 = pd->values.data();
                const T* pt2 = td->values.data();
                for (std::size_t i = 0; i < pd->values.size(); ++i) {
                    const T r = pp2[i] - pt2[i];
                    const T sgn = r > T(0) ? T(1) : (r < T(0) ? T(-1) : T(0));
                    if (pd->requires_grad) pd->grad[i] += g * sgn;
                    if (td->requires_grad) td->grad[i] -= g * sgn;
                }
            },
            {pred.ptr(), target.ptr(), out.ptr()});
    }
    return out;
}

}  // namespace flownet
