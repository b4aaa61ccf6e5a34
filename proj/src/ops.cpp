#include "ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace moelab::ops {

namespace {

bool rec_needed(std::initializer_list<const Tensor*> ins) {
    if (!grad_enabled()) return false;
    for (const Tensor* t : ins) {
        if (t->requires_grad()) return true;
    }
    return false;
}

void attach(Tensor& out, std::string op, std::vector<Tensor> inputs,
            std::function<void(TensorImpl&)> bwd) {
    auto node = std::make_shared<GradNode>();
    node->op = std::move(op);
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.impl());
    node->backward = std::move(bwd);
    out.impl()->node = std::move(node);
    out.impl()->requires_grad = true;
}

void check_dtype(const char* op, const Tensor& a, const Tensor& b) {
    if (a.dtype() != b.dtype()) {
        fail(std::string(op) + ": dtype mismatch " + dtype_name(a.dtype()) + " vs " +
             dtype_name(b.dtype()));
    }
}

int norm_axis(const char* op, int axis, size_t rank) {
    int r = static_cast<int>(rank);
    int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
        fail(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
             std::to_string(r));
    }
    return a;
}

// ---- broadcasting ---------------------------------------------------------

struct BcastPlan {
    Shape out;
    std::vector<int64_t> sa, sb; // per-out-dim element strides (0 on broadcast dims)
    int64_t n = 0;
    bool same = false;
};

BcastPlan make_bcast(const char* op, const Shape& a, const Shape& b) {
    BcastPlan p;
    if (a == b) {
        p.out = a;
        p.n = shape_numel(a);
        p.same = true;
        return p;
    }
    const size_t ra = a.size(), rb = b.size();
    const size_t r = std::max(ra, rb);
    p.out.resize(r);
    p.sa.assign(r, 0);
    p.sb.assign(r, 0);
    const auto na = row_major_strides(a);
    const auto nb = row_major_strides(b);
    for (size_t i = 0; i < r; ++i) {
        const int64_t da = i < r - ra ? 1 : a[i - (r - ra)];
        const int64_t db = i < r - rb ? 1 : b[i - (r - rb)];
        if (da != db && da != 1 && db != 1) {
            fail(std::string(op) + ": shapes not broadcastable " + shape_str(a) + " vs " +
                 shape_str(b));
        }
        p.out[i] = std::max(da, db);
        if (i >= r - ra && !(da == 1 && p.out[i] != 1)) p.sa[i] = na[i - (r - ra)];
        if (i >= r - rb && !(db == 1 && p.out[i] != 1)) p.sb[i] = nb[i - (r - rb)];
    }
    p.n = shape_numel(p.out);
    return p;
}

// Flat iteration over `shape`, tracking two offsets with given strides.
template <typename F>
void for_each2(const Shape& shape, const std::vector<int64_t>& s1,
               const std::vector<int64_t>& s2, F&& f) {
    const size_t r = shape.size();
    const int64_t n = shape_numel(shape);
    if (r == 0) {
        if (n == 1) f(int64_t{0}, int64_t{0}, int64_t{0});
        return;
    }
    std::vector<int64_t> idx(r, 0);
    int64_t o1 = 0, o2 = 0;
    for (int64_t i = 0; i < n; ++i) {
        f(i, o1, o2);
        for (size_t d = r; d-- > 0;) {
            ++idx[d];
            o1 += s1[d];
            o2 += s2[d];
            if (idx[d] < shape[d]) break;
            o1 -= s1[d] * shape[d];
            o2 -= s2[d] * shape[d];
            idx[d] = 0;
        }
    }
}

template <typename T, typename F>
void bcast_apply(const BcastPlan& p, const T* a, const T* b, T* out, F&& f) {
    if (p.same) {
        for (int64_t i = 0; i < p.n; ++i) out[i] = f(a[i], b[i]);
        return;
    }
    for_each2(p.out, p.sa, p.sb,
              [&](int64_t i, int64_t oa, int64_t ob) { out[i] = f(a[oa], b[ob]); });
}

// Sum `g` (shape gs) into `tgt` (shape ts, right-aligned, extents equal or 1).
template <typename T>
void reduce_into(const T* g, const Shape& gs, T* tgt, const Shape& ts) {
    if (gs == ts) {
        const int64_t n = shape_numel(gs);
        for (int64_t i = 0; i < n; ++i) tgt[i] += g[i];
        return;
    }
    const size_t r = gs.size(), rt = ts.size();
    std::vector<int64_t> st(r, 0);
    const auto nat = row_major_strides(ts);
    for (size_t i = 0; i < r; ++i) {
        if (i < r - rt) continue;
        const size_t j = i - (r - rt);
        if (!(ts[j] == 1 && gs[i] != 1)) st[i] = nat[j];
    }
    const std::vector<int64_t> zero(r, 0);
    for_each2(gs, st, zero, [&](int64_t i, int64_t ot, int64_t) { tgt[ot] += g[i]; });
}

// ---- gemm kernels (sequential, fixed order) -------------------------------

// C(M,N) += A(M,K) @ B(K,N)
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N) {
    for (int64_t i = 0; i < M; ++i) {
        const T* arow = a + i * K;
        T* crow = c + i * N;
        for (int64_t k = 0; k < K; ++k) {
            const T av = arow[k];
            const T* brow = b + k * N;
            for (int64_t j = 0; j < N; ++j) crow[j] += av * brow[j];
        }
    }
}

// C(M,K) += G(M,N) @ B(K,N)^T
template <typename T>
void gemm_nt(const T* g, const T* b, T* c, int64_t M, int64_t N, int64_t K) {
    for (int64_t i = 0; i < M; ++i) {
        const T* grow = g + i * N;
        T* crow = c + i * K;
        for (int64_t k = 0; k < K; ++k) {
            const T* brow = b + k * N;
            T acc = 0;
            for (int64_t j = 0; j < N; ++j) acc += grow[j] * brow[j];
            crow[k] += acc;
        }
    }
}

// C(K,N) += A(M,K)^T @ G(M,N)
template <typename T>
void gemm_tn(const T* a, const T* g, T* c, int64_t M, int64_t K, int64_t N) {
    for (int64_t i = 0; i < M; ++i) {
        const T* arow = a + i * K;
        const T* grow = g + i * N;
        for (int64_t k = 0; k < K; ++k) {
            const T av = arow[k];
            T* crow = c + k * N;
            for (int64_t j = 0; j < N; ++j) crow[j] += av * grow[j];
        }
    }
}

template <typename T> T* grad_ptr(TensorImpl& t) { return t.grads<T>().data(); }

// Generic elementwise unary op with value-based backward:
//   out[i] = fwd(x[i]);  dx[i] += dfn(x[i], out[i]) * g[i]
template <typename Fwd, typename Dfn>
Tensor unary_op(const char* name, const Tensor& x, Fwd fwd, Dfn dfn) {
    Tensor out = Tensor::zeros(x.shape(), x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto in = x.vals<T>();
        auto o = out.vals<T>();
        for (size_t i = 0; i < in.size(); ++i) o[i] = static_cast<T>(fwd(static_cast<double>(in[i])));
    });
    if (rec_needed({&x})) {
        attach(out, name, {x}, [xi = x.impl(), dfn](TensorImpl& o) {
            dispatch(o.dtype, [&](auto tag) {
                using T = decltype(tag);
                auto in = xi->vals<T>();
                auto ov = o.vals<T>();
                auto gr = o.grads<T>();
                T* dst = grad_ptr<T>(*xi);
                for (size_t i = 0; i < in.size(); ++i) {
                    dst[i] += static_cast<T>(
                        dfn(static_cast<double>(in[i]), static_cast<double>(ov[i])) *
                        static_cast<double>(gr[i]));
                }
            });
        });
    }
    return out;
}

template <typename T>
void binary_backward_sides(TensorImpl& o, const std::shared_ptr<TensorImpl>& ai,
                           const std::shared_ptr<TensorImpl>& bi, const BcastPlan& plan,
                           bool needs_a, bool needs_b, auto da_fn, auto db_fn) {
    auto g = o.grads<T>();
    const T* av = ai->vals<T>().data();
    const T* bv = bi->vals<T>().data();
    if (plan.same) {
        if (needs_a) {
            T* dst = grad_ptr<T>(*ai);
            for (int64_t i = 0; i < plan.n; ++i) dst[i] += da_fn(g[i], av[i], bv[i]);
        }
        if (needs_b) {
            T* dst = grad_ptr<T>(*bi);
            for (int64_t i = 0; i < plan.n; ++i) dst[i] += db_fn(g[i], av[i], bv[i]);
        }
        return;
    }
    std::vector<T> tmp(static_cast<size_t>(plan.n));
    if (needs_a) {
        for_each2(plan.out, plan.sa, plan.sb, [&](int64_t i, int64_t oa, int64_t ob) {
            tmp[static_cast<size_t>(i)] = da_fn(g[i], av[oa], bv[ob]);
        });
        reduce_into(tmp.data(), plan.out, grad_ptr<T>(*ai), ai->shape);
    }
    if (needs_b) {
        for_each2(plan.out, plan.sa, plan.sb, [&](int64_t i, int64_t oa, int64_t ob) {
            tmp[static_cast<size_t>(i)] = db_fn(g[i], av[oa], bv[ob]);
        });
        reduce_into(tmp.data(), plan.out, grad_ptr<T>(*bi), bi->shape);
    }
}

template <typename FwdFn, typename DaFn, typename DbFn>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, FwdFn fwd, DaFn da,
                 DbFn db) {
    check_dtype(name, a, b);
    const BcastPlan plan = make_bcast(name, a.shape(), b.shape());
    Tensor out = Tensor::zeros(plan.out, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        bcast_apply<T>(plan, a.vals<T>().data(), b.vals<T>().data(), out.vals<T>().data(),
                       [&](T x, T y) { return fwd(x, y); });
    });
    if (rec_needed({&a, &b})) {
        const bool na = a.requires_grad();
        const bool nb = b.requires_grad();
        attach(out, name, {a, b},
               [ai = a.impl(), bi = b.impl(), plan, na, nb, da, db](TensorImpl& o) {
                   dispatch(o.dtype, [&](auto tag) {
                       using T = decltype(tag);
                       binary_backward_sides<T>(
                           o, ai, bi, plan, na, nb,
                           [&](T g, T x, T y) { return static_cast<T>(da(g, x, y)); },
                           [&](T g, T x, T y) { return static_cast<T>(db(g, x, y)); });
                   });
               });
    }
    return out;
}

int64_t prod_range(const Shape& s, size_t from, size_t to) {
    int64_t p = 1;
    for (size_t i = from; i < to; ++i) p *= s[i];
    return p;
}

} // namespace

// ---- matmul ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_dtype("matmul", a, b);
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    const size_t ra = sa.size(), rb = sb.size();
    const bool ok2x2 = ra == 2 && rb == 2 && sa[1] == sb[0];
    const bool ok3x3 = ra == 3 && rb == 3 && sa[0] == sb[0] && sa[2] == sb[1];
    const bool ok3x2 = ra == 3 && rb == 2 && sa[2] == sb[0];
    if (!ok2x2 && !ok3x3 && !ok3x2) {
        fail("matmul: shape mismatch " + shape_str(sa) + " @ " + shape_str(sb));
    }
    const int64_t B = ra == 3 ? sa[0] : 1;
    const int64_t M = sa[ra - 2], K = sa[ra - 1];
    const int64_t N = sb[rb - 1];
    Shape out_shape = ra == 3 ? Shape{B, M, N} : Shape{M, N};
    Tensor out = Tensor::zeros(out_shape, a.dtype());

    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* ap = a.vals<T>().data();
        const T* bp = b.vals<T>().data();
        T* op = out.vals<T>().data();
        for (int64_t i = 0; i < B; ++i) {
            gemm_nn(ap + i * M * K, ok3x3 ? bp + i * K * N : bp, op + i * M * N, M, K, N);
        }
    });

    if (rec_needed({&a, &b})) {
        const bool na = a.requires_grad();
        const bool nb = b.requires_grad();
        attach(out, "matmul", {a, b},
               [ai = a.impl(), bi = b.impl(), B, M, K, N, ok3x3, na, nb](TensorImpl& o) {
                   dispatch(o.dtype, [&](auto tag) {
                       using T = decltype(tag);
                       const T* g = o.grads<T>().data();
                       const T* ap = ai->vals<T>().data();
                       const T* bp = bi->vals<T>().data();
                       if (na) {
                           T* da = grad_ptr<T>(*ai);
                           for (int64_t i = 0; i < B; ++i) {
                               gemm_nt(g + i * M * N, ok3x3 ? bp + i * K * N : bp,
                                       da + i * M * K, M, N, K);
                           }
                       }
                       if (nb) {
                           T* db = grad_ptr<T>(*bi);
                           for (int64_t i = 0; i < B; ++i) {
                               gemm_tn(ap + i * M * K, g + i * M * N,
                                       ok3x3 ? db + i * K * N : db, M, K, N);
                           }
                       }
                   });
               });
    }
    return out;
}

// ---- elementwise binaries --------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        "add", a, b, [](auto x, auto y) { return x + y; },
        [](double g, double, double) { return g; }, [](double g, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        "sub", a, b, [](auto x, auto y) { return x - y; },
        [](double g, double, double) { return g; }, [](double g, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        "mul", a, b, [](auto x, auto y) { return x * y; },
        [](double g, double, double y) { return g * y; },
        [](double g, double x, double) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        "div", a, b, [](auto x, auto y) { return x / y; },
        [](double g, double, double y) { return g / y; },
        [](double g, double x, double y) { return -g * x / (y * y); });
}

Tensor scale(const Tensor& a, double c) {
    return unary_op(
        "scale", a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

// ---- gather / scatter ------------------------------------------------------

namespace {

Tensor index_select_impl(const char* name, const Tensor& x, int axis,
                         const std::vector<int64_t>& idx) {
    const int ax = norm_axis(name, axis, x.rank());
    const Shape& s = x.shape();
    const int64_t extent = s[ax];
    for (int64_t id : idx) {
        if (id < 0 || id >= extent) {
            fail(std::string(name) + ": index " + std::to_string(id) + " out of range for " +
                 (std::string(name) == "embedding" ? "vocab " : "extent ") +
                 std::to_string(extent));
        }
    }
    Shape out_shape = s;
    out_shape[ax] = static_cast<int64_t>(idx.size());
    const int64_t outer = prod_range(s, 0, ax);
    const int64_t inner = prod_range(s, ax + 1, s.size());
    Tensor out = Tensor::zeros(out_shape, x.dtype());

    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* in = x.vals<T>().data();
        T* op = out.vals<T>().data();
        const int64_t k = static_cast<int64_t>(idx.size());
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t i = 0; i < k; ++i) {
                std::memcpy(op + (o * k + i) * inner, in + (o * extent + idx[i]) * inner,
                            static_cast<size_t>(inner) * sizeof(T));
            }
        }
    });

    if (rec_needed({&x})) {
        attach(out, name, {x}, [xi = x.impl(), idx, outer, inner, extent](TensorImpl& o) {
            dispatch(o.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* g = o.grads<T>().data();
                T* dst = grad_ptr<T>(*xi);
                const int64_t k = static_cast<int64_t>(idx.size());
                for (int64_t ou = 0; ou < outer; ++ou) {
                    for (int64_t i = 0; i < k; ++i) {
                        const T* grow = g + (ou * k + i) * inner;
                        T* drow = dst + (ou * extent + idx[i]) * inner;
                        for (int64_t j = 0; j < inner; ++j) drow[j] += grow[j];
                    }
                }
            });
        });
    }
    return out;
}

} // namespace

Tensor embedding(const Tensor& table, const std::vector<int64_t>& ids) {
    if (table.rank() != 2) fail("embedding: table must be rank 2, got " + shape_str(table.shape()));
    return index_select_impl("embedding", table, 0, ids);
}

Tensor index_select(const Tensor& x, int axis, const std::vector<int64_t>& idx) {
    return index_select_impl("index_select", x, axis, idx);
}

Tensor scatter_add(const Tensor& x, int axis, const std::vector<int64_t>& idx,
                   int64_t out_extent) {
    const int ax = norm_axis("scatter_add", axis, x.rank());
    const Shape& s = x.shape();
    if (s[ax] != static_cast<int64_t>(idx.size())) {
        fail("scatter_add: axis extent " + std::to_string(s[ax]) + " != index count " +
             std::to_string(idx.size()));
    }
    for (int64_t id : idx) {
        if (id < 0 || id >= out_extent) {
            fail("scatter_add: index " + std::to_string(id) + " out of range for extent " +
                 std::to_string(out_extent));
        }
    }
    Shape out_shape = s;
    out_shape[ax] = out_extent;
    const int64_t outer = prod_range(s, 0, ax);
    const int64_t inner = prod_range(s, ax + 1, s.size());
    const int64_t k = static_cast<int64_t>(idx.size());
    Tensor out = Tensor::zeros(out_shape, x.dtype());

    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* in = x.vals<T>().data();
        T* op = out.vals<T>().data();
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t i = 0; i < k; ++i) {
                const T* src = in + (o * k + i) * inner;
                T* dst = op + (o * out_extent + idx[i]) * inner;
                for (int64_t j = 0; j < inner; ++j) dst[j] += src[j];
            }
        }
    });

    if (rec_needed({&x})) {
        attach(out, "scatter_add", {x}, [xi = x.impl(), idx, outer, inner, out_extent,
                                         k](TensorImpl& o) {
            dispatch(o.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* g = o.grads<T>().data();
                T* dst = grad_ptr<T>(*xi);
                for (int64_t ou = 0; ou < outer; ++ou) {
                    for (int64_t i = 0; i < k; ++i) {
                        const T* grow = g + (ou * out_extent + idx[i]) * inner;
                        T* drow = dst + (ou * k + i) * inner;
                        for (int64_t j = 0; j < inner; ++j) drow[j] += grow[j];
                    }
                }
            });
        });
    }
    return out;
}

Tensor gather_last(const Tensor& x, const std::vector<int64_t>& idx, int64_t k) {
    if (x.rank() < 1) fail("gather_last: rank must be >= 1");
    const Shape& s = x.shape();
    const int64_t E = s.back();
    const int64_t rows = x.numel() / E;
    if (static_cast<int64_t>(idx.size()) != rows * k) {
        fail("gather_last: need rows*k = " + std::to_string(rows * k) + " indices, got " +
             std::to_string(idx.size()));
    }
    for (int64_t id : idx) {
        if (id < 0 || id >= E) fail("gather_last: index out of range");
    }
    Shape out_shape = s;
    out_shape.back() = k;
    Tensor out = Tensor::zeros(out_shape, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* in = x.vals<T>().data();
        T* op = out.vals<T>().data();
        for (int64_t r = 0; r < rows; ++r) {
            for (int64_t j = 0; j < k; ++j) op[r * k + j] = in[r * E + idx[r * k + j]];
        }
    });
    if (rec_needed({&x})) {
        attach(out, "gather_last", {x}, [xi = x.impl(), idx, rows, k, E](TensorImpl& o) {
            dispatch(o.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* g = o.grads<T>().data();
                T* dst = grad_ptr<T>(*xi);
                for (int64_t r = 0; r < rows; ++r) {
                    for (int64_t j = 0; j < k; ++j) dst[r * E + idx[r * k + j]] += g[r * k + j];
                }
            });
        });
    }
    return out;
}

// ---- softmax family --------------------------------------------------------

Tensor softmax(const Tensor& x) {
    if (x.rank() < 1) fail("softmax: rank must be >= 1");
    const int64_t C = x.shape().back();
    const int64_t rows = x.numel() / C;
    Tensor out = Tensor::zeros(x.shape(), x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* in = x.vals<T>().data();
        T* op = out.vals<T>().data();
        for (int64_t r = 0; r < rows; ++r) {
            const T* row = in + r * C;
            T* orow = op + r * C;
            T mx = row[0];
            for (int64_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
            T sum = 0;
            for (int64_t c = 0; c < C; ++c) {
                orow[c] = std::exp(row[c] - mx);
                sum += orow[c];
            }
            const T inv = T(1) / sum;
            for (int64_t c = 0; c < C; ++c) orow[c] *= inv;
        }
    });
    if (rec_needed({&x})) {
        attach(out, "softmax", {x}, [xi = x.impl(), rows, C](TensorImpl& o) {
            dispatch(o.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* g = o.grads<T>().data();
                const T* p = o.vals<T>().data();
                T* dst = grad_ptr<T>(*xi);
                for (int64_t r = 0; r < rows; ++r) {
                    const T* grow = g + r * C;
                    const T* prow = p + r * C;
                    T dot = 0;
                    for (int64_t c = 0; c < C; ++c) dot += grow[c] * prow[c];
                    T* drow = dst + r * C;
                    for (int64_t c = 0; c < C; ++c) drow[c] += prow[c] * (grow[c] - dot);
                }
            });
        });
    }
    return out;
}

Tensor logsumexp(const Tensor& x) {
    if (x.rank() < 1) fail("logsumexp: rank must be >= 1");
    const int64_t C = x.shape().back();
    const int64_t rows = x.numel() / C;
    Shape out_shape(x.shape().begin(), x.shape().end() - 1);
    Tensor out = Tensor::zeros(out_shape, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* in = x.vals<T>().data();
        T* op = out.vals<T>().data();
        for (int64_t r = 0; r < rows; ++r) {
            const T* row = in + r * C;
            T mx = row[0];
            for (int64_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
            T sum = 0;
            for (int64_t c = 0; c < C; ++c) sum += std::exp(row[c] - mx);
            op[r] = mx + std::log(sum);
        }
    });
    if (rec_needed({&x})) {
        attach(out, "logsumexp", {x}, [xi = x.impl(), rows, C](TensorImpl& o) {
            dispatch(o.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* g = o.grads<T>().data();
                const T* in = xi->vals<T>().data();
                const T* lse = o.vals<T>().data();
                T* dst = grad_ptr<T>(*xi);
                for (int64_t r = 0; r < rows; ++r) {
                    const T* row = in + r * C;
                    T* drow = dst + r * C;
                    for (int64_t c = 0; c < C; ++c) {
                        drow[c] += g[r] * std::exp(row[c] - lse[r]);
                    }
                }
            });
        });
    }
    return out;
}

// ---- elementwise unaries ----------------------------------------------------

Tensor silu(const Tensor& x) {
    return unary_op(
        "silu", x, [](double v) { return v / (1.0 + std::exp(-v)); },
        [](double v, double) {
            const double s = 1.0 / (1.0 + std::exp(-v));
            return s * (1.0 + v * (1.0 - s));
        });
}

Tensor sigmoid(const Tensor& x) {
    return unary_op(
        "sigmoid", x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
        [](double, double o) { return o * (1.0 - o); });
}

Tensor rsqrt(const Tensor& x, double eps) {
    return unary_op(
        "rsqrt", x, [eps](double v) { return 1.0 / std::sqrt(v + eps); },
        [](double, double o) { return -0.5 * o * o * o; });
}

Tensor square(const Tensor& x) {
    return unary_op(
        "square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

// ---- reductions -------------------------------------------------------------

namespace {

Tensor reduce_axis(const char* name, const Tensor& x, int axis, bool keepdim, bool take_mean) {
    const int ax = norm_axis(name, axis, x.rank());
    const Shape& s = x.shape();
    const int64_t extent = s[ax];
    if (extent == 0) fail(std::string(name) + ": cannot reduce over empty axis");
    Shape out_shape;
    for (size_t i = 0; i < s.size(); ++i) {
        if (static_cast<int>(i) == ax) {
            if (keepdim) out_shape.push_back(1);
        } else {
            out_shape.push_back(s[i]);
        }
    }
    const int64_t outer = prod_range(s, 0, ax);
    const int64_t inner = prod_range(s, ax + 1, s.size());
    Tensor out = Tensor::zeros(out_shape, x.dtype());
    const double denom = take_mean ? static_cast<double>(extent) : 1.0;

    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* in = x.vals<T>().data();
        T* op = out.vals<T>().data();
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t e = 0; e < extent; ++e) {
                const T* src = in + (o * extent + e) * inner;
                T* dst = op + o * inner;
                for (int64_t j = 0; j < inner; ++j) dst[j] += src[j];
            }
        }
        if (take_mean) {
            const T inv = static_cast<T>(1.0 / denom);
            for (int64_t i = 0; i < out.numel(); ++i) op[i] *= inv;
        }
    });

    if (rec_needed({&x})) {
        attach(out, name, {x}, [xi = x.impl(), outer, inner, extent, denom](TensorImpl& o) {
            dispatch(o.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* g = o.grads<T>().data();
                T* dst = grad_ptr<T>(*xi);
                const T inv = static_cast<T>(1.0 / denom);
                for (int64_t ou = 0; ou < outer; ++ou) {
                    for (int64_t e = 0; e < extent; ++e) {
                        T* drow = dst + (ou * extent + e) * inner;
                        const T* grow = g + ou * inner;
                        for (int64_t j = 0; j < inner; ++j) drow[j] += grow[j] * inv;
                    }
                }
            });
        });
    }
    return out;
}

Tensor reduce_all(const char* name, const Tensor& x, bool take_mean) {
    const int64_t n = x.numel();
    if (n == 0) fail(std::string(name) + ": cannot reduce an empty tensor");
    Tensor out = Tensor::zeros({}, x.dtype());
    const double denom = take_mean ? static_cast<double>(n) : 1.0;
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* in = x.vals<T>().data();
        T acc = 0;
        for (int64_t i = 0; i < n; ++i) acc += in[i];
        out.vals<T>()[0] = static_cast<T>(acc / static_cast<T>(denom));
    });
    if (rec_needed({&x})) {
        attach(out, name, {x}, [xi = x.impl(), n, denom](TensorImpl& o) {
            dispatch(o.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T gv = o.grads<T>()[0] * static_cast<T>(1.0 / denom);
                T* dst = grad_ptr<T>(*xi);
                for (int64_t i = 0; i < n; ++i) dst[i] += gv;
            });
        });
    }
    return out;
}

} // namespace

Tensor sum(const Tensor& x, int axis, bool keepdim) {
    return reduce_axis("sum", x, axis, keepdim, false);
}
Tensor mean(const Tensor& x, int axis, bool keepdim) {
    return reduce_axis("mean", x, axis, keepdim, true);
}
Tensor sum_all(const Tensor& x) { return reduce_all("sum_all", x, false); }
Tensor mean_all(const Tensor& x) { return reduce_all("mean_all", x, true); }

// ---- shape ops ---------------------------------------------------------------

Tensor concat(const std::vector<Tensor>& xs, int axis) {
    if (xs.empty()) fail("concat: no inputs");
    const int ax = norm_axis("concat", axis, xs[0].rank());
    const Shape& s0 = xs[0].shape();
    int64_t total = 0;
    for (const Tensor& t : xs) {
        if (t.rank() != s0.size() || t.dtype() != xs[0].dtype()) {
            fail("concat: rank or dtype mismatch");
        }
        for (size_t i = 0; i < s0.size(); ++i) {
            if (static_cast<int>(i) != ax && t.shape()[i] != s0[i]) {
                fail("concat: shape mismatch " + shape_str(t.shape()) + " vs " + shape_str(s0));
            }
        }
        total += t.shape()[ax];
    }
    Shape out_shape = s0;
    out_shape[ax] = total;
    const int64_t outer = prod_range(s0, 0, ax);
    const int64_t inner = prod_range(s0, ax + 1, s0.size());
    Tensor out = Tensor::zeros(out_shape, xs[0].dtype());

    dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        T* op = out.vals<T>().data();
        int64_t off = 0;
        for (const Tensor& t : xs) {
            const int64_t ext = t.shape()[ax];
            const T* in = t.vals<T>().data();
            for (int64_t o = 0; o < outer; ++o) {
                std::memcpy(op + (o * total + off) * inner, in + o * ext * inner,
                            static_cast<size_t>(ext * inner) * sizeof(T));
            }
            off += ext;
        }
    });

    bool needs = false;
    for (const Tensor& t : xs) needs = needs || t.requires_grad();
    if (grad_enabled() && needs) {
        std::vector<std::shared_ptr<TensorImpl>> impls;
        std::vector<int64_t> extents;
        for (const Tensor& t : xs) {
            impls.push_back(t.impl());
            extents.push_back(t.shape()[ax]);
        }
        attach(out, "concat", xs, [impls, extents, outer, inner, total](TensorImpl& o) {
            dispatch(o.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* g = o.grads<T>().data();
                int64_t off = 0;
                for (size_t t = 0; t < impls.size(); ++t) {
                    const int64_t ext = extents[t];
                    if (impls[t]->requires_grad) {
                        T* dst = grad_ptr<T>(*impls[t]);
                        for (int64_t ou = 0; ou < outer; ++ou) {
                            const T* grow = g + (ou * total + off) * inner;
                            T* drow = dst + ou * ext * inner;
                            for (int64_t j = 0; j < ext * inner; ++j) drow[j] += grow[j];
                        }
                    }
                    off += ext;
                }
            });
        });
    }
    return out;
}

Tensor slice(const Tensor& x, int axis, int64_t start, int64_t end) {
    const int ax = norm_axis("slice", axis, x.rank());
    const Shape& s = x.shape();
    if (start < 0 || end > s[ax] || start > end) {
        fail("slice: range [" + std::to_string(start) + "," + std::to_string(end) +
             ") invalid for extent " + std::to_string(s[ax]));
    }
    Shape out_shape = s;
    out_shape[ax] = end - start;
    const int64_t outer = prod_range(s, 0, ax);
    const int64_t inner = prod_range(s, ax + 1, s.size());
    const int64_t ext = s[ax];
    const int64_t oext = end - start;
    Tensor out = Tensor::zeros(out_shape, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* in = x.vals<T>().data();
        T* op = out.vals<T>().data();
        for (int64_t o = 0; o < outer; ++o) {
            std::memcpy(op + o * oext * inner, in + (o * ext + start) * inner,
                        static_cast<size_t>(oext * inner) * sizeof(T));
        }
    });
    if (rec_needed({&x})) {
        attach(out, "slice", {x}, [xi = x.impl(), outer, inner, ext, oext, start](TensorImpl& o) {
            dispatch(o.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* g = o.grads<T>().data();
                T* dst = grad_ptr<T>(*xi);
                for (int64_t ou = 0; ou < outer; ++ou) {
                    const T* grow = g + ou * oext * inner;
                    T* drow = dst + (ou * ext + start) * inner;
                    for (int64_t j = 0; j < oext * inner; ++j) drow[j] += grow[j];
                }
            });
        });
    }
    return out;
}

namespace {

template <typename T>
void transpose_copy(const T* in, T* out, const Shape& out_shape,
                    const std::vector<int64_t>& in_strides_perm) {
    const std::vector<int64_t> zero(out_shape.size(), 0);
    for_each2(out_shape, in_strides_perm, zero,
              [&](int64_t i, int64_t oin, int64_t) { out[i] = in[oin]; });
}

} // namespace

Tensor transpose(const Tensor& x, int a0, int a1) {
    const int ax0 = norm_axis("transpose", a0, x.rank());
    const int ax1 = norm_axis("transpose", a1, x.rank());
    Shape out_shape = x.shape();
    std::swap(out_shape[ax0], out_shape[ax1]);
    auto in_strides = row_major_strides(x.shape());
    std::swap(in_strides[ax0], in_strides[ax1]); // strides in out-coordinate order
    Tensor out = Tensor::zeros(out_shape, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        transpose_copy(x.vals<T>().data(), out.vals<T>().data(), out_shape, in_strides);
    });
    if (rec_needed({&x})) {
        attach(out, "transpose", {x},
               [xi = x.impl(), out_shape, in_strides](TensorImpl& o) {
                   dispatch(o.dtype, [&](auto tag) {
                       using T = decltype(tag);
                       const T* g = o.grads<T>().data();
                       T* dst = grad_ptr<T>(*xi);
                       const std::vector<int64_t> zero(out_shape.size(), 0);
                       for_each2(out_shape, in_strides, zero,
                                 [&](int64_t i, int64_t oin, int64_t) { dst[oin] += g[i]; });
                   });
               });
    }
    return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
    // one extent may be -1 (inferred)
    int64_t known = 1;
    int infer = -1;
    for (size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            if (infer >= 0) fail("reshape: multiple -1 extents");
            infer = static_cast<int>(i);
        } else {
            known *= shape[i];
        }
    }
    if (infer >= 0) {
        if (known == 0 || x.numel() % known != 0) {
            fail("reshape: cannot infer extent for " + shape_str(shape));
        }
        shape[infer] = x.numel() / known;
    }
    if (shape_numel(shape) != x.numel()) {
        fail("reshape: cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    Tensor out = Tensor::zeros(shape, x.dtype());
    out.impl()->data = x.impl()->data;
    if (rec_needed({&x})) {
        attach(out, "reshape", {x}, [xi = x.impl()](TensorImpl& o) {
            dispatch(o.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* g = o.grads<T>().data();
                T* dst = grad_ptr<T>(*xi);
                const int64_t n = o.numel();
                for (int64_t i = 0; i < n; ++i) dst[i] += g[i];
            });
        });
    }
    return out;
}

// ---- dropout -----------------------------------------------------------------

Tensor dropout(const Tensor& x, double p, bool train, const rng::Stream& stream) {
    if (p < 0.0 || p >= 1.0) fail("dropout: p must be in [0,1), got " + std::to_string(p));
    if (!train || p == 0.0) return x;
    const int64_t n = x.numel();
    std::vector<uint8_t> keep(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        keep[static_cast<size_t>(i)] = stream.uniform(static_cast<uint64_t>(i)) >= p ? 1 : 0;
    }
    const double inv = 1.0 / (1.0 - p);
    Tensor out = Tensor::zeros(x.shape(), x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* in = x.vals<T>().data();
        T* op = out.vals<T>().data();
        const T s = static_cast<T>(inv);
        for (int64_t i = 0; i < n; ++i) op[i] = keep[static_cast<size_t>(i)] ? in[i] * s : T(0);
    });
    if (rec_needed({&x})) {
        attach(out, "dropout", {x}, [xi = x.impl(), keep = std::move(keep), inv](TensorImpl& o) {
            dispatch(o.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* g = o.grads<T>().data();
                T* dst = grad_ptr<T>(*xi);
                const T s = static_cast<T>(inv);
                const int64_t n2 = o.numel();
                for (int64_t i = 0; i < n2; ++i) {
                    if (keep[static_cast<size_t>(i)]) dst[i] += g[i] * s;
                }
            });
        });
    }
    return out;
}

// ---- cross entropy -------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& targets,
                     int64_t ignore_index) {
    if (logits.rank() != 2) {
        fail("cross_entropy: logits must be rank 2, got " + shape_str(logits.shape()));
    }
    const int64_t N = logits.dim(0), V = logits.dim(1);
    if (static_cast<int64_t>(targets.size()) != N) {
        fail("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
             std::to_string(N) + " rows");
    }
    int64_t n_valid = 0;
    for (int64_t t : targets) {
        if (t == ignore_index) continue;
        if (t < 0 || t >= V) {
            fail("cross_entropy: target " + std::to_string(t) + " out of range for vocab " +
                 std::to_string(V));
        }
        ++n_valid;
    }
    if (n_valid == 0) fail("cross_entropy: no valid targets");

    Tensor out = Tensor::zeros({}, logits.dtype());
    dispatch(logits.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* in = logits.vals<T>().data();
        T acc = 0;
        for (int64_t r = 0; r < N; ++r) {
            if (targets[static_cast<size_t>(r)] == ignore_index) continue;
            const T* row = in + r * V;
            T mx = row[0];
            for (int64_t c = 1; c < V; ++c) mx = std::max(mx, row[c]);
            T sum = 0;
            for (int64_t c = 0; c < V; ++c) sum += std::exp(row[c] - mx);
            const T lse = mx + std::log(sum);
            acc += lse - row[targets[static_cast<size_t>(r)]];
        }
        out.vals<T>()[0] = acc / static_cast<T>(n_valid);
    });

    if (rec_needed({&logits})) {
        attach(out, "cross_entropy", {logits},
               [li = logits.impl(), targets, ignore_index, N, V, n_valid](TensorImpl& o) {
                   dispatch(o.dtype, [&](auto tag) {
                       using T = decltype(tag);
                       const T g = o.grads<T>()[0];
                       const T* in = li->vals<T>().data();
                       T* dst = grad_ptr<T>(*li);
                       const T inv = g / static_cast<T>(n_valid);
                       for (int64_t r = 0; r < N; ++r) {
                           const int64_t t = targets[static_cast<size_t>(r)];
                           if (t == ignore_index) continue;
                           const T* row = in + r * V;
                           T* drow = dst + r * V;
                           T mx = row[0];
                           for (int64_t c = 1; c < V; ++c) mx = std::max(mx, row[c]);
                           T sum = 0;
                           for (int64_t c = 0; c < V; ++c) sum += std::exp(row[c] - mx);
                           const T isum = T(1) / sum;
                           for (int64_t c = 0; c < V; ++c) {
                               T p = std::exp(row[c] - mx) * isum;
                               if (c == t) p -= T(1);
                               drow[c] += p * inv;
                           }
                       }
                   });
               });
    }
    return out;
}

// ---- masked fill ------------------------------------------------------------

Tensor masked_fill(const Tensor& x, const Tensor& mask, double value) {
    const BcastPlan plan = make_bcast("masked_fill", x.shape(), mask.shape());
    if (plan.out != x.shape()) {
        fail("masked_fill: mask " + shape_str(mask.shape()) + " does not broadcast to " +
             shape_str(x.shape()));
    }
    Tensor out = Tensor::zeros(x.shape(), x.dtype());
    // mask strides follow the b side of the plan; x is contiguous (a side)
    std::vector<uint8_t> hit(static_cast<size_t>(plan.n));
    dispatch(mask.dtype(), [&](auto tag) {
        using M = decltype(tag);
        const M* mp = mask.vals<M>().data();
        if (plan.same) {
            for (int64_t i = 0; i < plan.n; ++i) hit[static_cast<size_t>(i)] = mp[i] != M(0);
        } else {
            for_each2(plan.out, plan.sa, plan.sb, [&](int64_t i, int64_t, int64_t ob) {
                hit[static_cast<size_t>(i)] = mp[ob] != M(0);
            });
        }
    });
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* in = x.vals<T>().data();
        T* op = out.vals<T>().data();
        const T v = static_cast<T>(value);
        for (int64_t i = 0; i < plan.n; ++i) {
            op[i] = hit[static_cast<size_t>(i)] ? v : in[i];
        }
    });
    if (rec_needed({&x})) {
        attach(out, "masked_fill", {x}, [xi = x.impl(), hit = std::move(hit)](TensorImpl& o) {
            dispatch(o.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* g = o.grads<T>().data();
                T* dst = grad_ptr<T>(*xi);
                const int64_t n = o.numel();
                for (int64_t i = 0; i < n; ++i) {
                    if (!hit[static_cast<size_t>(i)]) dst[i] += g[i];
                }
            });
        });
    }
    return out;
}

// ---- rotary embedding ---------------------------------------------------------

Tensor rope(const Tensor& x, const std::vector<int64_t>& positions, double base) {
    if (x.rank() < 2) fail("rope: rank must be >= 2, got " + shape_str(x.shape()));
    const Shape& s = x.shape();
    const int64_t hd = s.back();
    const int64_t L = s[s.size() - 2];
    if (hd % 2 != 0) fail("rope: head_dim must be even, got " + std::to_string(hd));
    if (static_cast<int64_t>(positions.size()) != L) {
        fail("rope: " + std::to_string(positions.size()) + " positions for " + std::to_string(L) +
             " rows");
    }
    const int64_t half = hd / 2;
    const int64_t batch = x.numel() / (L * hd);

    // cos/sin table computed in double regardless of dtype
    std::vector<double> ctab(static_cast<size_t>(L * half)), stab(static_cast<size_t>(L * half));
    for (int64_t t = 0; t < L; ++t) {
        for (int64_t i = 0; i < half; ++i) {
            const double theta =
                static_cast<double>(positions[static_cast<size_t>(t)]) *
                std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
            ctab[static_cast<size_t>(t * half + i)] = std::cos(theta);
            stab[static_cast<size_t>(t * half + i)] = std::sin(theta);
        }
    }

    Tensor out = Tensor::zeros(s, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* in = x.vals<T>().data();
        T* op = out.vals<T>().data();
        for (int64_t b = 0; b < batch; ++b) {
            for (int64_t t = 0; t < L; ++t) {
                const T* row = in + (b * L + t) * hd;
                T* orow = op + (b * L + t) * hd;
                for (int64_t i = 0; i < half; ++i) {
                    const double c = ctab[static_cast<size_t>(t * half + i)];
                    const double sn = stab[static_cast<size_t>(t * half + i)];
                    const double x0 = static_cast<double>(row[2 * i]);
                    const double x1 = static_cast<double>(row[2 * i + 1]);
                    orow[2 * i] = static_cast<T>(x0 * c - x1 * sn);
                    orow[2 * i + 1] = static_cast<T>(x0 * sn + x1 * c);
                }
            }
        }
    });

    if (rec_needed({&x})) {
        attach(out, "rope", {x},
               [xi = x.impl(), ctab = std::move(ctab), stab = std::move(stab), batch, L, hd,
                half](TensorImpl& o) {
                   dispatch(o.dtype, [&](auto tag) {
                       using T = decltype(tag);
                       const T* g = o.grads<T>().data();
                       T* dst = grad_ptr<T>(*xi);
                       for (int64_t b = 0; b < batch; ++b) {
                           for (int64_t t = 0; t < L; ++t) {
                               const T* grow = g + (b * L + t) * hd;
                               T* drow = dst + (b * L + t) * hd;
                               for (int64_t i = 0; i < half; ++i) {
                                   const double c = ctab[static_cast<size_t>(t * half + i)];
                                   const double sn = stab[static_cast<size_t>(t * half + i)];
                                   const double g0 = static_cast<double>(grow[2 * i]);
                                   const double g1 = static_cast<double>(grow[2 * i + 1]);
                                   drow[2 * i] += static_cast<T>(g0 * c + g1 * sn);
                                   drow[2 * i + 1] += static_cast<T>(-g0 * sn + g1 * c);
                               }
                           }
                       }
                   });
               });
    }
    return out;
}

// ---- grouped matmul ------------------------------------------------------------

Tensor grouped_matmul(const Tensor& x, const Tensor& w, const std::vector<int64_t>& offsets) {
    check_dtype("grouped_matmul", x, w);
    if (x.rank() != 2 || w.rank() != 3) {
        fail("grouped_matmul: need x rank 2 and w rank 3, got " + shape_str(x.shape()) + " and " +
             shape_str(w.shape()));
    }
    const int64_t R = x.dim(0), K = x.dim(1);
    const int64_t E = w.dim(0), N = w.dim(2);
    if (w.dim(1) != K) {
        fail("grouped_matmul: inner mismatch " + shape_str(x.shape()) + " vs " +
             shape_str(w.shape()));
    }
    if (static_cast<int64_t>(offsets.size()) != E + 1 || offsets.front() != 0 ||
        offsets.back() != R) {
        fail("grouped_matmul: bad offsets");
    }
    for (size_t i = 1; i < offsets.size(); ++i) {
        if (offsets[i] < offsets[i - 1]) fail("grouped_matmul: offsets must be non-decreasing");
    }

    Tensor out = Tensor::zeros({R, N}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* xp = x.vals<T>().data();
        const T* wp = w.vals<T>().data();
        T* op = out.vals<T>().data();
        for (int64_t e = 0; e < E; ++e) {
            const int64_t r0 = offsets[static_cast<size_t>(e)];
            const int64_t rows = offsets[static_cast<size_t>(e) + 1] - r0;
            if (rows == 0) continue;
            gemm_nn(xp + r0 * K, wp + e * K * N, op + r0 * N, rows, K, N);
        }
    });

    if (rec_needed({&x, &w})) {
        const bool nx = x.requires_grad();
        const bool nw = w.requires_grad();
        attach(out, "grouped_matmul", {x, w},
               [xi = x.impl(), wi = w.impl(), offsets, E, K, N, nx, nw](TensorImpl& o) {
                   dispatch(o.dtype, [&](auto tag) {
                       using T = decltype(tag);
                       const T* g = o.grads<T>().data();
                       const T* xp = xi->vals<T>().data();
                       const T* wp = wi->vals<T>().data();
                       for (int64_t e = 0; e < E; ++e) {
                           const int64_t r0 = offsets[static_cast<size_t>(e)];
                           const int64_t rows = offsets[static_cast<size_t>(e) + 1] - r0;
                           if (rows == 0) continue;
                           if (nx) {
                               gemm_nt(g + r0 * N, wp + e * K * N, grad_ptr<T>(*xi) + r0 * K, rows,
                                       N, K);
                           }
                           if (nw) {
                               gemm_tn(xp + r0 * K, g + r0 * N, grad_ptr<T>(*wi) + e * K * N, rows,
                                       K, N);
                           }
                       }
                   });
               });
    }
    return out;
}

} // namespace moelab::ops
