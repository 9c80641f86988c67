#include "defectgen/tape.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

#include "defectgen/kernels.hpp"

namespace defectgen {

namespace {

template <class T>
T stable_softplus(T x) {
    // log(1 + e^x) without overflow
    const T ax = x > 0 ? x : -x;
    return std::max(x, T(0)) + std::log1p(std::exp(-ax));
}

}  // namespace

template <class T>
Var BasicTape<T>::push(Tens value, bool needs_grad, std::function<void()> back) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.back = needs_grad ? std::move(back) : std::function<void()>();
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

template <class T>
typename BasicTape<T>::Tens& BasicTape<T>::grad_acc(int32_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Tens(n.value.shape);
    return n.grad;
}

template <class T>
void BasicTape<T>::add_grad(int32_t id, const Tens& g) {
    if (!nodes_[id].needs_grad) return;
    Tens& dst = grad_acc(id);
    for (int64_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

template <class T>
Var BasicTape<T>::leaf(const Tens& value, Tens* grad_sink) {
    Var v = push(value, grad_sink != nullptr, {});
    nodes_[v.id].sink = grad_sink;
    return v;
}

template <class T>
Var BasicTape<T>::constant(Tens value) {
    return push(std::move(value), false, {});
}

template <class T>
void BasicTape<T>::backward(Var loss) {
    if (nodes_[loss.id].value.size() != 1)
        throw std::invalid_argument("backward: loss must be a scalar");
    grad_acc(loss.id)[0] += T(1);
    for (int32_t i = loss.id; i >= 0; --i) {
        Node& n = nodes_[i];
        if (!n.needs_grad || !n.back) continue;
        if (n.grad.size() == 0) continue;  // unreachable from the loss
        n.back();
    }
    for (auto& n : nodes_) {
        if (n.sink && n.grad.size() != 0)
            for (int64_t i = 0; i < n.grad.size(); ++i) (*n.sink)[i] += n.grad[i];
    }
}

// ----------------------------------------------------------- elementwise ---

template <class T>
Var BasicTape<T>::add(Var a, Var b) {
    const Tens& av = val(a);
    const Tens& bv = val(b);
    if (!av.same_shape(bv)) throw std::invalid_argument("add: shape mismatch");
    Tens y(av.shape);
    for (int64_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
    bool ng = needs_grad(a) || needs_grad(b);
    Var out = push(std::move(y), ng, {});
    nodes_[out.id].back = [this, a, b, out] {
        const Tens& g = nodes_[out.id].grad;
        add_grad(a.id, g);
        add_grad(b.id, g);
    };
    return out;
}

template <class T>
Var BasicTape<T>::sub(Var a, Var b) {
    const Tens& av = val(a);
    const Tens& bv = val(b);
    if (!av.same_shape(bv)) throw std::invalid_argument("sub: shape mismatch");
    Tens y(av.shape);
    for (int64_t i = 0; i < y.size(); ++i) y[i] = av[i] - bv[i];
    bool ng = needs_grad(a) || needs_grad(b);
    Var out = push(std::move(y), ng, {});
    nodes_[out.id].back = [this, a, b, out] {
        const Tens& g = nodes_[out.id].grad;
        add_grad(a.id, g);
        if (nodes_[b.id].needs_grad) {
            Tens& db = grad_acc(b.id);
            for (int64_t i = 0; i < g.size(); ++i) db[i] -= g[i];
        }
    };
    return out;
}

template <class T>
Var BasicTape<T>::mul(Var a, Var b) {
    const Tens& av = val(a);
    const Tens& bv = val(b);
    if (!av.same_shape(bv)) throw std::invalid_argument("mul: shape mismatch");
    Tens y(av.shape);
    for (int64_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
    bool ng = needs_grad(a) || needs_grad(b);
    Var out = push(std::move(y), ng, {});
    nodes_[out.id].back = [this, a, b, out] {
        const Tens& g = nodes_[out.id].grad;
        if (nodes_[a.id].needs_grad) {
            const Tens& bv2 = val(b);
            Tens& da = grad_acc(a.id);
            for (int64_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv2[i];
        }
        if (nodes_[b.id].needs_grad) {
            const Tens& av2 = val(a);
            Tens& db = grad_acc(b.id);
            for (int64_t i = 0; i < g.size(); ++i) db[i] += g[i] * av2[i];
        }
    };
    return out;
}

template <class T>
Var BasicTape<T>::scale(Var a, T c) {
    const Tens& av = val(a);
    Tens y(av.shape);
    for (int64_t i = 0; i < y.size(); ++i) y[i] = av[i] * c;
    Var out = push(std::move(y), needs_grad(a), {});
    nodes_[out.id].back = [this, a, c, out] {
        const Tens& g = nodes_[out.id].grad;
        Tens& da = grad_acc(a.id);
        for (int64_t i = 0; i < g.size(); ++i) da[i] += g[i] * c;
    };
    return out;
}

template <class T>
Var BasicTape<T>::silu(Var a) {
    const Tens& av = val(a);
    Tens y(av.shape);
    for (int64_t i = 0; i < y.size(); ++i) {
        const T s = T(1) / (T(1) + std::exp(-av[i]));
        y[i] = av[i] * s;
    }
    Var out = push(std::move(y), needs_grad(a), {});
    nodes_[out.id].back = [this, a, out] {
        const Tens& g = nodes_[out.id].grad;
        const Tens& x = val(a);
        Tens& da = grad_acc(a.id);
        for (int64_t i = 0; i < g.size(); ++i) {
            const T s = T(1) / (T(1) + std::exp(-x[i]));
            da[i] += g[i] * s * (T(1) + x[i] * (T(1) - s));
        }
    };
    return out;
}

template <class T>
Var BasicTape<T>::mean_all(Var a) {
    const Tens& av = val(a);
    T s = 0;
    for (int64_t i = 0; i < av.size(); ++i) s += av[i];
    Tens y({1});
    y[0] = s / static_cast<T>(av.size());
    Var out = push(std::move(y), needs_grad(a), {});
    nodes_[out.id].back = [this, a, out] {
        const T g = nodes_[out.id].grad[0] / static_cast<T>(val(a).size());
        Tens& da = grad_acc(a.id);
        for (int64_t i = 0; i < da.size(); ++i) da[i] += g;
    };
    return out;
}

// ---------------------------------------------------------------- dense ---

template <class T>
Var BasicTape<T>::linear(Var x, Var w, Var b) {
    const Tens& xv = val(x);
    const Tens& wv = val(w);
    const int64_t R = xv.shape[0], K = xv.shape[1], N = wv.shape[1];
    if (wv.shape[0] != K) throw std::invalid_argument("linear: inner dim mismatch");
    Tens y({R, N});
    kernels::gemm_nn(xv.data(), wv.data(), y.data(), R, N, K);
    if (b.valid()) {
        const Tens& bv = val(b);
        for (int64_t r = 0; r < R; ++r)
            for (int64_t j = 0; j < N; ++j) y[r * N + j] += bv[j];
    }
    bool ng = needs_grad(x) || needs_grad(w) || (b.valid() && needs_grad(b));
    Var out = push(std::move(y), ng, {});
    nodes_[out.id].back = [this, x, w, b, out, R, K, N] {
        const Tens& g = nodes_[out.id].grad;
        if (nodes_[x.id].needs_grad)
            kernels::gemm_nt(g.data(), val(w).data(), grad_acc(x.id).data(), R, K, N, true);
        if (nodes_[w.id].needs_grad)
            kernels::gemm_tn(val(x).data(), g.data(), grad_acc(w.id).data(), K, N, R, true);
        if (b.valid() && nodes_[b.id].needs_grad) {
            Tens& db = grad_acc(b.id);
            for (int64_t r = 0; r < R; ++r)
                for (int64_t j = 0; j < N; ++j) db[j] += g[r * N + j];
        }
    };
    return out;
}

template <class T>
Var BasicTape<T>::conv2d(Var x, Var w, Var b, int64_t stride, int64_t pad) {
    const Tens& xv = val(x);
    const Tens& wv = val(w);
    const int64_t N = xv.shape[0];
    const auto d = kernels::ConvDims::make(xv.shape[1], xv.shape[2], xv.shape[3], wv.shape[0],
                                           wv.shape[2], wv.shape[3], stride, pad);
    if (wv.shape[1] != d.C) throw std::invalid_argument("conv2d: channel mismatch");
    Tens y({N, d.Co, d.OH, d.OW});
    std::vector<T> col(static_cast<size_t>(d.col_rows() * d.col_cols()));
    kernels::conv2d_forward(xv.data(), wv.data(), b.valid() ? val(b).data() : nullptr, y.data(),
                            N, d, col.data());
    bool ng = needs_grad(x) || needs_grad(w) || (b.valid() && needs_grad(b));
    Var out = push(std::move(y), ng, {});
    nodes_[out.id].back = [this, x, w, b, out, N, d] {
        const Tens& g = nodes_[out.id].grad;
        const bool nx = nodes_[x.id].needs_grad;
        const bool nw = nodes_[w.id].needs_grad;
        const bool nb = b.valid() && nodes_[b.id].needs_grad;
        std::vector<T> col(static_cast<size_t>(d.col_rows() * d.col_cols()));
        std::vector<T> dcol(nx ? col.size() : 0);
        kernels::conv2d_backward(val(x).data(), val(w).data(), g.data(),
                                 nx ? grad_acc(x.id).data() : nullptr,
                                 nw ? grad_acc(w.id).data() : nullptr,
                                 nb ? grad_acc(b.id).data() : nullptr, N, d, col.data(),
                                 dcol.data());
    };
    return out;
}

template <class T>
Var BasicTape<T>::groupnorm(Var x, Var gamma, Var beta, int64_t groups, T eps) {
    const Tens& xv = val(x);
    const int64_t N = xv.shape[0], C = xv.shape[1], HW = xv.shape[2] * xv.shape[3];
    if (C % groups != 0) throw std::invalid_argument("groupnorm: groups must divide C");
    Tens y(xv.shape);
    auto mean = std::make_shared<Tens>(Tens({N, groups}));
    auto istd = std::make_shared<Tens>(Tens({N, groups}));
    kernels::groupnorm_forward(xv.data(), val(gamma).data(), val(beta).data(), y.data(),
                               mean->data(), istd->data(), N, C, HW, groups, eps);
    bool ng = needs_grad(x) || needs_grad(gamma) || needs_grad(beta);
    Var out = push(std::move(y), ng, {});
    nodes_[out.id].back = [this, x, gamma, beta, out, N, C, HW, groups, mean, istd] {
        const Tens& g = nodes_[out.id].grad;
        const bool nx = nodes_[x.id].needs_grad;
        const bool np = nodes_[gamma.id].needs_grad || nodes_[beta.id].needs_grad;
        kernels::groupnorm_backward(val(x).data(), val(gamma).data(), g.data(), mean->data(),
                                    istd->data(), nx ? grad_acc(x.id).data() : nullptr,
                                    np ? grad_acc(gamma.id).data() : nullptr,
                                    np ? grad_acc(beta.id).data() : nullptr, N, C, HW, groups);
    };
    return out;
}

// ------------------------------------------------------------ attention ---

template <class T>
Var BasicTape<T>::softmax_last(Var x) {
    const Tens& xv = val(x);
    const int64_t L = xv.shape.back();
    const int64_t R = xv.size() / L;
    Tens y(xv.shape);
    kernels::softmax_rows(xv.data(), y.data(), R, L);
    Var out = push(std::move(y), needs_grad(x), {});
    nodes_[out.id].back = [this, x, out, R, L] {
        const Tens& g = nodes_[out.id].grad;
        const Tens& p = nodes_[out.id].value;
        kernels::softmax_rows_backward(p.data(), g.data(), grad_acc(x.id).data(), R, L);
    };
    return out;
}

template <class T>
Var BasicTape<T>::bmm_nn(Var a, Var b) {
    const Tens& av = val(a);
    const Tens& bv = val(b);
    const int64_t B = av.shape[0], M = av.shape[1], K = av.shape[2], N = bv.shape[2];
    if (bv.shape[0] != B || bv.shape[1] != K) throw std::invalid_argument("bmm_nn: shape mismatch");
    Tens y({B, M, N});
    const bool par = kernels::parallel_enabled();
#pragma omp parallel for schedule(static) if (par)
    for (int64_t i = 0; i < B; ++i)
        kernels::gemm_nn(av.data() + i * M * K, bv.data() + i * K * N, y.data() + i * M * N, M, N,
                         K, false, false);
    bool ng = needs_grad(a) || needs_grad(b);
    Var out = push(std::move(y), ng, {});
    nodes_[out.id].back = [this, a, b, out, B, M, K, N] {
        const Tens& g = nodes_[out.id].grad;
        const bool par2 = kernels::parallel_enabled();
        if (nodes_[a.id].needs_grad) {
            Tens& da = grad_acc(a.id);
            const Tens& bv2 = val(b);
#pragma omp parallel for schedule(static) if (par2)
            for (int64_t i = 0; i < B; ++i)
                kernels::gemm_nt(g.data() + i * M * N, bv2.data() + i * K * N,
                                 da.data() + i * M * K, M, K, N, true, false);
        }
        if (nodes_[b.id].needs_grad) {
            Tens& db = grad_acc(b.id);
            const Tens& av2 = val(a);
#pragma omp parallel for schedule(static) if (par2)
            for (int64_t i = 0; i < B; ++i)
                kernels::gemm_tn(av2.data() + i * M * K, g.data() + i * M * N,
                                 db.data() + i * K * N, K, N, M, true, false);
        }
    };
    return out;
}

template <class T>
Var BasicTape<T>::bmm_nt(Var a, Var b) {
    const Tens& av = val(a);
    const Tens& bv = val(b);
    const int64_t B = av.shape[0], M = av.shape[1], K = av.shape[2], N = bv.shape[1];
    if (bv.shape[0] != B || bv.shape[2] != K) throw std::invalid_argument("bmm_nt: shape mismatch");
    Tens y({B, M, N});
    const bool par = kernels::parallel_enabled();
#pragma omp parallel for schedule(static) if (par)
    for (int64_t i = 0; i < B; ++i)
        kernels::gemm_nt(av.data() + i * M * K, bv.data() + i * N * K, y.data() + i * M * N, M, N,
                         K, false, false);
    bool ng = needs_grad(a) || needs_grad(b);
    Var out = push(std::move(y), ng, {});
    nodes_[out.id].back = [this, a, b, out, B, M, K, N] {
        const Tens& g = nodes_[out.id].grad;
        const bool par2 = kernels::parallel_enabled();
        if (nodes_[a.id].needs_grad) {
            Tens& da = grad_acc(a.id);
            const Tens& bv2 = val(b);
#pragma omp parallel for schedule(static) if (par2)
            for (int64_t i = 0; i < B; ++i)
                kernels::gemm_nn(g.data() + i * M * N, bv2.data() + i * N * K,
                                 da.data() + i * M * K, M, K, N, true, false);
        }
        if (nodes_[b.id].needs_grad) {
            Tens& db = grad_acc(b.id);
            const Tens& av2 = val(a);
#pragma omp parallel for schedule(static) if (par2)
            for (int64_t i = 0; i < B; ++i)
                kernels::gemm_tn(g.data() + i * M * N, av2.data() + i * M * K,
                                 db.data() + i * N * K, N, K, M, true, false);
        }
    };
    return out;
}

template <class T>
Var BasicTape<T>::mean_heads(Var x, int64_t heads) {
    const Tens& xv = val(x);
    const int64_t NH = xv.shape[0], Q = xv.shape[1], L = xv.shape[2];
    const int64_t N = NH / heads;
    Tens y({N, Q, L});
    const T inv = T(1) / static_cast<T>(heads);
    for (int64_t n = 0; n < N; ++n)
        for (int64_t h = 0; h < heads; ++h) {
            const T* src = xv.data() + (n * heads + h) * Q * L;
            T* dst = y.data() + n * Q * L;
            for (int64_t i = 0; i < Q * L; ++i) dst[i] += src[i] * inv;
        }
    Var out = push(std::move(y), needs_grad(x), {});
    nodes_[out.id].back = [this, x, out, N, heads, Q, L] {
        const Tens& g = nodes_[out.id].grad;
        Tens& dx = grad_acc(x.id);
        const T inv2 = T(1) / static_cast<T>(heads);
        for (int64_t n = 0; n < N; ++n)
            for (int64_t h = 0; h < heads; ++h) {
                const T* src = g.data() + n * Q * L;
                T* dst = dx.data() + (n * heads + h) * Q * L;
                for (int64_t i = 0; i < Q * L; ++i) dst[i] += src[i] * inv2;
            }
    };
    return out;
}

template <class T>
Var BasicTape<T>::select_last(Var x, int64_t index) {
    const Tens& xv = val(x);
    const int64_t L = xv.shape.back();
    const int64_t R = xv.size() / L;
    if (index < 0 || index >= L) throw std::invalid_argument("select_last: index out of range");
    std::vector<int64_t> shp(xv.shape.begin(), xv.shape.end() - 1);
    Tens y(shp);
    for (int64_t r = 0; r < R; ++r) y[r] = xv[r * L + index];
    Var out = push(std::move(y), needs_grad(x), {});
    nodes_[out.id].back = [this, x, out, R, L, index] {
        const Tens& g = nodes_[out.id].grad;
        Tens& dx = grad_acc(x.id);
        for (int64_t r = 0; r < R; ++r) dx[r * L + index] += g[r];
    };
    return out;
}

// --------------------------------------------------------------- layout ---

template <class T>
Var BasicTape<T>::reshape(Var x, std::vector<int64_t> shape) {
    Tens y = val(x).reshaped(std::move(shape));
    Var out = push(std::move(y), needs_grad(x), {});
    nodes_[out.id].back = [this, x, out] {
        const Tens& g = nodes_[out.id].grad;
        Tens& dx = grad_acc(x.id);
        for (int64_t i = 0; i < g.size(); ++i) dx[i] += g[i];
    };
    return out;
}

namespace {
template <class T>
void transpose_12_raw(const T* in, T* out, int64_t A, int64_t B, int64_t C, int64_t D,
                      bool accumulate) {
    for (int64_t a = 0; a < A; ++a)
        for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < C; ++c) {
                const T* src = in + (((a * B) + b) * C + c) * D;
                T* dst = out + (((a * C) + c) * B + b) * D;
                if (accumulate)
                    for (int64_t d = 0; d < D; ++d) dst[d] += src[d];
                else
                    for (int64_t d = 0; d < D; ++d) dst[d] = src[d];
            }
}
}  // namespace

template <class T>
Var BasicTape<T>::transpose_12(Var x) {
    const Tens& xv = val(x);
    const int nd = xv.ndim();
    if (nd != 3 && nd != 4) throw std::invalid_argument("transpose_12: want 3D or 4D");
    const int64_t A = xv.shape[0], B = xv.shape[1], C = xv.shape[2];
    const int64_t D = nd == 4 ? xv.shape[3] : 1;
    std::vector<int64_t> shp = nd == 4 ? std::vector<int64_t>{A, C, B, D}
                                       : std::vector<int64_t>{A, C, B};
    Tens y(shp);
    transpose_12_raw(xv.data(), y.data(), A, B, C, D, false);
    Var out = push(std::move(y), needs_grad(x), {});
    nodes_[out.id].back = [this, x, out, A, B, C, D] {
        const Tens& g = nodes_[out.id].grad;
        Tens& dx = grad_acc(x.id);
        transpose_12_raw(g.data(), dx.data(), A, C, B, D, true);
    };
    return out;
}

template <class T>
Var BasicTape<T>::concat_channels(Var a, Var b) {
    const Tens& av = val(a);
    const Tens& bv = val(b);
    const int64_t N = av.shape[0], Ca = av.shape[1], Cb = bv.shape[1];
    const int64_t HW = av.shape[2] * av.shape[3];
    if (bv.shape[0] != N || bv.shape[2] != av.shape[2] || bv.shape[3] != av.shape[3])
        throw std::invalid_argument("concat_channels: spatial/batch mismatch");
    Tens y({N, Ca + Cb, av.shape[2], av.shape[3]});
    for (int64_t n = 0; n < N; ++n) {
        std::copy(av.data() + n * Ca * HW, av.data() + (n + 1) * Ca * HW,
                  y.data() + n * (Ca + Cb) * HW);
        std::copy(bv.data() + n * Cb * HW, bv.data() + (n + 1) * Cb * HW,
                  y.data() + n * (Ca + Cb) * HW + Ca * HW);
    }
    bool ng = needs_grad(a) || needs_grad(b);
    Var out = push(std::move(y), ng, {});
    nodes_[out.id].back = [this, a, b, out, N, Ca, Cb, HW] {
        const Tens& g = nodes_[out.id].grad;
        if (nodes_[a.id].needs_grad) {
            Tens& da = grad_acc(a.id);
            for (int64_t n = 0; n < N; ++n) {
                const T* src = g.data() + n * (Ca + Cb) * HW;
                T* dst = da.data() + n * Ca * HW;
                for (int64_t i = 0; i < Ca * HW; ++i) dst[i] += src[i];
            }
        }
        if (nodes_[b.id].needs_grad) {
            Tens& db = grad_acc(b.id);
            for (int64_t n = 0; n < N; ++n) {
                const T* src = g.data() + n * (Ca + Cb) * HW + Ca * HW;
                T* dst = db.data() + n * Cb * HW;
                for (int64_t i = 0; i < Cb * HW; ++i) dst[i] += src[i];
            }
        }
    };
    return out;
}

// -------------------------------------------------------------- spatial ---

template <class T>
Var BasicTape<T>::upsample_nearest2(Var x) {
    const Tens& xv = val(x);
    const int64_t P = xv.shape[0] * xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    Tens y({xv.shape[0], xv.shape[1], 2 * H, 2 * W});
    kernels::upsample_nearest2(xv.data(), y.data(), P, H, W);
    Var out = push(std::move(y), needs_grad(x), {});
    nodes_[out.id].back = [this, x, out, P, H, W] {
        kernels::upsample_nearest2_backward(nodes_[out.id].grad.data(), grad_acc(x.id).data(), P,
                                            H, W);
    };
    return out;
}

template <class T>
Var BasicTape<T>::avgpool(Var x, int64_t factor) {
    const Tens& xv = val(x);
    const int64_t P = xv.shape[0] * xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    Tens y({xv.shape[0], xv.shape[1], H / factor, W / factor});
    kernels::avgpool(xv.data(), y.data(), P, H, W, factor);
    Var out = push(std::move(y), needs_grad(x), {});
    nodes_[out.id].back = [this, x, out, P, H, W, factor] {
        kernels::avgpool_backward(nodes_[out.id].grad.data(), grad_acc(x.id).data(), P, H, W,
                                  factor);
    };
    return out;
}

template <class T>
Var BasicTape<T>::resize_bilinear(Var x, int64_t H2, int64_t W2) {
    const Tens& xv = val(x);
    const int64_t P = xv.shape[0] * xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    Tens y({xv.shape[0], xv.shape[1], H2, W2});
    kernels::resize_bilinear(xv.data(), y.data(), P, H, W, H2, W2);
    Var out = push(std::move(y), needs_grad(x), {});
    nodes_[out.id].back = [this, x, out, P, H, W, H2, W2] {
        kernels::resize_bilinear_backward(nodes_[out.id].grad.data(), grad_acc(x.id).data(), P, H,
                                          W, H2, W2);
    };
    return out;
}

// ---------------------------------------------------- embeddings, bcast ---

template <class T>
Var BasicTape<T>::gather_rows(Var table, std::vector<int64_t> ids) {
    const Tens& tv = val(table);
    const int64_t d = tv.shape[1];
    const int64_t R = static_cast<int64_t>(ids.size());
    Tens y({R, d});
    for (int64_t r = 0; r < R; ++r)
        std::copy(tv.data() + ids[r] * d, tv.data() + (ids[r] + 1) * d, y.data() + r * d);
    Var out = push(std::move(y), needs_grad(table), {});
    nodes_[out.id].back = [this, table, out, ids = std::move(ids), R, d] {
        const Tens& g = nodes_[out.id].grad;
        Tens& dt = grad_acc(table.id);
        for (int64_t r = 0; r < R; ++r) {
            T* dst = dt.data() + ids[r] * d;
            const T* src = g.data() + r * d;
            for (int64_t i = 0; i < d; ++i) dst[i] += src[i];
        }
    };
    return out;
}

template <class T>
Var BasicTape<T>::add_cycled_rows(Var x, Var p) {
    const Tens& xv = val(x);
    const Tens& pv = val(p);
    const int64_t R = xv.shape[0], d = xv.shape[1], L = pv.shape[0];
    if (pv.shape[1] != d || R % L != 0) throw std::invalid_argument("add_cycled_rows: shape");
    Tens y(xv.shape);
    for (int64_t r = 0; r < R; ++r) {
        const T* ps = pv.data() + (r % L) * d;
        const T* xs = xv.data() + r * d;
        T* ys = y.data() + r * d;
        for (int64_t i = 0; i < d; ++i) ys[i] = xs[i] + ps[i];
    }
    bool ng = needs_grad(x) || needs_grad(p);
    Var out = push(std::move(y), ng, {});
    nodes_[out.id].back = [this, x, p, out, R, d, L] {
        const Tens& g = nodes_[out.id].grad;
        add_grad(x.id, g);
        if (nodes_[p.id].needs_grad) {
            Tens& dp = grad_acc(p.id);
            for (int64_t r = 0; r < R; ++r) {
                T* dst = dp.data() + (r % L) * d;
                const T* src = g.data() + r * d;
                for (int64_t i = 0; i < d; ++i) dst[i] += src[i];
            }
        }
    };
    return out;
}

template <class T>
Var BasicTape<T>::add_channel_bias(Var x, Var t) {
    const Tens& xv = val(x);
    const Tens& tv = val(t);
    const int64_t N = xv.shape[0], C = xv.shape[1], HW = xv.shape[2] * xv.shape[3];
    if (tv.shape[0] != N || tv.shape[1] != C)
        throw std::invalid_argument("add_channel_bias: shape");
    Tens y(xv.shape);
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const T bias = tv[n * C + c];
            const T* xs = xv.data() + (n * C + c) * HW;
            T* ys = y.data() + (n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) ys[i] = xs[i] + bias;
        }
    bool ng = needs_grad(x) || needs_grad(t);
    Var out = push(std::move(y), ng, {});
    nodes_[out.id].back = [this, x, t, out, N, C, HW] {
        const Tens& g = nodes_[out.id].grad;
        add_grad(x.id, g);
        if (nodes_[t.id].needs_grad) {
            Tens& dt = grad_acc(t.id);
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c) {
                    const T* gs = g.data() + (n * C + c) * HW;
                    T s = 0;
                    for (int64_t i = 0; i < HW; ++i) s += gs[i];
                    dt[n * C + c] += s;
                }
        }
    };
    return out;
}

template <class T>
Var BasicTape<T>::mul_bcast1(Var x, Var m) {
    const Tens& xv = val(x);
    const Tens& mv = val(m);
    const int64_t N = xv.shape[0], C = xv.shape[1], HW = xv.shape[2] * xv.shape[3];
    if (mv.shape[0] != N || mv.shape[1] != 1 || mv.shape[2] != xv.shape[2] ||
        mv.shape[3] != xv.shape[3])
        throw std::invalid_argument("mul_bcast1: mask must be (N,1,H,W)");
    Tens y(xv.shape);
    for (int64_t n = 0; n < N; ++n) {
        const T* ms = mv.data() + n * HW;
        for (int64_t c = 0; c < C; ++c) {
            const T* xs = xv.data() + (n * C + c) * HW;
            T* ys = y.data() + (n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) ys[i] = xs[i] * ms[i];
        }
    }
    bool ng = needs_grad(x) || needs_grad(m);
    Var out = push(std::move(y), ng, {});
    nodes_[out.id].back = [this, x, m, out, N, C, HW] {
        const Tens& g = nodes_[out.id].grad;
        if (nodes_[x.id].needs_grad) {
            const Tens& mv2 = val(m);
            Tens& dx = grad_acc(x.id);
            for (int64_t n = 0; n < N; ++n) {
                const T* ms = mv2.data() + n * HW;
                for (int64_t c = 0; c < C; ++c) {
                    const T* gs = g.data() + (n * C + c) * HW;
                    T* ds = dx.data() + (n * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) ds[i] += gs[i] * ms[i];
                }
            }
        }
        if (nodes_[m.id].needs_grad) {
            const Tens& xv2 = val(x);
            Tens& dm = grad_acc(m.id);
            for (int64_t n = 0; n < N; ++n) {
                T* ds = dm.data() + n * HW;
                for (int64_t c = 0; c < C; ++c) {
                    const T* gs = g.data() + (n * C + c) * HW;
                    const T* xs = xv2.data() + (n * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) ds[i] += gs[i] * xs[i];
                }
            }
        }
    };
    return out;
}

// ---------------------------------------------------------- fused losses ---

template <class T>
Var BasicTape<T>::focal_loss_mean(Var logits, Var target, T gamma, T balance) {
    const Tens& zv = val(logits);
    const Tens& yv = val(target);
    if (!zv.same_shape(yv)) throw std::invalid_argument("focal_loss: shape mismatch");
    const int64_t n = zv.size();
    double acc = 0;
    for (int64_t i = 0; i < n; ++i) {
        const double z = zv[i], y = yv[i];
        const double logp = -stable_softplus(-z);
        const double log1mp = -stable_softplus(z);
        const double p = 1.0 / (1.0 + std::exp(-z));
        const double w = balance < 0 ? 1.0 : y * balance + (1.0 - y) * (1.0 - balance);
        const double a = std::pow(1.0 - p, static_cast<double>(gamma)) * (-logp);
        const double b = std::pow(p, static_cast<double>(gamma)) * (-log1mp);
        acc += w * (y * a + (1.0 - y) * b);
    }
    Tens out_t({1});
    out_t[0] = static_cast<T>(acc / n);
    Var out = push(std::move(out_t), needs_grad(logits), {});
    nodes_[out.id].back = [this, logits, target, out, gamma, balance, n] {
        const T gout = nodes_[out.id].grad[0];
        const Tens& zv2 = val(logits);
        const Tens& yv2 = val(target);
        Tens& dz = grad_acc(logits.id);
        const double ga = static_cast<double>(gamma);
        for (int64_t i = 0; i < n; ++i) {
            const double z = zv2[i], y = yv2[i];
            const double p = 1.0 / (1.0 + std::exp(-z));
            const double logp = -stable_softplus(-z);
            const double log1mp = -stable_softplus(z);
            const double w = balance < 0 ? 1.0 : y * balance + (1.0 - y) * (1.0 - balance);
            // d/dz of (1-p)^g*(-log p) and p^g*(-log(1-p))
            const double da = ga * p * std::pow(1.0 - p, ga) * logp - std::pow(1.0 - p, ga + 1.0);
            const double db = -ga * (1.0 - p) * std::pow(p, ga) * log1mp + std::pow(p, ga + 1.0);
            dz[i] += gout * static_cast<T>(w * (y * da + (1.0 - y) * db) / n);
        }
    };
    return out;
}

template <class T>
Var BasicTape<T>::softmax_xent_mean(Var logits, std::vector<int64_t> labels) {
    const Tens& zv = val(logits);
    const int64_t N = zv.shape[0], K = zv.shape[1];
    if (static_cast<int64_t>(labels.size()) != N)
        throw std::invalid_argument("softmax_xent: label count mismatch");
    double acc = 0;
    for (int64_t i = 0; i < N; ++i) {
        const T* z = zv.data() + i * K;
        T m = z[0];
        for (int64_t k = 1; k < K; ++k) m = std::max(m, z[k]);
        double s = 0;
        for (int64_t k = 0; k < K; ++k) s += std::exp(static_cast<double>(z[k] - m));
        acc += std::log(s) + m - z[labels[i]];
    }
    Tens out_t({1});
    out_t[0] = static_cast<T>(acc / N);
    Var out = push(std::move(out_t), needs_grad(logits), {});
    nodes_[out.id].back = [this, logits, out, labels = std::move(labels), N, K] {
        const T gout = nodes_[out.id].grad[0];
        const Tens& zv2 = val(logits);
        Tens& dz = grad_acc(logits.id);
        for (int64_t i = 0; i < N; ++i) {
            const T* z = zv2.data() + i * K;
            T m = z[0];
            for (int64_t k = 1; k < K; ++k) m = std::max(m, z[k]);
            double s = 0;
            for (int64_t k = 0; k < K; ++k) s += std::exp(static_cast<double>(z[k] - m));
            for (int64_t k = 0; k < K; ++k) {
                double p = std::exp(static_cast<double>(z[k] - m)) / s;
                double oneh = (k == labels[i]) ? 1.0 : 0.0;
                dz[i * K + k] += gout * static_cast<T>((p - oneh) / N);
            }
        }
    };
    return out;
}

template class BasicTape<float>;
template class BasicTape<double>;

}  // namespace defectgen
