#ifndef DEFECTGEN_KERNELS_HPP
#define DEFECTGEN_KERNELS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "defectgen/tensor.hpp"

// Compute kernels backing the tape ops. Every kernel has one code path; the
// OpenMP `if` clause switches between serial and parallel execution. Threads
// always own whole output elements, so the per-element accumulation order is
// identical in both modes and results match bitwise. Tests and the benchmark
// tool rely on that.

namespace defectgen::kernels {

bool parallel_enabled();
void set_parallel(bool on);

// ---------------------------------------------------------------- gemm ----

// C(M,N) = A(M,K) * B(K,N); optionally accumulates into C.
template <class T>
void gemm_nn(const T* A, const T* B, T* C, int64_t M, int64_t N, int64_t K,
             bool accumulate = false, bool par = parallel_enabled()) {
#pragma omp parallel for schedule(static) if (par)
    for (int64_t i = 0; i < M; ++i) {
        T* c = C + i * N;
        if (!accumulate) std::fill(c, c + N, T(0));
        const T* a = A + i * K;
        for (int64_t k = 0; k < K; ++k) {
            const T av = a[k];
            const T* b = B + k * N;
            for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// C(M,N) = A(M,K) * B(N,K)^T
template <class T>
void gemm_nt(const T* A, const T* B, T* C, int64_t M, int64_t N, int64_t K,
             bool accumulate = false, bool par = parallel_enabled()) {
#pragma omp parallel for schedule(static) if (par)
    for (int64_t i = 0; i < M; ++i) {
        const T* a = A + i * K;
        T* c = C + i * N;
        for (int64_t j = 0; j < N; ++j) {
            const T* b = B + j * K;
            T s = 0;
            for (int64_t k = 0; k < K; ++k) s += a[k] * b[k];
            c[j] = accumulate ? c[j] + s : s;
        }
    }
}

// C(M,N) = A(K,M)^T * B(K,N)
template <class T>
void gemm_tn(const T* A, const T* B, T* C, int64_t M, int64_t N, int64_t K,
             bool accumulate = false, bool par = parallel_enabled()) {
#pragma omp parallel for schedule(static) if (par)
    for (int64_t i = 0; i < M; ++i) {
        T* c = C + i * N;
        if (!accumulate) std::fill(c, c + N, T(0));
        for (int64_t k = 0; k < K; ++k) {
            const T av = A[k * M + i];
            const T* b = B + k * N;
            for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// ---------------------------------------------------------------- conv ----

struct ConvDims {
    int64_t C, H, W;    // input
    int64_t Co, kh, kw; // filter
    int64_t stride, pad;
    int64_t OH, OW;     // output

    static ConvDims make(int64_t C, int64_t H, int64_t W, int64_t Co, int64_t kh, int64_t kw,
                         int64_t stride, int64_t pad) {
        ConvDims d{C, H, W, Co, kh, kw, stride, pad, 0, 0};
        d.OH = (H + 2 * pad - kh) / stride + 1;
        d.OW = (W + 2 * pad - kw) / stride + 1;
        return d;
    }
    int64_t col_rows() const { return C * kh * kw; }
    int64_t col_cols() const { return OH * OW; }
};

// One sample: x (C,H,W) -> col (C*kh*kw, OH*OW), zero-padded borders.
template <class T>
void im2col(const T* x, T* col, const ConvDims& d) {
    for (int64_t c = 0; c < d.C; ++c) {
        for (int64_t ky = 0; ky < d.kh; ++ky) {
            for (int64_t kx = 0; kx < d.kw; ++kx) {
                T* row = col + ((c * d.kh + ky) * d.kw + kx) * d.col_cols();
                for (int64_t oy = 0; oy < d.OH; ++oy) {
                    const int64_t iy = oy * d.stride - d.pad + ky;
                    T* out = row + oy * d.OW;
                    if (iy < 0 || iy >= d.H) {
                        std::fill(out, out + d.OW, T(0));
                        continue;
                    }
                    const T* in = x + (c * d.H + iy) * d.W;
                    for (int64_t ox = 0; ox < d.OW; ++ox) {
                        const int64_t ix = ox * d.stride - d.pad + kx;
                        out[ox] = (ix >= 0 && ix < d.W) ? in[ix] : T(0);
                    }
                }
            }
        }
    }
}

// Transpose of im2col: scatter-adds col gradient back onto the input grid.
template <class T>
void col2im_add(const T* col, T* dx, const ConvDims& d) {
    for (int64_t c = 0; c < d.C; ++c) {
        for (int64_t ky = 0; ky < d.kh; ++ky) {
            for (int64_t kx = 0; kx < d.kw; ++kx) {
                const T* row = col + ((c * d.kh + ky) * d.kw + kx) * d.col_cols();
                for (int64_t oy = 0; oy < d.OH; ++oy) {
                    const int64_t iy = oy * d.stride - d.pad + ky;
                    if (iy < 0 || iy >= d.H) continue;
                    T* out = dx + (c * d.H + iy) * d.W;
                    const T* in = row + oy * d.OW;
                    for (int64_t ox = 0; ox < d.OW; ++ox) {
                        const int64_t ix = ox * d.stride - d.pad + kx;
                        if (ix >= 0 && ix < d.W) out[ix] += in[ox];
                    }
                }
            }
        }
    }
}

// y (N,Co,OH,OW) = conv(x (N,C,H,W), w (Co,C,kh,kw)) + b. `col_buf` must hold
// col_rows()*col_cols() elements; it is scratch for one sample.
template <class T>
void conv2d_forward(const T* x, const T* w, const T* b, T* y, int64_t N, const ConvDims& d,
                    T* col_buf, bool par = parallel_enabled()) {
    for (int64_t n = 0; n < N; ++n) {
        im2col(x + n * d.C * d.H * d.W, col_buf, d);
        T* yn = y + n * d.Co * d.col_cols();
        gemm_nn(w, col_buf, yn, d.Co, d.col_cols(), d.col_rows(), false, par);
        if (b) {
#pragma omp parallel for schedule(static) if (par)
            for (int64_t co = 0; co < d.Co; ++co) {
                T* p = yn + co * d.col_cols();
                for (int64_t i = 0; i < d.col_cols(); ++i) p[i] += b[co];
            }
        }
    }
}

// Backward: dx, dw, db accumulate; any of them may be null to skip.
// Scratch: col_buf as above, dcol_buf same size.
template <class T>
void conv2d_backward(const T* x, const T* w, const T* dy, T* dx, T* dw, T* db, int64_t N,
                     const ConvDims& d, T* col_buf, T* dcol_buf, bool par = parallel_enabled()) {
    for (int64_t n = 0; n < N; ++n) {
        const T* dyn = dy + n * d.Co * d.col_cols();
        if (dw) {
            im2col(x + n * d.C * d.H * d.W, col_buf, d);
            gemm_nt(dyn, col_buf, dw, d.Co, d.col_rows(), d.col_cols(), true, par);
        }
        if (db) {
            for (int64_t co = 0; co < d.Co; ++co) {
                const T* p = dyn + co * d.col_cols();
                T s = 0;
                for (int64_t i = 0; i < d.col_cols(); ++i) s += p[i];
                db[co] += s;
            }
        }
        if (dx) {
            gemm_tn(w, dyn, dcol_buf, d.col_rows(), d.col_cols(), d.Co, false, par);
            col2im_add(dcol_buf, dx + n * d.C * d.H * d.W, d);
        }
    }
}

// ------------------------------------------------------------- softmax ----

// Row-wise stable softmax: x, y are (R, L).
template <class T>
void softmax_rows(const T* x, T* y, int64_t R, int64_t L, bool par = parallel_enabled()) {
#pragma omp parallel for schedule(static) if (par)
    for (int64_t r = 0; r < R; ++r) {
        const T* xi = x + r * L;
        T* yi = y + r * L;
        T m = xi[0];
        for (int64_t j = 1; j < L; ++j) m = std::max(m, xi[j]);
        T s = 0;
        for (int64_t j = 0; j < L; ++j) {
            yi[j] = std::exp(xi[j] - m);
            s += yi[j];
        }
        const T inv = T(1) / s;
        for (int64_t j = 0; j < L; ++j) yi[j] *= inv;
    }
}

// dx += p * (dy - dot(dy, p)) per row.
template <class T>
void softmax_rows_backward(const T* p, const T* dy, T* dx, int64_t R, int64_t L,
                           bool par = parallel_enabled()) {
#pragma omp parallel for schedule(static) if (par)
    for (int64_t r = 0; r < R; ++r) {
        const T* pi = p + r * L;
        const T* gi = dy + r * L;
        T* di = dx + r * L;
        T dot = 0;
        for (int64_t j = 0; j < L; ++j) dot += gi[j] * pi[j];
        for (int64_t j = 0; j < L; ++j) di[j] += pi[j] * (gi[j] - dot);
    }
}

// ----------------------------------------------------------- groupnorm ----

// x (N,C,H,W), `groups` divides C. Saves per-(n,g) mean and inverse stddev
// for the backward pass.
template <class T>
void groupnorm_forward(const T* x, const T* gamma, const T* beta, T* y, T* save_mean,
                       T* save_istd, int64_t N, int64_t C, int64_t HW, int64_t groups, T eps,
                       bool par = parallel_enabled()) {
    const int64_t cg = C / groups;
    const int64_t m = cg * HW;
#pragma omp parallel for schedule(static) collapse(2) if (par)
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t g = 0; g < groups; ++g) {
            const T* xg = x + (n * C + g * cg) * HW;
            T mean = 0;
            for (int64_t i = 0; i < m; ++i) mean += xg[i];
            mean /= static_cast<T>(m);
            T var = 0;
            for (int64_t i = 0; i < m; ++i) {
                const T dv = xg[i] - mean;
                var += dv * dv;
            }
            var /= static_cast<T>(m);
            const T istd = T(1) / std::sqrt(var + eps);
            save_mean[n * groups + g] = mean;
            save_istd[n * groups + g] = istd;
            T* yg = y + (n * C + g * cg) * HW;
            for (int64_t c = 0; c < cg; ++c) {
                const T ga = gamma[g * cg + c];
                const T be = beta[g * cg + c];
                const T* xc = xg + c * HW;
                T* yc = yg + c * HW;
                for (int64_t i = 0; i < HW; ++i) yc[i] = (xc[i] - mean) * istd * ga + be;
            }
        }
    }
}

template <class T>
void groupnorm_backward(const T* x, const T* gamma, const T* dy, const T* save_mean,
                        const T* save_istd, T* dx, T* dgamma, T* dbeta, int64_t N, int64_t C,
                        int64_t HW, int64_t groups, bool par = parallel_enabled()) {
    const int64_t cg = C / groups;
    const int64_t m = cg * HW;
    if (dx) {
#pragma omp parallel for schedule(static) collapse(2) if (par)
        for (int64_t n = 0; n < N; ++n) {
            for (int64_t g = 0; g < groups; ++g) {
                const T mean = save_mean[n * groups + g];
                const T istd = save_istd[n * groups + g];
                const T* xg = x + (n * C + g * cg) * HW;
                const T* dyg = dy + (n * C + g * cg) * HW;
                T sum_dxhat = 0, sum_dxhat_xhat = 0;
                for (int64_t c = 0; c < cg; ++c) {
                    const T ga = gamma[g * cg + c];
                    const T* xc = xg + c * HW;
                    const T* gc = dyg + c * HW;
                    for (int64_t i = 0; i < HW; ++i) {
                        const T xhat = (xc[i] - mean) * istd;
                        const T dxhat = gc[i] * ga;
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                }
                T* dxg = dx + (n * C + g * cg) * HW;
                const T inv_m = T(1) / static_cast<T>(m);
                for (int64_t c = 0; c < cg; ++c) {
                    const T ga = gamma[g * cg + c];
                    const T* xc = xg + c * HW;
                    const T* gc = dyg + c * HW;
                    T* dc = dxg + c * HW;
                    for (int64_t i = 0; i < HW; ++i) {
                        const T xhat = (xc[i] - mean) * istd;
                        const T dxhat = gc[i] * ga;
                        dc[i] += istd * (dxhat - inv_m * (sum_dxhat + xhat * sum_dxhat_xhat));
                    }
                }
            }
        }
    }
    if (dgamma && dbeta) {
        // serial over n keeps the accumulation order fixed
        for (int64_t n = 0; n < N; ++n) {
            for (int64_t g = 0; g < groups; ++g) {
                const T mean = save_mean[n * groups + g];
                const T istd = save_istd[n * groups + g];
                for (int64_t c = 0; c < cg; ++c) {
                    const T* xc = x + ((n * C + g * cg) + c) * HW;
                    const T* gc = dy + ((n * C + g * cg) + c) * HW;
                    T sg = 0, sb = 0;
                    for (int64_t i = 0; i < HW; ++i) {
                        sg += gc[i] * (xc[i] - mean) * istd;
                        sb += gc[i];
                    }
                    dgamma[g * cg + c] += sg;
                    dbeta[g * cg + c] += sb;
                }
            }
        }
    }
}

// ------------------------------------------------------------- resizes ----

// Bilinear resize of (P, H, W) planes to (P, H2, W2), half-pixel centers.
template <class T>
void resize_bilinear(const T* x, T* y, int64_t P, int64_t H, int64_t W, int64_t H2, int64_t W2,
                     bool par = parallel_enabled()) {
    const double sy = static_cast<double>(H) / H2;
    const double sx = static_cast<double>(W) / W2;
#pragma omp parallel for schedule(static) if (par)
    for (int64_t p = 0; p < P; ++p) {
        const T* xp = x + p * H * W;
        T* yp = y + p * H2 * W2;
        for (int64_t oy = 0; oy < H2; ++oy) {
            double fy = (oy + 0.5) * sy - 0.5;
            fy = std::min(std::max(fy, 0.0), static_cast<double>(H - 1));
            const int64_t y0 = static_cast<int64_t>(fy);
            const int64_t y1 = std::min(y0 + 1, H - 1);
            const T wy = static_cast<T>(fy - y0);
            for (int64_t ox = 0; ox < W2; ++ox) {
                double fx = (ox + 0.5) * sx - 0.5;
                fx = std::min(std::max(fx, 0.0), static_cast<double>(W - 1));
                const int64_t x0 = static_cast<int64_t>(fx);
                const int64_t x1 = std::min(x0 + 1, W - 1);
                const T wx = static_cast<T>(fx - x0);
                const T v00 = xp[y0 * W + x0], v01 = xp[y0 * W + x1];
                const T v10 = xp[y1 * W + x0], v11 = xp[y1 * W + x1];
                const T top = v00 + (v01 - v00) * wx;
                const T bot = v10 + (v11 - v10) * wx;
                yp[oy * W2 + ox] = top + (bot - top) * wy;
            }
        }
    }
}

// Transpose of resize_bilinear; dx accumulates.
template <class T>
void resize_bilinear_backward(const T* dy, T* dx, int64_t P, int64_t H, int64_t W, int64_t H2,
                              int64_t W2, bool par = parallel_enabled()) {
    const double sy = static_cast<double>(H) / H2;
    const double sx = static_cast<double>(W) / W2;
#pragma omp parallel for schedule(static) if (par)
    for (int64_t p = 0; p < P; ++p) {
        const T* gp = dy + p * H2 * W2;
        T* dp = dx + p * H * W;
        for (int64_t oy = 0; oy < H2; ++oy) {
            double fy = (oy + 0.5) * sy - 0.5;
            fy = std::min(std::max(fy, 0.0), static_cast<double>(H - 1));
            const int64_t y0 = static_cast<int64_t>(fy);
            const int64_t y1 = std::min(y0 + 1, H - 1);
            const T wy = static_cast<T>(fy - y0);
            for (int64_t ox = 0; ox < W2; ++ox) {
                double fx = (ox + 0.5) * sx - 0.5;
                fx = std::min(std::max(fx, 0.0), static_cast<double>(W - 1));
                const int64_t x0 = static_cast<int64_t>(fx);
                const int64_t x1 = std::min(x0 + 1, W - 1);
                const T wx = static_cast<T>(fx - x0);
                const T g = gp[oy * W2 + ox];
                dp[y0 * W + x0] += g * (1 - wy) * (1 - wx);
                dp[y0 * W + x1] += g * (1 - wy) * wx;
                dp[y1 * W + x0] += g * wy * (1 - wx);
                dp[y1 * W + x1] += g * wy * wx;
            }
        }
    }
}

// Area-average downsample by integer factor f on (P, H, W) planes.
template <class T>
void avgpool(const T* x, T* y, int64_t P, int64_t H, int64_t W, int64_t f,
             bool par = parallel_enabled()) {
    const int64_t OH = H / f, OW = W / f;
    const T inv = T(1) / static_cast<T>(f * f);
#pragma omp parallel for schedule(static) if (par)
    for (int64_t p = 0; p < P; ++p) {
        const T* xp = x + p * H * W;
        T* yp = y + p * OH * OW;
        for (int64_t oy = 0; oy < OH; ++oy)
            for (int64_t ox = 0; ox < OW; ++ox) {
                T s = 0;
                for (int64_t dy = 0; dy < f; ++dy)
                    for (int64_t dx = 0; dx < f; ++dx) s += xp[(oy * f + dy) * W + ox * f + dx];
                yp[oy * OW + ox] = s * inv;
            }
    }
}

template <class T>
void avgpool_backward(const T* dy, T* dx, int64_t P, int64_t H, int64_t W, int64_t f,
                      bool par = parallel_enabled()) {
    const int64_t OH = H / f, OW = W / f;
    const T inv = T(1) / static_cast<T>(f * f);
#pragma omp parallel for schedule(static) if (par)
    for (int64_t p = 0; p < P; ++p) {
        const T* gp = dy + p * OH * OW;
        T* dp = dx + p * H * W;
        for (int64_t oy = 0; oy < OH; ++oy)
            for (int64_t ox = 0; ox < OW; ++ox) {
                const T g = gp[oy * OW + ox] * inv;
                for (int64_t dyy = 0; dyy < f; ++dyy)
                    for (int64_t dxx = 0; dxx < f; ++dxx)
                        dp[(oy * f + dyy) * W + ox * f + dxx] += g;
            }
    }
}

template <class T>
void upsample_nearest2(const T* x, T* y, int64_t P, int64_t H, int64_t W,
                       bool par = parallel_enabled()) {
#pragma omp parallel for schedule(static) if (par)
    for (int64_t p = 0; p < P; ++p) {
        const T* xp = x + p * H * W;
        T* yp = y + p * 4 * H * W;
        for (int64_t yrow = 0; yrow < 2 * H; ++yrow) {
            const T* src = xp + (yrow / 2) * W;
            T* dst = yp + yrow * 2 * W;
            for (int64_t xcol = 0; xcol < 2 * W; ++xcol) dst[xcol] = src[xcol / 2];
        }
    }
}

template <class T>
void upsample_nearest2_backward(const T* dy, T* dx, int64_t P, int64_t H, int64_t W,
                                bool par = parallel_enabled()) {
#pragma omp parallel for schedule(static) if (par)
    for (int64_t p = 0; p < P; ++p) {
        const T* gp = dy + p * 4 * H * W;
        T* dp = dx + p * H * W;
        for (int64_t yrow = 0; yrow < H; ++yrow)
            for (int64_t xcol = 0; xcol < W; ++xcol) {
                T s = 0;
                for (int64_t a = 0; a < 2; ++a)
                    for (int64_t b = 0; b < 2; ++b)
                        s += gp[(2 * yrow + a) * 2 * W + 2 * xcol + b];
                dp[yrow * W + xcol] += s;
            }
    }
}

}  // namespace defectgen::kernels

#endif
