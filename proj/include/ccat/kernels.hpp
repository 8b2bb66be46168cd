#pragma once

#include <cstdint>

#include "ccat/errors.hpp"

// Compute kernels behind the tape ops. Each kernel exists twice: a plain
// serial reference under kernels::serial and an OpenMP version under
// kernels::omp. The public entry points dispatch on a global mode flag.
//
// Both versions accumulate each output element in the same order, so their
// results are bit-identical for any thread count (threads own disjoint
// output elements; no parallel reductions). Tests assert this equality and
// the training loops rely on it for reproducible runs.

namespace ccat::kernels {

enum class Mode { Serial, Parallel };

inline Mode& mode_ref() {
    static Mode m = Mode::Parallel;
    return m;
}
inline Mode mode() { return mode_ref(); }
inline void set_mode(Mode m) { mode_ref() = m; }

namespace detail {

// C (M x N) = or += A (M x K) * B (K x N), with optional transposes.
// Row-parallel; per-element accumulation order runs over k ascending.
template <typename T>
inline void matmul_rows(const T* a, const T* b, T* c, int64_t m_begin, int64_t m_end, int64_t K,
                        int64_t N, bool ta, bool tb, bool acc, int64_t lda, int64_t ldb) {
    for (int64_t m = m_begin; m < m_end; ++m) {
        T* crow = c + m * N;
        if (!acc)
            for (int64_t n = 0; n < N; ++n) crow[n] = T(0);
        if (!tb) {
            for (int64_t k = 0; k < K; ++k) {
                const T av = ta ? a[k * lda + m] : a[m * lda + k];
                const T* brow = b + k * ldb;
                for (int64_t n = 0; n < N; ++n) crow[n] += av * brow[n];
            }
        } else {
            for (int64_t n = 0; n < N; ++n) {
                const T* brow = b + n * ldb;
                T s = crow[n];
                if (ta) {
                    for (int64_t k = 0; k < K; ++k) s += a[k * lda + m] * brow[k];
                } else {
                    const T* arow = a + m * lda;
                    for (int64_t k = 0; k < K; ++k) s += arow[k] * brow[k];
                }
                crow[n] = s;
            }
        }
    }
}

// x and y pre-offset to the sample.
template <typename T>
inline void conv2d_fwd_one(const T* x, const T* w, const T* bias, T* y, int64_t oc, int64_t Cin,
                           int64_t H, int64_t W, int64_t k, int64_t pad, int64_t OH, int64_t OW) {
    const T bv = bias ? bias[oc] : T(0);
    T* yplane = y + oc * OH * OW;
    for (int64_t oh = 0; oh < OH; ++oh) {
        T* yrow = yplane + oh * OW;
        for (int64_t ow = 0; ow < OW; ++ow) yrow[ow] = bv;
        for (int64_t ic = 0; ic < Cin; ++ic) {
            const T* xplane = x + ic * H * W;  // caller pre-offsets x to sample n
            const T* wplane = w + (oc * Cin + ic) * k * k;
            for (int64_t kh = 0; kh < k; ++kh) {
                const int64_t ih = oh + kh - pad;
                if (ih < 0 || ih >= H) continue;
                const T* xrow = xplane + ih * W;
                for (int64_t kw = 0; kw < k; ++kw) {
                    const T wv = wplane[kh * k + kw];
                    const int64_t lo = pad - kw > 0 ? pad - kw : 0;
                    const int64_t hi = OW < W + pad - kw ? OW : W + pad - kw;
                    const int64_t off = kw - pad;
                    for (int64_t ow = lo; ow < hi; ++ow) yrow[ow] += wv * xrow[ow + off];
                }
            }
        }
    }
}

template <typename T>
inline void conv2d_bwd_input_one(const T* w, const T* dy, T* dx, int64_t oc_count, int64_t ic,
                                 int64_t Cin, int64_t H, int64_t W, int64_t k, int64_t pad,
                                 int64_t OH, int64_t OW) {
    // dy / dx pre-offset to the sample; accumulates into the dx plane for
    // channel ic (callers pass zeroed or partially accumulated gradients).
    T* dxplane = dx + ic * H * W;
    for (int64_t ih = 0; ih < H; ++ih) {
        T* dxrow = dxplane + ih * W;
        for (int64_t oc = 0; oc < oc_count; ++oc) {
            const T* dyplane = dy + oc * OH * OW;
            const T* wplane = w + (oc * Cin + ic) * k * k;
            for (int64_t kh = 0; kh < k; ++kh) {
                const int64_t oh = ih - kh + pad;
                if (oh < 0 || oh >= OH) continue;
                const T* dyrow = dyplane + oh * OW;
                for (int64_t kw = 0; kw < k; ++kw) {
                    const T wv = wplane[kh * k + kw];
                    const int64_t lo = kw - pad > 0 ? kw - pad : 0;
                    const int64_t hi = W < OW + kw - pad ? W : OW + kw - pad;
                    const int64_t off = pad - kw;
                    for (int64_t iw = lo; iw < hi; ++iw) dxrow[iw] += wv * dyrow[iw + off];
                }
            }
        }
    }
}

template <typename T>
inline void conv2d_bwd_weight_one(const T* x, const T* dy, T* dw, int64_t oc, int64_t ic,
                                  int64_t N, int64_t Cin, int64_t Cout, int64_t H, int64_t W,
                                  int64_t k, int64_t pad, int64_t OH, int64_t OW) {
    // Eight fixed accumulation lanes keep the row reduction vectorizable
    // without fast-math; the lane split is identical for the serial and omp
    // variants, so results stay bit-identical across modes and thread counts.
    T* wplane = dw + (oc * Cin + ic) * k * k;
    for (int64_t kh = 0; kh < k; ++kh) {
        for (int64_t kw = 0; kw < k; ++kw) {
            T acc[8] = {};
            T tail = T(0);
            for (int64_t n = 0; n < N; ++n) {
                const T* xplane = x + (n * Cin + ic) * H * W;
                const T* dyplane = dy + (n * Cout + oc) * OH * OW;
                for (int64_t oh = 0; oh < OH; ++oh) {
                    const int64_t ih = oh + kh - pad;
                    if (ih < 0 || ih >= H) continue;
                    const T* xrow = xplane + ih * W;
                    const T* dyrow = dyplane + oh * OW;
                    const int64_t lo = pad - kw > 0 ? pad - kw : 0;
                    const int64_t hi = OW < W + pad - kw ? OW : W + pad - kw;
                    const int64_t off = kw - pad;
                    int64_t ow = lo;
                    for (; ow + 8 <= hi; ow += 8)
                        for (int j = 0; j < 8; ++j) acc[j] += dyrow[ow + j] * xrow[ow + j + off];
                    for (; ow < hi; ++ow) tail += dyrow[ow] * xrow[ow + off];
                }
            }
            for (int j = 0; j < 8; ++j) tail += acc[j];
            wplane[kh * k + kw] += tail;
        }
    }
}

}  // namespace detail

namespace serial {

template <typename T>
void matmul(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N, bool ta, bool tb,
            bool acc) {
    const int64_t lda = ta ? M : K;
    const int64_t ldb = tb ? K : N;
    detail::matmul_rows(a, b, c, 0, M, K, N, ta, tb, acc, lda, ldb);
}

template <typename T>
void bmm(const T* a, const T* b, T* c, int64_t B, int64_t M, int64_t K, int64_t N, bool ta,
         bool tb, bool acc) {
    const int64_t lda = ta ? M : K;
    const int64_t ldb = tb ? K : N;
    for (int64_t i = 0; i < B; ++i)
        detail::matmul_rows(a + i * M * K, b + i * K * N, c + i * M * N, 0, M, K, N, ta, tb, acc,
                            lda, ldb);
}

template <typename T>
void conv2d_fwd(const T* x, const T* w, const T* bias, T* y, int64_t N, int64_t Cin, int64_t H,
                int64_t W, int64_t Cout, int64_t k, int64_t pad) {
    const int64_t OH = H + 2 * pad - k + 1, OW = W + 2 * pad - k + 1;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t oc = 0; oc < Cout; ++oc)
            detail::conv2d_fwd_one(x + n * Cin * H * W, w, bias, y + n * Cout * OH * OW, oc,
                                   Cin, H, W, k, pad, OH, OW);
}

template <typename T>
void conv2d_bwd_input(const T* w, const T* dy, T* dx, int64_t N, int64_t Cin, int64_t H,
                      int64_t W, int64_t Cout, int64_t k, int64_t pad) {
    const int64_t OH = H + 2 * pad - k + 1, OW = W + 2 * pad - k + 1;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t ic = 0; ic < Cin; ++ic)
            detail::conv2d_bwd_input_one(w, dy + n * Cout * OH * OW, dx + n * Cin * H * W, Cout,
                                         ic, Cin, H, W, k, pad, OH, OW);
}

template <typename T>
void conv2d_bwd_weight(const T* x, const T* dy, T* dw, T* db, int64_t N, int64_t Cin, int64_t H,
                       int64_t W, int64_t Cout, int64_t k, int64_t pad) {
    const int64_t OH = H + 2 * pad - k + 1, OW = W + 2 * pad - k + 1;
    if (dw)
        for (int64_t oc = 0; oc < Cout; ++oc)
            for (int64_t ic = 0; ic < Cin; ++ic)
                detail::conv2d_bwd_weight_one(x, dy, dw, oc, ic, N, Cin, Cout, H, W, k, pad, OH,
                                              OW);
    if (db) {
        for (int64_t oc = 0; oc < Cout; ++oc) {
            T s = T(0);
            for (int64_t n = 0; n < N; ++n) {
                const T* dyplane = dy + (n * Cout + oc) * OH * OW;
                for (int64_t i = 0; i < OH * OW; ++i) s += dyplane[i];
            }
            db[oc] += s;
        }
    }
}

}  // namespace serial

namespace omp {

template <typename T>
void matmul(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N, bool ta, bool tb,
            bool acc) {
    const int64_t lda = ta ? M : K;
    const int64_t ldb = tb ? K : N;
#pragma omp parallel for schedule(static)
    for (int64_t m = 0; m < M; ++m)
        detail::matmul_rows(a, b, c, m, m + 1, K, N, ta, tb, acc, lda, ldb);
}

template <typename T>
void bmm(const T* a, const T* b, T* c, int64_t B, int64_t M, int64_t K, int64_t N, bool ta,
         bool tb, bool acc) {
    const int64_t lda = ta ? M : K;
    const int64_t ldb = tb ? K : N;
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < B; ++i)
        detail::matmul_rows(a + i * M * K, b + i * K * N, c + i * M * N, 0, M, K, N, ta, tb, acc,
                            lda, ldb);
}

template <typename T>
void conv2d_fwd(const T* x, const T* w, const T* bias, T* y, int64_t N, int64_t Cin, int64_t H,
                int64_t W, int64_t Cout, int64_t k, int64_t pad) {
    const int64_t OH = H + 2 * pad - k + 1, OW = W + 2 * pad - k + 1;
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n)
        for (int64_t oc = 0; oc < Cout; ++oc)
            detail::conv2d_fwd_one(x + n * Cin * H * W, w, bias, y + n * Cout * OH * OW, oc,
                                   Cin, H, W, k, pad, OH, OW);
}

template <typename T>
void conv2d_bwd_input(const T* w, const T* dy, T* dx, int64_t N, int64_t Cin, int64_t H,
                      int64_t W, int64_t Cout, int64_t k, int64_t pad) {
    const int64_t OH = H + 2 * pad - k + 1, OW = W + 2 * pad - k + 1;
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n)
        for (int64_t ic = 0; ic < Cin; ++ic)
            detail::conv2d_bwd_input_one(w, dy + n * Cout * OH * OW, dx + n * Cin * H * W, Cout,
                                         ic, Cin, H, W, k, pad, OH, OW);
}

template <typename T>
void conv2d_bwd_weight(const T* x, const T* dy, T* dw, T* db, int64_t N, int64_t Cin, int64_t H,
                       int64_t W, int64_t Cout, int64_t k, int64_t pad) {
    const int64_t OH = H + 2 * pad - k + 1, OW = W + 2 * pad - k + 1;
    if (dw) {
#pragma omp parallel for collapse(2) schedule(static)
        for (int64_t oc = 0; oc < Cout; ++oc)
            for (int64_t ic = 0; ic < Cin; ++ic)
                detail::conv2d_bwd_weight_one(x, dy, dw, oc, ic, N, Cin, Cout, H, W, k, pad, OH,
                                              OW);
    }
    if (db) {
#pragma omp parallel for schedule(static)
        for (int64_t oc = 0; oc < Cout; ++oc) {
            T s = T(0);
            for (int64_t n = 0; n < N; ++n) {
                const T* dyplane = dy + (n * Cout + oc) * OH * OW;
                for (int64_t i = 0; i < OH * OW; ++i) s += dyplane[i];
            }
            db[oc] += s;
        }
    }
}

}  // namespace omp

// Dispatching entry points.

template <typename T>
void matmul(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N, bool ta, bool tb,
            bool acc) {
    if (mode() == Mode::Parallel)
        omp::matmul(a, b, c, M, K, N, ta, tb, acc);
    else
        serial::matmul(a, b, c, M, K, N, ta, tb, acc);
}

template <typename T>
void bmm(const T* a, const T* b, T* c, int64_t B, int64_t M, int64_t K, int64_t N, bool ta,
         bool tb, bool acc) {
    if (mode() == Mode::Parallel)
        omp::bmm(a, b, c, B, M, K, N, ta, tb, acc);
    else
        serial::bmm(a, b, c, B, M, K, N, ta, tb, acc);
}

template <typename T>
void conv2d_fwd(const T* x, const T* w, const T* bias, T* y, int64_t N, int64_t Cin, int64_t H,
                int64_t W, int64_t Cout, int64_t k, int64_t pad) {
    if (mode() == Mode::Parallel)
        omp::conv2d_fwd(x, w, bias, y, N, Cin, H, W, Cout, k, pad);
    else
        serial::conv2d_fwd(x, w, bias, y, N, Cin, H, W, Cout, k, pad);
}

template <typename T>
void conv2d_bwd_input(const T* w, const T* dy, T* dx, int64_t N, int64_t Cin, int64_t H,
                      int64_t W, int64_t Cout, int64_t k, int64_t pad) {
    if (mode() == Mode::Parallel)
        omp::conv2d_bwd_input(w, dy, dx, N, Cin, H, W, Cout, k, pad);
    else
        serial::conv2d_bwd_input(w, dy, dx, N, Cin, H, W, Cout, k, pad);
}

template <typename T>
void conv2d_bwd_weight(const T* x, const T* dy, T* dw, T* db, int64_t N, int64_t Cin, int64_t H,
                       int64_t W, int64_t Cout, int64_t k, int64_t pad) {
    if (mode() == Mode::Parallel)
        omp::conv2d_bwd_weight(x, dy, dw, db, N, Cin, H, W, Cout, k, pad);
    else
        serial::conv2d_bwd_weight(x, dy, dw, db, N, Cin, H, W, Cout, k, pad);
}

}  // namespace ccat::kernels
