#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <vector>

#include "ccat/kernels.hpp"
#include "ccat/tape.hpp"

// Differentiable tensor ops recorded on the tape. Shape checks throw
// DimensionError; backward closures accumulate into the inputs' grad buffers.

namespace ccat::ops {

template <typename T>
using Var = VarT<T>;

namespace detail {

template <typename T>
bool any_needs(std::initializer_list<Var<T>> vs) {
    for (const auto& v : vs)
        if (v.valid() && v.needs()) return true;
    return false;
}

inline int64_t rows_of(const std::vector<int64_t>& shape) {
    int64_t r = 1;
    for (size_t i = 0; i + 1 < shape.size(); ++i) r *= shape[i];
    return r;
}

}  // namespace detail

// ---- elementwise arithmetic ----

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    check_same_shape(a.value(), b.value(), "add");
    TapeT<T>& tp = *a.tape;
    TensorT<T> out(a.value().shape);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
    const int ia = a.id, ib = b.id, self = static_cast<int>(tp.size());
    const bool na = a.needs(), nb = b.needs();
    int id = tp.push_op(std::move(out), na || nb, [=](TapeT<T>& t) {
        const TensorT<T>& g = *t.grad_if(self);
        if (na) {
            TensorT<T>& ga = t.grad_buf(ia);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (nb) {
            TensorT<T>& gb = t.grad_buf(ib);
            for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
        }
    });
    return Var<T>{&tp, id};
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    check_same_shape(a.value(), b.value(), "sub");
    TapeT<T>& tp = *a.tape;
    TensorT<T> out(a.value().shape);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
    const int ia = a.id, ib = b.id, self = static_cast<int>(tp.size());
    const bool na = a.needs(), nb = b.needs();
    int id = tp.push_op(std::move(out), na || nb, [=](TapeT<T>& t) {
        const TensorT<T>& g = *t.grad_if(self);
        if (na) {
            TensorT<T>& ga = t.grad_buf(ia);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (nb) {
            TensorT<T>& gb = t.grad_buf(ib);
            for (int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
        }
    });
    return Var<T>{&tp, id};
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    check_same_shape(a.value(), b.value(), "mul");
    TapeT<T>& tp = *a.tape;
    TensorT<T> out(a.value().shape);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
    const int ia = a.id, ib = b.id, self = static_cast<int>(tp.size());
    const bool na = a.needs(), nb = b.needs();
    int id = tp.push_op(std::move(out), na || nb, [=](TapeT<T>& t) {
        const TensorT<T>& g = *t.grad_if(self);
        if (na) {
            TensorT<T>& ga = t.grad_buf(ia);
            const TensorT<T>& bv = t.val(ib);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
        }
        if (nb) {
            TensorT<T>& gb = t.grad_buf(ib);
            const TensorT<T>& av = t.val(ia);
            for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
        }
    });
    return Var<T>{&tp, id};
}

template <typename T>
Var<T> scale(Var<T> a, double c) {
    TapeT<T>& tp = *a.tape;
    TensorT<T> out(a.value().shape);
    const T cc = static_cast<T>(c);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * cc;
    const int ia = a.id, self = static_cast<int>(tp.size());
    const bool na = a.needs();
    int id = tp.push_op(std::move(out), na, [=](TapeT<T>& t) {
        const TensorT<T>& g = *t.grad_if(self);
        TensorT<T>& ga = t.grad_buf(ia);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * cc;
    });
    return Var<T>{&tp, id};
}

// ---- activations ----

namespace detail {

// Generic unary op: fwd(x) and dfdx(x, y).
template <typename T, typename F, typename DF>
Var<T> unary(Var<T> a, F fwd, DF dfdx) {
    TapeT<T>& tp = *a.tape;
    TensorT<T> out(a.value().shape);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = fwd(a.value()[i]);
    const int ia = a.id, self = static_cast<int>(tp.size());
    const bool na = a.needs();
    int id = tp.push_op(std::move(out), na, [=](TapeT<T>& t) {
        const TensorT<T>& g = *t.grad_if(self);
        const TensorT<T>& x = t.val(ia);
        const TensorT<T>& y = t.val(self);
        TensorT<T>& ga = t.grad_buf(ia);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * dfdx(x[i], y[i]);
    });
    return Var<T>{&tp, id};
}

}  // namespace detail

template <typename T>
Var<T> leaky_relu(Var<T> a, double slope) {
    const T s = static_cast<T>(slope);
    return detail::unary(
        a, [s](T x) { return x > T(0) ? x : s * x; },
        [s](T x, T) { return x > T(0) ? T(1) : s; });
}

template <typename T>
Var<T> relu(Var<T> a) {
    return detail::unary(
        a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
    return detail::unary(
        a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> gelu(Var<T> a) {
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    return detail::unary(
        a,
        [](T x) {
            return static_cast<T>(0.5 * static_cast<double>(x) *
                                  (1.0 + std::erf(static_cast<double>(x) * kInvSqrt2)));
        },
        [](T x, T) {
            const double xd = static_cast<double>(x);
            const double cdf = 0.5 * (1.0 + std::erf(xd * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * xd * xd);
            return static_cast<T>(cdf + xd * pdf);
        });
}

// ---- linear / matmul ----

// x: (..., K) flattened to rows, w: (K, N), b: (N). out: (..., N).
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
    const auto& xs = x.value().shape;
    const auto& ws = w.value().shape;
    if (ws.size() != 2) throw DimensionError("linear: weight must be rank-2");
    const int64_t K = xs.back(), N = ws[1];
    if (ws[0] != K) throw DimensionError("linear: weight rows != input dim");
    if (b.value().numel() != N) throw DimensionError("linear: bias size != output dim");
    const int64_t M = detail::rows_of(xs);
    TapeT<T>& tp = *x.tape;

    std::vector<int64_t> oshape(xs.begin(), xs.end() - 1);
    oshape.push_back(N);
    TensorT<T> out(oshape);
    kernels::matmul(x.value().ptr(), w.value().ptr(), out.ptr(), M, K, N, false, false, false);
    for (int64_t m = 0; m < M; ++m)
        for (int64_t n = 0; n < N; ++n) out[m * N + n] += b.value()[n];

    const int ix = x.id, iw = w.id, ib = b.id, self = static_cast<int>(tp.size());
    const bool nx = x.needs(), nw = w.needs(), nb = b.needs();
    int id = tp.push_op(std::move(out), nx || nw || nb, [=](TapeT<T>& t) {
        const TensorT<T>& g = *t.grad_if(self);
        if (nx) {
            TensorT<T>& gx = t.grad_buf(ix);
            kernels::matmul(g.ptr(), t.val(iw).ptr(), gx.ptr(), M, N, K, false, true, true);
        }
        if (nw) {
            TensorT<T>& gw = t.grad_buf(iw);
            kernels::matmul(t.val(ix).ptr(), g.ptr(), gw.ptr(), K, M, N, true, false, true);
        }
        if (nb) {
            TensorT<T>& gb = t.grad_buf(ib);
            for (int64_t m = 0; m < M; ++m)
                for (int64_t n = 0; n < N; ++n) gb[n] += g[m * N + n];
        }
    });
    return Var<T>{&tp, id};
}

// Batched matmul over flattened leading dims. a: (L..., M, K) [or (L..., K, M)
// when ta], b: (L..., K, N) [or (L..., N, K) when tb]; out: (L..., M, N).
template <typename T>
Var<T> bmm(Var<T> a, Var<T> b, bool ta, bool tb) {
    const auto& as = a.value().shape;
    const auto& bs = b.value().shape;
    if (as.size() < 2 || bs.size() != as.size()) throw DimensionError("bmm: rank mismatch");
    for (size_t i = 0; i + 2 < as.size(); ++i)
        if (as[i] != bs[i]) throw DimensionError("bmm: leading dims differ");
    int64_t batch = 1;
    for (size_t i = 0; i + 2 < as.size(); ++i) batch *= as[i];
    const int64_t M = ta ? as.back() : as[as.size() - 2];
    const int64_t K = ta ? as[as.size() - 2] : as.back();
    const int64_t Kb = tb ? bs.back() : bs[bs.size() - 2];
    const int64_t N = tb ? bs[bs.size() - 2] : bs.back();
    if (K != Kb) throw DimensionError("bmm: inner dims differ");

    TapeT<T>& tp = *a.tape;
    std::vector<int64_t> oshape(as.begin(), as.end() - 2);
    oshape.push_back(M);
    oshape.push_back(N);
    TensorT<T> out(oshape);
    kernels::bmm(a.value().ptr(), b.value().ptr(), out.ptr(), batch, M, K, N, ta, tb, false);

    const int ia = a.id, ib = b.id, self = static_cast<int>(tp.size());
    const bool na = a.needs(), nb = b.needs();
    int id = tp.push_op(std::move(out), na || nb, [=](TapeT<T>& t) {
        const TensorT<T>& g = *t.grad_if(self);
        const T* gp = g.ptr();
        const T* ap = t.val(ia).ptr();
        const T* bp = t.val(ib).ptr();
        if (na) {
            T* gap = t.grad_buf(ia).ptr();
            if (!ta && !tb)
                kernels::bmm(gp, bp, gap, batch, M, N, K, false, true, true);
            else if (!ta && tb)
                kernels::bmm(gp, bp, gap, batch, M, N, K, false, false, true);
            else if (ta && !tb)
                kernels::bmm(bp, gp, gap, batch, K, N, M, false, true, true);
            else
                kernels::bmm(bp, gp, gap, batch, K, N, M, true, true, true);
        }
        if (nb) {
            T* gbp = t.grad_buf(ib).ptr();
            if (!ta && !tb)
                kernels::bmm(ap, gp, gbp, batch, K, M, N, true, false, true);
            else if (!ta && tb)
                kernels::bmm(gp, ap, gbp, batch, N, M, K, true, false, true);
            else if (ta && !tb)
                kernels::bmm(ap, gp, gbp, batch, K, M, N, false, false, true);
            else
                kernels::bmm(gp, ap, gbp, batch, N, M, K, true, true, true);
        }
    });
    return Var<T>{&tp, id};
}

// ---- convolution / pooling / resampling ----

// x: (B, Cin, H, W), w: (Cout, Cin, k, k), b: (Cout); stride 1.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int64_t pad) {
    const auto& xs = x.value().shape;
    const auto& ws = w.value().shape;
    if (xs.size() != 4) throw DimensionError("conv2d: input must be rank-4");
    if (ws.size() != 4 || ws[2] != ws[3]) throw DimensionError("conv2d: weight must be (Cout,Cin,k,k)");
    if (ws[1] != xs[1]) throw DimensionError("conv2d: channel mismatch");
    if (b.value().numel() != ws[0]) throw DimensionError("conv2d: bias size mismatch");
    const int64_t B = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
    const int64_t Cout = ws[0], k = ws[2];
    const int64_t OH = H + 2 * pad - k + 1, OW = W + 2 * pad - k + 1;
    if (OH < 1 || OW < 1) throw DimensionError("conv2d: output would be empty");

    TapeT<T>& tp = *x.tape;
    TensorT<T> out({B, Cout, OH, OW});
    kernels::conv2d_fwd(x.value().ptr(), w.value().ptr(), b.value().ptr(), out.ptr(), B, Cin, H,
                        W, Cout, k, pad);

    const int ix = x.id, iw = w.id, ib = b.id, self = static_cast<int>(tp.size());
    const bool nx = x.needs(), nw = w.needs(), nb = b.needs();
    int id = tp.push_op(std::move(out), nx || nw || nb, [=](TapeT<T>& t) {
        const TensorT<T>& g = *t.grad_if(self);
        if (nx)
            kernels::conv2d_bwd_input(t.val(iw).ptr(), g.ptr(), t.grad_buf(ix).ptr(), B, Cin, H,
                                      W, Cout, k, pad);
        if (nw || nb)
            kernels::conv2d_bwd_weight(t.val(ix).ptr(), g.ptr(),
                                       nw ? t.grad_buf(iw).ptr() : nullptr,
                                       nb ? t.grad_buf(ib).ptr() : nullptr, B, Cin, H, W, Cout, k,
                                       pad);
    });
    return Var<T>{&tp, id};
}

template <typename T>
Var<T> maxpool2x2(Var<T> x) {
    const auto& xs = x.value().shape;
    if (xs.size() != 4) throw DimensionError("maxpool2x2: input must be rank-4");
    const int64_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    if (H % 2 != 0 || W % 2 != 0)
        throw DimensionError("maxpool2x2: spatial dims must be even, got " + x.value().shape_str());
    const int64_t OH = H / 2, OW = W / 2;

    TapeT<T>& tp = *x.tape;
    TensorT<T> out({B, C, OH, OW});
    std::vector<int64_t> arg(static_cast<size_t>(out.numel()));
    const TensorT<T>& xv = x.value();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t oh = 0; oh < OH; ++oh)
                for (int64_t ow = 0; ow < OW; ++ow) {
                    int64_t base = ((b * C + c) * H + oh * 2) * W + ow * 2;
                    int64_t best = base;
                    T bv = xv[base];
                    const int64_t cands[3] = {base + 1, base + W, base + W + 1};
                    for (int64_t cand : cands)
                        if (xv[cand] > bv) {
                            bv = xv[cand];
                            best = cand;
                        }
                    int64_t o = ((b * C + c) * OH + oh) * OW + ow;
                    out[o] = bv;
                    arg[static_cast<size_t>(o)] = best;
                }

    const int ix = x.id, self = static_cast<int>(tp.size());
    const bool nx = x.needs();
    int id = tp.push_op(std::move(out), nx, [=, arg = std::move(arg)](TapeT<T>& t) {
        const TensorT<T>& g = *t.grad_if(self);
        TensorT<T>& gx = t.grad_buf(ix);
        for (int64_t i = 0; i < g.numel(); ++i) gx[arg[static_cast<size_t>(i)]] += g[i];
    });
    return Var<T>{&tp, id};
}

template <typename T>
Var<T> upsample_nearest2x(Var<T> x) {
    const auto& xs = x.value().shape;
    if (xs.size() != 4) throw DimensionError("upsample_nearest2x: input must be rank-4");
    const int64_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    TapeT<T>& tp = *x.tape;
    TensorT<T> out({B, C, H * 2, W * 2});
    const TensorT<T>& xv = x.value();
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const T* xp = xv.ptr() + bc * H * W;
        T* op = out.ptr() + bc * 4 * H * W;
        for (int64_t h = 0; h < H; ++h)
            for (int64_t w = 0; w < W; ++w) {
                T v = xp[h * W + w];
                T* o00 = op + (2 * h) * 2 * W + 2 * w;
                o00[0] = v;
                o00[1] = v;
                o00[2 * W] = v;
                o00[2 * W + 1] = v;
            }
    }
    const int ix = x.id, self = static_cast<int>(tp.size());
    const bool nx = x.needs();
    int id = tp.push_op(std::move(out), nx, [=](TapeT<T>& t) {
        const TensorT<T>& g = *t.grad_if(self);
        TensorT<T>& gx = t.grad_buf(ix);
        for (int64_t bc = 0; bc < B * C; ++bc) {
            T* gxp = gx.ptr() + bc * H * W;
            const T* gp = g.ptr() + bc * 4 * H * W;
            for (int64_t h = 0; h < H; ++h)
                for (int64_t w = 0; w < W; ++w) {
                    const T* g00 = gp + (2 * h) * 2 * W + 2 * w;
                    gxp[h * W + w] += g00[0] + g00[1] + g00[2 * W] + g00[2 * W + 1];
                }
        }
    });
    return Var<T>{&tp, id};
}

// ---- normalization ----

enum class NormMode { Train, Eval };

// Batch norm over (B, H, W) per channel. running_mean/var are buffers owned
// by the caller; updated in Train mode when update_running is set.
template <typename T>
Var<T> batchnorm2d(Var<T> x, Var<T> gamma, Var<T> beta, TensorT<T>* running_mean,
                   TensorT<T>* running_var, NormMode mode, double momentum, double eps,
                   bool update_running = true) {
    const auto& xs = x.value().shape;
    if (xs.size() != 4) throw DimensionError("batchnorm2d: input must be rank-4");
    const int64_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    if (gamma.value().numel() != C || beta.value().numel() != C)
        throw DimensionError("batchnorm2d: scale/shift size mismatch");
    const int64_t count = B * H * W;
    const int64_t plane = H * W;

    TapeT<T>& tp = *x.tape;
    TensorT<T> out(xs);
    TensorT<T> xhat(xs);
    std::vector<T> inv_std(static_cast<size_t>(C));
    const TensorT<T>& xv = x.value();
    const TensorT<T>& gv = gamma.value();
    const TensorT<T>& bv = beta.value();

    for (int64_t c = 0; c < C; ++c) {
        T mu, iv;
        if (mode == NormMode::Train) {
            T s = 0;
            for (int64_t b = 0; b < B; ++b) {
                const T* xp = xv.ptr() + (b * C + c) * plane;
                for (int64_t i = 0; i < plane; ++i) s += xp[i];
            }
            mu = s / static_cast<T>(count);
            T vs = 0;
            for (int64_t b = 0; b < B; ++b) {
                const T* xp = xv.ptr() + (b * C + c) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    T d = xp[i] - mu;
                    vs += d * d;
                }
            }
            T var = vs / static_cast<T>(count);
            iv = T(1) / std::sqrt(var + static_cast<T>(eps));
            if (update_running && running_mean && running_var) {
                const T m = static_cast<T>(momentum);
                (*running_mean)[c] = (T(1) - m) * (*running_mean)[c] + m * mu;
                T var_unbiased = count > 1 ? vs / static_cast<T>(count - 1) : var;
                (*running_var)[c] = (T(1) - m) * (*running_var)[c] + m * var_unbiased;
            }
        } else {
            mu = (*running_mean)[c];
            iv = T(1) / std::sqrt((*running_var)[c] + static_cast<T>(eps));
        }
        inv_std[static_cast<size_t>(c)] = iv;
        for (int64_t b = 0; b < B; ++b) {
            const T* xp = xv.ptr() + (b * C + c) * plane;
            T* hp = xhat.ptr() + (b * C + c) * plane;
            T* op = out.ptr() + (b * C + c) * plane;
            for (int64_t i = 0; i < plane; ++i) {
                T h = (xp[i] - mu) * iv;
                hp[i] = h;
                op[i] = gv[c] * h + bv[c];
            }
        }
    }

    const int ix = x.id, ig = gamma.id, ibt = beta.id, self = static_cast<int>(tp.size());
    const bool nx = x.needs(), ng = gamma.needs(), nb = beta.needs();
    const bool train = mode == NormMode::Train;
    int id = tp.push_op(std::move(out), nx || ng || nb,
                        [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](TapeT<T>& t) {
        const TensorT<T>& g = *t.grad_if(self);
        const TensorT<T>& gam = t.val(ig);
        for (int64_t c = 0; c < C; ++c) {
            T sum_g = 0, sum_gx = 0;
            for (int64_t b = 0; b < B; ++b) {
                const T* gp = g.ptr() + (b * C + c) * plane;
                const T* hp = xhat.ptr() + (b * C + c) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    sum_g += gp[i];
                    sum_gx += gp[i] * hp[i];
                }
            }
            if (ng) t.grad_buf(ig)[c] += sum_gx;
            if (nb) t.grad_buf(ibt)[c] += sum_g;
            if (nx) {
                TensorT<T>& gx = t.grad_buf(ix);
                const T iv = inv_std[static_cast<size_t>(c)];
                const T gc = gam[c];
                if (train) {
                    const T mg = sum_g / static_cast<T>(count);
                    const T mgx = sum_gx / static_cast<T>(count);
                    for (int64_t b = 0; b < B; ++b) {
                        const T* gp = g.ptr() + (b * C + c) * plane;
                        const T* hp = xhat.ptr() + (b * C + c) * plane;
                        T* gxp = gx.ptr() + (b * C + c) * plane;
                        for (int64_t i = 0; i < plane; ++i)
                            gxp[i] += gc * iv * (gp[i] - mg - hp[i] * mgx);
                    }
                } else {
                    for (int64_t b = 0; b < B; ++b) {
                        const T* gp = g.ptr() + (b * C + c) * plane;
                        T* gxp = gx.ptr() + (b * C + c) * plane;
                        for (int64_t i = 0; i < plane; ++i) gxp[i] += gc * iv * gp[i];
                    }
                }
            }
        }
    });
    return Var<T>{&tp, id};
}

// Layer norm over the last dim; gamma/beta: (D).
template <typename T>
Var<T> layernorm(Var<T> x, Var<T> gamma, Var<T> beta, double eps = 1e-5) {
    const auto& xs = x.value().shape;
    const int64_t D = xs.back();
    const int64_t R = detail::rows_of(xs);
    if (gamma.value().numel() != D || beta.value().numel() != D)
        throw DimensionError("layernorm: scale/shift size mismatch");

    TapeT<T>& tp = *x.tape;
    TensorT<T> out(xs);
    TensorT<T> xhat(xs);
    std::vector<T> inv_std(static_cast<size_t>(R));
    const TensorT<T>& xv = x.value();
    const TensorT<T>& gv = gamma.value();
    const TensorT<T>& bv = beta.value();
    for (int64_t r = 0; r < R; ++r) {
        const T* xp = xv.ptr() + r * D;
        T mu = 0;
        for (int64_t d = 0; d < D; ++d) mu += xp[d];
        mu /= static_cast<T>(D);
        T vs = 0;
        for (int64_t d = 0; d < D; ++d) {
            T dd = xp[d] - mu;
            vs += dd * dd;
        }
        const T iv = T(1) / std::sqrt(vs / static_cast<T>(D) + static_cast<T>(eps));
        inv_std[static_cast<size_t>(r)] = iv;
        T* hp = xhat.ptr() + r * D;
        T* op = out.ptr() + r * D;
        for (int64_t d = 0; d < D; ++d) {
            T h = (xp[d] - mu) * iv;
            hp[d] = h;
            op[d] = gv[d] * h + bv[d];
        }
    }

    const int ix = x.id, ig = gamma.id, ib = beta.id, self = static_cast<int>(tp.size());
    const bool nx = x.needs(), ng = gamma.needs(), nb = beta.needs();
    int id = tp.push_op(std::move(out), nx || ng || nb,
                        [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](TapeT<T>& t) {
        const TensorT<T>& g = *t.grad_if(self);
        const TensorT<T>& gam = t.val(ig);
        if (ng || nb) {
            for (int64_t r = 0; r < R; ++r) {
                const T* gp = g.ptr() + r * D;
                const T* hp = xhat.ptr() + r * D;
                for (int64_t d = 0; d < D; ++d) {
                    if (ng) t.grad_buf(ig)[d] += gp[d] * hp[d];
                    if (nb) t.grad_buf(ib)[d] += gp[d];
                }
            }
        }
        if (nx) {
            TensorT<T>& gx = t.grad_buf(ix);
            std::vector<T> h(static_cast<size_t>(D));
            for (int64_t r = 0; r < R; ++r) {
                const T* gp = g.ptr() + r * D;
                const T* hp = xhat.ptr() + r * D;
                T m1 = 0, m2 = 0;
                for (int64_t d = 0; d < D; ++d) {
                    h[static_cast<size_t>(d)] = gp[d] * gam[d];
                    m1 += h[static_cast<size_t>(d)];
                    m2 += h[static_cast<size_t>(d)] * hp[d];
                }
                m1 /= static_cast<T>(D);
                m2 /= static_cast<T>(D);
                const T iv = inv_std[static_cast<size_t>(r)];
                T* gxp = gx.ptr() + r * D;
                for (int64_t d = 0; d < D; ++d)
                    gxp[d] += iv * (h[static_cast<size_t>(d)] - m1 - hp[d] * m2);
            }
        }
    });
    return Var<T>{&tp, id};
}

// ---- softmax ----

template <typename T>
Var<T> softmax_lastdim(Var<T> x) {
    const auto& xs = x.value().shape;
    const int64_t D = xs.back();
    const int64_t R = detail::rows_of(xs);
    TapeT<T>& tp = *x.tape;
    TensorT<T> out(xs);
    const TensorT<T>& xv = x.value();
    for (int64_t r = 0; r < R; ++r) {
        const T* xp = xv.ptr() + r * D;
        T* op = out.ptr() + r * D;
        T mx = xp[0];
        for (int64_t d = 1; d < D; ++d) mx = std::max(mx, xp[d]);
        T s = 0;
        for (int64_t d = 0; d < D; ++d) {
            op[d] = std::exp(xp[d] - mx);
            s += op[d];
        }
        const T inv = T(1) / s;
        for (int64_t d = 0; d < D; ++d) op[d] *= inv;
    }
    const int ix = x.id, self = static_cast<int>(tp.size());
    const bool nx = x.needs();
    int id = tp.push_op(std::move(out), nx, [=](TapeT<T>& t) {
        const TensorT<T>& g = *t.grad_if(self);
        const TensorT<T>& y = t.val(self);
        TensorT<T>& gx = t.grad_buf(ix);
        for (int64_t r = 0; r < R; ++r) {
            const T* gp = g.ptr() + r * D;
            const T* yp = y.ptr() + r * D;
            T s = 0;
            for (int64_t d = 0; d < D; ++d) s += gp[d] * yp[d];
            T* gxp = gx.ptr() + r * D;
            for (int64_t d = 0; d < D; ++d) gxp[d] += yp[d] * (gp[d] - s);
        }
    });
    return Var<T>{&tp, id};
}

// Softmax over the channel axis of (B, C, H, W).
template <typename T>
Var<T> softmax_channel(Var<T> x) {
    const auto& xs = x.value().shape;
    if (xs.size() != 4) throw DimensionError("softmax_channel: input must be rank-4");
    const int64_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const int64_t plane = H * W;
    TapeT<T>& tp = *x.tape;
    TensorT<T> out(xs);
    const TensorT<T>& xv = x.value();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < plane; ++i) {
            const T* xp = xv.ptr() + b * C * plane + i;
            T* op = out.ptr() + b * C * plane + i;
            T mx = xp[0];
            for (int64_t c = 1; c < C; ++c) mx = std::max(mx, xp[c * plane]);
            T s = 0;
            for (int64_t c = 0; c < C; ++c) {
                T e = std::exp(xp[c * plane] - mx);
                op[c * plane] = e;
                s += e;
            }
            const T inv = T(1) / s;
            for (int64_t c = 0; c < C; ++c) op[c * plane] *= inv;
        }
    const int ix = x.id, self = static_cast<int>(tp.size());
    const bool nx = x.needs();
    int id = tp.push_op(std::move(out), nx, [=](TapeT<T>& t) {
        const TensorT<T>& g = *t.grad_if(self);
        const TensorT<T>& y = t.val(self);
        TensorT<T>& gx = t.grad_buf(ix);
        for (int64_t b = 0; b < B; ++b)
            for (int64_t i = 0; i < plane; ++i) {
                const T* gp = g.ptr() + b * C * plane + i;
                const T* yp = y.ptr() + b * C * plane + i;
                T s = 0;
                for (int64_t c = 0; c < C; ++c) s += gp[c * plane] * yp[c * plane];
                T* gxp = gx.ptr() + b * C * plane + i;
                for (int64_t c = 0; c < C; ++c)
                    gxp[c * plane] += yp[c * plane] * (gp[c * plane] - s);
            }
    });
    return Var<T>{&tp, id};
}

// ---- shape manipulation ----

template <typename T>
Var<T> reshape(Var<T> x, std::vector<int64_t> shape) {
    if (TensorT<T>::count(shape) != x.value().numel())
        throw DimensionError("reshape: element count mismatch");
    TapeT<T>& tp = *x.tape;
    TensorT<T> out(shape, x.value().data);
    const int ix = x.id, self = static_cast<int>(tp.size());
    const bool nx = x.needs();
    int id = tp.push_op(std::move(out), nx, [=](TapeT<T>& t) {
        const TensorT<T>& g = *t.grad_if(self);
        TensorT<T>& gx = t.grad_buf(ix);
        for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    });
    return Var<T>{&tp, id};
}

namespace detail {

template <typename T>
TensorT<T> permute_copy(const TensorT<T>& in, const std::vector<int>& perm) {
    const int r = in.rank();
    std::vector<int64_t> oshape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) oshape[static_cast<size_t>(i)] = in.shape[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    TensorT<T> out(oshape);
    std::vector<int64_t> istrides(static_cast<size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i)
        istrides[static_cast<size_t>(i)] = istrides[static_cast<size_t>(i + 1)] * in.shape[static_cast<size_t>(i + 1)];
    std::vector<int64_t> map_strides(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) map_strides[static_cast<size_t>(i)] = istrides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    const int64_t n = out.numel();
    int64_t src = 0;
    for (int64_t o = 0; o < n; ++o) {
        out[o] = in[src];
        for (int i = r - 1; i >= 0; --i) {
            idx[static_cast<size_t>(i)]++;
            src += map_strides[static_cast<size_t>(i)];
            if (idx[static_cast<size_t>(i)] < oshape[static_cast<size_t>(i)]) break;
            src -= map_strides[static_cast<size_t>(i)] * oshape[static_cast<size_t>(i)];
            idx[static_cast<size_t>(i)] = 0;
        }
    }
    return out;
}

}  // namespace detail

template <typename T>
Var<T> permute(Var<T> x, std::vector<int> perm) {
    if (static_cast<int>(perm.size()) != x.value().rank())
        throw DimensionError("permute: perm rank mismatch");
    TapeT<T>& tp = *x.tape;
    TensorT<T> out = detail::permute_copy(x.value(), perm);
    std::vector<int> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
    const int ix = x.id, self = static_cast<int>(tp.size());
    const bool nx = x.needs();
    int id = tp.push_op(std::move(out), nx, [=, inv = std::move(inv)](TapeT<T>& t) {
        const TensorT<T>& g = *t.grad_if(self);
        TensorT<T> gperm = detail::permute_copy(g, inv);
        TensorT<T>& gx = t.grad_buf(ix);
        for (int64_t i = 0; i < gperm.numel(); ++i) gx[i] += gperm[i];
    });
    return Var<T>{&tp, id};
}

template <typename T>
Var<T> slice_lastdim(Var<T> x, int64_t start, int64_t len) {
    const auto& xs = x.value().shape;
    const int64_t D = xs.back();
    if (start < 0 || len < 1 || start + len > D) throw DimensionError("slice_lastdim: out of range");
    const int64_t R = detail::rows_of(xs);
    TapeT<T>& tp = *x.tape;
    std::vector<int64_t> oshape(xs.begin(), xs.end() - 1);
    oshape.push_back(len);
    TensorT<T> out(oshape);
    const TensorT<T>& xv = x.value();
    for (int64_t r = 0; r < R; ++r)
        for (int64_t j = 0; j < len; ++j) out[r * len + j] = xv[r * D + start + j];
    const int ix = x.id, self = static_cast<int>(tp.size());
    const bool nx = x.needs();
    int id = tp.push_op(std::move(out), nx, [=](TapeT<T>& t) {
        const TensorT<T>& g = *t.grad_if(self);
        TensorT<T>& gx = t.grad_buf(ix);
        for (int64_t r = 0; r < R; ++r)
            for (int64_t j = 0; j < len; ++j) gx[r * D + start + j] += g[r * len + j];
    });
    return Var<T>{&tp, id};
}

template <typename T>
Var<T> concat_lastdim(Var<T> a, Var<T> b) {
    const auto& as = a.value().shape;
    const auto& bs = b.value().shape;
    if (as.size() != bs.size()) throw DimensionError("concat_lastdim: rank mismatch");
    for (size_t i = 0; i + 1 < as.size(); ++i)
        if (as[i] != bs[i]) throw DimensionError("concat_lastdim: leading dims differ");
    const int64_t Da = as.back(), Db = bs.back();
    const int64_t R = detail::rows_of(as);
    TapeT<T>& tp = *a.tape;
    std::vector<int64_t> oshape(as.begin(), as.end() - 1);
    oshape.push_back(Da + Db);
    TensorT<T> out(oshape);
    for (int64_t r = 0; r < R; ++r) {
        for (int64_t j = 0; j < Da; ++j) out[r * (Da + Db) + j] = a.value()[r * Da + j];
        for (int64_t j = 0; j < Db; ++j) out[r * (Da + Db) + Da + j] = b.value()[r * Db + j];
    }
    const int ia = a.id, ib = b.id, self = static_cast<int>(tp.size());
    const bool na = a.needs(), nb = b.needs();
    int id = tp.push_op(std::move(out), na || nb, [=](TapeT<T>& t) {
        const TensorT<T>& g = *t.grad_if(self);
        if (na) {
            TensorT<T>& ga = t.grad_buf(ia);
            for (int64_t r = 0; r < R; ++r)
                for (int64_t j = 0; j < Da; ++j) ga[r * Da + j] += g[r * (Da + Db) + j];
        }
        if (nb) {
            TensorT<T>& gb = t.grad_buf(ib);
            for (int64_t r = 0; r < R; ++r)
                for (int64_t j = 0; j < Db; ++j) gb[r * Db + j] += g[r * (Da + Db) + Da + j];
        }
    });
    return Var<T>{&tp, id};
}

// Concatenate along the channel axis of (B, C, H, W).
template <typename T>
Var<T> concat_channel(Var<T> a, Var<T> b) {
    const auto& as = a.value().shape;
    const auto& bs = b.value().shape;
    if (as.size() != 4 || bs.size() != 4) throw DimensionError("concat_channel: inputs must be rank-4");
    if (as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3])
        throw DimensionError("concat_channel: non-channel dims differ: " + a.value().shape_str() +
                             " vs " + b.value().shape_str());
    const int64_t B = as[0], Ca = as[1], Cb = bs[1], plane = as[2] * as[3];
    TapeT<T>& tp = *a.tape;
    TensorT<T> out({B, Ca + Cb, as[2], as[3]});
    for (int64_t n = 0; n < B; ++n) {
        std::copy(a.value().ptr() + n * Ca * plane, a.value().ptr() + (n + 1) * Ca * plane,
                  out.ptr() + n * (Ca + Cb) * plane);
        std::copy(b.value().ptr() + n * Cb * plane, b.value().ptr() + (n + 1) * Cb * plane,
                  out.ptr() + (n * (Ca + Cb) + Ca) * plane);
    }
    const int ia = a.id, ib = b.id, self = static_cast<int>(tp.size());
    const bool na = a.needs(), nb = b.needs();
    int id = tp.push_op(std::move(out), na || nb, [=](TapeT<T>& t) {
        const TensorT<T>& g = *t.grad_if(self);
        for (int64_t n = 0; n < B; ++n) {
            if (na) {
                TensorT<T>& ga = t.grad_buf(ia);
                const T* gp = g.ptr() + n * (Ca + Cb) * plane;
                T* gap = ga.ptr() + n * Ca * plane;
                for (int64_t i = 0; i < Ca * plane; ++i) gap[i] += gp[i];
            }
            if (nb) {
                TensorT<T>& gb = t.grad_buf(ib);
                const T* gp = g.ptr() + (n * (Ca + Cb) + Ca) * plane;
                T* gbp = gb.ptr() + n * Cb * plane;
                for (int64_t i = 0; i < Cb * plane; ++i) gbp[i] += gp[i];
            }
        }
    });
    return Var<T>{&tp, id};
}

// ---- reductions ----

template <typename T>
Var<T> sum_all(Var<T> x) {
    TapeT<T>& tp = *x.tape;
    T s = 0;
    for (int64_t i = 0; i < x.value().numel(); ++i) s += x.value()[i];
    TensorT<T> out({1});
    out[0] = s;
    const int ix = x.id, self = static_cast<int>(tp.size());
    const bool nx = x.needs();
    int id = tp.push_op(std::move(out), nx, [=](TapeT<T>& t) {
        const T g = (*t.grad_if(self))[0];
        TensorT<T>& gx = t.grad_buf(ix);
        for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += g;
    });
    return Var<T>{&tp, id};
}

template <typename T>
Var<T> mean_all(Var<T> x) {
    return scale(sum_all(x), 1.0 / static_cast<double>(x.value().numel()));
}

// Fixed-coefficient linear functional; used by gradient checks.
template <typename T>
Var<T> dot_const(Var<T> x, TensorT<T> coeffs) {
    check_same_shape(x.value(), coeffs, "dot_const");
    TapeT<T>& tp = *x.tape;
    T s = 0;
    for (int64_t i = 0; i < coeffs.numel(); ++i) s += x.value()[i] * coeffs[i];
    TensorT<T> out({1});
    out[0] = s;
    const int ix = x.id, self = static_cast<int>(tp.size());
    const bool nx = x.needs();
    int id = tp.push_op(std::move(out), nx, [=, coeffs = std::move(coeffs)](TapeT<T>& t) {
        const T g = (*t.grad_if(self))[0];
        TensorT<T>& gx = t.grad_buf(ix);
        for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += g * coeffs[i];
    });
    return Var<T>{&tp, id};
}

}  // namespace ccat::ops
