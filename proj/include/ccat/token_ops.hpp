#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ccat/ops.hpp"

// Token-layout ops for the transformer stages. Token grids are stored as
// (B, H*W, D) with tokens row-major over (row, col). Most ops here are pure
// re-indexings, expressed through one generic gather with scatter-add
// backward.

namespace ccat::ops {

namespace detail {

// out[i] = x[map[i]]; backward scatters g back through the map.
template <typename T>
Var<T> gather_map(Var<T> x, std::vector<int64_t> map, std::vector<int64_t> oshape) {
    TapeT<T>& tp = *x.tape;
    TensorT<T> out(oshape);
    const TensorT<T>& xv = x.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = xv[map[static_cast<size_t>(i)]];
    const int ix = x.id, self = static_cast<int>(tp.size());
    const bool nx = x.needs();
    int id = tp.push_op(std::move(out), nx, [=, map = std::move(map)](TapeT<T>& t) {
        const TensorT<T>& g = *t.grad_if(self);
        TensorT<T>& gx = t.grad_buf(ix);
        for (int64_t i = 0; i < g.numel(); ++i) gx[map[static_cast<size_t>(i)]] += g[i];
    });
    return Var<T>{&tp, id};
}

template <typename T>
void expect_tokens(const TensorT<T>& x, int64_t H, int64_t W, const char* what) {
    if (x.rank() != 3 || x.shape[1] != H * W)
        throw DimensionError(std::string(what) + ": expected (B, " + std::to_string(H * W) +
                             ", D) tokens, got " + x.shape_str());
}

}  // namespace detail

// Cyclic shift of the token grid: out(r, c) = in((r - dy) mod H, (c - dx) mod W).
template <typename T>
Var<T> roll_tokens(Var<T> x, int64_t H, int64_t W, int64_t dy, int64_t dx) {
    detail::expect_tokens(x.value(), H, W, "roll_tokens");
    const int64_t B = x.value().shape[0], D = x.value().shape[2];
    auto wrap = [](int64_t v, int64_t n) { return ((v % n) + n) % n; };
    std::vector<int64_t> map(static_cast<size_t>(B * H * W * D));
    size_t o = 0;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t r = 0; r < H; ++r)
            for (int64_t c = 0; c < W; ++c) {
                const int64_t src = (b * H * W + wrap(r - dy, H) * W + wrap(c - dx, W)) * D;
                for (int64_t d = 0; d < D; ++d) map[o++] = src + d;
            }
    return detail::gather_map(x, std::move(map), {B, H * W, D});
}

// (B, H*W, D) -> (B*nWin, win*win, D); windows row-major over the grid,
// tokens row-major within each window.
template <typename T>
Var<T> window_partition_op(Var<T> x, int64_t H, int64_t W, int64_t win) {
    detail::expect_tokens(x.value(), H, W, "window_partition");
    if (H % win != 0 || W % win != 0)
        throw DimensionError("window_partition: grid not divisible by window size");
    const int64_t B = x.value().shape[0], D = x.value().shape[2];
    const int64_t wh = H / win, ww = W / win;
    std::vector<int64_t> map(static_cast<size_t>(B * H * W * D));
    size_t o = 0;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t wr = 0; wr < wh; ++wr)
            for (int64_t wc = 0; wc < ww; ++wc)
                for (int64_t i = 0; i < win; ++i)
                    for (int64_t j = 0; j < win; ++j) {
                        const int64_t src =
                            (b * H * W + (wr * win + i) * W + wc * win + j) * D;
                        for (int64_t d = 0; d < D; ++d) map[o++] = src + d;
                    }
    return detail::gather_map(x, std::move(map), {B * wh * ww, win * win, D});
}

// Inverse of window_partition_op.
template <typename T>
Var<T> window_reverse_op(Var<T> x, int64_t H, int64_t W, int64_t win) {
    const auto& xs = x.value().shape;
    const int64_t wh = H / win, ww = W / win;
    if (xs.size() != 3 || xs[1] != win * win || xs[0] % (wh * ww) != 0)
        throw DimensionError("window_reverse: bad window batch " + x.value().shape_str());
    const int64_t B = xs[0] / (wh * ww), D = xs[2];
    std::vector<int64_t> map(static_cast<size_t>(B * H * W * D));
    size_t o = 0;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t r = 0; r < H; ++r)
            for (int64_t c = 0; c < W; ++c) {
                const int64_t wi = (r / win) * ww + c / win;
                const int64_t ti = (r % win) * win + c % win;
                const int64_t src = ((b * wh * ww + wi) * win * win + ti) * D;
                for (int64_t d = 0; d < D; ++d) map[o++] = src + d;
            }
    return detail::gather_map(x, std::move(map), {B, H * W, D});
}

// (B, C, H, W) -> (B, H*W, C).
template <typename T>
Var<T> space_to_tokens(Var<T> x) {
    const auto& xs = x.value().shape;
    if (xs.size() != 4) throw DimensionError("space_to_tokens: input must be rank-4");
    const int64_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    std::vector<int64_t> map(static_cast<size_t>(x.value().numel()));
    size_t o = 0;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t t = 0; t < H * W; ++t)
            for (int64_t c = 0; c < C; ++c) map[o++] = (b * C + c) * H * W + t;
    return detail::gather_map(x, std::move(map), {B, H * W, C});
}

// (B, H*W, C) -> (B, C, H, W).
template <typename T>
Var<T> tokens_to_space(Var<T> x, int64_t H, int64_t W) {
    detail::expect_tokens(x.value(), H, W, "tokens_to_space");
    const int64_t B = x.value().shape[0], C = x.value().shape[2];
    std::vector<int64_t> map(static_cast<size_t>(x.value().numel()));
    size_t o = 0;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t t = 0; t < H * W; ++t) map[o++] = (b * H * W + t) * C + c;
    return detail::gather_map(x, std::move(map), {B, C, H, W});
}

// Patch-merge gather: concatenates each 2x2 neighbourhood's features in the
// order (0,0), (1,0), (0,1), (1,1) of (row, col) offsets.
// (B, H*W, D) -> (B, (H/2)*(W/2), 4D).
template <typename T>
Var<T> merge_gather(Var<T> x, int64_t H, int64_t W) {
    detail::expect_tokens(x.value(), H, W, "merge_gather");
    if (H % 2 != 0 || W % 2 != 0) throw DimensionError("merge_gather: grid dims must be even");
    const int64_t B = x.value().shape[0], D = x.value().shape[2];
    const int64_t OH = H / 2, OW = W / 2;
    static constexpr int64_t kOff[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
    std::vector<int64_t> map(static_cast<size_t>(x.value().numel()));
    size_t o = 0;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t r = 0; r < OH; ++r)
            for (int64_t c = 0; c < OW; ++c)
                for (const auto& off : kOff) {
                    const int64_t src =
                        (b * H * W + (2 * r + off[0]) * W + 2 * c + off[1]) * D;
                    for (int64_t d = 0; d < D; ++d) map[o++] = src + d;
                }
    return detail::gather_map(x, std::move(map), {B, OH * OW, 4 * D});
}

// Patch-expand scatter, the mirror of merge_gather: each token's feature
// vector splits into four chunks of C/4 placed at the 2x2 neighbourhood in
// the same offset order. (B, H*W, C) -> (B, (2H)*(2W), C/4).
template <typename T>
Var<T> expand_scatter(Var<T> x, int64_t H, int64_t W) {
    detail::expect_tokens(x.value(), H, W, "expand_scatter");
    const int64_t B = x.value().shape[0], C = x.value().shape[2];
    if (C % 4 != 0) throw DimensionError("expand_scatter: feature dim must be divisible by 4");
    const int64_t D = C / 4, OH = 2 * H, OW = 2 * W;
    static constexpr int64_t kOff[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
    std::vector<int64_t> map(static_cast<size_t>(x.value().numel()));
    for (int64_t b = 0; b < B; ++b)
        for (int64_t r = 0; r < H; ++r)
            for (int64_t c = 0; c < W; ++c)
                for (int64_t q = 0; q < 4; ++q) {
                    const int64_t dst_tok = (2 * r + kOff[q][0]) * OW + 2 * c + kOff[q][1];
                    const int64_t src = (b * H * W + r * W + c) * C + q * D;
                    int64_t* mp = map.data() + (b * OH * OW + dst_tok) * D;
                    for (int64_t d = 0; d < D; ++d) mp[d] = src + d;
                }
    return detail::gather_map(x, std::move(map), {B, OH * OW, D});
}

// (B, N, D) -> (B, D), mean over tokens.
template <typename T>
Var<T> mean_tokens(Var<T> x) {
    const auto& xs = x.value().shape;
    if (xs.size() != 3) throw DimensionError("mean_tokens: input must be rank-3");
    const int64_t B = xs[0], N = xs[1], D = xs[2];
    TapeT<T>& tp = *x.tape;
    TensorT<T> out({B, D}, T(0));
    const TensorT<T>& xv = x.value();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t n = 0; n < N; ++n)
            for (int64_t d = 0; d < D; ++d) out[b * D + d] += xv[(b * N + n) * D + d];
    const T inv = T(1) / static_cast<T>(N);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= inv;
    const int ix = x.id, self = static_cast<int>(tp.size());
    const bool nx = x.needs();
    int id = tp.push_op(std::move(out), nx, [=](TapeT<T>& t) {
        const TensorT<T>& g = *t.grad_if(self);
        TensorT<T>& gx = t.grad_buf(ix);
        for (int64_t b = 0; b < B; ++b)
            for (int64_t n = 0; n < N; ++n)
                for (int64_t d = 0; d < D; ++d) gx[(b * N + n) * D + d] += g[b * D + d] * inv;
    });
    return Var<T>{&tp, id};
}

// x: (B, N, D) scaled per-sample/per-feature by s: (B, D).
template <typename T>
Var<T> mul_tokens_scale(Var<T> x, Var<T> s) {
    const auto& xs = x.value().shape;
    const auto& ss = s.value().shape;
    if (xs.size() != 3 || ss.size() != 2 || ss[0] != xs[0] || ss[1] != xs[2])
        throw DimensionError("mul_tokens_scale: shapes " + x.value().shape_str() + " vs " +
                             s.value().shape_str());
    const int64_t B = xs[0], N = xs[1], D = xs[2];
    TapeT<T>& tp = *x.tape;
    TensorT<T> out(xs);
    const TensorT<T>& xv = x.value();
    const TensorT<T>& sv = s.value();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t n = 0; n < N; ++n)
            for (int64_t d = 0; d < D; ++d)
                out[(b * N + n) * D + d] = xv[(b * N + n) * D + d] * sv[b * D + d];
    const int ix = x.id, is = s.id, self = static_cast<int>(tp.size());
    const bool nx = x.needs(), ns = s.needs();
    int id = tp.push_op(std::move(out), nx || ns, [=](TapeT<T>& t) {
        const TensorT<T>& g = *t.grad_if(self);
        const TensorT<T>& x2 = t.val(ix);
        const TensorT<T>& s2 = t.val(is);
        for (int64_t b = 0; b < B; ++b)
            for (int64_t n = 0; n < N; ++n)
                for (int64_t d = 0; d < D; ++d) {
                    const int64_t i = (b * N + n) * D + d;
                    if (nx) t.grad_buf(ix)[i] += g[i] * s2[b * D + d];
                    if (ns) t.grad_buf(is)[b * D + d] += g[i] * x2[i];
                }
    });
    return Var<T>{&tp, id};
}

// Relative position bias: table (table_size, heads), index (L*L) of rows.
// Produces (heads, L, L) with out[h, i, j] = table[index[i*L + j], h].
template <typename T>
Var<T> gather_rel_bias(Var<T> table, std::vector<int64_t> index, int64_t L) {
    const auto& ts = table.value().shape;
    if (ts.size() != 2) throw DimensionError("gather_rel_bias: table must be rank-2");
    if (static_cast<int64_t>(index.size()) != L * L)
        throw DimensionError("gather_rel_bias: index size mismatch");
    const int64_t tsz = ts[0], heads = ts[1];
    for (int64_t v : index)
        if (v < 0 || v >= tsz) throw DimensionError("gather_rel_bias: index out of range");
    TapeT<T>& tp = *table.tape;
    TensorT<T> out({heads, L, L});
    const TensorT<T>& tv = table.value();
    for (int64_t h = 0; h < heads; ++h)
        for (int64_t p = 0; p < L * L; ++p)
            out[h * L * L + p] = tv[index[static_cast<size_t>(p)] * heads + h];
    const int it = table.id, self = static_cast<int>(tp.size());
    const bool nt = table.needs();
    int id = tp.push_op(std::move(out), nt, [=, index = std::move(index)](TapeT<T>& t) {
        const TensorT<T>& g = *t.grad_if(self);
        TensorT<T>& gt = t.grad_buf(it);
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t p = 0; p < L * L; ++p)
                gt[index[static_cast<size_t>(p)] * heads + h] += g[h * L * L + p];
    });
    return Var<T>{&tp, id};
}

// x: (BW, heads, L, L) plus bias (heads, L, L) broadcast over the first dim.
template <typename T>
Var<T> add_bias_bcast(Var<T> x, Var<T> bias) {
    const auto& xs = x.value().shape;
    const auto& bs = bias.value().shape;
    if (xs.size() != 4 || bs.size() != 3 || xs[1] != bs[0] || xs[2] != bs[1] || xs[3] != bs[2])
        throw DimensionError("add_bias_bcast: shapes " + x.value().shape_str() + " vs " +
                             bias.value().shape_str());
    const int64_t BW = xs[0], inner = xs[1] * xs[2] * xs[3];
    TapeT<T>& tp = *x.tape;
    TensorT<T> out(xs);
    for (int64_t b = 0; b < BW; ++b)
        for (int64_t i = 0; i < inner; ++i)
            out[b * inner + i] = x.value()[b * inner + i] + bias.value()[i];
    const int ix = x.id, ib = bias.id, self = static_cast<int>(tp.size());
    const bool nx = x.needs(), nb = bias.needs();
    int id = tp.push_op(std::move(out), nx || nb, [=](TapeT<T>& t) {
        const TensorT<T>& g = *t.grad_if(self);
        if (nx) {
            TensorT<T>& gx = t.grad_buf(ix);
            for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
        }
        if (nb) {
            TensorT<T>& gb = t.grad_buf(ib);
            for (int64_t b = 0; b < BW; ++b)
                for (int64_t i = 0; i < inner; ++i) gb[i] += g[b * inner + i];
        }
    });
    return Var<T>{&tp, id};
}

// x: (B*nW, heads, L, L) plus per-window mask (nW, L, L), constant (no grad
// flows into the mask). Window index cycles fastest over the batch dim.
template <typename T>
Var<T> add_mask_bcast(Var<T> x, const TensorT<T>& mask, int64_t n_windows) {
    const auto& xs = x.value().shape;
    const auto& ms = mask.shape;
    if (xs.size() != 4 || ms.size() != 3 || ms[0] != n_windows || ms[1] != xs[2] ||
        ms[2] != xs[3] || xs[0] % n_windows != 0)
        throw DimensionError("add_mask_bcast: shapes " + x.value().shape_str() + " vs " +
                             mask.shape_str());
    const int64_t BW = xs[0], heads = xs[1], LL = xs[2] * xs[3];
    TapeT<T>& tp = *x.tape;
    TensorT<T> out(xs);
    for (int64_t b = 0; b < BW; ++b) {
        const T* mp = mask.ptr() + (b % n_windows) * LL;
        for (int64_t h = 0; h < heads; ++h) {
            const int64_t base = (b * heads + h) * LL;
            for (int64_t i = 0; i < LL; ++i) out[base + i] = x.value()[base + i] + mp[i];
        }
    }
    const int ix = x.id, self = static_cast<int>(tp.size());
    const bool nx = x.needs();
    int id = tp.push_op(std::move(out), nx, [=](TapeT<T>& t) {
        const TensorT<T>& g = *t.grad_if(self);
        TensorT<T>& gx = t.grad_buf(ix);
        for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    });
    return Var<T>{&tp, id};
}

}  // namespace ccat::ops
