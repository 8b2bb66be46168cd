#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "ccat/ops.hpp"
#include "ccat/rng.hpp"

// Training objectives. Losses operate on per-pixel class-probability maps
// (batch, classes, H, W); targets may be soft and are treated as constants.

namespace ccat {

struct LossWeights {
    double alpha1 = 0.5;   // cross-entropy share of the supervised loss
    double alpha2 = 0.5;   // tversky share of the supervised loss
    double w_c = 0.3;      // consistency term weight
    double w_m = 0.4;      // mixup term weight
    double w_f = 0.3;      // fix term weight
    double temp = 0.5;     // sharpening temperature
    double ema_alpha = 0.9;  // pseudo-label refinement EMA
    double mix_alpha = 0.75;  // Beta(a, a) for mixup
    int k_weak = 2;        // number of weak augmentation views

    void validate() const {
        if (alpha1 < 0 || alpha2 < 0 || w_c < 0 || w_m < 0 || w_f < 0)
            throw ParameterError("loss weights must be non-negative");
        if (temp <= 0) throw ParameterError("sharpening temperature must be positive");
        if (ema_alpha < 0 || ema_alpha >= 1) throw ParameterError("ema_alpha must lie in [0,1)");
        if (k_weak < 1) throw ParameterError("k_weak must be at least 1");
    }
};

struct TverskyParams {
    double tv_alpha = 0.3;  // false-positive weight
    double tv_beta = 0.7;   // false-negative weight

    void validate() const {
        if (tv_alpha < 0 || tv_beta < 0 || tv_alpha + tv_beta <= 0)
            throw ParameterError("tversky weights must be non-negative and not both zero");
    }
};

struct LossBreakdown {
    double ls = 0, lc = 0, lm = 0, lf = 0, total = 0;
};

namespace ops {

inline constexpr double kLogClamp = 1e-12;

// Mean over batch and pixels of -sum_c target_c * log(pred_c); soft targets
// allowed. log is clamped at 1e-12 with zero gradient in the clamped region.
template <typename T>
Var<T> cross_entropy(Var<T> pred, const TensorT<T>& target) {
    check_same_shape(pred.value(), target, "cross_entropy");
    const auto& s = pred.value().shape;
    if (s.size() != 4) throw DimensionError("cross_entropy: inputs must be rank-4");
    const int64_t npix = s[0] * s[2] * s[3];
    TapeT<T>& tp = *pred.tape;
    const T clamp = static_cast<T>(kLogClamp);
    T acc = 0;
    for (int64_t i = 0; i < target.numel(); ++i) {
        const T p = pred.value()[i] < clamp ? clamp : pred.value()[i];
        acc -= target[i] * std::log(p);
    }
    TensorT<T> out({1});
    out[0] = acc / static_cast<T>(npix);
    const int ip = pred.id, self = static_cast<int>(tp.size());
    const bool np = pred.needs();
    int id = tp.push_op(std::move(out), np, [=, target = target](TapeT<T>& t) {
        const T g = (*t.grad_if(self))[0] / static_cast<T>(npix);
        const TensorT<T>& p = t.val(ip);
        TensorT<T>& gp = t.grad_buf(ip);
        for (int64_t i = 0; i < target.numel(); ++i)
            if (p[i] >= clamp) gp[i] -= g * target[i] / p[i];
    });
    return Var<T>{&tp, id};
}

// 1 - (TP + 1) / (TP + tv_alpha*FP + tv_beta*FN + 1) with soft counts taken
// over the foreground channel (class 1) of the whole batch.
template <typename T>
Var<T> tversky(Var<T> pred, const TensorT<T>& target, const TverskyParams& tvp) {
    check_same_shape(pred.value(), target, "tversky");
    const auto& s = pred.value().shape;
    if (s.size() != 4 || s[1] < 2) throw DimensionError("tversky: inputs must be (B,C>=2,H,W)");
    tvp.validate();
    const int64_t B = s[0], C = s[1], plane = s[2] * s[3];
    TapeT<T>& tp = *pred.tape;
    T tpos = 0, fpos = 0, fneg = 0;
    for (int64_t b = 0; b < B; ++b) {
        const T* p1 = pred.value().ptr() + (b * C + 1) * plane;
        const T* t1 = target.ptr() + (b * C + 1) * plane;
        for (int64_t i = 0; i < plane; ++i) {
            tpos += p1[i] * t1[i];
            fpos += p1[i] * (T(1) - t1[i]);
            fneg += (T(1) - p1[i]) * t1[i];
        }
    }
    const T num = tpos + T(1);
    const T den = tpos + static_cast<T>(tvp.tv_alpha) * fpos + static_cast<T>(tvp.tv_beta) * fneg + T(1);
    TensorT<T> out({1});
    out[0] = T(1) - num / den;
    const int ip = pred.id, self = static_cast<int>(tp.size());
    const bool np = pred.needs();
    const T a = static_cast<T>(tvp.tv_alpha), bw = static_cast<T>(tvp.tv_beta);
    int id = tp.push_op(std::move(out), np, [=, target = target](TapeT<T>& t) {
        const T g = (*t.grad_if(self))[0];
        TensorT<T>& gp = t.grad_buf(ip);
        const T den2 = den * den;
        for (int64_t b = 0; b < B; ++b) {
            const T* t1 = target.ptr() + (b * C + 1) * plane;
            T* g1 = gp.ptr() + (b * C + 1) * plane;
            for (int64_t i = 0; i < plane; ++i) {
                const T dn = t1[i];
                const T dd = t1[i] + a * (T(1) - t1[i]) - bw * t1[i];
                g1[i] += g * (-(dn * den - num * dd) / den2);
            }
        }
    });
    return Var<T>{&tp, id};
}

// Mean squared error over all entries; both sides differentiable.
template <typename T>
Var<T> mse(Var<T> a, Var<T> b) {
    check_same_shape(a.value(), b.value(), "mse");
    TapeT<T>& tp = *a.tape;
    const int64_t n = a.value().numel();
    T acc = 0;
    for (int64_t i = 0; i < n; ++i) {
        const T d = a.value()[i] - b.value()[i];
        acc += d * d;
    }
    TensorT<T> out({1});
    out[0] = acc / static_cast<T>(n);
    const int ia = a.id, ib = b.id, self = static_cast<int>(tp.size());
    const bool na = a.needs(), nb = b.needs();
    int id = tp.push_op(std::move(out), na || nb, [=](TapeT<T>& t) {
        const T g = (*t.grad_if(self))[0] * T(2) / static_cast<T>(n);
        const TensorT<T>& av = t.val(ia);
        const TensorT<T>& bv = t.val(ib);
        for (int64_t i = 0; i < n; ++i) {
            const T d = g * (av[i] - bv[i]);
            if (na) t.grad_buf(ia)[i] += d;
            if (nb) t.grad_buf(ib)[i] -= d;
        }
    });
    return Var<T>{&tp, id};
}

template <typename T>
Var<T> mse_const(Var<T> a, const TensorT<T>& b) {
    return mse(a, make_constant(*a.tape, b));
}

template <typename T>
Var<T> supervised_loss(Var<T> pred, const TensorT<T>& target, const LossWeights& lw,
                       const TverskyParams& tvp) {
    return add(scale(cross_entropy(pred, target), lw.alpha1),
               scale(tversky(pred, target, tvp), lw.alpha2));
}

// Mean over the K weak views of the full MSE between the clean-input
// prediction and each view's prediction.
template <typename T>
Var<T> consistency_loss(Var<T> p_u, const std::vector<TensorT<T>>& p_w) {
    if (p_w.empty()) throw ParameterError("consistency_loss: need at least one weak view");
    Var<T> acc = mse_const(p_u, p_w[0]);
    for (size_t k = 1; k < p_w.size(); ++k) acc = add(acc, mse_const(p_u, p_w[k]));
    return scale(acc, 1.0 / static_cast<double>(p_w.size()));
}

template <typename T>
Var<T> mixup_loss(Var<T> pred, const TensorT<T>& y1, const TensorT<T>& y2, double lambda) {
    if (lambda < 0.5 || lambda > 1.0)
        throw ParameterError("mixup_loss: lambda must lie in [0.5, 1]");
    return add(scale(cross_entropy(pred, y1), lambda),
               scale(cross_entropy(pred, y2), 1.0 - lambda));
}

template <typename T>
Var<T> fix_loss(Var<T> p_s, const TensorT<T>& y_u) {
    return mse_const(p_s, y_u);
}

// Weighted total; absent terms contribute zero. Throws NumericError naming
// the first non-finite term.
template <typename T>
std::pair<Var<T>, LossBreakdown> total_loss(Var<T> ls, const Var<T>* lc, const Var<T>* lm,
                                            const Var<T>* lf, const LossWeights& lw) {
    LossBreakdown bd;
    auto term = [](const char* name, const Var<T>* v) {
        if (!v) return 0.0;
        const double x = static_cast<double>(v->value()[0]);
        if (!std::isfinite(x)) throw NumericError(std::string("total_loss: ") + name + " is not finite");
        return x;
    };
    bd.ls = term("L_s", &ls);
    bd.lc = term("L_c", lc);
    bd.lm = term("L_m", lm);
    bd.lf = term("L_f", lf);
    Var<T> total = ls;
    if (lc) total = add(total, scale(*lc, lw.w_c));
    if (lm) total = add(total, scale(*lm, lw.w_m));
    if (lf) total = add(total, scale(*lf, lw.w_f));
    bd.total = static_cast<double>(total.value()[0]);
    return {total, bd};
}

}  // namespace ops

// Mixup input pairing: X2 = batch shuffle of X1, lambda' = max(lam, 1-lam)
// with lam ~ Beta(mix_alpha, mix_alpha), mixed = lambda'*X1 + (1-lambda')*X2.
template <typename T>
struct MixupPairT {
    TensorT<T> mixed;
    std::vector<int64_t> perm;
    double lambda;  // already folded through max(lam, 1-lam)
};

template <typename T>
MixupPairT<T> mixup_pair(const TensorT<T>& x1, const LossWeights& lw, Rng& rng) {
    if (x1.rank() < 1 || x1.shape[0] < 2)
        throw ParameterError("mixup_pair: batch must contain at least 2 samples");
    const int64_t B = x1.shape[0];
    const int64_t stride = x1.numel() / B;
    const double lam_raw = rng.beta(lw.mix_alpha, lw.mix_alpha);
    const double lam = std::max(lam_raw, 1.0 - lam_raw);
    MixupPairT<T> mp{TensorT<T>(x1.shape), rng.permutation(B), lam};
    const T l = static_cast<T>(lam), r = static_cast<T>(1.0 - lam);
    for (int64_t b = 0; b < B; ++b) {
        const T* a = x1.ptr() + b * stride;
        const T* c = x1.ptr() + mp.perm[static_cast<size_t>(b)] * stride;
        T* o = mp.mixed.ptr() + b * stride;
        for (int64_t i = 0; i < stride; ++i) o[i] = l * a[i] + r * c[i];
    }
    return mp;
}

template <typename T>
TensorT<T> permute_batch(const TensorT<T>& y, const std::vector<int64_t>& perm) {
    if (y.rank() < 1 || y.shape[0] != static_cast<int64_t>(perm.size()))
        throw DimensionError("permute_batch: permutation length mismatch");
    const int64_t B = y.shape[0], stride = y.numel() / B;
    TensorT<T> out(y.shape);
    for (int64_t b = 0; b < B; ++b)
        std::copy(y.ptr() + perm[static_cast<size_t>(b)] * stride,
                  y.ptr() + (perm[static_cast<size_t>(b)] + 1) * stride, out.ptr() + b * stride);
    return out;
}

using MixupPairF = MixupPairT<float>;

}  // namespace ccat
