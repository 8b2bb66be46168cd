#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ccat/augment.hpp"
#include "ccat/losses.hpp"
#include "ccat/net.hpp"
#include "ccat/optim.hpp"

namespace ccat {

// Teacher EMA decay, ramped from 0.9 to its final 0.99 over the first 100
// steps so the teacher can track the fast-moving early student.
inline double ema_decay_at(int64_t t) {
    if (t < 0) throw ParameterError("ema_decay_at: negative step");
    return std::min(0.99, 0.9 + 0.09 * double(t) / 100.0);
}

struct TeacherState {
    ModelParamsF params;
};

// teacher <- decay * teacher + (1 - decay) * student, elementwise. The
// teacher receives no gradient anywhere; this is its only mutation.
inline void update_teacher(TeacherState& teacher, const ModelParamsF& student, double decay) {
    if (decay < 0 || decay >= 1) throw ParameterError("update_teacher: decay must lie in [0,1)");
    if (!teacher.params.same_names(student)) throw StateError("update_teacher: parameter name sets differ");
    const float d = static_cast<float>(decay), nd = static_cast<float>(1.0 - decay);
    for (size_t i = 0; i < student.size(); ++i) {
        auto& t = teacher.params.entry(i).value;
        const auto& s = student.entry(i).value;
        for (int64_t j = 0; j < t.numel(); ++j) t[j] = d * t[j] + nd * s[j];
    }
}

// ---------------------------------------------------------------------------
// Pseudo labels.
// ---------------------------------------------------------------------------

// Elementwise mean of the clean-input prediction and the K weak-view
// predictions; a convex combination of distributions, hence itself one.
inline TensorF guess_labels(const TensorF& p_u, const std::vector<TensorF>& p_w) {
    if (p_w.empty()) throw ParameterError("guess_labels: need at least one weak view");
    for (const auto& v : p_w) check_same_shape(p_u, v, "guess_labels");
    TensorF out(p_u.shape);
    const float inv = 1.0f / static_cast<float>(p_w.size() + 1);
    for (int64_t i = 0; i < out.numel(); ++i) {
        float acc = p_u[i];
        for (const auto& v : p_w) acc += v[i];
        out[i] = acc * inv;
    }
    return out;
}

// Temperature sharpening along the class axis: p^(1/T), renormalized per
// pixel. T < 1 concentrates mass on the argmax; T = 1 is the identity.
inline TensorF sharpen(const TensorF& p, double temp) {
    if (temp <= 0) throw ParameterError("sharpen: temperature must be positive");
    if (p.rank() != 4) throw DimensionError("sharpen: expected (B,C,H,W), got " + p.shape_str());
    const int64_t b = p.dim(0), c = p.dim(1), h = p.dim(2), w = p.dim(3);
    const double e = 1.0 / temp;
    TensorF out(p.shape);
    for (int64_t n = 0; n < b; ++n)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                double sum = 0;
                for (int64_t ch = 0; ch < c; ++ch)
                    sum += std::pow(std::max(0.0, double(p.at4(n, ch, y, x))), e);
                for (int64_t ch = 0; ch < c; ++ch) {
                    const double v = std::pow(std::max(0.0, double(p.at4(n, ch, y, x))), e);
                    out.at4(n, ch, y, x) = sum > 0 ? static_cast<float>(v / sum) : 1.0f / float(c);
                }
            }
    return out;
}

struct PseudoEntry {
    TensorF y;      // (2, H, W) running soft label
    int64_t t = 0;  // visits so far
};

// Per-image running soft labels, EMA-refined across visits. Keyed by the
// dataset-assigned image id; persisted in checkpoints.
class PseudoLabelStore {
  public:
    bool has(const std::string& id) const { return items_.count(id) != 0; }
    const PseudoEntry& at(const std::string& id) const {
        auto it = items_.find(id);
        if (it == items_.end()) throw StateError("pseudo-label store: unknown image id '" + id + "'");
        return it->second;
    }
    size_t size() const { return items_.size(); }
    const std::map<std::string, PseudoEntry>& items() const { return items_; }

    // First visit stores the sharpened estimate verbatim; later visits blend
    // the fresh estimate into the stored running value.
    TensorF refine(const std::string& id, const TensorF& sharpened, double alpha) {
        if (alpha < 0 || alpha >= 1) throw ParameterError("refine: ema alpha must lie in [0,1)");
        if (sharpened.rank() != 3 || sharpened.dim(0) != 2)
            throw DimensionError("refine: expected (2,H,W), got " + sharpened.shape_str());
        auto it = items_.find(id);
        if (it == items_.end()) {
            items_[id] = {sharpened, 1};
            return sharpened;
        }
        PseudoEntry& e = it->second;
        check_same_shape(e.y, sharpened, "refine");
        const float a = static_cast<float>(alpha), na = static_cast<float>(1.0 - alpha);
        for (int64_t i = 0; i < e.y.numel(); ++i) e.y[i] = a * e.y[i] + na * sharpened[i];
        ++e.t;
        return e.y;
    }

    // Checkpoint restore path.
    void insert_raw(const std::string& id, TensorF y, int64_t t) {
        if (t < 1) throw ParameterError("pseudo-label store: visit count must be >= 1");
        items_[id] = {std::move(y), t};
    }
    void clear() { items_.clear(); }

  private:
    std::map<std::string, PseudoEntry> items_;
};

// ---------------------------------------------------------------------------
// Train state and the composed semi-supervised step.
// ---------------------------------------------------------------------------

struct TrainState {
    NetConfig net;
    ModelParamsF student;
    TeacherState teacher;
    ModelParamsF momentum;
    PseudoLabelStore pseudo;
    int64_t step = 0;
    int64_t epoch = 0;
    double best_val_dsc = -1.0;
    // Independent streams so enabling one stochastic stage never shifts the
    // draws of another: data order / base augment, weak+strong augment, mixup.
    Rng rng_data, rng_aug, rng_mix;
};

inline TrainState make_train_state(const NetConfig& cfg, uint64_t seed) {
    cfg.validate();
    TrainState st;
    st.net = cfg;
    st.student = build_net(cfg, derive_seed(seed, 100));
    st.teacher.params = st.student;
    st.momentum = zeros_like(st.student);
    st.rng_data = Rng(derive_seed(seed, 0));
    st.rng_aug = Rng(derive_seed(seed, 1));
    st.rng_mix = Rng(derive_seed(seed, 2));
    return st;
}

namespace detail {

inline TensorF concat_batch(const TensorF& a, const TensorF& b) {
    if (a.rank() != b.rank() || a.rank() < 1) throw DimensionError("concat_batch: rank mismatch");
    for (int i = 1; i < a.rank(); ++i)
        if (a.dim(i) != b.dim(i)) throw DimensionError("concat_batch: trailing shape mismatch");
    std::vector<int64_t> shape = a.shape;
    shape[0] = a.dim(0) + b.dim(0);
    TensorF out(shape);
    std::copy(a.data.begin(), a.data.end(), out.data.begin());
    std::copy(b.data.begin(), b.data.end(), out.data.begin() + a.numel());
    return out;
}

inline TensorF batch_item(const TensorF& x, int64_t b) {
    std::vector<int64_t> shape(x.shape.begin() + 1, x.shape.end());
    TensorF out(shape);
    std::copy(x.data.begin() + b * out.numel(), x.data.begin() + (b + 1) * out.numel(), out.data.begin());
    return out;
}

inline void set_batch_item(TensorF& x, int64_t b, const TensorF& item) {
    std::copy(item.data.begin(), item.data.end(), x.data.begin() + b * item.numel());
}

}  // namespace detail

// One purely supervised optimizer step; also the reference the zero-weight
// semi-supervised step must match exactly.
inline LossBreakdown supervised_step(TrainState& st, const TensorF& x, const TensorF& y,
                                     const LossWeights& lw, const TverskyParams& tvp,
                                     const OptimizerConfig& oc, double lr) {
    TapeF tape;
    SessionT<float> s(tape, st.student, ops::NormMode::Train);
    auto p_l = net_forward(s, st.net, make_constant(tape, x));
    auto ls = ops::supervised_loss(p_l, y, lw, tvp);
    auto [tot, bd] = ops::total_loss<float>(ls, nullptr, nullptr, nullptr, lw);
    tape.backward(tot.id);
    sgd_step(st.student, st.momentum, s, lr, oc);
    ++st.step;
    return bd;
}

// The full semi-supervised step, in pipeline order: student forwards, teacher
// weak-view forwards, label guessing, sharpening, EMA refinement, the four
// loss terms, one SGD step on the student, then the teacher EMA update.
// Unlabeled stages whose loss weights are zero are skipped entirely, so
// disabling them reproduces supervised_step bit for bit (same tape, same rng
// consumption).
inline LossBreakdown semisup_step(TrainState& st, const TensorF& x, const TensorF& y,
                                  const TensorF& xu, const std::vector<std::string>& ids,
                                  const LossWeights& lw, const TverskyParams& tvp,
                                  const AugmentationSpec& aug, const OptimizerConfig& oc, double lr) {
    lw.validate();
    if (x.rank() != 4 || xu.rank() != 4) throw DimensionError("semisup_step: batches must be rank-4");
    if (x.dim(0) != xu.dim(0))
        throw ParameterError("semisup_step: labeled and unlabeled batch sizes must match 1:1");
    const bool use_unlabeled = lw.w_c > 0 || lw.w_m > 0 || lw.w_f > 0;

    TapeF tape;
    SessionT<float> s(tape, st.student, ops::NormMode::Train);
    auto p_l = net_forward(s, st.net, make_constant(tape, x));
    auto ls = ops::supervised_loss(p_l, y, lw, tvp);

    std::optional<VarT<float>> lc, lm, lf;
    if (use_unlabeled) {
        if (static_cast<int64_t>(ids.size()) != xu.dim(0))
            throw StateError("semisup_step: unlabeled batch needs one image id per item");
        for (const auto& id : ids)
            if (id.empty()) throw StateError("semisup_step: missing image id");

        auto p_u = net_forward(s, st.net, make_constant(tape, xu));

        // Teacher predictions on the K weak views, gradient-free eval mode.
        const auto views = weak_augment(xu, aug, st.rng_aug);
        if (static_cast<int>(views.size()) != lw.k_weak)
            throw ParameterError("semisup_step: k_weak must equal the number of weak views");
        std::vector<TensorF> p_wk;
        for (const auto& v : views) p_wk.push_back(net_infer(st.teacher.params, st.net, v));

        // Guess -> sharpen -> per-image EMA refinement.
        const TensorF sharpened = sharpen(guess_labels(p_u.value(), p_wk), lw.temp);
        TensorF yu(sharpened.shape);
        for (int64_t b = 0; b < sharpened.dim(0); ++b)
            detail::set_batch_item(yu, b,
                                   st.pseudo.refine(ids[static_cast<size_t>(b)],
                                                    detail::batch_item(sharpened, b), lw.ema_alpha));

        if (lw.w_c > 0) lc = ops::consistency_loss(p_u, p_wk);
        if (lw.w_m > 0) {
            const TensorF x1 = detail::concat_batch(x, xu);
            const TensorF y1 = detail::concat_batch(y, yu);
            const auto mp = mixup_pair(x1, lw, st.rng_mix);
            auto p_m = net_forward(s, st.net, make_constant(tape, mp.mixed));
            lm = ops::mixup_loss(p_m, y1, permute_batch(y1, mp.perm), mp.lambda);
        }
        if (lw.w_f > 0) {
            const auto [xs, strong_id] = strong_augment(xu, aug, st.rng_aug);
            (void)strong_id;
            auto p_s = net_forward(s, st.net, make_constant(tape, xs));
            lf = ops::fix_loss(p_s, yu);
        }
    }

    auto [tot, bd] = ops::total_loss<float>(ls, lc ? &*lc : nullptr, lm ? &*lm : nullptr,
                                            lf ? &*lf : nullptr, lw);
    tape.backward(tot.id);
    sgd_step(st.student, st.momentum, s, lr, oc);
    update_teacher(st.teacher, st.student, ema_decay_at(st.step));
    ++st.step;
    return bd;
}

}  // namespace ccat
