#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "ccat/ops.hpp"
#include "ccat/rng.hpp"
#include "ccat/token_ops.hpp"

// Neural building blocks and the parameter plumbing they share. Parameters
// live in a ModelParams collection (ordered, named); a Session binds them to
// a tape for one forward/backward pass.

namespace ccat {

template <typename T>
struct ParamEntry {
    std::string name;
    TensorT<T> value;
    bool trainable = true;  // false: mutable buffer (e.g. BN running stats)
    bool decay = true;      // weight decay applies in the optimizer
};

template <typename T>
class ModelParamsT {
  public:
    void add(std::string name, TensorT<T> v, bool trainable = true, bool decay = true) {
        if (index_.count(name)) throw StateError("duplicate parameter name: " + name);
        index_[name] = entries_.size();
        entries_.push_back({std::move(name), std::move(v), trainable, decay});
    }
    bool has(const std::string& name) const { return index_.count(name) != 0; }
    ParamEntry<T>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw StateError("unknown parameter: " + name);
        return entries_[it->second];
    }
    const ParamEntry<T>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw StateError("unknown parameter: " + name);
        return entries_[it->second];
    }
    size_t size() const { return entries_.size(); }
    ParamEntry<T>& entry(size_t i) { return entries_[i]; }
    const ParamEntry<T>& entry(size_t i) const { return entries_[i]; }

    int64_t total_elems() const {
        int64_t n = 0;
        for (const auto& e : entries_) n += e.value.numel();
        return n;
    }
    // Lossless flat view over every entry in registration order.
    std::vector<T> flat() const {
        std::vector<T> out;
        out.reserve(static_cast<size_t>(total_elems()));
        for (const auto& e : entries_) out.insert(out.end(), e.value.data.begin(), e.value.data.end());
        return out;
    }
    void load_flat(const std::vector<T>& v) {
        if (static_cast<int64_t>(v.size()) != total_elems())
            throw DimensionError("load_flat: element count mismatch");
        size_t off = 0;
        for (auto& e : entries_) {
            std::copy(v.begin() + static_cast<std::ptrdiff_t>(off),
                      v.begin() + static_cast<std::ptrdiff_t>(off + e.value.data.size()),
                      e.value.data.begin());
            off += e.value.data.size();
        }
    }
    bool same_names(const ModelParamsT& o) const {
        if (entries_.size() != o.entries_.size()) return false;
        for (size_t i = 0; i < entries_.size(); ++i)
            if (entries_[i].name != o.entries_[i].name) return false;
        return true;
    }
    template <typename U>
    ModelParamsT<U> cast() const {
        ModelParamsT<U> out;
        for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>(), e.trainable, e.decay);
        return out;
    }

  private:
    std::vector<ParamEntry<T>> entries_;
    std::unordered_map<std::string, size_t> index_;
};

using ModelParamsF = ModelParamsT<float>;

// One forward/backward pass: leaves are pushed lazily per parameter and
// cached, so every use of a parameter shares one tape node.
template <typename T>
class SessionT {
  public:
    SessionT(TapeT<T>& tape, ModelParamsT<T>& params, ops::NormMode mode, bool frozen = false)
        : tape_(&tape), params_(&params), mode_(mode), frozen_(frozen) {}

    VarT<T> p(const std::string& name) {
        auto it = vars_.find(name);
        if (it != vars_.end()) return it->second;
        ParamEntry<T>& e = params_->at(name);
        if (!e.trainable) throw StateError("parameter is a buffer, use buf(): " + name);
        VarT<T> v = make_leaf(*tape_, e.value, !frozen_);
        vars_.emplace(name, v);
        return v;
    }
    // Substitute an existing tape variable for a named parameter (used by the
    // gradient checker to differentiate through parameters).
    void bind(const std::string& name, VarT<T> v) {
        const ParamEntry<T>& e = params_->at(name);
        if (!e.trainable) throw StateError("cannot bind a buffer: " + name);
        if (v.value().shape != e.value.shape)
            throw DimensionError("bind: shape mismatch for " + name);
        vars_.insert_or_assign(name, v);
    }
    TensorT<T>* buf(const std::string& name) {
        ParamEntry<T>& e = params_->at(name);
        if (e.trainable) throw StateError("parameter is trainable, use p(): " + name);
        return &e.value;
    }
    // Gradient of a trainable parameter after backward; nullptr if untouched.
    const TensorT<T>* grad(const std::string& name) const {
        auto it = vars_.find(name);
        if (it == vars_.end()) return nullptr;
        return tape_->grad_if(it->second.id);
    }

    TapeT<T>& tape() { return *tape_; }
    ops::NormMode mode() const { return mode_; }
    bool training() const { return mode_ == ops::NormMode::Train; }
    bool frozen() const { return frozen_; }

  private:
    TapeT<T>* tape_;
    ModelParamsT<T>* params_;
    ops::NormMode mode_;
    bool frozen_;
    std::unordered_map<std::string, VarT<T>> vars_;
};

struct BlockConfig {
    int64_t embed_dim = 48;
    int64_t num_heads = 3;
    int64_t window = 4;
    double mlp_ratio = 4.0;
    int64_t se_reduction = 16;
    double leaky_slope = 0.01;
    int64_t shift = 0;

    void validate() const {
        if (embed_dim < 1 || num_heads < 1 || window < 1 || se_reduction < 1)
            throw ParameterError("block config: dims and counts must be positive");
        if (embed_dim % num_heads != 0)
            throw ParameterError("block config: embed_dim must be divisible by num_heads");
        if (shift != 0 && shift != window / 2)
            throw ParameterError("block config: shift must be 0 or window/2");
    }
};

// ---- initializers ----

template <typename T>
TensorT<T> trunc_normal_init(std::vector<int64_t> shape, Rng& rng, double std = 0.02) {
    TensorT<T> t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.trunc_normal(std));
    return t;
}

template <typename T>
TensorT<T> kaiming_conv_init(std::vector<int64_t> shape, Rng& rng) {
    // shape (Cout, Cin, k, k); fan_in = Cin * k * k.
    const double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
    const double std = std::sqrt(2.0 / fan_in);
    TensorT<T> t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.normal(0.0, std));
    return t;
}

// ---- parameter registration ----

template <typename T>
void add_linear_params(ModelParamsT<T>& mp, const std::string& prefix, int64_t in, int64_t out,
                       Rng& rng) {
    mp.add(prefix + ".w", trunc_normal_init<T>({in, out}, rng));
    mp.add(prefix + ".b", TensorT<T>({out}), true, false);
}

template <typename T>
void add_conv_params(ModelParamsT<T>& mp, const std::string& prefix, int64_t in, int64_t out,
                     int64_t k, Rng& rng) {
    mp.add(prefix + ".w", kaiming_conv_init<T>({out, in, k, k}, rng));
    mp.add(prefix + ".b", TensorT<T>({out}), true, false);
}

template <typename T>
void add_bn_params(ModelParamsT<T>& mp, const std::string& prefix, int64_t ch) {
    mp.add(prefix + ".gamma", TensorT<T>({ch}, T(1)), true, false);
    mp.add(prefix + ".beta", TensorT<T>({ch}), true, false);
    mp.add(prefix + ".mean", TensorT<T>({ch}), false, false);
    mp.add(prefix + ".var", TensorT<T>({ch}, T(1)), false, false);
}

template <typename T>
void add_ln_params(ModelParamsT<T>& mp, const std::string& prefix, int64_t dim) {
    mp.add(prefix + ".gamma", TensorT<T>({dim}, T(1)), true, false);
    mp.add(prefix + ".beta", TensorT<T>({dim}), true, false);
}

template <typename T>
void add_cnn_block_params(ModelParamsT<T>& mp, const std::string& prefix, int64_t in, int64_t out,
                          Rng& rng) {
    add_conv_params(mp, prefix + ".conv1", in, out, 3, rng);
    add_bn_params(mp, prefix + ".bn1", out);
    add_conv_params(mp, prefix + ".conv2", out, out, 3, rng);
    add_bn_params(mp, prefix + ".bn2", out);
}

template <typename T>
void add_patch_embed_params(ModelParamsT<T>& mp, const std::string& prefix, int64_t in_ch,
                            int64_t patch, int64_t dim, Rng& rng) {
    add_linear_params(mp, prefix, in_ch * patch * patch, dim, rng);
}

template <typename T>
void add_window_msa_params(ModelParamsT<T>& mp, const std::string& prefix, const BlockConfig& cfg,
                           Rng& rng) {
    const int64_t d = cfg.embed_dim;
    add_linear_params(mp, prefix + ".qkv", d, 3 * d, rng);
    add_linear_params(mp, prefix + ".proj", d, d, rng);
    const int64_t span = 2 * cfg.window - 1;
    mp.add(prefix + ".relbias", trunc_normal_init<T>({span * span, cfg.num_heads}, rng), true,
           false);
}

template <typename T>
void add_se_gate_params(ModelParamsT<T>& mp, const std::string& prefix, int64_t dim,
                        int64_t reduction, Rng& rng) {
    const int64_t mid = std::max<int64_t>(1, dim / reduction);
    add_linear_params(mp, prefix + ".fc1", dim, mid, rng);
    add_linear_params(mp, prefix + ".fc2", mid, dim, rng);
}

template <typename T>
void add_swin_pair_params(ModelParamsT<T>& mp, const std::string& prefix, const BlockConfig& cfg,
                          Rng& rng) {
    cfg.validate();
    const int64_t d = cfg.embed_dim;
    const int64_t hidden = static_cast<int64_t>(cfg.mlp_ratio * static_cast<double>(d));
    for (const char* half : {"a", "b"}) {
        const std::string p = prefix + "." + half;
        add_ln_params(mp, p + ".ln1", d);
        add_window_msa_params(mp, p + ".msa", cfg, rng);
        add_se_gate_params(mp, p + ".se", d, cfg.se_reduction, rng);
        add_ln_params(mp, p + ".ln2", d);
        add_linear_params(mp, p + ".mlp.fc1", d, hidden, rng);
        add_linear_params(mp, p + ".mlp.fc2", hidden, d, rng);
    }
}

template <typename T>
void add_patch_merge_params(ModelParamsT<T>& mp, const std::string& prefix, int64_t dim, Rng& rng) {
    add_linear_params(mp, prefix, 4 * dim, 2 * dim, rng);
}

template <typename T>
void add_patch_expand_params(ModelParamsT<T>& mp, const std::string& prefix, int64_t dim, Rng& rng) {
    add_linear_params(mp, prefix, dim, 2 * dim, rng);
}

// ---- forwards ----

template <typename T>
VarT<T> bn_forward(SessionT<T>& s, const std::string& prefix, VarT<T> x) {
    const bool update = s.training() && !s.frozen();
    return ops::batchnorm2d(x, s.p(prefix + ".gamma"), s.p(prefix + ".beta"),
                            s.buf(prefix + ".mean"), s.buf(prefix + ".var"), s.mode(), 0.1, 1e-5,
                            update);
}

// Two 3x3 conv + BN + LeakyReLU stages; optional leading 2x2 max-pool.
template <typename T>
VarT<T> cnn_block(SessionT<T>& s, const std::string& prefix, VarT<T> x, bool pool_first,
                       double leaky_slope = 0.01) {
    if (pool_first) x = ops::maxpool2x2(x);
    x = ops::conv2d(x, s.p(prefix + ".conv1.w"), s.p(prefix + ".conv1.b"), 1);
    x = ops::leaky_relu(bn_forward(s, prefix + ".bn1", x), leaky_slope);
    x = ops::conv2d(x, s.p(prefix + ".conv2.w"), s.p(prefix + ".conv2.b"), 1);
    x = ops::leaky_relu(bn_forward(s, prefix + ".bn2", x), leaky_slope);
    return x;
}

namespace detail {

// (B, C, H, W) -> (B, (H/p)*(W/p), C*p*p) with feature order (c, i, j),
// matching a stride-p convolution's weight layout.
template <typename T>
VarT<T> patch_gather(VarT<T> x, int64_t patch) {
    const auto& xs = x.value().shape;
    if (xs.size() != 4) throw DimensionError("patch_embed: input must be rank-4");
    const int64_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    if (H % patch != 0 || W % patch != 0)
        throw DimensionError("patch_embed: spatial dims not divisible by patch size");
    const int64_t gh = H / patch, gw = W / patch, feat = C * patch * patch;
    std::vector<int64_t> map(static_cast<size_t>(x.value().numel()));
    size_t o = 0;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t r = 0; r < gh; ++r)
            for (int64_t c0 = 0; c0 < gw; ++c0)
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t i = 0; i < patch; ++i)
                        for (int64_t j = 0; j < patch; ++j)
                            map[o++] = ((b * C + c) * H + r * patch + i) * W + c0 * patch + j;
    return ops::detail::gather_map(x, std::move(map), {B, gh * gw, feat});
}

}  // namespace detail

template <typename T>
VarT<T> patch_embed(SessionT<T>& s, const std::string& prefix, VarT<T> x, int64_t patch) {
    return ops::linear(detail::patch_gather(x, patch), s.p(prefix + ".w"), s.p(prefix + ".b"));
}

// Attention mask for shifted windows: 0 where two tokens share a pre-shift
// region, -1e4 otherwise. Regions follow the three-slice construction in the
// shifted frame: [0, side-window), [side-window, side-shift), [side-shift, side).
template <typename T>
TensorT<T> shift_attention_mask(int64_t h, int64_t w, int64_t window, int64_t shift) {
    if (shift >= window) throw ParameterError("shift_attention_mask: shift must be < window");
    if (h % window != 0 || w % window != 0)
        throw DimensionError("shift_attention_mask: grid not divisible by window");
    const int64_t wh = h / window, ww = w / window, L = window * window;
    TensorT<T> mask({wh * ww, L, L});
    if (shift == 0) return mask;
    auto region = [&](int64_t r, int64_t n) {
        if (r < n - window) return 0;
        if (r < n - shift) return 1;
        return 2;
    };
    std::vector<int> id(static_cast<size_t>(h * w));
    for (int64_t r = 0; r < h; ++r)
        for (int64_t c = 0; c < w; ++c)
            id[static_cast<size_t>(r * w + c)] = region(r, h) * 3 + region(c, w);
    for (int64_t wr = 0; wr < wh; ++wr)
        for (int64_t wc = 0; wc < ww; ++wc) {
            const int64_t wi = wr * ww + wc;
            for (int64_t a = 0; a < L; ++a)
                for (int64_t b = 0; b < L; ++b) {
                    const int64_t ra = wr * window + a / window, ca = wc * window + a % window;
                    const int64_t rb = wr * window + b / window, cb = wc * window + b % window;
                    if (id[static_cast<size_t>(ra * w + ca)] != id[static_cast<size_t>(rb * w + cb)])
                        mask[(wi * L + a) * L + b] = static_cast<T>(-1e4);
                }
        }
    return mask;
}

// Row index into the relative-position bias table for each (query, key) pair.
inline std::vector<int64_t> rel_bias_index(int64_t window) {
    const int64_t L = window * window, span = 2 * window - 1;
    std::vector<int64_t> idx(static_cast<size_t>(L * L));
    for (int64_t a = 0; a < L; ++a)
        for (int64_t b = 0; b < L; ++b) {
            const int64_t dr = a / window - b / window + window - 1;
            const int64_t dc = a % window - b % window + window - 1;
            idx[static_cast<size_t>(a * L + b)] = dr * span + dc;
        }
    return idx;
}

template <typename T>
struct AttnTraceT {
    TensorT<T> weights;  // (B*nW, heads, L, L) post-softmax
};

// softmax(q k^T / sqrt(d_head) + rel_bias [+ mask]) v with an output
// projection; operates on a WindowSet (B*nW, L, D).
template <typename T>
VarT<T> window_msa(SessionT<T>& s, const std::string& prefix, VarT<T> ws,
                        const BlockConfig& cfg, const TensorT<T>* mask = nullptr,
                        AttnTraceT<T>* trace = nullptr) {
    const auto& shape = ws.value().shape;
    if (shape.size() != 3) throw DimensionError("window_msa: input must be (B*nW, L, D)");
    const int64_t BW = shape[0], L = shape[1], D = shape[2];
    if (D != cfg.embed_dim || D % cfg.num_heads != 0)
        throw ParameterError("window_msa: dim must match config and divide num_heads");
    if (L != cfg.window * cfg.window) throw DimensionError("window_msa: window area mismatch");
    const int64_t heads = cfg.num_heads, hd = D / heads;

    auto qkv = ops::linear(ws, s.p(prefix + ".qkv.w"), s.p(prefix + ".qkv.b"));
    auto split_head = [&](VarT<T> x) {
        return ops::permute(ops::reshape(x, {BW, L, heads, hd}), {0, 2, 1, 3});
    };
    auto q = split_head(ops::slice_lastdim(qkv, 0, D));
    auto k = split_head(ops::slice_lastdim(qkv, D, D));
    auto v = split_head(ops::slice_lastdim(qkv, 2 * D, D));

    q = ops::scale(q, 1.0 / std::sqrt(static_cast<double>(hd)));
    auto scores = ops::bmm(q, k, false, true);  // (BW, heads, L, L)
    auto bias = ops::gather_rel_bias(s.p(prefix + ".relbias"), rel_bias_index(cfg.window), L);
    scores = ops::add_bias_bcast(scores, bias);
    if (mask) scores = ops::add_mask_bcast(scores, *mask, mask->shape[0]);
    auto attn = ops::softmax_lastdim(scores);
    if (trace) trace->weights = attn.value();
    auto out = ops::bmm(attn, v, false, false);               // (BW, heads, L, hd)
    out = ops::reshape(ops::permute(out, {0, 2, 1, 3}), {BW, L, D});
    return ops::linear(out, s.p(prefix + ".proj.w"), s.p(prefix + ".proj.b"));
}

// Squeeze (mean over tokens) -> bottleneck -> sigmoid -> per-channel rescale.
template <typename T>
VarT<T> se_gate(SessionT<T>& s, const std::string& prefix, VarT<T> t) {
    auto z = ops::mean_tokens(t);
    z = ops::relu(ops::linear(z, s.p(prefix + ".fc1.w"), s.p(prefix + ".fc1.b")));
    z = ops::sigmoid(ops::linear(z, s.p(prefix + ".fc2.w"), s.p(prefix + ".fc2.b")));
    return ops::mul_tokens_scale(t, z);
}

// LN -> (shifted) W-MSA -> SE -> residual, then LN -> MLP -> residual; run
// twice, the second half with cyclic shift window/2 and its attention mask.
template <typename T>
VarT<T> swin_block_pair(SessionT<T>& s, const std::string& prefix, VarT<T> x, int64_t h,
                             int64_t w, const BlockConfig& cfg,
                             std::vector<AttnTraceT<T>>* traces = nullptr) {
    cfg.validate();
    if (h % cfg.window != 0 || w % cfg.window != 0)
        throw DimensionError("swin_block_pair: grid not divisible by window");
    const int64_t shift = cfg.window / 2;

    auto half = [&](VarT<T> in, const std::string& p, int64_t sh) {
        auto z = ops::layernorm(in, s.p(p + ".ln1.gamma"), s.p(p + ".ln1.beta"), 1e-5);
        if (sh > 0) z = ops::roll_tokens(z, h, w, -sh, -sh);
        auto wnd = ops::window_partition_op(z, h, w, cfg.window);
        TensorT<T> mask;
        AttnTraceT<T> trace;
        if (sh > 0) mask = shift_attention_mask<T>(h, w, cfg.window, sh);
        auto m = window_msa(s, p + ".msa", wnd, cfg, sh > 0 ? &mask : nullptr,
                            traces ? &trace : nullptr);
        if (traces) traces->push_back(std::move(trace));
        z = ops::window_reverse_op(m, h, w, cfg.window);
        if (sh > 0) z = ops::roll_tokens(z, h, w, sh, sh);
        z = se_gate(s, p + ".se", z);
        auto res = ops::add(in, z);
        auto z2 = ops::layernorm(res, s.p(p + ".ln2.gamma"), s.p(p + ".ln2.beta"), 1e-5);
        z2 = ops::linear(z2, s.p(p + ".mlp.fc1.w"), s.p(p + ".mlp.fc1.b"));
        z2 = ops::gelu(z2);
        z2 = ops::linear(z2, s.p(p + ".mlp.fc2.w"), s.p(p + ".mlp.fc2.b"));
        return ops::add(res, z2);
    };

    x = half(x, prefix + ".a", 0);
    x = half(x, prefix + ".b", shift);
    return x;
}

// Concatenate 2x2 neighbourhoods and project 4*dim -> 2*dim.
template <typename T>
VarT<T> patch_merge(SessionT<T>& s, const std::string& prefix, VarT<T> t, int64_t h,
                         int64_t w) {
    return ops::linear(ops::merge_gather(t, h, w), s.p(prefix + ".w"), s.p(prefix + ".b"));
}

// Project dim -> 2*dim and scatter into 2x2 sub-tokens of dim/2.
template <typename T>
VarT<T> patch_expand(SessionT<T>& s, const std::string& prefix, VarT<T> t, int64_t h,
                          int64_t w) {
    if (t.value().shape.back() % 2 != 0)
        throw DimensionError("patch_expand: token dim must be even");
    auto z = ops::linear(t, s.p(prefix + ".w"), s.p(prefix + ".b"));
    return ops::expand_scatter(z, h, w);
}

}  // namespace ccat
