#pragma once

#include <string>
#include <vector>

#include "ccat/blocks.hpp"

// The full segmentation network: a convolutional stem, a three-stage
// shifted-window transformer encoder over patch tokens, a mirrored token
// decoder with skip fusion, and a convolutional pixel decoder ending in a
// two-channel softmax.

namespace ccat {

struct NetConfig {
    int64_t in_channels = 1;
    int64_t num_classes = 2;
    int64_t input_size = 64;
    std::vector<int64_t> stem_channels = {16, 32, 64};
    int64_t patch = 2;
    int64_t embed_dim = 48;
    std::vector<int64_t> heads = {3, 3, 3};
    int64_t window = 4;
    double mlp_ratio = 4.0;
    int64_t se_reduction = 16;
    double leaky_slope = 0.01;

    // Side of the token grid entering the first transformer stage.
    int64_t token_side() const { return input_size / (4 * patch); }

    void validate() const {
        auto fail = [](const std::string& why) { throw ConfigError("net config: " + why); };
        if (in_channels < 1) fail("in_channels must be >= 1");
        if (num_classes != 2) fail("num_classes must be 2 (binary softmax head)");
        if (stem_channels.size() != 3) fail("stem_channels must list 3 stages");
        for (int64_t c : stem_channels)
            if (c < 1) fail("stem_channels entries must be >= 1");
        if (heads.size() != 3) fail("heads must list 3 stages");
        if (patch < 1) fail("patch must be >= 1");
        if (embed_dim < 1) fail("embed_dim must be >= 1");
        if (window < 1) fail("window must be >= 1");
        if (input_size < 1 || input_size % (32 * patch) != 0)
            fail("input_size must be a positive multiple of 32*patch "
                 "(two pools, patch embedding, three 2x2 merges)");
        for (int k = 0; k < 3; ++k) {
            if (heads[k] < 1) fail("heads entries must be >= 1");
            if ((embed_dim << k) % heads[k] != 0)
                fail("stage dim " + std::to_string(embed_dim << k) +
                     " not divisible by heads[" + std::to_string(k) + "]");
            const int64_t side = token_side() >> k;
            const int64_t win = std::min(window, side);
            if (side % win != 0)
                fail("window " + std::to_string(win) + " does not tile the stage grid " +
                     std::to_string(side));
        }
        if (se_reduction < 1) fail("se_reduction must be >= 1");
        if (mlp_ratio <= 0) fail("mlp_ratio must be positive");
    }

    BlockConfig stage(int k) const {
        const int64_t side = token_side() >> k;
        BlockConfig bc;
        bc.embed_dim = embed_dim << k;
        bc.num_heads = heads[static_cast<size_t>(k)];
        bc.window = std::min(window, side);
        bc.mlp_ratio = mlp_ratio;
        bc.se_reduction = se_reduction;
        bc.leaky_slope = leaky_slope;
        return bc;
    }
};

struct NetTrace {
    std::vector<std::pair<std::string, std::vector<int64_t>>> stages;
};

namespace detail {

// Inverse of patch_gather: (B, gh*gw, C*p*p) -> (B, C, gh*p, gw*p).
template <typename T>
VarT<T> tokens_to_pixels(VarT<T> t, int64_t C, int64_t p, int64_t gh, int64_t gw) {
    const auto& ts = t.value().shape;
    if (ts.size() != 3 || ts[1] != gh * gw || ts[2] != C * p * p)
        throw DimensionError("tokens_to_pixels: token shape mismatch");
    const int64_t B = ts[0], H = gh * p, W = gw * p, feat = C * p * p;
    std::vector<int64_t> map(static_cast<size_t>(B * C * H * W));
    size_t o = 0;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t r = 0; r < H; ++r)
                for (int64_t cc = 0; cc < W; ++cc)
                    map[o++] = (b * gh * gw + (r / p) * gw + cc / p) * feat + c * p * p +
                               (r % p) * p + cc % p;
    return ops::detail::gather_map(t, std::move(map), {B, C, H, W});
}

}  // namespace detail

template <typename T>
void add_net_params(ModelParamsT<T>& mp, const NetConfig& cfg, Rng& rng) {
    cfg.validate();
    const auto& sc = cfg.stem_channels;
    add_cnn_block_params(mp, "stem1", cfg.in_channels, sc[0], rng);
    add_cnn_block_params(mp, "stem2", sc[0], sc[1], rng);
    add_cnn_block_params(mp, "stem3", sc[1], sc[2], rng);
    add_patch_embed_params(mp, "embed", sc[2], cfg.patch, cfg.embed_dim, rng);
    for (int k = 0; k < 3; ++k) {
        const std::string n = std::to_string(k + 1);
        add_swin_pair_params(mp, "enc" + n, cfg.stage(k), rng);
        add_patch_merge_params(mp, "merge" + n, cfg.embed_dim << k, rng);
    }
    add_patch_expand_params(mp, "dec.expand3", cfg.embed_dim << 3, rng);
    add_swin_pair_params(mp, "dec.pair3", cfg.stage(2), rng);
    add_patch_expand_params(mp, "dec.expand2", cfg.embed_dim << 2, rng);
    add_linear_params(mp, "dec.fuse_tok2", cfg.embed_dim << 2, cfg.embed_dim << 1, rng);
    add_swin_pair_params(mp, "dec.pair2", cfg.stage(1), rng);
    add_patch_expand_params(mp, "dec.expand1", cfg.embed_dim << 1, rng);
    add_linear_params(mp, "dec.fuse_tok1", cfg.embed_dim << 1, cfg.embed_dim, rng);
    add_swin_pair_params(mp, "dec.pair1", cfg.stage(0), rng);
    add_linear_params(mp, "to_pix", cfg.embed_dim, sc[2] * cfg.patch * cfg.patch, rng);
    add_conv_params(mp, "fuse_pix3", 2 * sc[2], sc[2], 1, rng);
    add_cnn_block_params(mp, "dblock3", sc[2], sc[1], rng);
    add_conv_params(mp, "fuse_pix2", 2 * sc[1], sc[1], 1, rng);
    add_cnn_block_params(mp, "dblock2", sc[1], sc[0], rng);
    add_conv_params(mp, "fuse_pix1", 2 * sc[0], sc[0], 1, rng);
    add_cnn_block_params(mp, "dblock1", sc[0], sc[0], rng);
    add_conv_params(mp, "head", sc[0], cfg.num_classes, 1, rng);
}

inline ModelParamsF build_net(const NetConfig& cfg, uint64_t seed) {
    ModelParamsF mp;
    Rng rng(seed);
    add_net_params(mp, cfg, rng);
    return mp;
}

// Forward pass to per-pixel class probabilities (B, 2, H, W).
template <typename T>
VarT<T> net_forward(SessionT<T>& s, const NetConfig& cfg, VarT<T> x, NetTrace* tr = nullptr) {
    const auto& xs = x.value().shape;
    if (xs.size() != 4 || xs[1] != cfg.in_channels || xs[2] != cfg.input_size ||
        xs[3] != cfg.input_size)
        throw DimensionError("net_forward: expected input (B, " +
                             std::to_string(cfg.in_channels) + ", " +
                             std::to_string(cfg.input_size) + ", " +
                             std::to_string(cfg.input_size) + "), got " + x.value().shape_str());
    auto rec = [&](const std::string& name, const VarT<T>& v) {
        if (tr) tr->stages.emplace_back(name, v.value().shape);
    };
    const double slope = cfg.leaky_slope;
    auto s1 = cnn_block(s, "stem1", x, false, slope);
    rec("stem1", s1);
    auto s2 = cnn_block(s, "stem2", s1, true, slope);
    rec("stem2", s2);
    auto s3 = cnn_block(s, "stem3", s2, true, slope);
    rec("stem3", s3);

    auto t = patch_embed(s, "embed", s3, cfg.patch);
    rec("embed", t);
    const int64_t S = cfg.token_side();
    std::vector<VarT<T>> skips;
    for (int k = 0; k < 3; ++k) {
        const std::string n = std::to_string(k + 1);
        const int64_t side = S >> k;
        t = swin_block_pair(s, "enc" + n, t, side, side, cfg.stage(k));
        rec("enc" + n, t);
        skips.push_back(t);
        t = patch_merge(s, "merge" + n, t, side, side);
        rec("merge" + n, t);
    }
    rec("bottleneck", t);

    t = patch_expand(s, "dec.expand3", t, S >> 3, S >> 3);
    t = swin_block_pair(s, "dec.pair3", t, S >> 2, S >> 2, cfg.stage(2));
    rec("dec.pair3", t);
    t = patch_expand(s, "dec.expand2", t, S >> 2, S >> 2);
    t = ops::linear(ops::concat_lastdim(t, skips[1]), s.p("dec.fuse_tok2.w"),
                    s.p("dec.fuse_tok2.b"));
    t = swin_block_pair(s, "dec.pair2", t, S >> 1, S >> 1, cfg.stage(1));
    rec("dec.pair2", t);
    t = patch_expand(s, "dec.expand1", t, S >> 1, S >> 1);
    t = ops::linear(ops::concat_lastdim(t, skips[0]), s.p("dec.fuse_tok1.w"),
                    s.p("dec.fuse_tok1.b"));
    t = swin_block_pair(s, "dec.pair1", t, S, S, cfg.stage(0));
    rec("dec.pair1", t);

    const auto& sc = cfg.stem_channels;
    auto px = ops::linear(t, s.p("to_pix.w"), s.p("to_pix.b"));
    auto p3 = detail::tokens_to_pixels(px, sc[2], cfg.patch, S, S);
    rec("to_pix", p3);
    p3 = ops::conv2d(ops::concat_channel(p3, s3), s.p("fuse_pix3.w"), s.p("fuse_pix3.b"), 0);
    p3 = cnn_block(s, "dblock3", ops::upsample_nearest2x(p3), false, slope);
    rec("dblock3", p3);
    p3 = ops::conv2d(ops::concat_channel(p3, s2), s.p("fuse_pix2.w"), s.p("fuse_pix2.b"), 0);
    p3 = cnn_block(s, "dblock2", ops::upsample_nearest2x(p3), false, slope);
    rec("dblock2", p3);
    p3 = ops::conv2d(ops::concat_channel(p3, s1), s.p("fuse_pix1.w"), s.p("fuse_pix1.b"), 0);
    p3 = cnn_block(s, "dblock1", p3, false, slope);
    rec("dblock1", p3);
    auto logits = ops::conv2d(p3, s.p("head.w"), s.p("head.b"), 0);
    rec("logits", logits);
    return ops::softmax_channel(logits);
}

// Convenience: single forward in float, fresh tape, optionally frozen (no
// gradients, e.g. teacher evaluation).
inline TensorF net_infer(ModelParamsF& params, const NetConfig& cfg, const TensorF& x,
                         ops::NormMode mode = ops::NormMode::Eval) {
    TapeF tape;
    SessionT<float> s(tape, params, mode, /*frozen=*/true);
    auto out = net_forward(s, cfg, make_constant(tape, x));
    return out.value();
}

}  // namespace ccat
