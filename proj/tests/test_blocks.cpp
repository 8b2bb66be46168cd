#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ccat/blocks.hpp"
#include "ccat/rng.hpp"
#include "gradcheck.hpp"

using namespace ccat;
namespace op = ccat::ops;

namespace {

TensorD random_tokens(std::vector<int64_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    TensorD t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

void zero_trainables(ModelParamsT<double>& mp) {
    for (size_t i = 0; i < mp.size(); ++i)
        if (mp.entry(i).trainable) mp.entry(i).value.fill(0.0);
}

// Finite differences misbehave when a ReLU-family preactivation sits exactly
// on its kink (as zero-initialized biases arrange), so gradcheck fixtures get
// fully random parameters instead of the production init.
void randomize_trainables(ModelParamsT<double>& mp, Rng& rng) {
    for (size_t i = 0; i < mp.size(); ++i)
        if (mp.entry(i).trainable)
            for (int64_t j = 0; j < mp.entry(i).value.numel(); ++j)
                mp.entry(i).value[j] = rng.uniform(-0.5, 0.5);
}

// Collects (input, every trainable parameter) into a gradcheck input list and
// rebuilds the forward with those leaves bound.
struct BoundCheck {
    ModelParamsT<double>* mp;
    std::vector<std::string> names;
    std::vector<TensorD> inputs;

    BoundCheck(ModelParamsT<double>& params, TensorD x) : mp(&params) {
        inputs.push_back(std::move(x));
        for (size_t i = 0; i < params.size(); ++i)
            if (params.entry(i).trainable) {
                names.push_back(params.entry(i).name);
                inputs.push_back(params.entry(i).value);
            }
    }
    gradcheck::BuildFn wrap(std::function<VarD(SessionT<double>&, VarD)> fwd, TensorD coeffs) {
        return [this, fwd = std::move(fwd), coeffs = std::move(coeffs)](
                   TapeD& tape, std::vector<VarD>& v) {
            SessionT<double> s(tape, *mp, op::NormMode::Train);
            for (size_t i = 0; i < names.size(); ++i) s.bind(names[i], v[i + 1]);
            return op::dot_const(fwd(s, v[0]), coeffs);
        };
    }
};

// Straight-line reference evaluation of windowed attention, no tape code.
TensorD manual_msa(const TensorD& x, const TensorD& qkv_w, const TensorD& qkv_b,
                   const TensorD& proj_w, const TensorD& proj_b, const TensorD& relbias,
                   int64_t window, int64_t heads, const TensorD* mask) {
    const int64_t BW = x.shape[0], L = x.shape[1], D = x.shape[2], hd = D / heads;
    const auto idx = rel_bias_index(window);
    TensorD out(x.shape);
    std::vector<double> qkv(static_cast<size_t>(L * 3 * D));
    std::vector<double> ctx(static_cast<size_t>(L * D));
    for (int64_t b = 0; b < BW; ++b) {
        for (int64_t i = 0; i < L; ++i)
            for (int64_t o = 0; o < 3 * D; ++o) {
                double s = qkv_b[o];
                for (int64_t d = 0; d < D; ++d) s += x.at3(b, i, d) * qkv_w[d * 3 * D + o];
                qkv[static_cast<size_t>(i * 3 * D + o)] = s;
            }
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t i = 0; i < L; ++i) {
                std::vector<double> logit(static_cast<size_t>(L));
                for (int64_t j = 0; j < L; ++j) {
                    double s = 0;
                    for (int64_t d = 0; d < hd; ++d)
                        s += qkv[static_cast<size_t>(i * 3 * D + h * hd + d)] *
                             qkv[static_cast<size_t>(j * 3 * D + D + h * hd + d)];
                    s /= std::sqrt(static_cast<double>(hd));
                    s += relbias[idx[static_cast<size_t>(i * L + j)] * heads + h];
                    if (mask) s += (*mask)[(b % mask->shape[0]) * L * L + i * L + j];
                    logit[static_cast<size_t>(j)] = s;
                }
                const double mx = *std::max_element(logit.begin(), logit.end());
                double z = 0;
                for (double& l : logit) z += (l = std::exp(l - mx));
                for (int64_t d = 0; d < hd; ++d) {
                    double s = 0;
                    for (int64_t j = 0; j < L; ++j)
                        s += logit[static_cast<size_t>(j)] / z *
                             qkv[static_cast<size_t>(j * 3 * D + 2 * D + h * hd + d)];
                    ctx[static_cast<size_t>(i * D + h * hd + d)] = s;
                }
            }
        for (int64_t i = 0; i < L; ++i)
            for (int64_t o = 0; o < D; ++o) {
                double s = proj_b[o];
                for (int64_t d = 0; d < D; ++d) s += ctx[static_cast<size_t>(i * D + d)] * proj_w[d * D + o];
                out.at3(b, i, o) = s;
            }
    }
    return out;
}

}  // namespace

TEST_CASE("model params registry") {
    ModelParamsT<double> mp;
    Rng rng(1);
    mp.add("a", TensorD({2, 2}, {1, 2, 3, 4}));
    mp.add("b", TensorD({3}, {5, 6, 7}), false, false);
    CHECK(mp.size() == 2);
    CHECK(mp.total_elems() == 7);
    CHECK(mp.has("a"));
    CHECK_FALSE(mp.has("c"));
    CHECK_THROWS_AS(mp.add("a", TensorD({1})), StateError);
    CHECK_THROWS_AS(mp.at("missing"), StateError);

    auto flat = mp.flat();
    CHECK(flat == std::vector<double>{1, 2, 3, 4, 5, 6, 7});
    for (auto& x : flat) x += 10;
    mp.load_flat(flat);
    CHECK(mp.at("a").value[3] == 14.0);
    CHECK(mp.at("b").value[0] == 15.0);
    CHECK_THROWS_AS(mp.load_flat(std::vector<double>(6)), DimensionError);

    auto mpf = mp.cast<float>();
    CHECK(mpf.at("b").value[2] == 17.0f);
    CHECK(mpf.at("b").trainable == false);
    CHECK(mp.same_names(mp));
    ModelParamsT<double> other;
    other.add("a", TensorD({2, 2}));
    CHECK_FALSE(mp.same_names(other));
}

TEST_CASE("session shares one leaf per parameter") {
    ModelParamsT<double> mp;
    mp.add("w", TensorD({3}, {1, 2, 3}));
    mp.add("rm", TensorD({3}), false, false);
    TapeD tape;
    SessionT<double> s(tape, mp, op::NormMode::Train);
    auto w1 = s.p("w");
    auto w2 = s.p("w");
    CHECK(w1.id == w2.id);
    // Two uses of the same parameter accumulate gradient.
    auto y = op::sum_all(op::add(w1, w2));
    tape.backward(y.id);
    const TensorD* g = s.grad("w");
    REQUIRE(g != nullptr);
    CHECK((*g)[0] == 2.0);
    CHECK((*g)[2] == 2.0);
    CHECK(s.grad("rm") == nullptr);
    CHECK_THROWS_AS(s.p("rm"), StateError);
    CHECK_THROWS_AS(s.buf("w"), StateError);
    CHECK(s.buf("rm") == &mp.at("rm").value);
    CHECK_THROWS_AS(s.bind("w", make_leaf(tape, TensorD({2}), true)), DimensionError);
    CHECK_THROWS_AS(s.bind("rm", make_leaf(tape, TensorD({3}), true)), StateError);

    // Frozen sessions build constant leaves: no gradients flow.
    TapeD tape2;
    SessionT<double> f(tape2, mp, op::NormMode::Eval, true);
    auto yf = op::sum_all(f.p("w"));
    tape2.backward(yf.id);
    CHECK(f.grad("w") == nullptr);
}

TEST_CASE("initializers have the pinned distributions") {
    Rng rng(77);
    auto t = trunc_normal_init<double>({4000}, rng, 0.02);
    double mx = 0;
    for (int64_t i = 0; i < t.numel(); ++i) mx = std::max(mx, std::abs(t[i]));
    CHECK(mx <= 0.04 + 1e-12);  // truncated at two standard deviations
    CHECK(mx > 0.02);           // not degenerate

    auto k = kaiming_conv_init<double>({8, 4, 3, 3}, rng);
    double var = 0;
    for (int64_t i = 0; i < k.numel(); ++i) var += k[i] * k[i];
    var /= static_cast<double>(k.numel());
    CHECK(var == doctest::Approx(2.0 / 36.0).epsilon(0.25));

    ModelParamsT<double> mp;
    add_bn_params(mp, "bn", 5);
    CHECK(mp.at("bn.gamma").value[4] == 1.0);
    CHECK(mp.at("bn.beta").value[0] == 0.0);
    CHECK(mp.at("bn.mean").trainable == false);
    CHECK(mp.at("bn.var").value[0] == 1.0);
    add_linear_params(mp, "fc", 3, 4, rng);
    CHECK(mp.at("fc.b").value[2] == 0.0);
    CHECK(mp.at("fc.b").decay == false);
    CHECK(mp.at("fc.w").decay == true);
}

TEST_CASE("cnn block shapes, zero fixed point, gradients") {
    BlockConfig cfg;
    Rng rng(5);
    ModelParamsT<double> mp;
    add_cnn_block_params(mp, "blk", 3, 5, rng);
    {
        TapeD tape;
        SessionT<double> s(tape, mp, op::NormMode::Train);
        auto x = make_constant(tape, random_tokens({2, 3, 8, 8}, rng));
        auto y = cnn_block(s, "blk", x, false);
        CHECK(y.value().shape == std::vector<int64_t>{2, 5, 8, 8});
        auto yp = cnn_block(s, "blk", x, true);
        CHECK(yp.value().shape == std::vector<int64_t>{2, 5, 4, 4});
    }
    {
        // All-zero parameters map any input to exactly zero.
        ModelParamsT<double> zp;
        add_cnn_block_params(zp, "blk", 3, 5, rng);
        zero_trainables(zp);
        TapeD tape;
        SessionT<double> s(tape, zp, op::NormMode::Train);
        auto x = make_constant(tape, random_tokens({1, 3, 4, 4}, rng));
        auto y = cnn_block(s, "blk", x, false);
        for (int64_t i = 0; i < y.value().numel(); ++i) CHECK(y.value()[i] == 0.0);
    }
    {
        TapeD tape;
        SessionT<double> s(tape, mp, op::NormMode::Train);
        auto x = make_constant(tape, random_tokens({1, 3, 3, 3}, rng));
        CHECK_THROWS_AS((void)cnn_block(s, "blk", x, true), DimensionError);
    }
    Rng grng(513);
    ModelParamsT<double> gp;
    add_cnn_block_params(gp, "g", 2, 2, grng);
    randomize_trainables(gp, grng);
    BoundCheck bc(gp, random_tokens({1, 2, 4, 4}, grng));
    auto res = gradcheck::check(
        bc.wrap([](SessionT<double>& s, VarD x) { return cnn_block(s, "g", x, false); },
                random_tokens({1, 2, 4, 4}, grng)),
        bc.inputs);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("shift attention mask structure") {
    // 4x4 grid, window covering it, shift 2: four 2x2 island regions.
    auto m = shift_attention_mask<double>(4, 4, 4, 2);
    CHECK(m.shape == std::vector<int64_t>{1, 16, 16});
    const int expect_id[16] = {4, 4, 5, 5, 4, 4, 5, 5, 7, 7, 8, 8, 7, 7, 8, 8};
    for (int a = 0; a < 16; ++a) {
        int zeros = 0;
        for (int b = 0; b < 16; ++b) {
            const double v = m[a * 16 + b];
            if (expect_id[a] == expect_id[b]) {
                CHECK(v == 0.0);
                ++zeros;
            } else {
                CHECK(v <= -1e4);
            }
        }
        CHECK(zeros == 4);
    }
    // 8x8 with 4x4 windows: the interior window is unmasked, the bottom-right
    // window carries the same four-region pattern.
    auto m8 = shift_attention_mask<double>(8, 8, 4, 2);
    CHECK(m8.shape == std::vector<int64_t>{4, 16, 16});
    for (int64_t i = 0; i < 256; ++i) CHECK(m8[i] == 0.0);
    int nonzero = 0;
    for (int64_t i = 3 * 256; i < 4 * 256; ++i)
        if (m8[i] != 0.0) ++nonzero;
    CHECK(nonzero == 16 * 12);
    // No shift: all zeros.
    auto m0 = shift_attention_mask<double>(8, 8, 4, 0);
    for (int64_t i = 0; i < m0.numel(); ++i) CHECK(m0[i] == 0.0);
    CHECK_THROWS_AS(shift_attention_mask<double>(8, 8, 4, 4), ParameterError);
    CHECK_THROWS_AS(shift_attention_mask<double>(6, 8, 4, 2), DimensionError);
}

TEST_CASE("relative position bias index") {
    const auto idx = rel_bias_index(2);
    CHECK(idx.size() == 16);
    for (int64_t v : idx) {
        CHECK(v >= 0);
        CHECK(v < 9);
    }
    auto at = [&](int64_t a, int64_t b) { return idx[static_cast<size_t>(a * 4 + b)]; };
    CHECK(at(0, 0) == 4);  // zero offset sits at the table centre
    CHECK(at(3, 3) == 4);
    CHECK(at(0, 1) == 3);  // one step left
    CHECK(at(1, 0) == 5);  // one step right
    CHECK(at(0, 2) == 1);  // one step up
    CHECK(at(2, 0) == 7);  // one step down
    CHECK(at(0, 3) == 0);
    CHECK(at(3, 0) == 8);
}

TEST_CASE("window msa single-token hand oracle") {
    // One window of one token: attention is trivially 1, so the output is
    // proj(v). Hand-computed: v = (0.3, 0.3), proj = diag(1, 2) + (.05, -.05).
    BlockConfig cfg;
    cfg.embed_dim = 2;
    cfg.num_heads = 1;
    cfg.window = 1;
    ModelParamsT<double> mp;
    Rng rng(1);
    add_window_msa_params(mp, "m", cfg, rng);
    mp.at("m.qkv.w").value.fill(0.1);
    mp.at("m.qkv.b").value.fill(0.0);
    mp.at("m.proj.w").value = TensorD({2, 2}, {1, 0, 0, 2});
    mp.at("m.proj.b").value = TensorD({2}, {0.05, -0.05});
    mp.at("m.relbias").value.fill(0.7);
    TapeD tape;
    SessionT<double> s(tape, mp, op::NormMode::Train);
    auto x = make_constant(tape, TensorD({1, 1, 2}, {1.0, 2.0}));
    auto y = window_msa(s, "m", x, cfg);
    CHECK(y.value()[0] == doctest::Approx(0.35).epsilon(1e-12));
    CHECK(y.value()[1] == doctest::Approx(0.55).epsilon(1e-12));
}

TEST_CASE("window msa matches the manual reference") {
    BlockConfig cfg;
    cfg.embed_dim = 4;
    cfg.num_heads = 2;
    cfg.window = 2;
    Rng rng(23);
    ModelParamsT<double> mp;
    add_window_msa_params(mp, "m", cfg, rng);
    const TensorD x = random_tokens({4, 4, 4}, rng);
    const auto mask = shift_attention_mask<double>(4, 4, 2, 1);

    for (const TensorD* mk : {static_cast<const TensorD*>(nullptr), &mask}) {
        TapeD tape;
        SessionT<double> s(tape, mp, op::NormMode::Train);
        AttnTraceT<double> trace;
        auto y = window_msa(s, "m", make_constant(tape, x), cfg, mk, &trace);
        const TensorD ref =
            manual_msa(x, mp.at("m.qkv.w").value, mp.at("m.qkv.b").value, mp.at("m.proj.w").value,
                       mp.at("m.proj.b").value, mp.at("m.relbias").value, 2, 2, mk);
        REQUIRE(y.value().shape == ref.shape);
        for (int64_t i = 0; i < ref.numel(); ++i)
            CHECK(y.value()[i] == doctest::Approx(ref[i]).epsilon(1e-10));
        // Attention rows are probability distributions.
        REQUIRE(trace.weights.shape == std::vector<int64_t>{4, 2, 4, 4});
        for (int64_t r = 0; r < 4 * 2 * 4; ++r) {
            double s_row = 0;
            for (int64_t c = 0; c < 4; ++c) s_row += trace.weights[r * 4 + c];
            CHECK(s_row == doctest::Approx(1.0).epsilon(1e-12));
        }
    }

    // The shift mask suppresses cross-region attention to below 1e-4.
    {
        TapeD tape;
        SessionT<double> s(tape, mp, op::NormMode::Train);
        const auto big = shift_attention_mask<double>(2, 2, 2, 1);
        AttnTraceT<double> trace;
        const TensorD x1 = random_tokens({1, 4, 4}, rng);
        (void)window_msa(s, "m", make_constant(tape, x1), cfg, &big, &trace);
        for (int64_t h = 0; h < 2; ++h)
            for (int64_t a = 0; a < 4; ++a)
                for (int64_t b = 0; b < 4; ++b)
                    if (big[a * 4 + b] != 0.0)
                        CHECK(trace.weights[(h * 4 + a) * 4 + b] < 1e-4);
    }

    randomize_trainables(mp, rng);
    BoundCheck bc(mp, random_tokens({2, 4, 4}, rng));
    auto res = gradcheck::check(
        bc.wrap([&](SessionT<double>& s, VarD xx) { return window_msa(s, "m", xx, cfg); },
                random_tokens({2, 4, 4}, rng)),
        bc.inputs);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("se gate halves with zero weights") {
    Rng rng(3);
    ModelParamsT<double> mp;
    add_se_gate_params(mp, "se", 4, 16, rng);
    CHECK(mp.at("se.fc1.w").value.shape == std::vector<int64_t>{4, 1});  // max(1, 4/16)
    zero_trainables(mp);
    TapeD tape;
    SessionT<double> s(tape, mp, op::NormMode::Train);
    const TensorD x = random_tokens({2, 3, 4}, rng);
    auto y = se_gate(s, "se", make_constant(tape, x));
    for (int64_t i = 0; i < x.numel(); ++i)
        CHECK(y.value()[i] == doctest::Approx(0.5 * x[i]).epsilon(1e-15));

    ModelParamsT<double> gp;
    add_se_gate_params(gp, "se", 4, 2, rng);
    randomize_trainables(gp, rng);
    BoundCheck bc(gp, random_tokens({2, 3, 4}, rng));
    auto res = gradcheck::check(
        bc.wrap([](SessionT<double>& s2, VarD xx) { return se_gate(s2, "se", xx); },
                random_tokens({2, 3, 4}, rng)),
        bc.inputs);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("swin pair: zero parameters give the identity") {
    BlockConfig cfg;
    cfg.embed_dim = 4;
    cfg.num_heads = 2;
    cfg.window = 2;
    Rng rng(9);
    ModelParamsT<double> mp;
    add_swin_pair_params(mp, "p", cfg, rng);
    zero_trainables(mp);
    TapeD tape;
    SessionT<double> s(tape, mp, op::NormMode::Train);
    const TensorD x = random_tokens({2, 16, 4}, rng);
    auto y = swin_block_pair(s, "p", make_constant(tape, x), 4, 4, cfg);
    REQUIRE(y.value().shape == x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.value()[i] == x[i]);
}

TEST_CASE("swin pair gradient check") {
    BlockConfig cfg;
    cfg.embed_dim = 4;
    cfg.num_heads = 2;
    cfg.window = 2;
    Rng rng(31);
    ModelParamsT<double> mp;
    add_swin_pair_params(mp, "p", cfg, rng);
    randomize_trainables(mp, rng);
    BoundCheck bc(mp, random_tokens({1, 16, 4}, rng));
    auto res = gradcheck::check(
        bc.wrap([&](SessionT<double>& s, VarD x) { return swin_block_pair(s, "p", x, 4, 4, cfg); },
                random_tokens({1, 16, 4}, rng)),
        bc.inputs);
    CHECK(res.max_rel_err < 1e-4);
    CHECK(res.coords_checked > 500);
}

TEST_CASE("swin pair rejects an indivisible grid") {
    BlockConfig cfg;
    cfg.embed_dim = 4;
    cfg.num_heads = 2;
    cfg.window = 4;
    Rng rng(2);
    ModelParamsT<double> mp;
    add_swin_pair_params(mp, "p", cfg, rng);
    TapeD tape;
    SessionT<double> s(tape, mp, op::NormMode::Train);
    auto x = make_constant(tape, random_tokens({1, 36, 4}, rng));
    CHECK_THROWS_AS((void)swin_block_pair(s, "p", x, 6, 6, cfg), DimensionError);
}

TEST_CASE("patch embed gathers conv-ordered features") {
    Rng rng(4);
    ModelParamsT<double> mp;
    add_patch_embed_params(mp, "pe", 2, 2, 8, rng);
    // Identity projection exposes the raw gather order (c, i, j).
    TensorD eye({8, 8});
    for (int64_t i = 0; i < 8; ++i) eye[i * 8 + i] = 1.0;
    mp.at("pe.w").value = eye;
    mp.at("pe.b").value.fill(0.0);
    TapeD tape;
    SessionT<double> s(tape, mp, op::NormMode::Train);
    const TensorD x({1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    auto y = patch_embed(s, "pe", make_constant(tape, x), 2);
    REQUIRE(y.value().shape == std::vector<int64_t>{1, 1, 8});
    for (int64_t i = 0; i < 8; ++i) CHECK(y.value()[i] == static_cast<double>(i + 1));

    // Patch size 1: tokens are per-pixel channel vectors, row-major.
    ModelParamsT<double> mp1;
    add_patch_embed_params(mp1, "pe", 2, 1, 2, rng);
    mp1.at("pe.w").value = TensorD({2, 2}, {1, 0, 0, 1});
    mp1.at("pe.b").value.fill(0.0);
    TapeD tape1;
    SessionT<double> s1(tape1, mp1, op::NormMode::Train);
    auto y1 = patch_embed(s1, "pe", make_constant(tape1, x), 1);
    REQUIRE(y1.value().shape == std::vector<int64_t>{1, 4, 2});
    CHECK(y1.value().at3(0, 0, 0) == 1.0);
    CHECK(y1.value().at3(0, 0, 1) == 5.0);
    CHECK(y1.value().at3(0, 3, 0) == 4.0);
    CHECK(y1.value().at3(0, 3, 1) == 8.0);

    TapeD tape2;
    SessionT<double> s2(tape2, mp, op::NormMode::Train);
    auto xb = make_constant(tape2, TensorD({1, 2, 3, 2}, 0.0));
    CHECK_THROWS_AS((void)patch_embed(s2, "pe", xb, 2), DimensionError);
}

TEST_CASE("patch merge and expand shapes and gradients") {
    Rng rng(6);
    ModelParamsT<double> mp;
    add_patch_merge_params(mp, "mg", 2, rng);
    add_patch_expand_params(mp, "ex", 4, rng);
    {
        TapeD tape;
        SessionT<double> s(tape, mp, op::NormMode::Train);
        auto t = make_constant(tape, random_tokens({1, 16, 2}, rng));
        auto merged = patch_merge(s, "mg", t, 4, 4);
        CHECK(merged.value().shape == std::vector<int64_t>{1, 4, 4});
        auto expanded = patch_expand(s, "ex", merged, 2, 2);
        CHECK(expanded.value().shape == std::vector<int64_t>{1, 16, 2});
        auto odd = make_constant(tape, random_tokens({1, 12, 2}, rng));
        CHECK_THROWS_AS((void)patch_merge(s, "mg", odd, 3, 4), DimensionError);
    }
    {
        TapeD tape;
        SessionT<double> s(tape, mp, op::NormMode::Train);
        ModelParamsT<double> mo;
        add_patch_expand_params(mo, "odd", 3, rng);
        SessionT<double> so(tape, mo, op::NormMode::Train);
        auto t = make_constant(tape, random_tokens({1, 4, 3}, rng));
        CHECK_THROWS_AS((void)patch_expand(so, "odd", t, 2, 2), DimensionError);
    }
    ModelParamsT<double> gm;
    add_patch_merge_params(gm, "mg", 2, rng);
    randomize_trainables(gm, rng);
    BoundCheck bm(gm, random_tokens({1, 16, 2}, rng));
    CHECK(gradcheck::check(
              bm.wrap([](SessionT<double>& s, VarD t) { return patch_merge(s, "mg", t, 4, 4); },
                      random_tokens({1, 4, 4}, rng)),
              bm.inputs)
              .max_rel_err < 1e-4);
    ModelParamsT<double> ge;
    add_patch_expand_params(ge, "ex", 4, rng);
    randomize_trainables(ge, rng);
    BoundCheck be(ge, random_tokens({1, 4, 4}, rng));
    CHECK(gradcheck::check(
              be.wrap([](SessionT<double>& s, VarD t) { return patch_expand(s, "ex", t, 2, 2); },
                      random_tokens({1, 16, 2}, rng)),
              be.inputs)
              .max_rel_err < 1e-4);
}

TEST_CASE("block config validation") {
    BlockConfig ok;
    ok.validate();
    BlockConfig bad = ok;
    bad.embed_dim = 50;  // not divisible by 3 heads
    CHECK_THROWS_AS(bad.validate(), ParameterError);
    bad = ok;
    bad.shift = 1;  // window 4 allows only 0 or 2
    CHECK_THROWS_AS(bad.validate(), ParameterError);
    bad = ok;
    bad.num_heads = 0;
    CHECK_THROWS_AS(bad.validate(), ParameterError);
    ok.shift = 2;
    ok.validate();
}
