#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "ccat/metrics.hpp"
#include "ccat/rng.hpp"

using namespace ccat;

namespace {

Mask mk(int64_t h, int64_t w, std::initializer_list<int> vals) {
    Mask m({h, w});
    int64_t i = 0;
    for (int v : vals) m[i++] = static_cast<uint8_t>(v);
    return m;
}

Mask random_mask(int64_t h, int64_t w, double p, Rng& rng) {
    Mask m({h, w});
    for (int64_t i = 0; i < m.numel(); ++i) m[i] = rng.bernoulli(p) ? 1 : 0;
    return m;
}

// All-pairs reference: directed max-min Euclidean distance both ways, with
// the same empty-set conventions as the production routine.
double hd_oracle(const Mask& a, const Mask& b) {
    std::vector<std::pair<int64_t, int64_t>> pa, pb;
    for (int64_t y = 0; y < a.dim(0); ++y)
        for (int64_t x = 0; x < a.dim(1); ++x) {
            if (a.at2(y, x)) pa.emplace_back(y, x);
            if (b.at2(y, x)) pb.emplace_back(y, x);
        }
    if (pa.empty() && pb.empty()) return 0.0;
    const double h = double(a.dim(0)), w = double(a.dim(1));
    if (pa.empty() || pb.empty()) return std::sqrt(h * h + w * w);
    auto directed = [](const auto& from, const auto& to) {
        double worst = 0.0;
        for (const auto& [fy, fx] : from) {
            double best = 1e30;
            for (const auto& [ty, tx] : to) {
                const double dy = double(fy - ty), dx = double(fx - tx);
                best = std::min(best, dy * dy + dx * dx);
            }
            worst = std::max(worst, best);
        }
        return worst;
    };
    return std::sqrt(std::max(directed(pa, pb), directed(pb, pa)));
}

}  // namespace

TEST_CASE("confusion counts") {
    const Mask ones = mk(2, 2, {1, 1, 1, 1});
    auto c = confusion(ones, ones);
    CHECK(c.tp == 4);
    CHECK(c.fp == 0);
    CHECK(c.fn == 0);
    CHECK(c.tn == 0);

    // All-positive prediction against a half-positive truth.
    const Mask half = mk(2, 2, {1, 0, 1, 0});
    c = confusion(ones, half);
    CHECK(c.tp == 2);
    CHECK(c.fp == 2);
    CHECK(c.fn == 0);
    CHECK(c.tn == 0);

    // The four counts always partition the pixel grid.
    Rng rng(11);
    for (int t = 0; t < 20; ++t) {
        const Mask p = random_mask(7, 9, 0.4, rng), g = random_mask(7, 9, 0.3, rng);
        CHECK(confusion(p, g).total() == 63);
    }

    CHECK_THROWS_AS(confusion(ones, mk(1, 2, {1, 0})), DimensionError);
    Mask bad({2, 2});
    bad[0] = 7;
    CHECK_THROWS_AS(confusion(bad, ones), ParameterError);
}

TEST_CASE("dice coefficient") {
    const Mask a = mk(2, 2, {1, 1, 0, 0});
    CHECK(dsc(a, a) == doctest::Approx(1.0));

    const Mask b = mk(2, 2, {0, 0, 1, 1});
    CHECK(dsc(a, b) == doctest::Approx(0.0));

    // |pred| = |gt| = 4 with overlap 2: 2*2 / (4+4) = 0.5.
    const Mask p = mk(2, 4, {1, 1, 1, 1, 0, 0, 0, 0});
    const Mask g = mk(2, 4, {1, 1, 0, 0, 1, 1, 0, 0});
    CHECK(dsc(p, g) == doctest::Approx(0.5));

    // Both empty: defined as perfect agreement.
    const Mask z0({3, 3}), z1({3, 3});
    CHECK(dsc(z0, z1) == doctest::Approx(1.0));

    // Symmetry and joint-permutation invariance on random masks.
    Rng rng(23);
    for (int t = 0; t < 10; ++t) {
        const Mask x = random_mask(6, 6, 0.4, rng), y = random_mask(6, 6, 0.4, rng);
        CHECK(dsc(x, y) == doctest::Approx(dsc(y, x)));
        const auto perm = rng.permutation(36);
        Mask xp({6, 6}), yp({6, 6});
        for (int64_t i = 0; i < 36; ++i) {
            xp[i] = x[perm[static_cast<size_t>(i)]];
            yp[i] = y[perm[static_cast<size_t>(i)]];
        }
        CHECK(dsc(xp, yp) == doctest::Approx(dsc(x, y)));
    }
}

TEST_CASE("sensitivity and specificity") {
    const Mask g = mk(2, 2, {1, 1, 0, 0});
    auto [sen, spc] = sen_spc(g, g);
    CHECK(sen == doctest::Approx(1.0));
    CHECK(spc == doctest::Approx(1.0));

    // Predicting nothing: misses every positive, keeps every negative.
    const Mask none({2, 2});
    std::tie(sen, spc) = sen_spc(none, g);
    CHECK(sen == doctest::Approx(0.0));
    CHECK(spc == doctest::Approx(1.0));

    // Empty truth: SEN is 1 by convention, SPC counts false alarms.
    const Mask pred = mk(2, 2, {1, 0, 0, 0});
    std::tie(sen, spc) = sen_spc(pred, none);
    CHECK(sen == doctest::Approx(1.0));
    CHECK(spc == doctest::Approx(3.0 / 4.0));
}

TEST_CASE("dice consistency identity") {
    // DSC == 2*SEN*P/(SEN+P) with P = TP/(TP+FP) whenever denominators are
    // nonzero; cross-checks dsc against the confusion-count route.
    Rng rng(37);
    int checked = 0;
    while (checked < 25) {
        const Mask p = random_mask(8, 8, 0.4, rng), g = random_mask(8, 8, 0.4, rng);
        const Confusion c = confusion(p, g);
        if (c.tp + c.fp == 0 || c.tp + c.fn == 0) continue;
        const double prec = double(c.tp) / double(c.tp + c.fp);
        const double sen = double(c.tp) / double(c.tp + c.fn);
        if (sen + prec == 0) continue;
        CHECK(dsc(p, g) == doctest::Approx(2 * sen * prec / (sen + prec)).epsilon(1e-12));
        ++checked;
    }
}

TEST_CASE("hausdorff basics") {
    Rng rng(51);
    const Mask m = random_mask(10, 10, 0.3, rng);
    CHECK(hausdorff(m, m) == doctest::Approx(0.0));

    // Single pixels at (0,0) and (3,4): the 3-4-5 triangle.
    Mask a({8, 8}), b({8, 8});
    a.at2(0, 0) = 1;
    b.at2(3, 4) = 1;
    CHECK(hausdorff(a, b) == doctest::Approx(5.0));
    CHECK(hausdorff(b, a) == doctest::Approx(5.0));

    // Empty-set conventions.
    const Mask empty({8, 8});
    CHECK(hausdorff(empty, empty) == doctest::Approx(0.0));
    CHECK(hausdorff(a, empty) == doctest::Approx(std::sqrt(128.0)));
    CHECK(hausdorff(empty, a) == doctest::Approx(std::sqrt(128.0)));
}

TEST_CASE("hausdorff matches the all-pairs oracle") {
    Rng rng(77);
    // Sparse through dense masks plus degenerate full/empty combinations.
    for (int t = 0; t < 50; ++t) {
        const double pa = rng.uniform(0.02, 0.5), pb = rng.uniform(0.02, 0.5);
        const Mask a = random_mask(16, 16, pa, rng), b = random_mask(16, 16, pb, rng);
        const double got = hausdorff(a, b), want = hd_oracle(a, b);
        CHECK(got == doctest::Approx(want).epsilon(1e-12));
        CHECK(hausdorff(b, a) == doctest::Approx(want).epsilon(1e-12));
    }
    Mask empty({16, 16});
    Mask full({16, 16});
    full.fill(1);
    for (Mask* x : {&empty, &full})
        for (Mask* y : {&empty, &full})
            CHECK(hausdorff(*x, *y) == doctest::Approx(hd_oracle(*x, *y)).epsilon(1e-12));
}

TEST_CASE("argmax thresholding") {
    TensorF probs({1, 2, 2, 2});
    // fg probability per pixel: 0.9, 0.5, 0.2, 0.51
    const double fg[4] = {0.9, 0.5, 0.2, 0.51};
    for (int64_t i = 0; i < 4; ++i) {
        probs.at4(0, 1, i / 2, i % 2) = static_cast<float>(fg[i]);
        probs.at4(0, 0, i / 2, i % 2) = static_cast<float>(1.0 - fg[i]);
    }
    const Mask m = argmax_mask(probs);
    CHECK(m.at2(0, 0) == 1);
    CHECK(m.at2(0, 1) == 0);  // exact tie resolves to background
    CHECK(m.at2(1, 0) == 0);
    CHECK(m.at2(1, 1) == 1);

    CHECK_THROWS_AS(argmax_mask(TensorF({1, 3, 2, 2})), DimensionError);
    CHECK_THROWS_AS(argmax_mask(probs, 5), ParameterError);
}

TEST_CASE("aggregation and report table") {
    const SegMetrics a{0.4, 2.0, 0.5, 0.9};
    const SegMetrics b{0.6, 4.0, 0.7, 1.0};

    const SegMetrics single = aggregate({a});
    CHECK(single.dsc == doctest::Approx(0.4));
    CHECK(single.hd == doctest::Approx(2.0));

    const SegMetrics mean = aggregate({a, b});
    CHECK(mean.dsc == doctest::Approx(0.5));
    CHECK(mean.hd == doctest::Approx(3.0));
    CHECK(mean.sen == doctest::Approx(0.6));
    CHECK(mean.spc == doctest::Approx(0.95));

    const SegMetrics swapped = aggregate({b, a});
    CHECK(swapped.dsc == doctest::Approx(mean.dsc));

    CHECK_THROWS_AS(aggregate({}), ParameterError);

    const std::string table = metrics_table({{"0", a}, {"1", b}});
    std::istringstream is(table);
    std::string line;
    std::getline(is, line);
    CHECK(line == "fold\tDSC\tHD\tSEN\tSPC");
    std::getline(is, line);
    CHECK(line == "0\t0.4000\t2.0000\t0.5000\t0.9000");
    std::getline(is, line);
    CHECK(line == "1\t0.6000\t4.0000\t0.7000\t1.0000");
    std::getline(is, line);
    CHECK(line == "mean\t0.5000\t3.0000\t0.6000\t0.9500");
    CHECK(!std::getline(is, line));
}

TEST_CASE("evaluate pair bundles all four metrics") {
    const Mask p = mk(2, 4, {1, 1, 1, 1, 0, 0, 0, 0});
    const Mask g = mk(2, 4, {1, 1, 0, 0, 1, 1, 0, 0});
    const SegMetrics m = evaluate_pair(p, g);
    CHECK(m.dsc == doctest::Approx(0.5));
    CHECK(m.hd == doctest::Approx(hd_oracle(p, g)));
    CHECK(m.sen == doctest::Approx(0.5));
    CHECK(m.spc == doctest::Approx(0.5));
}
