#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "ccat/data.hpp"

using namespace ccat;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const char* name) {
    const fs::path p = fs::temp_directory_path() / "ccat_data_tests" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(bool(is));
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

void spit(const fs::path& p, const std::string& s) {
    std::ofstream os(p, std::ios::binary);
    os << s;
}

}  // namespace

TEST_CASE("pgm round trip") {
    const fs::path dir = scratch_dir("pgm");
    Rng rng(3);
    TensorT<uint8_t> img({13, 9});
    for (int64_t i = 0; i < img.numel(); ++i) img[i] = static_cast<uint8_t>(rng.uniform_int(256));
    const std::string path = (dir / "a.pgm").string();
    write_pgm(path, img);
    const auto back = read_pgm(path);
    REQUIRE(back.same_shape(img));
    for (int64_t i = 0; i < img.numel(); ++i) REQUIRE(back[i] == img[i]);

    // Header comments are legal PGM and must be skipped.
    spit(dir / "c.pgm", std::string("P5\n# a comment\n2 1\n# another\n255\n\x10\x20", 35));
    const auto c = read_pgm((dir / "c.pgm").string());
    CHECK(c.dim(0) == 1);
    CHECK(c.dim(1) == 2);
    CHECK(c[0] == 0x10);
    CHECK(c[1] == 0x20);

    CHECK_THROWS_AS(read_pgm((dir / "missing.pgm").string()), IoError);
    spit(dir / "p2.pgm", "P2\n2 2\n255\n0 1 2 3\n");
    CHECK_THROWS_AS(read_pgm((dir / "p2.pgm").string()), FormatError);
    spit(dir / "max.pgm", std::string("P5\n1 1\n128\n\x40", 12));
    CHECK_THROWS_AS(read_pgm((dir / "max.pgm").string()), FormatError);
    spit(dir / "trunc.pgm", "P5\n4 4\n255\nab");
    CHECK_THROWS_AS(read_pgm((dir / "trunc.pgm").string()), FormatError);
}

TEST_CASE("manifest round trip and validation") {
    const fs::path dir = scratch_dir("manifest");
    const std::vector<ManifestEntry> entries = {
        {"a", "imgs/a.pgm", "masks/a.pgm"},
        {"b", "imgs/b.pgm", ""},
    };
    const std::string path = (dir / "m.tsv").string();
    write_manifest(path, entries);
    CHECK(slurp(path) == "a\timgs/a.pgm\tmasks/a.pgm\nb\timgs/b.pgm\tNONE\n");

    const auto back = read_manifest(path);
    REQUIRE(back.size() == 2);
    CHECK(back[0].id == "a");
    CHECK(back[0].labeled());
    CHECK(back[0].mask_path == "masks/a.pgm");
    CHECK(back[1].id == "b");
    CHECK(!back[1].labeled());

    spit(dir / "bad1.tsv", "only_one_field\n");
    CHECK_THROWS_AS(read_manifest((dir / "bad1.tsv").string()), FormatError);
    spit(dir / "bad2.tsv", "a\t\tm.pgm\n");
    CHECK_THROWS_AS(read_manifest((dir / "bad2.tsv").string()), FormatError);
    spit(dir / "dup.tsv", "a\tx.pgm\tNONE\na\ty.pgm\tNONE\n");
    CHECK_THROWS_WITH_AS(read_manifest((dir / "dup.tsv").string()),
                         doctest::Contains("duplicate record id 'a'"), DataError);
    CHECK_THROWS_AS(read_manifest((dir / "missing.tsv").string()), IoError);
}

TEST_CASE("synthetic generation is deterministic and loadable") {
    SyntheticSpec spec;
    spec.n_labeled = 4;
    spec.n_unlabeled = 3;
    spec.size = 32;
    spec.seed = 99;

    const fs::path d1 = scratch_dir("gen1"), d2 = scratch_dir("gen2");
    const auto [lab1, unl1] = gen_synthetic(spec, d1.string());
    const auto [lab2, unl2] = gen_synthetic(spec, d2.string());

    // Byte-identical regeneration, file by file.
    for (const auto& e : fs::directory_iterator(d1)) {
        const auto rel = e.path().filename();
        CHECK(slurp(e.path()) == slurp(d2 / rel));
    }

    const Dataset lab = load_dataset(lab1);
    const Dataset unl = load_dataset(unl1);
    REQUIRE(lab.size() == 4);
    REQUIRE(unl.size() == 3);
    for (const auto& r : lab.records) {
        CHECK(r.labeled);
        CHECK(r.image.dim(0) == 32);
        CHECK(r.mask.dim(0) == 32);
        float lo = 1e9f, hi = -1e9f;
        for (int64_t i = 0; i < r.image.numel(); ++i) {
            lo = std::min(lo, r.image[i]);
            hi = std::max(hi, r.image[i]);
        }
        CHECK(lo >= 0.0f);
        CHECK(hi <= 1.0f);
        for (int64_t i = 0; i < r.mask.numel(); ++i) CHECK(r.mask[i] <= 1);
    }
    for (const auto& r : unl.records) {
        CHECK(!r.labeled);
        CHECK(r.mask.numel() == 0);
    }

    // Raw mask files contain only {0, 255}.
    const auto raw = read_pgm((d1 / "lab_000_mask.pgm").string());
    for (int64_t i = 0; i < raw.numel(); ++i) CHECK((raw[i] == 0 || raw[i] == 255));

    CHECK_THROWS_AS([] {
        SyntheticSpec bad;
        bad.size = 48;
        bad.validate();
    }(), ParameterError);
}

TEST_CASE("synthetic foreground fraction stays in band") {
    // Monte-Carlo check of the generator's own parameters: the mean lesion
    // area over 100 images must be a plausible lesion load.
    SyntheticSpec spec;
    spec.n_labeled = 100;
    spec.n_unlabeled = 0;
    spec.size = 64;
    spec.seed = 7;
    const fs::path dir = scratch_dir("fgband");
    const auto [lab, unl] = gen_synthetic(spec, dir.string());
    (void)unl;
    const Dataset ds = load_dataset(lab);
    double total_fg = 0;
    for (const auto& r : ds.records) {
        int64_t fg = 0;
        for (int64_t i = 0; i < r.mask.numel(); ++i) fg += r.mask[i];
        total_fg += double(fg) / double(r.mask.numel());
    }
    const double mean_frac = total_fg / double(ds.size());
    CHECK(mean_frac >= 0.02);
    CHECK(mean_frac <= 0.25);
}

TEST_CASE("load errors name the offending record") {
    const fs::path dir = scratch_dir("loaderr");
    TensorT<uint8_t> img({8, 8}), small({4, 4}), badmask({8, 8});
    badmask.fill(0);
    badmask[5] = 7;
    write_pgm((dir / "img.pgm").string(), img);
    write_pgm((dir / "small.pgm").string(), small);
    write_pgm((dir / "badmask.pgm").string(), badmask);
    TensorT<uint8_t> okmask({8, 8});
    okmask[3] = 255;
    write_pgm((dir / "okmask.pgm").string(), okmask);

    spit(dir / "dims.tsv", "rec1\timg.pgm\tsmall.pgm\n");
    CHECK_THROWS_WITH_AS(load_dataset((dir / "dims.tsv").string()), doctest::Contains("record 'rec1'"),
                         DataError);
    spit(dir / "nonbin.tsv", "rec2\timg.pgm\tbadmask.pgm\n");
    CHECK_THROWS_WITH_AS(load_dataset((dir / "nonbin.tsv").string()),
                         doctest::Contains("record 'rec2'"), DataError);
    spit(dir / "gone.tsv", "rec3\tnot_there.pgm\tokmask.pgm\n");
    CHECK_THROWS_WITH_AS(load_dataset((dir / "gone.tsv").string()), doctest::Contains("record 'rec3'"),
                         DataError);
    spit(dir / "ok.tsv", "rec4\timg.pgm\tokmask.pgm\n");
    const Dataset ds = load_dataset((dir / "ok.tsv").string());
    REQUIRE(ds.size() == 1);
    CHECK(ds.records[0].mask[3] == 1);
}

TEST_CASE("geometric augmentation") {
    Rng rng(17);
    TensorF img({6, 6});
    Mask mask({6, 6});
    for (int64_t i = 0; i < 36; ++i) {
        img[i] = static_cast<float>(rng.uniform());
        mask[i] = rng.bernoulli(0.3) ? 1 : 0;
    }

    // Identity parameters leave both untouched.
    CHECK(max_abs_diff(apply_geom(img, 0, false, false), img) == 0.0f);

    // Four quarter-turns compose to the identity.
    TensorF r = img;
    for (int i = 0; i < 4; ++i) r = apply_geom(r, 1, false, false);
    CHECK(max_abs_diff(r, img) == 0.0f);

    // Double flips cancel.
    CHECK(max_abs_diff(apply_geom(apply_geom(img, 0, true, true), 0, true, true), img) == 0.0f);

    // Joint transform keeps the pair aligned and the foreground count fixed.
    int64_t fg0 = 0;
    for (int64_t i = 0; i < 36; ++i) fg0 += mask[i];
    for (int t = 0; t < 10; ++t) {
        const auto [ai, am] = base_augment(img, mask, rng);
        CHECK(ai.same_shape(img));
        int64_t fg = 0;
        for (int64_t i = 0; i < 36; ++i) {
            fg += am[i];
            CHECK(am[i] <= 1);
        }
        CHECK(fg == fg0);
        // Alignment: every transformed mask pixel carries its original image
        // intensity partner (checked via a probe image equal to the mask).
        TensorF probe({6, 6});
        for (int64_t i = 0; i < 36; ++i) probe[i] = float(mask[i]);
        Rng rng2(1000 + t), rng3(1000 + t);
        const auto [pi, pm] = base_augment(probe, mask, rng2);
        const auto [qi, qm] = base_augment(probe, mask, rng3);
        for (int64_t i = 0; i < 36; ++i) {
            CHECK(pi[i] == float(pm[i]));
            CHECK(pm[i] == qm[i]);  // determinism under equal seeds
        }
    }
}

TEST_CASE("batch assembly") {
    TensorF a({4, 4}), b({4, 4});
    a.fill(0.25f);
    b.fill(0.75f);
    const TensorF x = batch_images({a, b});
    REQUIRE(x.shape == std::vector<int64_t>{2, 1, 4, 4});
    CHECK(x.at4(0, 0, 2, 2) == 0.25f);
    CHECK(x.at4(1, 0, 2, 2) == 0.75f);

    Mask m0({4, 4}), m1({4, 4});
    m1.fill(1);
    const TensorF y = batch_targets({m0, m1});
    REQUIRE(y.shape == std::vector<int64_t>{2, 2, 4, 4});
    for (int64_t i = 0; i < 16; ++i) {
        CHECK(y.at4(0, 0, i / 4, i % 4) == 1.0f);
        CHECK(y.at4(0, 1, i / 4, i % 4) == 0.0f);
        CHECK(y.at4(1, 0, i / 4, i % 4) == 0.0f);
        CHECK(y.at4(1, 1, i / 4, i % 4) == 1.0f);
    }

    CHECK_THROWS_AS(batch_images({}), ParameterError);
    TensorF odd({3, 4});
    CHECK_THROWS_AS(batch_images({a, odd}), DimensionError);
}
