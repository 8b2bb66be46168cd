#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ccat/errors.hpp"
#include "ccat/metrics.hpp"
#include "ccat/rng.hpp"
#include "ccat/tensor.hpp"

namespace ccat {

// ---------------------------------------------------------------------------
// PGM (P5, 8-bit) image I/O. Chosen for the dataset format because it is
// bit-exact, single-file, and parseable without an external decoder.
// ---------------------------------------------------------------------------

namespace detail {

inline int pgm_next_int(std::istream& is, const std::string& path) {
    // Skips whitespace and '#' comment lines between header tokens.
    for (;;) {
        const int c = is.peek();
        if (c == EOF) throw FormatError(path + ": truncated PGM header");
        if (std::isspace(c)) {
            is.get();
            continue;
        }
        if (c == '#') {
            std::string line;
            std::getline(is, line);
            continue;
        }
        break;
    }
    int v = 0;
    if (!(is >> v)) throw FormatError(path + ": malformed PGM header");
    return v;
}

}  // namespace detail

inline TensorT<uint8_t> read_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(path + ": cannot open for reading");
    char m0 = 0, m1 = 0;
    is.get(m0);
    is.get(m1);
    if (m0 != 'P' || m1 != '5') throw FormatError(path + ": not a binary PGM (P5) file");
    const int w = detail::pgm_next_int(is, path);
    const int h = detail::pgm_next_int(is, path);
    const int maxval = detail::pgm_next_int(is, path);
    if (w <= 0 || h <= 0) throw FormatError(path + ": nonpositive PGM dimensions");
    if (maxval != 255) throw FormatError(path + ": unsupported PGM maxval " + std::to_string(maxval));
    is.get();  // single whitespace separating header from pixels
    TensorT<uint8_t> img({h, w});
    is.read(reinterpret_cast<char*>(img.ptr()), img.numel());
    if (is.gcount() != img.numel()) throw FormatError(path + ": truncated PGM pixel data");
    return img;
}

inline void write_pgm(const std::string& path, const TensorT<uint8_t>& img) {
    if (img.rank() != 2) throw DimensionError("write_pgm: image must be rank-2, got " + img.shape_str());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError(path + ": cannot open for writing");
    os << "P5\n" << img.dim(1) << " " << img.dim(0) << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.ptr()), img.numel());
    if (!os) throw IoError(path + ": write failed");
}

// ---------------------------------------------------------------------------
// Dataset manifest: UTF-8 text, one record per line,
// id<TAB>image-path<TAB>mask-path|NONE. Paths are relative to the manifest's
// directory.
// ---------------------------------------------------------------------------

struct ManifestEntry {
    std::string id;
    std::string image_path;  // relative to the manifest directory
    std::string mask_path;   // empty means unlabeled (written as NONE)
    bool labeled() const { return !mask_path.empty(); }
};

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError(path + ": cannot open manifest");
    std::vector<ManifestEntry> entries;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        ManifestEntry e;
        std::string mask;
        if (!std::getline(ls, e.id, '\t') || !std::getline(ls, e.image_path, '\t') || !std::getline(ls, mask, '\t'))
            throw FormatError(path + ":" + std::to_string(lineno) + ": expected id<TAB>image<TAB>mask|NONE");
        if (e.id.empty() || e.image_path.empty() || mask.empty())
            throw FormatError(path + ":" + std::to_string(lineno) + ": empty manifest field");
        if (mask != "NONE") e.mask_path = mask;
        for (const auto& prev : entries)
            if (prev.id == e.id) throw DataError(path + ": duplicate record id '" + e.id + "'");
        entries.push_back(std::move(e));
    }
    return entries;
}

inline void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
    std::ofstream os(path);
    if (!os) throw IoError(path + ": cannot open manifest for writing");
    for (const auto& e : entries)
        os << e.id << '\t' << e.image_path << '\t' << (e.labeled() ? e.mask_path : std::string("NONE")) << '\n';
    if (!os) throw IoError(path + ": write failed");
}

// ---------------------------------------------------------------------------
// In-memory dataset.
// ---------------------------------------------------------------------------

struct DataRecord {
    std::string id;
    TensorF image;  // (H, W), values in [0, 1]
    Mask mask;      // (H, W), {0, 1}; empty for unlabeled records
    bool labeled = false;
};

struct Dataset {
    std::vector<DataRecord> records;
    int64_t size() const { return static_cast<int64_t>(records.size()); }
};

inline Dataset load_dataset(const std::string& manifest_path) {
    namespace fs = std::filesystem;
    const fs::path base = fs::path(manifest_path).parent_path();
    Dataset ds;
    for (const auto& e : read_manifest(manifest_path)) {
        DataRecord r;
        r.id = e.id;
        TensorT<uint8_t> raw;
        try {
            raw = read_pgm((base / e.image_path).string());
        } catch (const Error& err) {
            throw DataError("record '" + e.id + "': " + err.what());
        }
        r.image = TensorF({raw.dim(0), raw.dim(1)});
        for (int64_t i = 0; i < raw.numel(); ++i) r.image[i] = static_cast<float>(raw[i]) / 255.0f;
        if (e.labeled()) {
            TensorT<uint8_t> rawm;
            try {
                rawm = read_pgm((base / e.mask_path).string());
            } catch (const Error& err) {
                throw DataError("record '" + e.id + "': " + err.what());
            }
            if (!rawm.same_shape(raw))
                throw DataError("record '" + e.id + "': mask shape " + rawm.shape_str() +
                                " does not match image shape " + raw.shape_str());
            r.mask = Mask(rawm.shape);
            for (int64_t i = 0; i < rawm.numel(); ++i) {
                if (rawm[i] != 0 && rawm[i] != 255)
                    throw DataError("record '" + e.id + "': mask value " + std::to_string(int(rawm[i])) +
                                    " is not in {0, 255}");
                r.mask[i] = rawm[i] ? 1 : 0;
            }
            r.labeled = true;
        }
        ds.records.push_back(std::move(r));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Synthetic lesion data: smooth background + speckle texture + 1..3
// soft-edged elliptical lesions. Stands in for the non-redistributable CT
// corpus at desk scale; deterministic under the SyntheticSpec seed.
// ---------------------------------------------------------------------------

struct SyntheticSpec {
    int64_t n_labeled = 16;
    int64_t n_unlabeled = 16;
    int64_t size = 64;
    int lesions_min = 1;
    int lesions_max = 3;
    double speckle = 0.04;  // texture noise std, in intensity units
    uint64_t seed = 1234;

    void validate() const {
        if (n_labeled < 0 || n_unlabeled < 0) throw ParameterError("synthetic spec: negative image count");
        if (size <= 0 || size % 32 != 0) throw ParameterError("synthetic spec: size must be a positive multiple of 32");
        if (lesions_min < 1 || lesions_max < lesions_min) throw ParameterError("synthetic spec: bad lesion count range");
        if (speckle < 0) throw ParameterError("synthetic spec: negative speckle std");
    }
};

namespace detail {

// One image + mask pair. The mask is the hard ellipse interior; the image
// gets a soft-edged intensity bump on a smooth ramp background.
inline std::pair<TensorT<uint8_t>, TensorT<uint8_t>> synth_pair(int64_t size, const SyntheticSpec& spec, Rng& rng) {
    const int64_t n = size;
    std::vector<double> img(static_cast<size_t>(n * n));
    // Smooth background: bilinear ramp between four random corner levels.
    const double c00 = rng.uniform(0.2, 0.5), c01 = rng.uniform(0.2, 0.5);
    const double c10 = rng.uniform(0.2, 0.5), c11 = rng.uniform(0.2, 0.5);
    for (int64_t y = 0; y < n; ++y) {
        const double fy = double(y) / double(n - 1);
        for (int64_t x = 0; x < n; ++x) {
            const double fx = double(x) / double(n - 1);
            img[static_cast<size_t>(y * n + x)] =
                (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11);
        }
    }
    TensorT<uint8_t> mask({n, n});
    const int lesions = spec.lesions_min + static_cast<int>(rng.uniform_int(spec.lesions_max - spec.lesions_min + 1));
    for (int l = 0; l < lesions; ++l) {
        const double cx = rng.uniform(0.2, 0.8) * double(n);
        const double cy = rng.uniform(0.2, 0.8) * double(n);
        const double rx = rng.uniform(0.07, 0.16) * double(n);
        const double ry = rng.uniform(0.07, 0.16) * double(n);
        const double theta = rng.uniform(0.0, 3.141592653589793);
        const double amp = rng.uniform(0.25, 0.45);
        const double ct = std::cos(theta), st = std::sin(theta);
        for (int64_t y = 0; y < n; ++y)
            for (int64_t x = 0; x < n; ++x) {
                const double dx = double(x) - cx, dy = double(y) - cy;
                const double u = (ct * dx + st * dy) / rx;
                const double v = (-st * dx + ct * dy) / ry;
                const double r2 = u * u + v * v;
                if (r2 <= 1.0) mask.at2(y, x) = 255;
                // Soft falloff reaches zero at 1.3x the mask radius.
                const double soft = 1.0 - r2 / 1.69;
                if (soft > 0) img[static_cast<size_t>(y * n + x)] += amp * soft;
            }
    }
    TensorT<uint8_t> out({n, n});
    for (int64_t i = 0; i < n * n; ++i) {
        const double noisy = img[static_cast<size_t>(i)] + rng.normal(0.0, spec.speckle);
        const double clamped = std::min(1.0, std::max(0.0, noisy));
        out[i] = static_cast<uint8_t>(std::lround(clamped * 255.0));
    }
    return {out, mask};
}

}  // namespace detail

// Writes labeled and unlabeled pools plus their manifests (labeled.tsv,
// unlabeled.tsv) into out_dir. Returns the two manifest paths.
inline std::pair<std::string, std::string> gen_synthetic(const SyntheticSpec& spec, const std::string& out_dir) {
    namespace fs = std::filesystem;
    spec.validate();
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError(out_dir + ": cannot create output directory");
    Rng rng(spec.seed);
    auto name = [](const char* stem, int64_t i) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%s_%03d", stem, static_cast<int>(i));
        return std::string(buf);
    };
    std::vector<ManifestEntry> labeled, unlabeled;
    for (int64_t i = 0; i < spec.n_labeled; ++i) {
        const auto [img, mask] = detail::synth_pair(spec.size, spec, rng);
        const std::string id = name("lab", i);
        write_pgm((fs::path(out_dir) / (id + ".pgm")).string(), img);
        write_pgm((fs::path(out_dir) / (id + "_mask.pgm")).string(), mask);
        labeled.push_back({id, id + ".pgm", id + "_mask.pgm"});
    }
    for (int64_t i = 0; i < spec.n_unlabeled; ++i) {
        const auto [img, mask] = detail::synth_pair(spec.size, spec, rng);
        (void)mask;  // unlabeled pool: the mask is generated but withheld
        const std::string id = name("unl", i);
        write_pgm((fs::path(out_dir) / (id + ".pgm")).string(), img);
        unlabeled.push_back({id, id + ".pgm", ""});
    }
    const std::string lab_path = (fs::path(out_dir) / "labeled.tsv").string();
    const std::string unl_path = (fs::path(out_dir) / "unlabeled.tsv").string();
    write_manifest(lab_path, labeled);
    write_manifest(unl_path, unlabeled);
    return {lab_path, unl_path};
}

// ---------------------------------------------------------------------------
// Base augmentation: the same k*90-degree rotation and optional flips applied
// jointly to image and mask, so alignment is preserved exactly.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
TensorT<T> rot90(const TensorT<T>& t) {
    // counterclockwise: out(y, x) = in(x, W-1-y) for out shape (W, H)
    const int64_t h = t.dim(0), w = t.dim(1);
    TensorT<T> out({w, h});
    for (int64_t y = 0; y < w; ++y)
        for (int64_t x = 0; x < h; ++x) out.at2(y, x) = t.at2(x, w - 1 - y);
    return out;
}

template <typename T>
TensorT<T> flip_h(const TensorT<T>& t) {
    const int64_t h = t.dim(0), w = t.dim(1);
    TensorT<T> out({h, w});
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) out.at2(y, x) = t.at2(y, w - 1 - x);
    return out;
}

template <typename T>
TensorT<T> flip_v(const TensorT<T>& t) {
    const int64_t h = t.dim(0), w = t.dim(1);
    TensorT<T> out({h, w});
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) out.at2(y, x) = t.at2(h - 1 - y, x);
    return out;
}

}  // namespace detail

template <typename T>
TensorT<T> apply_geom(const TensorT<T>& t, int k, bool hflip, bool vflip) {
    if (t.rank() != 2) throw DimensionError("apply_geom: expected rank-2, got " + t.shape_str());
    TensorT<T> out = t;
    for (int i = 0; i < ((k % 4) + 4) % 4; ++i) out = detail::rot90(out);
    if (hflip) out = detail::flip_h(out);
    if (vflip) out = detail::flip_v(out);
    return out;
}

inline std::pair<TensorF, Mask> base_augment(const TensorF& image, const Mask& mask, Rng& rng) {
    const int k = static_cast<int>(rng.uniform_int(4));
    const bool hf = rng.bernoulli(0.5);
    const bool vf = rng.bernoulli(0.5);
    return {apply_geom(image, k, hf, vf), apply_geom(mask, k, hf, vf)};
}

// ---------------------------------------------------------------------------
// Batch assembly for the network: images to (B, 1, H, W), masks to one-hot
// (B, 2, H, W) soft targets.
// ---------------------------------------------------------------------------

inline TensorF batch_images(const std::vector<TensorF>& images) {
    if (images.empty()) throw ParameterError("batch_images: empty batch");
    const int64_t h = images[0].dim(0), w = images[0].dim(1);
    TensorF out({static_cast<int64_t>(images.size()), 1, h, w});
    for (size_t b = 0; b < images.size(); ++b) {
        check_same_shape(images[b], images[0], "batch_images");
        for (int64_t i = 0; i < h * w; ++i) out[static_cast<int64_t>(b) * h * w + i] = images[b][i];
    }
    return out;
}

inline TensorF batch_targets(const std::vector<Mask>& masks) {
    if (masks.empty()) throw ParameterError("batch_targets: empty batch");
    const int64_t h = masks[0].dim(0), w = masks[0].dim(1);
    TensorF out({static_cast<int64_t>(masks.size()), 2, h, w});
    for (size_t b = 0; b < masks.size(); ++b) {
        if (!masks[b].same_shape(masks[0])) throw DimensionError("batch_targets: mask shape mismatch");
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                const float fg = masks[b].at2(y, x) ? 1.0f : 0.0f;
                out.at4(static_cast<int64_t>(b), 0, y, x) = 1.0f - fg;
                out.at4(static_cast<int64_t>(b), 1, y, x) = fg;
            }
    }
    return out;
}

}  // namespace ccat
