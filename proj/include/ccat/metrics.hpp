#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ccat/errors.hpp"
#include "ccat/tensor.hpp"

namespace ccat {

// Binary segmentation mask: rank-2 (H, W), values strictly {0, 1}.
using Mask = TensorT<uint8_t>;

struct Confusion {
    int64_t tp = 0, fp = 0, fn = 0, tn = 0;
    int64_t total() const { return tp + fp + fn + tn; }
};

struct SegMetrics {
    double dsc = 0, hd = 0, sen = 0, spc = 0;
};

inline void check_mask(const Mask& m, const char* where) {
    if (m.rank() != 2) throw DimensionError(std::string(where) + ": mask must be rank-2, got " + m.shape_str());
    for (int64_t i = 0; i < m.numel(); ++i)
        if (m[i] > 1) throw ParameterError(std::string(where) + ": mask value " + std::to_string(int(m[i])) + " is not binary");
}

inline Confusion confusion(const Mask& pred, const Mask& gt) {
    check_mask(pred, "confusion");
    check_mask(gt, "confusion");
    if (!pred.same_shape(gt))
        throw DimensionError("confusion: shape mismatch " + pred.shape_str() + " vs " + gt.shape_str());
    Confusion c;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        if (pred[i] && gt[i]) ++c.tp;
        else if (pred[i] && !gt[i]) ++c.fp;
        else if (!pred[i] && gt[i]) ++c.fn;
        else ++c.tn;
    }
    return c;
}

inline double dsc(const Mask& pred, const Mask& gt) {
    const Confusion c = confusion(pred, gt);
    const int64_t den = 2 * c.tp + c.fp + c.fn;
    return den == 0 ? 1.0 : 2.0 * double(c.tp) / double(den);
}

inline std::pair<double, double> sen_spc(const Mask& pred, const Mask& gt) {
    const Confusion c = confusion(pred, gt);
    const double sen = (c.tp + c.fn) == 0 ? 1.0 : double(c.tp) / double(c.tp + c.fn);
    const double spc = (c.tn + c.fp) == 0 ? 1.0 : double(c.tn) / double(c.tn + c.fp);
    return {sen, spc};
}

namespace detail {

// Felzenszwalb-Huttenlocher 1-D squared distance transform (lower envelope of
// parabolas). f is the input cost row, d the output, n the length.
inline void edt_1d(const double* f, double* d, int n, std::vector<int>& v, std::vector<double>& z) {
    constexpr double kInf = 1e20;
    int k = 0;
    v[0] = 0;
    z[0] = -kInf;
    z[1] = kInf;
    for (int q = 1; q < n; ++q) {
        double s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) / (2.0 * q - 2.0 * v[k]);
        while (s <= z[k]) {
            --k;
            s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) / (2.0 * q - 2.0 * v[k]);
        }
        ++k;
        v[static_cast<size_t>(k)] = q;
        z[static_cast<size_t>(k)] = s;
        z[static_cast<size_t>(k) + 1] = kInf;
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[static_cast<size_t>(k) + 1] < q) ++k;
        const double dq = q - v[k];
        d[q] = dq * dq + f[v[k]];
    }
}

// Exact squared Euclidean distance from every pixel to the nearest foreground
// pixel of `m`. All entries are >= 1e20 when the mask is empty.
inline std::vector<double> edt_squared(const Mask& m) {
    constexpr double kInf = 1e20;
    const int h = static_cast<int>(m.dim(0)), w = static_cast<int>(m.dim(1));
    std::vector<double> g(static_cast<size_t>(h) * w);
    for (int64_t i = 0; i < m.numel(); ++i) g[static_cast<size_t>(i)] = m[i] ? 0.0 : kInf;
    const int n = std::max(h, w);
    std::vector<double> f(static_cast<size_t>(n)), d(static_cast<size_t>(n)), z(static_cast<size_t>(n) + 1);
    std::vector<int> v(static_cast<size_t>(n));
    for (int x = 0; x < w; ++x) {  // columns
        for (int y = 0; y < h; ++y) f[static_cast<size_t>(y)] = g[static_cast<size_t>(y) * w + x];
        edt_1d(f.data(), d.data(), h, v, z);
        for (int y = 0; y < h; ++y) g[static_cast<size_t>(y) * w + x] = d[static_cast<size_t>(y)];
    }
    for (int y = 0; y < h; ++y) {  // rows
        for (int x = 0; x < w; ++x) f[static_cast<size_t>(x)] = g[static_cast<size_t>(y) * w + x];
        edt_1d(f.data(), d.data(), w, v, z);
        for (int x = 0; x < w; ++x) g[static_cast<size_t>(y) * w + x] = d[static_cast<size_t>(x)];
    }
    return g;
}

inline double directed_hd_sq(const Mask& from, const std::vector<double>& edt_to) {
    double worst = 0.0;
    for (int64_t i = 0; i < from.numel(); ++i)
        if (from[i]) worst = std::max(worst, edt_to[static_cast<size_t>(i)]);
    return worst;
}

}  // namespace detail

// Symmetric Hausdorff distance between the foreground point sets, in pixels.
// Conventions: both masks empty -> 0; exactly one empty -> the image diagonal
// (degenerate predictions are penalized, not dropped).
inline double hausdorff(const Mask& pred, const Mask& gt) {
    check_mask(pred, "hausdorff");
    check_mask(gt, "hausdorff");
    if (!pred.same_shape(gt))
        throw DimensionError("hausdorff: shape mismatch " + pred.shape_str() + " vs " + gt.shape_str());
    int64_t np = 0, ng = 0;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        np += pred[i];
        ng += gt[i];
    }
    if (np == 0 && ng == 0) return 0.0;
    const double h = double(pred.dim(0)), w = double(pred.dim(1));
    if (np == 0 || ng == 0) return std::sqrt(h * h + w * w);
    const auto d_gt = detail::edt_squared(gt);
    const auto d_pred = detail::edt_squared(pred);
    return std::sqrt(std::max(detail::directed_hd_sq(pred, d_gt), detail::directed_hd_sq(gt, d_pred)));
}

// Per-pixel argmax over the class channel of a (B, 2, H, W) probability
// tensor, returning the foreground mask for batch item b.
template <typename T>
Mask argmax_mask(const TensorT<T>& probs, int64_t b = 0) {
    if (probs.rank() != 4 || probs.dim(1) != 2)
        throw DimensionError("argmax_mask: expected (B,2,H,W), got " + probs.shape_str());
    if (b < 0 || b >= probs.dim(0)) throw ParameterError("argmax_mask: batch index out of range");
    const int64_t h = probs.dim(2), w = probs.dim(3);
    Mask m({h, w});
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            m.at2(y, x) = probs.at4(b, 1, y, x) > probs.at4(b, 0, y, x) ? 1 : 0;
    return m;
}

inline SegMetrics evaluate_pair(const Mask& pred, const Mask& gt) {
    SegMetrics m;
    m.dsc = dsc(pred, gt);
    m.hd = hausdorff(pred, gt);
    const auto ss = sen_spc(pred, gt);
    m.sen = ss.first;
    m.spc = ss.second;
    return m;
}

// Unweighted arithmetic mean across cases.
inline SegMetrics aggregate(const std::vector<SegMetrics>& per_case) {
    if (per_case.empty()) throw ParameterError("aggregate: empty metric list");
    SegMetrics m;
    for (const auto& c : per_case) {
        m.dsc += c.dsc;
        m.hd += c.hd;
        m.sen += c.sen;
        m.spc += c.spc;
    }
    const double n = double(per_case.size());
    m.dsc /= n;
    m.hd /= n;
    m.sen /= n;
    m.spc /= n;
    return m;
}

// Tab-separated report: header, one row per labelled entry, and a final mean
// row when there is more than one entry.
inline std::string metrics_table(const std::vector<std::pair<std::string, SegMetrics>>& rows) {
    if (rows.empty()) throw ParameterError("metrics_table: empty row list");
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "fold\tDSC\tHD\tSEN\tSPC\n";
    std::vector<SegMetrics> all;
    for (const auto& [label, m] : rows) {
        os << label << '\t' << m.dsc << '\t' << m.hd << '\t' << m.sen << '\t' << m.spc << '\n';
        all.push_back(m);
    }
    if (rows.size() > 1) {
        const SegMetrics m = aggregate(all);
        os << "mean\t" << m.dsc << '\t' << m.hd << '\t' << m.sen << '\t' << m.spc << '\n';
    }
    return os.str();
}

}  // namespace ccat
