#pragma once

#include <cstring>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "ccat/config.hpp"
#include "ccat/data.hpp"
#include "ccat/metrics.hpp"
#include "ccat/semisup.hpp"

namespace ccat {

// ---------------------------------------------------------------------------
// Cross-validation folds.
// ---------------------------------------------------------------------------

struct FoldPlan {
    int n_folds = 5;
    uint64_t seed = 0;
    std::vector<std::vector<int64_t>> val_idx;    // fold -> validation indices
    std::vector<std::vector<int64_t>> train_idx;  // fold -> training indices
};

// Deterministic shuffled partition: fold i takes shuffled positions i, i+k,
// i+2k, ... so fold sizes differ by at most one.
inline FoldPlan kfold_split(int64_t n_items, uint64_t seed, int n_folds = 5) {
    if (n_folds < 2) throw ParameterError("kfold_split: need at least 2 folds");
    if (n_items < n_folds) throw ParameterError("kfold_split: fewer items than folds");
    FoldPlan plan;
    plan.n_folds = n_folds;
    plan.seed = seed;
    Rng rng(seed);
    const auto perm = rng.permutation(n_items);
    plan.val_idx.assign(static_cast<size_t>(n_folds), {});
    plan.train_idx.assign(static_cast<size_t>(n_folds), {});
    for (int64_t pos = 0; pos < n_items; ++pos)
        plan.val_idx[static_cast<size_t>(pos % n_folds)].push_back(perm[static_cast<size_t>(pos)]);
    for (int f = 0; f < n_folds; ++f)
        for (int g = 0; g < n_folds; ++g)
            if (g != f)
                plan.train_idx[static_cast<size_t>(f)].insert(plan.train_idx[static_cast<size_t>(f)].end(),
                                                              plan.val_idx[static_cast<size_t>(g)].begin(),
                                                              plan.val_idx[static_cast<size_t>(g)].end());
    return plan;
}

// ---------------------------------------------------------------------------
// Evaluation over labeled records.
// ---------------------------------------------------------------------------

inline SegMetrics evaluate_model(ModelParamsF& params, const NetConfig& cfg, const Dataset& ds,
                                 const std::vector<int64_t>& idx,
                                 std::vector<SegMetrics>* per_case = nullptr) {
    if (idx.empty()) throw ParameterError("evaluate_model: empty index list");
    std::vector<SegMetrics> cases;
    for (int64_t i : idx) {
        const DataRecord& r = ds.records.at(static_cast<size_t>(i));
        if (!r.labeled) throw DataError("evaluate_model: record '" + r.id + "' has no mask");
        const TensorF probs = net_infer(params, cfg, batch_images({r.image}));
        cases.push_back(evaluate_pair(argmax_mask(probs), r.mask));
    }
    if (per_case) *per_case = cases;
    return aggregate(cases);
}

// ---------------------------------------------------------------------------
// Training logs: one tab-separated line per step and per epoch.
// ---------------------------------------------------------------------------

struct TrainLog {
    std::vector<std::string> step_lines;
    std::vector<std::string> epoch_lines;
    std::ostream* sink = nullptr;

    void step(int64_t step, int64_t epoch, double lr, const LossBreakdown& bd) {
        std::ostringstream os;
        os << std::setprecision(9) << step << '\t' << epoch << '\t' << lr << '\t' << bd.ls << '\t'
           << bd.lc << '\t' << bd.lm << '\t' << bd.lf << '\t' << bd.total;
        push(step_lines, os.str());
    }
    void epoch(int64_t epoch, const SegMetrics& val) {
        std::ostringstream os;
        os << std::setprecision(9) << epoch << '\t' << val.dsc << '\t' << val.hd << '\t' << val.sen
           << '\t' << val.spc;
        push(epoch_lines, os.str());
    }

  private:
    void push(std::vector<std::string>& lines, std::string line) {
        if (sink) *sink << line << '\n';
        lines.push_back(std::move(line));
    }
};

// ---------------------------------------------------------------------------
// Training loops.
// ---------------------------------------------------------------------------

struct FitResult {
    TrainState state;        // state after the last step
    ModelParamsF best;       // student weights with the highest validation DSC
    double best_dsc = -1.0;
    int64_t best_epoch = -1;
    TrainLog log;
};

namespace detail {

inline TrainState start_state(const TrainConfig& cfg, const ModelParamsF* init) {
    TrainState st = make_train_state(cfg.net, cfg.seed);
    if (init) {
        bool ok = st.student.same_names(*init);
        for (size_t i = 0; ok && i < st.student.size(); ++i)
            ok = st.student.entry(i).value.shape == init->entry(i).value.shape;
        if (!ok) throw StateError("checkpoint parameters do not match the network configuration");
        st.student = *init;
        st.teacher.params = *init;
    }
    return st;
}

inline ScheduleConfig make_schedule(const TrainConfig& cfg, int64_t epochs, int64_t steps_per_epoch) {
    ScheduleConfig sc;
    sc.warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    sc.total_steps = epochs * steps_per_epoch;
    sc.poly_power = cfg.poly_power;
    if (sc.warmup_steps >= sc.total_steps) sc.warmup_steps = 0;  // short runs: skip warmup
    sc.validate();
    return sc;
}

// One augmented labeled batch drawn in the given order window.
inline void assemble_labeled(const Dataset& ds, const std::vector<int64_t>& order, size_t lo, size_t hi,
                             Rng& rng, TensorF& x, TensorF& y) {
    std::vector<TensorF> images;
    std::vector<Mask> masks;
    for (size_t k = lo; k < hi; ++k) {
        const DataRecord& r = ds.records.at(static_cast<size_t>(order[k]));
        auto [ai, am] = base_augment(r.image, r.mask, rng);
        images.push_back(std::move(ai));
        masks.push_back(std::move(am));
    }
    x = batch_images(images);
    y = batch_targets(masks);
}

}  // namespace detail

// Supervised training: one epoch is a shuffled pass over train_idx; the
// validation DSC picks the retained weights. Pass init to continue from
// existing weights instead of a fresh initialization.
inline FitResult train_supervised(const Dataset& ds, const std::vector<int64_t>& train_idx,
                                  const std::vector<int64_t>& val_idx, const TrainConfig& cfg,
                                  int64_t epochs, std::ostream* sink = nullptr,
                                  const ModelParamsF* init = nullptr) {
    cfg.validate();
    if (train_idx.empty()) throw DataError("train_supervised: empty training set");
    if (val_idx.empty()) throw ParameterError("train_supervised: empty validation set");
    if (epochs < 1) throw ParameterError("train_supervised: epochs must be >= 1");
    for (int64_t i : train_idx)
        if (!ds.records.at(static_cast<size_t>(i)).labeled)
            throw DataError("train_supervised: record '" + ds.records.at(static_cast<size_t>(i)).id +
                            "' has no mask");

    FitResult res;
    res.state = detail::start_state(cfg, init);
    res.log.sink = sink;
    TrainState& st = res.state;
    const int64_t bsz = cfg.optimizer.batch;
    const int64_t spe = (static_cast<int64_t>(train_idx.size()) + bsz - 1) / bsz;
    const ScheduleConfig sc = detail::make_schedule(cfg, epochs, spe);

    for (int64_t epoch = 0; epoch < epochs; ++epoch) {
        std::vector<int64_t> order;
        for (int64_t p : st.rng_data.permutation(static_cast<int64_t>(train_idx.size())))
            order.push_back(train_idx[static_cast<size_t>(p)]);
        for (size_t lo = 0; lo < order.size(); lo += static_cast<size_t>(bsz)) {
            const size_t hi = std::min(order.size(), lo + static_cast<size_t>(bsz));
            TensorF x, y;
            detail::assemble_labeled(ds, order, lo, hi, st.rng_data, x, y);
            const double lr = lr_at(st.step, cfg.optimizer, sc);
            const int64_t s0 = st.step;
            const LossBreakdown bd = supervised_step(st, x, y, cfg.loss, cfg.tversky, cfg.optimizer, lr);
            res.log.step(s0, epoch, lr, bd);
        }
        const SegMetrics val = evaluate_model(st.student, cfg.net, ds, val_idx);
        res.log.epoch(epoch, val);
        if (val.dsc > res.best_dsc) {
            res.best_dsc = val.dsc;
            res.best = st.student;
            res.best_epoch = epoch;
            st.best_val_dsc = val.dsc;
        }
        ++st.epoch;
    }
    return res;
}

// Semi-supervised fine-tuning from checkpoint weights: student AND teacher
// start from init; each labeled batch is paired 1:1 with a cyclically drawn
// unlabeled batch. With all unlabeled loss weights zero this reduces exactly
// to continued supervised training (no unlabeled draws are made).
inline FitResult finetune_semisup(const ModelParamsF& init, const Dataset& labeled,
                                  const std::vector<int64_t>& train_idx,
                                  const std::vector<int64_t>& val_idx, const Dataset& unlabeled,
                                  const TrainConfig& cfg, int64_t epochs,
                                  std::ostream* sink = nullptr) {
    cfg.validate();
    if (train_idx.empty()) throw DataError("finetune_semisup: empty labeled training set");
    if (val_idx.empty()) throw ParameterError("finetune_semisup: empty validation set");
    if (epochs < 1) throw ParameterError("finetune_semisup: epochs must be >= 1");
    const bool use_unlabeled = cfg.loss.w_c > 0 || cfg.loss.w_m > 0 || cfg.loss.w_f > 0;
    if (use_unlabeled && unlabeled.size() == 0) throw DataError("finetune_semisup: empty unlabeled set");

    FitResult res;
    res.state = detail::start_state(cfg, &init);
    res.log.sink = sink;
    TrainState& st = res.state;
    const int64_t bsz = cfg.optimizer.batch;
    const int64_t spe = (static_cast<int64_t>(train_idx.size()) + bsz - 1) / bsz;
    const ScheduleConfig sc = detail::make_schedule(cfg, epochs, spe);

    // Cyclic unlabeled sampler: reshuffles after each full pass.
    std::vector<int64_t> upool;
    size_t ucur = 0;
    auto next_unlabeled = [&]() {
        if (ucur == upool.size()) {
            upool.clear();
            for (int64_t p : st.rng_data.permutation(unlabeled.size())) upool.push_back(p);
            ucur = 0;
        }
        return upool[ucur++];
    };

    for (int64_t epoch = 0; epoch < epochs; ++epoch) {
        std::vector<int64_t> order;
        for (int64_t p : st.rng_data.permutation(static_cast<int64_t>(train_idx.size())))
            order.push_back(train_idx[static_cast<size_t>(p)]);
        for (size_t lo = 0; lo < order.size(); lo += static_cast<size_t>(bsz)) {
            const size_t hi = std::min(order.size(), lo + static_cast<size_t>(bsz));
            TensorF x, y;
            detail::assemble_labeled(labeled, order, lo, hi, st.rng_data, x, y);
            const double lr = lr_at(st.step, cfg.optimizer, sc);
            const int64_t s0 = st.step;
            LossBreakdown bd;
            if (use_unlabeled) {
                std::vector<TensorF> uimgs;
                std::vector<std::string> ids;
                for (size_t k = lo; k < hi; ++k) {
                    const DataRecord& r = unlabeled.records.at(static_cast<size_t>(next_unlabeled()));
                    uimgs.push_back(r.image);
                    ids.push_back(r.id);
                }
                bd = semisup_step(st, x, y, batch_images(uimgs), ids, cfg.loss, cfg.tversky, cfg.augment,
                                  cfg.optimizer, lr);
            } else {
                bd = supervised_step(st, x, y, cfg.loss, cfg.tversky, cfg.optimizer, lr);
            }
            res.log.step(s0, epoch, lr, bd);
        }
        const SegMetrics val = evaluate_model(st.student, cfg.net, labeled, val_idx);
        res.log.epoch(epoch, val);
        if (val.dsc > res.best_dsc) {
            res.best_dsc = val.dsc;
            res.best = st.student;
            res.best_epoch = epoch;
            st.best_val_dsc = val.dsc;
        }
        ++st.epoch;
    }
    return res;
}

// ---------------------------------------------------------------------------
// Checkpoints: 16-byte magic/version header, a length-prefixed JSON metadata
// section, then raw little-endian float32 payloads for the student, teacher,
// momentum buffers, and pseudo-label store, in that order.
// ---------------------------------------------------------------------------

inline constexpr char kCkptMagic[17] = "CCATCKPT.v0001\n\0";

namespace detail {

inline void write_f32(std::ostream& os, const std::vector<float>& v) {
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 4));
}

inline std::vector<float> read_f32(std::istream& is, size_t n, const char* section) {
    std::vector<float> v(n);
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * 4));
    if (static_cast<size_t>(is.gcount()) != n * 4)
        throw FormatError(std::string("checkpoint: truncated ") + section + " payload");
    return v;
}

}  // namespace detail

inline void save_checkpoint(const TrainState& st, const std::string& path) {
    Json meta;
    meta["net"] = to_json(st.net);
    meta["step"] = st.step;
    meta["epoch"] = st.epoch;
    meta["best_val_dsc"] = st.best_val_dsc;
    meta["rng_data"] = st.rng_data.save_state();
    meta["rng_aug"] = st.rng_aug.save_state();
    meta["rng_mix"] = st.rng_mix.save_state();
    meta["param_elems"] = st.student.total_elems();
    Json pseudo = Json::array();
    for (const auto& [id, e] : st.pseudo.items())
        pseudo.push_back(Json{{"id", id}, {"t", e.t}, {"h", e.y.dim(1)}, {"w", e.y.dim(2)}});
    meta["pseudo"] = std::move(pseudo);
    const std::string meta_str = meta.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError(path + ": cannot open checkpoint for writing");
    os.write(kCkptMagic, 16);
    const uint64_t len = meta_str.size();
    os.write(reinterpret_cast<const char*>(&len), 8);
    os.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
    detail::write_f32(os, st.student.flat());
    detail::write_f32(os, st.teacher.params.flat());
    detail::write_f32(os, st.momentum.flat());
    for (const auto& [id, e] : st.pseudo.items()) {
        (void)id;
        detail::write_f32(os, e.y.data);
    }
    if (!os) throw IoError(path + ": checkpoint write failed");
}

inline TrainState load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(path + ": cannot open checkpoint");
    char magic[16];
    is.read(magic, 16);
    if (is.gcount() != 16 || std::memcmp(magic, "CCATCKPT", 8) != 0)
        throw FormatError("checkpoint: bad magic in header");
    if (std::memcmp(magic, kCkptMagic, 16) != 0)
        throw FormatError("checkpoint: version mismatch in header");
    uint64_t len = 0;
    is.read(reinterpret_cast<char*>(&len), 8);
    if (is.gcount() != 8) throw FormatError("checkpoint: truncated metadata length");
    std::string meta_str(len, '\0');
    is.read(meta_str.data(), static_cast<std::streamsize>(len));
    if (static_cast<uint64_t>(is.gcount()) != len) throw FormatError("checkpoint: truncated metadata");
    Json meta;
    try {
        meta = Json::parse(meta_str);
    } catch (const nlohmann::json::parse_error&) {
        throw FormatError("checkpoint: unparsable metadata");
    }

    TrainState st;
    try {
        st.net = net_from_json(meta.at("net"));
        st.net.validate();
        st.step = meta.at("step").get<int64_t>();
        st.epoch = meta.at("epoch").get<int64_t>();
        st.best_val_dsc = meta.at("best_val_dsc").get<double>();
        st.rng_data.load_state(meta.at("rng_data").get<std::string>());
        st.rng_aug.load_state(meta.at("rng_aug").get<std::string>());
        st.rng_mix.load_state(meta.at("rng_mix").get<std::string>());
    } catch (const nlohmann::json::exception&) {
        throw FormatError("checkpoint: malformed metadata");
    }

    st.student = build_net(st.net, 0);
    if (st.student.total_elems() != meta.at("param_elems").get<int64_t>())
        throw FormatError("checkpoint: parameter count mismatch for student parameters");
    const size_t n = static_cast<size_t>(st.student.total_elems());
    st.student.load_flat(detail::read_f32(is, n, "student parameters"));
    st.teacher.params = st.student;
    st.teacher.params.load_flat(detail::read_f32(is, n, "teacher parameters"));
    st.momentum = zeros_like(st.student);
    st.momentum.load_flat(detail::read_f32(is, n, "momentum buffers"));
    for (const auto& p : meta.at("pseudo")) {
        int64_t h = 0, w = 0, t = 0;
        std::string id;
        try {
            id = p.at("id").get<std::string>();
            t = p.at("t").get<int64_t>();
            h = p.at("h").get<int64_t>();
            w = p.at("w").get<int64_t>();
        } catch (const nlohmann::json::exception&) {
            throw FormatError("checkpoint: malformed pseudo-label metadata");
        }
        TensorF y({2, h, w});
        y.data = detail::read_f32(is, static_cast<size_t>(y.numel()), "pseudo-label store");
        st.pseudo.insert_raw(id, std::move(y), t);
    }
    return st;
}

}  // namespace ccat
