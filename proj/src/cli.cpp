#include "ccat/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "ccat/trainer.hpp"

namespace fs = std::filesystem;

namespace ccat {
namespace {

std::vector<int64_t> labeled_indices(const Dataset& ds, const std::string& who) {
    std::vector<int64_t> idx;
    for (int64_t i = 0; i < ds.size(); ++i)
        if (ds.records[static_cast<size_t>(i)].labeled) idx.push_back(i);
    if (idx.empty()) throw DataError(who + ": no labeled records in manifest");
    return idx;
}

std::ofstream open_log(const fs::path& path) {
    fs::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw IoError(path.string() + ": cannot open log for writing");
    return os;
}

// Checkpoint whose student and teacher both hold the best-validation weights.
void save_best(const FitResult& res, const std::string& path) {
    TrainState snap = res.state;
    snap.student = res.best;
    snap.teacher.params = res.best;
    save_checkpoint(snap, path);
}

std::string fmt_metrics(const SegMetrics& m) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << "DSC " << m.dsc << "  HD " << m.hd << "  SEN "
       << m.sen << "  SPC " << m.spc;
    return os.str();
}

int run_gen_data(const std::string& spec_path, const std::string& out_dir) {
    const SyntheticSpec spec = load_synthetic_spec(spec_path);
    const auto [lab, unl] = gen_synthetic(spec, out_dir);
    std::cout << "labeled manifest: " << lab << '\n' << "unlabeled manifest: " << unl << '\n';
    return 0;
}

int run_train(const std::string& config, const std::string& data, int fold, const std::string& out) {
    const TrainConfig cfg = load_train_config(config);
    const Dataset ds = load_dataset(data);
    const auto idx = labeled_indices(ds, "train");
    const FoldPlan plan = kfold_split(static_cast<int64_t>(idx.size()), cfg.seed);
    std::vector<int64_t> tr, va;
    for (int64_t p : plan.train_idx[static_cast<size_t>(fold)]) tr.push_back(idx[static_cast<size_t>(p)]);
    for (int64_t p : plan.val_idx[static_cast<size_t>(fold)]) va.push_back(idx[static_cast<size_t>(p)]);

    const fs::path out_dir(out);
    const std::string tag = "fold" + std::to_string(fold);
    std::ofstream log = open_log(out_dir / (tag + ".log"));
    const FitResult res = train_supervised(ds, tr, va, cfg, cfg.epochs, &log);
    const std::string ckpt = (out_dir / (tag + ".ckpt")).string();
    save_best(res, ckpt);
    std::cout << "fold " << fold << ": best val DSC " << std::fixed << std::setprecision(4)
              << res.best_dsc << " at epoch " << res.best_epoch << '\n'
              << "checkpoint: " << ckpt << '\n';
    return 0;
}

int run_finetune(const std::string& config, const std::string& ckpt, const std::string& labeled,
                 const std::string& unlabeled, const std::string& out, const LossWeights* override_lw) {
    TrainConfig cfg = load_train_config(config);
    if (override_lw) cfg.loss = *override_lw;
    const TrainState init = load_checkpoint(ckpt);
    if (to_json(init.net) != to_json(cfg.net))
        throw StateError("checkpoint network configuration does not match --config");
    const Dataset lab = load_dataset(labeled);
    const auto idx = labeled_indices(lab, "finetune");
    const Dataset unl = load_dataset(unlabeled);

    const fs::path out_dir(out);
    std::ofstream log = open_log(out_dir / "finetune.log");
    const FitResult res =
        finetune_semisup(init.student, lab, idx, idx, unl, cfg, cfg.finetune_epochs, &log);
    const std::string ckpt_out = (out_dir / "finetune.ckpt").string();
    save_best(res, ckpt_out);
    std::cout << "finetune: best DSC " << std::fixed << std::setprecision(4) << res.best_dsc
              << " at epoch " << res.best_epoch << " (pseudo-label store: " << res.state.pseudo.size()
              << " images)" << '\n'
              << "checkpoint: " << ckpt_out << '\n';
    return 0;
}

int run_eval(const std::string& ckpt, const std::string& data, const std::string& report) {
    TrainState st = load_checkpoint(ckpt);
    const Dataset ds = load_dataset(data);
    const auto idx = labeled_indices(ds, "eval");
    std::vector<SegMetrics> cases;
    const SegMetrics mean = evaluate_model(st.student, st.net, ds, idx, &cases);
    std::vector<std::pair<std::string, SegMetrics>> rows;
    for (size_t k = 0; k < idx.size(); ++k)
        rows.emplace_back(ds.records[static_cast<size_t>(idx[k])].id, cases[k]);
    if (!report.empty()) {
        fs::path rp(report);
        if (rp.has_parent_path()) fs::create_directories(rp.parent_path());
        std::ofstream os(rp);
        if (!os) throw IoError(report + ": cannot open report for writing");
        os << metrics_table(rows);
        if (!os) throw IoError(report + ": report write failed");
    }
    std::cout << fmt_metrics(mean) << " over " << idx.size() << " images" << '\n';
    return 0;
}

int run_predict(const std::string& ckpt, const std::string& image, const std::string& out) {
    TrainState st = load_checkpoint(ckpt);
    const TensorT<uint8_t> raw = read_pgm(image);
    const int64_t s = st.net.input_size;
    if (raw.dim(0) != s || raw.dim(1) != s)
        throw DataError(image + ": image is " + raw.shape_str() + " but the network expects " +
                        std::to_string(s) + "x" + std::to_string(s));
    TensorF img(raw.shape);
    for (int64_t i = 0; i < raw.numel(); ++i) img[i] = static_cast<float>(raw[i]) / 255.0f;
    const TensorF probs = net_infer(st.student, st.net, batch_images({img}));
    const Mask m = argmax_mask(probs);
    TensorT<uint8_t> png(m.shape);
    for (int64_t i = 0; i < m.numel(); ++i) png[i] = m[i] ? 255 : 0;
    fs::path op(out);
    if (op.has_parent_path()) fs::create_directories(op.parent_path());
    write_pgm(out, png);
    std::cout << "wrote " << out << '\n';
    return 0;
}

LossWeights ablated_weights(const LossWeights& base, const std::string& losses) {
    std::set<std::string> terms;
    std::stringstream ss(losses);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok != "s" && tok != "c" && tok != "m" && tok != "f")
            throw ParameterError("ablate: unknown loss term '" + tok + "' (expected s, c, m, f)");
        terms.insert(tok);
    }
    if (!terms.count("s"))
        throw ParameterError("ablate: the supervised term 's' cannot be disabled");
    LossWeights lw = base;
    if (!terms.count("c")) lw.w_c = 0;
    if (!terms.count("m")) lw.w_m = 0;
    if (!terms.count("f")) lw.w_f = 0;
    std::string active = "s";
    for (const char* t : {"c", "m", "f"})
        if (terms.count(t)) active += std::string(",") + t;
    std::cout << "active loss terms: " << active << '\n';
    return lw;
}

}  // namespace

int cli_main(int argc, char** argv) {
    CLI::App app{"CCAT-Net: semi-supervised binary lesion segmentation"};
    app.require_subcommand(1);

    std::string spec_path, out_dir;
    auto* gen = app.add_subcommand("gen-data", "Generate a deterministic synthetic dataset");
    gen->add_option("--spec", spec_path, "Synthetic data spec (JSON)")->required();
    gen->add_option("--out", out_dir, "Output directory")->required();

    std::string tr_config, tr_data, tr_out;
    int tr_fold = 0;
    auto* train = app.add_subcommand("train", "Supervised training on one cross-validation fold");
    train->add_option("--config", tr_config, "Training config (JSON)")->required();
    train->add_option("--data", tr_data, "Labeled dataset manifest")->required();
    train->add_option("--fold", tr_fold, "Fold index")->required()->check(CLI::Range(0, 4));
    train->add_option("--out", tr_out, "Output directory")->required();

    std::string ft_config, ft_ckpt, ft_lab, ft_unl, ft_out;
    auto* finetune = app.add_subcommand("finetune", "Semi-supervised fine-tuning from a checkpoint");
    finetune->add_option("--config", ft_config, "Training config (JSON)")->required();
    finetune->add_option("--ckpt", ft_ckpt, "Initial checkpoint")->required();
    finetune->add_option("--labeled", ft_lab, "Labeled dataset manifest")->required();
    finetune->add_option("--unlabeled", ft_unl, "Unlabeled dataset manifest")->required();
    finetune->add_option("--out", ft_out, "Output directory")->required();

    std::string ev_ckpt, ev_data, ev_report;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a labeled manifest");
    eval->add_option("--ckpt", ev_ckpt, "Checkpoint")->required();
    eval->add_option("--data", ev_data, "Labeled dataset manifest")->required();
    eval->add_option("--report", ev_report, "Per-image metrics table output")->required();

    std::string pr_ckpt, pr_image, pr_out;
    auto* predict = app.add_subcommand("predict", "Segment a single image");
    predict->add_option("--ckpt", pr_ckpt, "Checkpoint")->required();
    predict->add_option("--image", pr_image, "Input image (PGM)")->required();
    predict->add_option("--out", pr_out, "Output mask (PGM)")->required();

    std::string ab_config, ab_ckpt, ab_lab, ab_unl, ab_out, ab_losses;
    auto* ablate = app.add_subcommand("ablate", "Fine-tune with a subset of the loss terms");
    ablate->add_option("--config", ab_config, "Training config (JSON)")->required();
    ablate->add_option("--ckpt", ab_ckpt, "Initial checkpoint")->required();
    ablate->add_option("--labeled", ab_lab, "Labeled dataset manifest")->required();
    ablate->add_option("--unlabeled", ab_unl, "Unlabeled dataset manifest")->required();
    ablate->add_option("--out", ab_out, "Output directory")->required();
    ablate->add_option("--losses", ab_losses, "Active loss terms, e.g. s,c,m,f")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << '\n' << "run with --help for usage" << '\n';
        return 2;
    }

    try {
        if (gen->parsed()) return run_gen_data(spec_path, out_dir);
        if (train->parsed()) return run_train(tr_config, tr_data, tr_fold, tr_out);
        if (finetune->parsed()) return run_finetune(ft_config, ft_ckpt, ft_lab, ft_unl, ft_out, nullptr);
        if (eval->parsed()) return run_eval(ev_ckpt, ev_data, ev_report);
        if (predict->parsed()) return run_predict(pr_ckpt, pr_image, pr_out);
        if (ablate->parsed()) {
            const TrainConfig cfg = load_train_config(ab_config);
            const LossWeights lw = ablated_weights(cfg.loss, ab_losses);
            return run_finetune(ab_config, ab_ckpt, ab_lab, ab_unl, ab_out, &lw);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}

}  // namespace ccat
