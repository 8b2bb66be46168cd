#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ccat/augment.hpp"
#include "ccat/data.hpp"
#include "ccat/errors.hpp"
#include "ccat/losses.hpp"
#include "ccat/net.hpp"
#include "ccat/optim.hpp"

namespace ccat {

using Json = nlohmann::ordered_json;

namespace detail {

inline void check_keys(const Json& j, const std::vector<std::string>& known, const std::string& where) {
    if (!j.is_object()) throw FormatError(where + ": expected a JSON object");
    for (const auto& [key, value] : j.items()) {
        (void)value;
        bool ok = false;
        for (const auto& k : known) ok = ok || k == key;
        if (!ok) throw FormatError(where + ": unknown key '" + key + "'");
    }
}

}  // namespace detail

// Everything one experiment needs, mirrored 1:1 in a JSON document. Absent
// fields keep their defaults, unknown keys are rejected so typos surface.
struct TrainConfig {
    NetConfig net;
    OptimizerConfig optimizer;
    LossWeights loss;
    TverskyParams tversky;
    AugmentationSpec augment;
    int64_t epochs = 200;
    int64_t finetune_epochs = 100;
    int64_t warmup_epochs = 5;
    double poly_power = 0.9;
    uint64_t seed = 1234;

    void validate() const {
        net.validate();
        optimizer.validate();
        loss.validate();
        tversky.validate();
        augment.validate();
        if (epochs < 1 || finetune_epochs < 0 || warmup_epochs < 0)
            throw ParameterError("train config: bad epoch counts");
        if (warmup_epochs >= epochs) throw ParameterError("train config: warmup_epochs must be < epochs");
        if (poly_power <= 0) throw ParameterError("train config: poly_power must be positive");
    }
};

inline Json to_json(const NetConfig& c) {
    return Json{{"in_channels", c.in_channels},   {"num_classes", c.num_classes},
                {"input_size", c.input_size},     {"stem_channels", c.stem_channels},
                {"patch", c.patch},               {"embed_dim", c.embed_dim},
                {"heads", c.heads},               {"window", c.window},
                {"mlp_ratio", c.mlp_ratio},       {"se_reduction", c.se_reduction},
                {"leaky_slope", c.leaky_slope}};
}

inline NetConfig net_from_json(const Json& j) {
    detail::check_keys(j,
                       {"in_channels", "num_classes", "input_size", "stem_channels", "patch", "embed_dim",
                        "heads", "window", "mlp_ratio", "se_reduction", "leaky_slope"},
                       "net config");
    NetConfig c;
    c.in_channels = j.value("in_channels", c.in_channels);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.input_size = j.value("input_size", c.input_size);
    c.stem_channels = j.value("stem_channels", c.stem_channels);
    c.patch = j.value("patch", c.patch);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.heads = j.value("heads", c.heads);
    c.window = j.value("window", c.window);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.se_reduction = j.value("se_reduction", c.se_reduction);
    c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
    return c;
}

inline Json to_json(const OptimizerConfig& c) {
    return Json{{"lr0", c.lr0}, {"momentum", c.momentum}, {"weight_decay", c.weight_decay}, {"batch", c.batch}};
}

inline OptimizerConfig optimizer_from_json(const Json& j) {
    detail::check_keys(j, {"lr0", "momentum", "weight_decay", "batch"}, "optimizer config");
    OptimizerConfig c;
    c.lr0 = j.value("lr0", c.lr0);
    c.momentum = j.value("momentum", c.momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.batch = j.value("batch", c.batch);
    return c;
}

inline Json to_json(const LossWeights& c) {
    return Json{{"alpha1", c.alpha1}, {"alpha2", c.alpha2},       {"w_c", c.w_c},
                {"w_m", c.w_m},       {"w_f", c.w_f},             {"temp", c.temp},
                {"ema_alpha", c.ema_alpha}, {"mix_alpha", c.mix_alpha}, {"k_weak", c.k_weak}};
}

inline LossWeights loss_from_json(const Json& j) {
    detail::check_keys(j, {"alpha1", "alpha2", "w_c", "w_m", "w_f", "temp", "ema_alpha", "mix_alpha", "k_weak"},
                       "loss config");
    LossWeights c;
    c.alpha1 = j.value("alpha1", c.alpha1);
    c.alpha2 = j.value("alpha2", c.alpha2);
    c.w_c = j.value("w_c", c.w_c);
    c.w_m = j.value("w_m", c.w_m);
    c.w_f = j.value("w_f", c.w_f);
    c.temp = j.value("temp", c.temp);
    c.ema_alpha = j.value("ema_alpha", c.ema_alpha);
    c.mix_alpha = j.value("mix_alpha", c.mix_alpha);
    c.k_weak = j.value("k_weak", c.k_weak);
    return c;
}

inline Json to_json(const TverskyParams& c) {
    return Json{{"tv_alpha", c.tv_alpha}, {"tv_beta", c.tv_beta}};
}

inline TverskyParams tversky_from_json(const Json& j) {
    detail::check_keys(j, {"tv_alpha", "tv_beta"}, "tversky config");
    TverskyParams c;
    c.tv_alpha = j.value("tv_alpha", c.tv_alpha);
    c.tv_beta = j.value("tv_beta", c.tv_beta);
    return c;
}

inline Json to_json(const AugmentationSpec& c) {
    return Json{{"dropout_cell", c.dropout_cell},
                {"dropout_min", c.dropout_min},
                {"dropout_max", c.dropout_max},
                {"weak_noise_std", c.weak_noise_std},
                {"blur_sigma", c.blur_sigma},
                {"sharpen_amount", c.sharpen_amount},
                {"gamma_min", c.gamma_min},
                {"gamma_max", c.gamma_max},
                {"brightness_max", c.brightness_max},
                {"contrast_min", c.contrast_min},
                {"contrast_max", c.contrast_max},
                {"strong_noise_std", c.strong_noise_std},
                {"salt_pepper_frac", c.salt_pepper_frac},
                {"seed", c.seed}};
}

inline AugmentationSpec augment_from_json(const Json& j) {
    detail::check_keys(j,
                       {"dropout_cell", "dropout_min", "dropout_max", "weak_noise_std", "blur_sigma",
                        "sharpen_amount", "gamma_min", "gamma_max", "brightness_max", "contrast_min",
                        "contrast_max", "strong_noise_std", "salt_pepper_frac", "seed"},
                       "augment config");
    AugmentationSpec c;
    c.dropout_cell = j.value("dropout_cell", c.dropout_cell);
    c.dropout_min = j.value("dropout_min", c.dropout_min);
    c.dropout_max = j.value("dropout_max", c.dropout_max);
    c.weak_noise_std = j.value("weak_noise_std", c.weak_noise_std);
    c.blur_sigma = j.value("blur_sigma", c.blur_sigma);
    c.sharpen_amount = j.value("sharpen_amount", c.sharpen_amount);
    c.gamma_min = j.value("gamma_min", c.gamma_min);
    c.gamma_max = j.value("gamma_max", c.gamma_max);
    c.brightness_max = j.value("brightness_max", c.brightness_max);
    c.contrast_min = j.value("contrast_min", c.contrast_min);
    c.contrast_max = j.value("contrast_max", c.contrast_max);
    c.strong_noise_std = j.value("strong_noise_std", c.strong_noise_std);
    c.salt_pepper_frac = j.value("salt_pepper_frac", c.salt_pepper_frac);
    c.seed = j.value("seed", c.seed);
    return c;
}

inline Json to_json(const SyntheticSpec& c) {
    return Json{{"n_labeled", c.n_labeled}, {"n_unlabeled", c.n_unlabeled}, {"size", c.size},
                {"lesions_min", c.lesions_min}, {"lesions_max", c.lesions_max}, {"speckle", c.speckle},
                {"seed", c.seed}};
}

inline SyntheticSpec synthetic_from_json(const Json& j) {
    detail::check_keys(j, {"n_labeled", "n_unlabeled", "size", "lesions_min", "lesions_max", "speckle", "seed"},
                       "synthetic spec");
    SyntheticSpec c;
    c.n_labeled = j.value("n_labeled", c.n_labeled);
    c.n_unlabeled = j.value("n_unlabeled", c.n_unlabeled);
    c.size = j.value("size", c.size);
    c.lesions_min = j.value("lesions_min", c.lesions_min);
    c.lesions_max = j.value("lesions_max", c.lesions_max);
    c.speckle = j.value("speckle", c.speckle);
    c.seed = j.value("seed", c.seed);
    return c;
}

inline Json to_json(const TrainConfig& c) {
    return Json{{"net", to_json(c.net)},
                {"optimizer", to_json(c.optimizer)},
                {"loss", to_json(c.loss)},
                {"tversky", to_json(c.tversky)},
                {"augment", to_json(c.augment)},
                {"epochs", c.epochs},
                {"finetune_epochs", c.finetune_epochs},
                {"warmup_epochs", c.warmup_epochs},
                {"poly_power", c.poly_power},
                {"seed", c.seed}};
}

inline TrainConfig train_from_json(const Json& j) {
    detail::check_keys(j,
                       {"net", "optimizer", "loss", "tversky", "augment", "epochs", "finetune_epochs",
                        "warmup_epochs", "poly_power", "seed"},
                       "train config");
    TrainConfig c;
    if (j.contains("net")) c.net = net_from_json(j.at("net"));
    if (j.contains("optimizer")) c.optimizer = optimizer_from_json(j.at("optimizer"));
    if (j.contains("loss")) c.loss = loss_from_json(j.at("loss"));
    if (j.contains("tversky")) c.tversky = tversky_from_json(j.at("tversky"));
    if (j.contains("augment")) c.augment = augment_from_json(j.at("augment"));
    c.epochs = j.value("epochs", c.epochs);
    c.finetune_epochs = j.value("finetune_epochs", c.finetune_epochs);
    c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
    c.poly_power = j.value("poly_power", c.poly_power);
    c.seed = j.value("seed", c.seed);
    return c;
}

inline Json load_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError(path + ": cannot open");
    try {
        return Json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(path + ": " + e.what());
    }
}

inline TrainConfig load_train_config(const std::string& path) {
    const TrainConfig c = train_from_json(load_json_file(path));
    c.validate();
    return c;
}

inline SyntheticSpec load_synthetic_spec(const std::string& path) {
    const SyntheticSpec s = synthetic_from_json(load_json_file(path));
    s.validate();
    return s;
}

inline void save_json_file(const std::string& path, const Json& j) {
    std::ofstream os(path);
    if (!os) throw IoError(path + ": cannot open for writing");
    os << j.dump(2) << '\n';
    if (!os) throw IoError(path + ": write failed");
}

}  // namespace ccat
