#pragma once

#include <nlohmann/json.hpp>

#include "visrecon/brain.hpp"
#include "visrecon/diffusion.hpp"
#include "visrecon/training.hpp"

namespace visrecon {

using json = nlohmann::json;

enum class GuidanceSource { feature_decoders, ground_truth_features, brain_encoder };

inline GuidanceSource guidance_source_from_string(const std::string& s) {
    if (s == "feature-decoders") return GuidanceSource::feature_decoders;
    if (s == "ground-truth-features") return GuidanceSource::ground_truth_features;
    if (s == "brain-encoder") return GuidanceSource::brain_encoder;
    throw config_error("unknown guidance_source: " + s);
}

inline std::string to_string(GuidanceSource s) {
    switch (s) {
        case GuidanceSource::feature_decoders: return "feature-decoders";
        case GuidanceSource::ground_truth_features: return "ground-truth-features";
        default: return "brain-encoder";
    }
}

struct SeedConfig {
    std::uint64_t data = 101;
    std::uint64_t codec = 102;
    std::uint64_t features = 103;
    std::uint64_t denoiser = 104;
    std::uint64_t decoders = 105;
    std::uint64_t sampling = 106;
    std::uint64_t calibration = 107;
};

struct ScheduleConfig {
    int timesteps = 100;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    ScheduleKind kind = ScheduleKind::linear;

    NoiseSchedule build() const { return make_schedule(timesteps, beta_start, beta_end, kind); }
};

struct TrainingConfig {
    int epochs = 30;
    int batch = 21;
    double peak_lr = 3e-4;
    double weight_decay = 1e-4;
    double alpha = 30.0;
    double beta = 0.25;
    double tau = 0.07;
    int denoiser_epochs = 24;
    double cond_dropout = 0.1;
    bool pretrain_highlevel = true;
    bool pretrain_guidance = false;
    bool pretrain_lowlevel = false;

    TrainHyper hyper(std::uint64_t seed) const {
        TrainHyper h;
        h.epochs = epochs;
        h.batch = batch;
        h.peak_lr = peak_lr;
        h.weight_decay = weight_decay;
        h.alpha = alpha;
        h.beta = beta;
        h.tau = tau;
        h.seed = seed;
        return h;
    }
};

struct AblationConfig {
    std::vector<double> kappa_factors{0.0, 0.01, 0.1, 1.0, 10.0};
    std::vector<double> eta_values{1.0, 0.8, 0.6, 0.4, 0.2, 0.1};
    int items = 20;
};

struct ReconstructionConfig {
    int items = -1;  // -1: whole test split
    int repeats = 1;
    GuidanceSource source = GuidanceSource::feature_decoders;
};

struct ExperimentConfig {
    SeedConfig seeds;
    DatasetSpec dataset;
    ScheduleConfig schedule;
    GuidanceConfig guidance;
    bool kappa_auto = true;  // calibrate kappa, ignore guidance.kappa
    TrainingConfig training;
    AblationConfig ablation;
    ReconstructionConfig reconstruction;

    void validate() const {
        if (!kappa_auto) {
            GuidanceConfig g = guidance;
            g.validate();
        }
        if (schedule.timesteps % guidance.ddim_steps != 0)
            throw config_error("ddim_steps must divide schedule timesteps");
        if (dataset.train_scenes < 1 || dataset.test_scenes < 2 || dataset.repeats < 1)
            throw config_error("dataset scale parameters out of range");
        if (training.epochs < 1 || training.batch < 2 || training.denoiser_epochs < 1)
            throw config_error("training parameters out of range");
        if (reconstruction.repeats < 1) throw config_error("reconstruction.repeats out of range");
    }
};

namespace detail {

inline void require_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw config_error(where + ": expected an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : allowed)
            if (it.key() == k) ok = true;
        if (!ok) throw config_error(where + ": unknown key '" + it.key() + "'");
    }
}

template <typename T>
inline void read_field(const json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw config_error(std::string("bad value for '") + key + "'");
    }
}

}  // namespace detail

inline ExperimentConfig parse_config(const json& j) {
    ExperimentConfig c;
    detail::require_keys(j, "config",
                         {"seeds", "dataset", "schedule", "guidance", "training", "ablation", "reconstruction"});
    if (j.contains("seeds")) {
        const json& s = j.at("seeds");
        detail::require_keys(s, "seeds",
                             {"data", "codec", "features", "denoiser", "decoders", "sampling", "calibration"});
        detail::read_field(s, "data", c.seeds.data);
        detail::read_field(s, "codec", c.seeds.codec);
        detail::read_field(s, "features", c.seeds.features);
        detail::read_field(s, "denoiser", c.seeds.denoiser);
        detail::read_field(s, "decoders", c.seeds.decoders);
        detail::read_field(s, "sampling", c.seeds.sampling);
        detail::read_field(s, "calibration", c.seeds.calibration);
    }
    if (j.contains("dataset")) {
        const json& d = j.at("dataset");
        detail::require_keys(d, "dataset",
                             {"subjects", "voxel_counts", "train_scenes", "test_scenes", "repeats", "snr"});
        detail::read_field(d, "subjects", c.dataset.subjects);
        detail::read_field(d, "voxel_counts", c.dataset.voxel_counts);
        detail::read_field(d, "train_scenes", c.dataset.train_scenes);
        detail::read_field(d, "test_scenes", c.dataset.test_scenes);
        detail::read_field(d, "repeats", c.dataset.repeats);
        detail::read_field(d, "snr", c.dataset.snr);
    }
    if (j.contains("schedule")) {
        const json& s = j.at("schedule");
        detail::require_keys(s, "schedule", {"timesteps", "beta_start", "beta_end", "kind"});
        detail::read_field(s, "timesteps", c.schedule.timesteps);
        detail::read_field(s, "beta_start", c.schedule.beta_start);
        detail::read_field(s, "beta_end", c.schedule.beta_end);
        std::string kind = "linear";
        detail::read_field(s, "kind", kind);
        c.schedule.kind = schedule_kind_from_string(kind);
    }
    if (j.contains("guidance")) {
        const json& g = j.at("guidance");
        detail::require_keys(
            g, "guidance", {"kappa", "eta", "cfg_scale", "ddim_steps", "img2img_strength", "grad_mode"});
        if (g.contains("kappa")) {
            if (g.at("kappa").is_string()) {
                if (g.at("kappa").get<std::string>() != "auto")
                    throw config_error("guidance.kappa must be a number or \"auto\"");
                c.kappa_auto = true;
            } else {
                c.kappa_auto = false;
                detail::read_field(g, "kappa", c.guidance.kappa);
            }
        }
        detail::read_field(g, "eta", c.guidance.eta);
        detail::read_field(g, "cfg_scale", c.guidance.cfg_scale);
        detail::read_field(g, "ddim_steps", c.guidance.ddim_steps);
        detail::read_field(g, "img2img_strength", c.guidance.img2img_strength);
        std::string gm = "stop_gradient";
        detail::read_field(g, "grad_mode", gm);
        if (gm == "stop_gradient")
            c.guidance.grad_mode = GradMode::stop_gradient;
        else if (gm == "full_backprop")
            c.guidance.grad_mode = GradMode::full_backprop;
        else
            throw config_error("unknown grad_mode: " + gm);
    }
    if (j.contains("training")) {
        const json& t = j.at("training");
        detail::require_keys(t, "training",
                             {"epochs", "batch", "peak_lr", "weight_decay", "alpha", "beta", "tau",
                              "denoiser_epochs", "cond_dropout", "pretrain_highlevel", "pretrain_guidance",
                              "pretrain_lowlevel"});
        detail::read_field(t, "epochs", c.training.epochs);
        detail::read_field(t, "batch", c.training.batch);
        detail::read_field(t, "peak_lr", c.training.peak_lr);
        detail::read_field(t, "weight_decay", c.training.weight_decay);
        detail::read_field(t, "alpha", c.training.alpha);
        detail::read_field(t, "beta", c.training.beta);
        detail::read_field(t, "tau", c.training.tau);
        detail::read_field(t, "denoiser_epochs", c.training.denoiser_epochs);
        detail::read_field(t, "cond_dropout", c.training.cond_dropout);
        detail::read_field(t, "pretrain_highlevel", c.training.pretrain_highlevel);
        detail::read_field(t, "pretrain_guidance", c.training.pretrain_guidance);
        detail::read_field(t, "pretrain_lowlevel", c.training.pretrain_lowlevel);
    }
    if (j.contains("ablation")) {
        const json& a = j.at("ablation");
        detail::require_keys(a, "ablation", {"kappa_factors", "eta_values", "items"});
        detail::read_field(a, "kappa_factors", c.ablation.kappa_factors);
        detail::read_field(a, "eta_values", c.ablation.eta_values);
        detail::read_field(a, "items", c.ablation.items);
    }
    if (j.contains("reconstruction")) {
        const json& r = j.at("reconstruction");
        detail::require_keys(r, "reconstruction", {"items", "repeats", "source"});
        detail::read_field(r, "items", c.reconstruction.items);
        detail::read_field(r, "repeats", c.reconstruction.repeats);
        std::string src = to_string(c.reconstruction.source);
        detail::read_field(r, "source", src);
        c.reconstruction.source = guidance_source_from_string(src);
    }
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::exception& e) {
        throw config_error("config parse failure: " + std::string(e.what()));
    }
    return parse_config(j);
}

inline json config_to_json(const ExperimentConfig& c) {
    json j;
    j["seeds"] = {{"data", c.seeds.data},         {"codec", c.seeds.codec},
                  {"features", c.seeds.features}, {"denoiser", c.seeds.denoiser},
                  {"decoders", c.seeds.decoders}, {"sampling", c.seeds.sampling},
                  {"calibration", c.seeds.calibration}};
    j["dataset"] = {{"subjects", c.dataset.subjects},       {"voxel_counts", c.dataset.voxel_counts},
                    {"train_scenes", c.dataset.train_scenes}, {"test_scenes", c.dataset.test_scenes},
                    {"repeats", c.dataset.repeats},         {"snr", c.dataset.snr}};
    j["schedule"] = {{"timesteps", c.schedule.timesteps},
                     {"beta_start", c.schedule.beta_start},
                     {"beta_end", c.schedule.beta_end},
                     {"kind", c.schedule.kind == ScheduleKind::linear ? "linear" : "cosine"}};
    j["guidance"] = {{"eta", c.guidance.eta},
                     {"cfg_scale", c.guidance.cfg_scale},
                     {"ddim_steps", c.guidance.ddim_steps},
                     {"img2img_strength", c.guidance.img2img_strength},
                     {"grad_mode",
                      c.guidance.grad_mode == GradMode::stop_gradient ? "stop_gradient" : "full_backprop"}};
    if (c.kappa_auto)
        j["guidance"]["kappa"] = "auto";
    else
        j["guidance"]["kappa"] = c.guidance.kappa;
    j["training"] = {{"epochs", c.training.epochs},
                     {"batch", c.training.batch},
                     {"peak_lr", c.training.peak_lr},
                     {"weight_decay", c.training.weight_decay},
                     {"alpha", c.training.alpha},
                     {"beta", c.training.beta},
                     {"tau", c.training.tau},
                     {"denoiser_epochs", c.training.denoiser_epochs},
                     {"cond_dropout", c.training.cond_dropout},
                     {"pretrain_highlevel", c.training.pretrain_highlevel},
                     {"pretrain_guidance", c.training.pretrain_guidance},
                     {"pretrain_lowlevel", c.training.pretrain_lowlevel}};
    j["ablation"] = {{"kappa_factors", c.ablation.kappa_factors},
                     {"eta_values", c.ablation.eta_values},
                     {"items", c.ablation.items}};
    j["reconstruction"] = {{"items", c.reconstruction.items},
                           {"repeats", c.reconstruction.repeats},
                           {"source", to_string(c.reconstruction.source)}};
    return j;
}

}  // namespace visrecon
