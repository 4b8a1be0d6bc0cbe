#pragma once

#include <map>
#include <optional>

#include "visrecon/config.hpp"
#include "visrecon/dataset_io.hpp"
#include "visrecon/image_io.hpp"
#include "visrecon/metrics.hpp"
#include "visrecon/sampler.hpp"

namespace visrecon {

// per-scene decoding/guidance targets, flattened row-major per scene id
struct SceneTargets {
    Tensor latents;                  // [S, 256]
    Tensor semantic;                 // [S, 512]
    std::array<Tensor, 3> features;  // [S, 1024] per pyramid layer
};

inline SceneTargets build_scene_targets(const Dataset& ds, const LatentCodec& codec, const FeaturePyramid& fp) {
    int s_count = static_cast<int>(ds.scenes.size());
    SceneTargets t;
    t.latents = Tensor({s_count, kLatentC * kLatentH * kLatentW});
    t.semantic = Tensor({s_count, kSemFlat});
    for (auto& f : t.features) f = Tensor({s_count, kFeatFlat});
    for (int i = 0; i < s_count; ++i) {
        Tensor img = render_scene(ds.scenes[i]);
        Tensor z = codec.encode_image(img);
        std::copy(z.v.begin(), z.v.end(), t.latents.v.begin() + i * t.latents.shape[1]);
        Tensor c = fp.semantic_embedding(ds.scenes[i]);
        std::copy(c.v.begin(), c.v.end(), t.semantic.v.begin() + i * kSemFlat);
        for (int l = 1; l <= 3; ++l) {
            Tensor f = fp.extract_features(img, l);
            std::copy(f.v.begin(), f.v.end(), t.features[l - 1].v.begin() + i * kFeatFlat);
        }
    }
    return t;
}

inline SubjectRecords make_records(const SubjectData& sd) {
    SubjectRecords r;
    r.voxels = sd.train_voxels;
    r.rec_scene = sd.train_scene_ids;
    return r;
}

struct ReconOptions {
    std::string tag = "guided";
    std::optional<GuidanceSource> source;  // defaults to the config's source
    double kappa_factor = 1.0;             // scales the calibrated (or fixed) kappa
    bool unguided = false;
    double eta = -1.0;  // <0: config default (brain-encoder source defaults to 1.0)
    int items = -1;
    int repeats = -1;
};

struct ReconResult {
    GuidanceSource source = GuidanceSource::feature_decoders;
    double kappa = 0.0;
    double kappa_base = 0.0;
    double eta = 0.0;
    int items = 0;
    int repeats = 0;
    Tensor latents;  // [items*repeats, 4, 8, 8]
    std::vector<std::uint64_t> seeds;

    Tensor image(const LatentCodec& codec, int item, int repeat) const {
        Tensor z(latent_shape());
        int len = z.numel();
        std::copy(latents.v.begin() + (item * repeats + repeat) * len,
                  latents.v.begin() + (item * repeats + repeat + 1) * len, z.v.begin());
        return clamp01(codec.decode_latent(z));
    }
};

struct EvalOptions {
    bool retrieval = true;
    bool guidance_loss_col = false;
};

class Experiment {
public:
    ExperimentConfig cfg;
    std::filesystem::path dir;
    LatentCodec codec;
    FeaturePyramid fp;
    NoiseSchedule sched;

    Experiment(ExperimentConfig c, std::filesystem::path d)
        : cfg(std::move(c)),
          dir(std::move(d)),
          codec(cfg.seeds.codec),
          fp(cfg.seeds.features),
          sched(cfg.schedule.build()) {}

    std::filesystem::path dataset_dir() const { return dir / "dataset"; }
    std::filesystem::path models_dir() const { return dir / "models"; }
    std::filesystem::path recon_dir(int subject, const std::string& tag) const {
        return dir / "recon" / ("s" + std::to_string(subject)) / tag;
    }
    std::filesystem::path reports_dir() const { return dir / "reports"; }

    // ---- data ----

    void generate() {
        Dataset ds = build_dataset(cfg.dataset, fp, cfg.seeds.data);
        save_dataset(ds, dataset_dir());
        atomic_write_text(dir / "config.json", config_to_json(cfg).dump(2) + "\n");
        ds_ = std::move(ds);
    }

    Dataset& dataset() {
        if (!ds_) ds_ = load_dataset(dataset_dir(), fp);
        return *ds_;
    }

    SceneTargets& targets() {
        if (!targets_) targets_ = build_scene_targets(dataset(), codec, fp);
        return *targets_;
    }

    // ---- training stages ----

    void train(const std::string& stage) {
        if (stage == "all") {
            for (const char* s : {"denoiser", "highlevel", "highlevel-scratch", "guidance", "lowlevel"})
                train(s);
            return;
        }
        std::filesystem::create_directories(models_dir());
        if (stage == "denoiser") {
            train_denoiser_stage();
        } else if (stage == "highlevel") {
            for (int s = 0; s < subjects(); ++s)
                train_contrastive_stage(s, "highlevel", kSemFlat, targets().semantic,
                                        cfg.training.pretrain_highlevel);
        } else if (stage == "highlevel-scratch") {
            for (int s = 0; s < subjects(); ++s)
                train_contrastive_stage(s, "highlevel-scratch", kSemFlat, targets().semantic, false);
        } else if (stage == "guidance") {
            for (int s = 0; s < subjects(); ++s)
                for (int l = 1; l <= 3; ++l)
                    train_contrastive_stage(s, "guidance" + std::to_string(l), kFeatFlat,
                                            targets().features[l - 1], cfg.training.pretrain_guidance);
        } else if (stage == "lowlevel") {
            for (int s = 0; s < subjects(); ++s) train_lowlevel_stage(s);
        } else {
            throw config_error("unknown training stage: " + stage);
        }
    }

    int subjects() { return static_cast<int>(dataset().subjects.size()); }

    Denoiser& denoiser() {
        if (!den_) {
            std::filesystem::path p = models_dir() / "denoiser.bin";
            if (!std::filesystem::exists(p)) throw data_error("denoiser model missing; run train first");
            den_.emplace(derive_seed(cfg.seeds.denoiser, "init"));
            TensorMap tm = load_tensors(p);
            den_->ps.import_from(tm, "den.");
        }
        return *den_;
    }

    struct ContrastiveModel {
        VoxelEncoder enc;
        ContrastiveStack stack;
    };

    ContrastiveModel load_contrastive(int subject, const std::string& name, int dim) {
        std::filesystem::path p = models_dir() / pipeline_file(subject, name);
        if (!std::filesystem::exists(p))
            throw data_error("missing trained model " + p.string() + "; run train first");
        ContrastiveModel m;
        m.enc = VoxelEncoder(dataset().subjects[subject].d, 0);
        m.stack = ContrastiveStack(dim, 0);
        TensorMap tm = load_tensors(p);
        m.enc.ps.import_from(tm, "enc.");
        m.stack.import_from(tm, "stack.");
        return m;
    }

    struct LowLevelModel {
        VoxelEncoder enc;
        LowLevelStack stack;
    };

    LowLevelModel load_lowlevel(int subject) {
        std::filesystem::path p = models_dir() / pipeline_file(subject, "lowlevel");
        if (!std::filesystem::exists(p))
            throw data_error("missing trained model " + p.string() + "; run train first");
        LowLevelModel m;
        m.enc = VoxelEncoder(dataset().subjects[subject].d, 0);
        m.stack = LowLevelStack(0);
        TensorMap tm = load_tensors(p);
        m.enc.ps.import_from(tm, "enc.");
        m.stack.import_from(tm, "stack.");
        return m;
    }

    // ---- decoded test-split predictions (cached per subject) ----

    struct DecodedTest {
        Tensor conds;                        // [N, 512] decoded semantic embeddings
        Tensor z_init;                       // [N, 4, 8, 8] momentum-aligned latent predictions
        std::array<Tensor, 3> dec_features;  // [N, 1024] decoded guidance targets
    };

    const DecodedTest& decoded_test(int subject) {
        auto it = decoded_.find(subject);
        if (it != decoded_.end()) return it->second;
        Dataset& ds = dataset();
        const Tensor& vox = ds.data[subject].test_voxels;
        DecodedTest dt;
        ContrastiveModel hl = load_contrastive(subject, "highlevel", kSemFlat);
        dt.conds = contrastive_decode(hl.enc, hl.stack, vox,
                                      derive_seed(cfg.seeds.sampling, "prior-highlevel", subject));
        LowLevelModel low = load_lowlevel(subject);
        Tensor raw = lowlevel_decode(low.enc, low.stack, vox);
        dt.z_init = momentum_align(raw, low.stack.stats.mu, low.stack.stats.sigma);
        for (int l = 1; l <= 3; ++l) {
            ContrastiveModel gd = load_contrastive(subject, "guidance" + std::to_string(l), kFeatFlat);
            dt.dec_features[l - 1] = contrastive_decode(
                gd.enc, gd.stack, vox, derive_seed(cfg.seeds.sampling, "prior-guidance", subject * 8 + l));
        }
        return decoded_.emplace(subject, std::move(dt)).first->second;
    }

    // ---- guidance objectives and calibration ----

    GuidanceFeatureSet item_targets(int subject, GuidanceSource source, int item) {
        GuidanceFeatureSet t;
        if (source == GuidanceSource::ground_truth_features) {
            int scene = dataset().data[subject].test_scene_ids[item];
            return extract_all_features(fp, render_scene(dataset().scenes[scene]));
        }
        const DecodedTest& dt = decoded_test(subject);
        for (int l = 1; l <= 3; ++l) {
            Tensor f({kFeatTokens, kFeatDim});
            std::copy(dt.dec_features[l - 1].v.begin() + item * kFeatFlat,
                      dt.dec_features[l - 1].v.begin() + (item + 1) * kFeatFlat, f.v.begin());
            t.layers[l - 1] = std::move(f);
        }
        return t;
    }

    BrainGuidance brain_objective(int subject, int item, double kappa) {
        Dataset& ds = dataset();
        BrainGuidance obj;
        obj.codec = &codec;
        obj.features = &fp;
        obj.subject = &ds.subjects[subject];
        obj.measured = Tensor({ds.subjects[subject].d});
        const Tensor& tv = ds.data[subject].test_voxels;
        std::copy(tv.v.begin() + item * obj.measured.numel(),
                  tv.v.begin() + (item + 1) * obj.measured.numel(), obj.measured.v.begin());
        obj.kappa = kappa;
        return obj;
    }

    // ratio that makes the guidance term comparable to the denoiser output at
    // the first guided step, median over a calibration slice of the test set
    double calibrate_kappa(int subject, GuidanceSource source) {
        std::string key = "calibration_" + to_string(source) + ".json";
        std::filesystem::path cache = dir / "recon" / ("s" + std::to_string(subject)) / key;
        if (std::filesystem::exists(cache)) {
            json j = json::parse(read_text_file(cache));
            return j.at("kappa_op").get<double>();
        }
        Dataset& ds = dataset();
        const DecodedTest& dt = decoded_test(subject);
        Denoiser& den = denoiser();
        GuidanceConfig g = cfg.guidance;
        std::vector<int> times = ddim_time_ladder(sched.T, g.ddim_steps);
        int n_start = std::min(g.start_iterations(), g.ddim_steps);
        int t0 = times[n_start - 1];
        double ab = sched.ab(t0);
        int n = std::min(20, static_cast<int>(ds.data[subject].test_scene_ids.size()));
        Tensor null_c = fp.null_embedding();
        std::vector<double> ratios;
        for (int i = 0; i < n; ++i) {
            Rng rng(derive_seed(cfg.seeds.calibration, "calibrate", subject * 1024 + i));
            Tensor eps = Tensor::randn(latent_shape(), rng);
            Tensor z = forward_diffuse(item_init(subject, i), t0, eps, sched);
            Tensor c = item_cond(subject, i);
            Tensor eps_cfg = den.eval_cfg(z, t0, c, null_c, g.cfg_scale);
            double loss = 0.0;
            Tensor grad;
            if (source == GuidanceSource::brain_encoder) {
                BrainGuidance obj = brain_objective(subject, i, 1.0);
                std::tie(loss, grad) = detail::guided_grad_stop(z, eps_cfg, t0, obj, sched);
            } else {
                GuidanceFeatureSet t = item_targets(subject, source, i);
                FeatureGuidance obj;
                obj.codec = &codec;
                obj.features = &fp;
                obj.targets = &t;
                obj.kappa = 1.0;
                std::tie(loss, grad) = detail::guided_grad_stop(z, eps_cfg, t0, obj, sched);
            }
            double gn = std::sqrt(1.0 - ab) * grad.norm();
            if (gn > 0.0) ratios.push_back(eps_cfg.norm() / gn);
        }
        if (ratios.empty()) throw numeric_error("kappa calibration: guidance gradient vanished everywhere");
        std::sort(ratios.begin(), ratios.end());
        double kappa_op = ratios[ratios.size() / 2];
        json j;
        j["kappa_op"] = kappa_op;
        j["source"] = to_string(source);
        j["items"] = static_cast<int>(ratios.size());
        j["first_guided_t"] = t0;
        std::filesystem::create_directories(cache.parent_path());
        atomic_write_text(cache, j.dump(2) + "\n");
        return kappa_op;
    }

    // ---- reconstruction ----

    ReconResult reconstruct(int subject, const ReconOptions& opt) {
        Dataset& ds = dataset();
        const DecodedTest& dt = decoded_test(subject);
        Denoiser& den = denoiser();
        ModelBundle bundle{&den, &codec, &fp, &sched};
        ReconResult res;
        res.source = opt.source.value_or(cfg.reconstruction.source);
        int n_test = static_cast<int>(ds.data[subject].test_scene_ids.size());
        int want = opt.items > 0 ? opt.items : cfg.reconstruction.items;
        res.items = want > 0 ? std::min(want, n_test) : n_test;
        res.repeats = opt.repeats > 0 ? opt.repeats : cfg.reconstruction.repeats;
        GuidanceConfig g = cfg.guidance;
        if (opt.eta >= 0.0)
            g.eta = opt.eta;
        else if (res.source == GuidanceSource::brain_encoder)
            g.eta = 1.0;  // brain-encoder variant guides through the whole chain
        if (opt.unguided || opt.kappa_factor == 0.0) {
            g.kappa = 0.0;
        } else {
            res.kappa_base = cfg.kappa_auto ? calibrate_kappa(subject, res.source) : cfg.guidance.kappa;
            g.kappa = opt.kappa_factor * res.kappa_base;
        }
        res.kappa = g.kappa;
        res.eta = g.eta;

        int zlen = kLatentC * kLatentH * kLatentW;
        res.latents = Tensor({res.items * res.repeats, kLatentC, kLatentH, kLatentW});
        std::uint64_t subj_seed = derive_seed(cfg.seeds.sampling, "recon", subject);
        std::ostringstream traces;
        traces << "item,repeat,step,t,guided,loss,grad_norm\n";
        for (int i = 0; i < res.items; ++i) {
            Tensor z0 = item_init(subject, i);
            Tensor c = item_cond(subject, i);
            GuidanceFeatureSet tgt;
            BrainGuidance bobj;
            if (res.source != GuidanceSource::brain_encoder) {
                tgt = item_targets(subject, res.source, i);
            } else {
                bobj = brain_objective(subject, i, g.kappa);
            }
            for (int r = 0; r < res.repeats; ++r) {
                GuidanceConfig gr = g;
                gr.seed = derive_seed(derive_seed(subj_seed, "item", i), "repeat", r);
                res.seeds.push_back(gr.seed);
                std::vector<StepTrace> trace;
                Tensor zf;
                if (gr.kappa == 0.0) {
                    zf = unguided_sample(z0, c, gr, bundle, &trace);
                } else if (res.source == GuidanceSource::brain_encoder) {
                    bobj.kappa = gr.kappa;
                    zf = guided_sample_with(z0, c, bobj, gr, bundle, &trace);
                } else {
                    zf = guided_sample(z0, c, tgt, gr, bundle, &trace);
                }
                std::copy(zf.v.begin(), zf.v.end(), res.latents.v.begin() + (i * res.repeats + r) * zlen);
                if (r == 0)
                    for (std::size_t k = 0; k < trace.size(); ++k) {
                        const StepTrace& st = trace[k];
                        traces << i << "," << r << "," << k << "," << st.t << "," << (st.guided ? 1 : 0)
                               << "," << st.loss << "," << st.grad_norm << "\n";
                    }
            }
        }

        std::filesystem::path out = recon_dir(subject, opt.tag);
        std::filesystem::create_directories(out);
        TensorMap tm;
        tm.put("latents", res.latents);
        save_tensors(out / "latents.bin", tm);
        json m;
        m["subject"] = subject;
        m["tag"] = opt.tag;
        m["source"] = to_string(res.source);
        m["kappa"] = res.kappa;
        m["kappa_base"] = res.kappa_base;
        m["eta"] = res.eta;
        m["cfg_scale"] = g.cfg_scale;
        m["ddim_steps"] = g.ddim_steps;
        m["img2img_strength"] = g.img2img_strength;
        m["items"] = res.items;
        m["repeats"] = res.repeats;
        m["seeds"] = res.seeds;
        atomic_write_text(out / "manifest.json", m.dump(2) + "\n");
        atomic_write_text(out / "traces.csv", traces.str());
        std::vector<Tensor> grid, truth;
        for (int i = 0; i < std::min(res.items, 25); ++i) {
            grid.push_back(res.image(codec, i, 0));
            truth.push_back(render_scene(ds.scenes[ds.data[subject].test_scene_ids[i]]));
        }
        write_ppm_grid(out / "grid_recon.ppm", grid, 5);
        write_ppm_grid(out / "grid_truth.ppm", truth, 5);
        return res;
    }

    ReconResult load_recon(int subject, const std::string& tag) {
        std::filesystem::path out = recon_dir(subject, tag);
        if (!std::filesystem::exists(out / "manifest.json"))
            throw data_error("missing reconstruction " + out.string() + "; run reconstruct first");
        json m = json::parse(read_text_file(out / "manifest.json"));
        ReconResult res;
        res.source = guidance_source_from_string(m.at("source").get<std::string>());
        res.kappa = m.at("kappa").get<double>();
        res.kappa_base = m.at("kappa_base").get<double>();
        res.eta = m.at("eta").get<double>();
        res.items = m.at("items").get<int>();
        res.repeats = m.at("repeats").get<int>();
        res.seeds = m.at("seeds").get<std::vector<std::uint64_t>>();
        res.latents = load_tensors(out / "latents.bin").get("latents");
        return res;
    }

    // ---- evaluation ----

    MetricReport evaluate(int subject, const std::string& tag, const EvalOptions& eo = {}) {
        Dataset& ds = dataset();
        ReconResult res = load_recon(subject, tag);
        int n = res.items;
        std::vector<Tensor> recons, truths;
        for (int i = 0; i < n; ++i) {
            recons.push_back(res.image(codec, i, 0));
            truths.push_back(render_scene(ds.scenes[ds.data[subject].test_scene_ids[i]]));
        }

        MetricReport rep;
        rep.columns = {"pixcorr",
                       "ssim",
                       "twoway_pixel",
                       "twoway_layer1",
                       "twoway_layer3",
                       "twoway_semantic",
                       "braincorr_v1",
                       "braincorr_v2",
                       "braincorr_v3",
                       "braincorr_higher",
                       "braincorr_whole"};
        std::vector<std::vector<double>> cols;
        std::vector<double> pix(n), ss(n);
        for (int i = 0; i < n; ++i) {
            pix[i] = pixcorr(recons[i], truths[i]);
            ss[i] = ssim(recons[i], truths[i]);
        }
        cols.push_back(pix);
        cols.push_back(ss);
        FeatureFn fn_pixel = [](const Tensor& img) { return img; };
        FeatureFn fn_l1 = [this](const Tensor& img) { return fp.extract_features(img, 1); };
        FeatureFn fn_l3 = [this](const Tensor& img) { return fp.extract_features(img, 3); };
        FeatureFn fn_sem = [this](const Tensor& img) { return fp.semantic_readout(img); };
        for (const FeatureFn& fn : {fn_pixel, fn_l1, fn_l3, fn_sem})
            cols.push_back(two_way_identification_items(recons, truths, fn));
        Tensor measured({n, ds.subjects[subject].d});
        std::copy(ds.data[subject].test_voxels.v.begin(),
                  ds.data[subject].test_voxels.v.begin() + measured.numel(), measured.v.begin());
        for (int grp : {0, 1, 2, 3, -1})
            cols.push_back(brain_correlation_items(recons, measured, ds.subjects[subject], fp, grp));

        if (res.repeats >= 2) {
            rep.columns.push_back("repeat_consistency");
            std::vector<double> rc(n);
            for (int i = 0; i < n; ++i) {
                std::vector<Tensor> reps;
                for (int r = 0; r < res.repeats; ++r) reps.push_back(res.image(codec, i, r));
                rc[i] = repeat_consistency(reps);
            }
            cols.push_back(rc);
        }

        if (eo.retrieval) {
            const DecodedTest& dt = decoded_test(subject);
            int n_test = static_cast<int>(ds.data[subject].test_scene_ids.size());
            ContrastiveModel hl = load_contrastive(subject, "highlevel", kSemFlat);
            Tensor sem_q = project_embed(hl.enc, hl.stack, ds.data[subject].test_voxels);
            Tensor sem_c = detail::normalize_rows(test_rows(targets().semantic, subject, n_test));
            std::vector<int> sem_hits = retrieval_hits(sem_q, sem_c);
            std::vector<int> sem_brain_hits = retrieval_hits(sem_c, sem_q);
            std::vector<Tensor> vq, vc;
            for (int l = 1; l <= 3; ++l) {
                ContrastiveModel gd = load_contrastive(subject, "guidance" + std::to_string(l), kFeatFlat);
                vq.push_back(project_embed(gd.enc, gd.stack, ds.data[subject].test_voxels));
                vc.push_back(detail::normalize_rows(test_rows(targets().features[l - 1], subject, n_test)));
            }
            std::vector<int> vote_hits = vote_retrieval_hits(vq, vc);
            std::vector<int> vote_brain_hits = vote_retrieval_hits(vc, vq);
            rep.columns.push_back("retrieval_semantic_hit");
            rep.columns.push_back("retrieval_vote_hit");
            rep.columns.push_back("retrieval_semantic_brain_hit");
            rep.columns.push_back("retrieval_vote_brain_hit");
            for (const std::vector<int>* hits : {&sem_hits, &vote_hits, &sem_brain_hits, &vote_brain_hits}) {
                std::vector<double> h(n);
                for (int i = 0; i < n; ++i) h[i] = (*hits)[i];
                cols.push_back(h);
            }
        }

        if (eo.guidance_loss_col) {
            rep.columns.push_back("guidance_loss_final");
            std::vector<double> gl(n);
            for (int i = 0; i < n; ++i) {
                Tensor z(latent_shape());
                int len = z.numel();
                std::copy(res.latents.v.begin() + (i * res.repeats) * len,
                          res.latents.v.begin() + (i * res.repeats + 1) * len, z.v.begin());
                if (res.source == GuidanceSource::brain_encoder) {
                    BrainGuidance obj = brain_objective(subject, i, 1.0);
                    gl[i] = guidance_loss(z, obj).first;
                } else {
                    GuidanceFeatureSet t = item_targets(subject, res.source, i);
                    gl[i] = guidance_loss(z, t, 1.0, codec, fp).first;
                }
            }
            cols.push_back(gl);
        }

        for (int i = 0; i < n; ++i) {
            std::vector<double> row(rep.columns.size());
            for (std::size_t j = 0; j < cols.size(); ++j) row[j] = cols[j][i];
            rep.add_row(std::move(row));
        }
        rep.finalize();
        rep.meta = {{"subject", std::to_string(subject)},
                    {"tag", tag},
                    {"source", to_string(res.source)},
                    {"kappa", format_double(res.kappa)},
                    {"kappa_base", format_double(res.kappa_base)},
                    {"eta", format_double(res.eta)},
                    {"items", std::to_string(res.items)},
                    {"repeats", std::to_string(res.repeats)},
                    {"retrieval_chance", format_double(1.0 / ds.data[subject].test_scene_ids.size())}};

        std::filesystem::create_directories(reports_dir());
        std::string stem = "s" + std::to_string(subject) + "_" + tag;
        atomic_write_text(reports_dir() / (stem + ".csv"), rep.to_csv());
        json j;
        for (auto& [k, v] : rep.meta) j["meta"][k] = v;
        for (std::size_t c = 0; c < rep.columns.size(); ++c) j["aggregate"][rep.columns[c]] = rep.aggregate[c];
        atomic_write_text(reports_dir() / (stem + ".json"), j.dump(2) + "\n");
        return rep;
    }

    // ---- ablation grid ----

    void ablate(int subject) {
        json grid;
        for (double f : cfg.ablation.kappa_factors)
            for (double e : cfg.ablation.eta_values) {
                ReconOptions o;
                o.tag = "ablate_k" + format_double(f) + "_e" + format_double(e);
                o.kappa_factor = f;
                o.eta = e;
                o.items = cfg.ablation.items;
                o.repeats = 1;
                reconstruct(subject, o);
                EvalOptions eo;
                eo.retrieval = false;
                eo.guidance_loss_col = true;
                MetricReport rep = evaluate(subject, o.tag, eo);
                json cell;
                for (std::size_t c = 0; c < rep.columns.size(); ++c) cell[rep.columns[c]] = rep.aggregate[c];
                grid["cells"]["k" + format_double(f)]["e" + format_double(e)] = std::move(cell);
            }
        grid["kappa_factors"] = cfg.ablation.kappa_factors;
        grid["eta_values"] = cfg.ablation.eta_values;
        grid["items"] = cfg.ablation.items;
        std::filesystem::create_directories(reports_dir());
        atomic_write_text(reports_dir() / ("s" + std::to_string(subject) + "_ablation.json"),
                          grid.dump(2) + "\n");
    }

    static std::string format_double(double v) {
        std::ostringstream os;
        os.precision(12);
        os << v;
        return os.str();
    }

private:
    std::optional<Dataset> ds_;
    std::optional<SceneTargets> targets_;
    std::optional<Denoiser> den_;
    std::map<int, DecodedTest> decoded_;

    Tensor item_init(int subject, int item) {
        const DecodedTest& dt = decoded_test(subject);
        Tensor z(latent_shape());
        std::copy(dt.z_init.v.begin() + item * z.numel(), dt.z_init.v.begin() + (item + 1) * z.numel(),
                  z.v.begin());
        return z;
    }

    Tensor item_cond(int subject, int item) {
        const DecodedTest& dt = decoded_test(subject);
        Tensor c({kSemTokens, kSemDim});
        std::copy(dt.conds.v.begin() + item * kSemFlat, dt.conds.v.begin() + (item + 1) * kSemFlat,
                  c.v.begin());
        return c;
    }

    // rows of a global scene-target matrix for a subject's test split
    Tensor test_rows(const Tensor& scene_matrix, int subject, int n) {
        Dataset& ds = dataset();
        std::vector<int> ids(ds.data[subject].test_scene_ids.begin(),
                             ds.data[subject].test_scene_ids.begin() + n);
        return detail::gather_rows(scene_matrix, ids);
    }

    static std::string pipeline_file(int subject, const std::string& name) {
        return "s" + std::to_string(subject) + "_" + name + ".bin";
    }

    void write_train_log(const std::string& name, const TrainLog& pre, const TrainLog& fit, bool pretrained) {
        std::ostringstream os;
        os.precision(17);
        os << "phase,epoch,contrastive,prior,mae\n";
        auto dump = [&os](const char* phase, const TrainLog& l) {
            std::size_t rows = std::max({l.contrastive.size(), l.prior.size(), l.mae.size()});
            for (std::size_t e = 0; e < rows; ++e) {
                os << phase << "," << e;
                os << "," << (e < l.contrastive.size() ? l.contrastive[e] : 0.0);
                os << "," << (e < l.prior.size() ? l.prior[e] : 0.0);
                os << "," << (e < l.mae.size() ? l.mae[e] : 0.0);
                os << "\n";
            }
        };
        if (pretrained) dump("pretrain", pre);
        dump(pretrained ? "finetune" : "scratch", fit);
        std::filesystem::create_directories(models_dir() / "logs");
        atomic_write_text(models_dir() / "logs" / (name + ".csv"), os.str());
    }

    void write_stage_manifest(const std::string& name, int subject, const std::string& stage,
                              bool pretrained, std::uint64_t seed) {
        json m;
        m["stage"] = stage;
        m["subject"] = subject;
        m["pretrained"] = pretrained;
        m["seed"] = seed;
        m["epochs"] = cfg.training.epochs;
        m["batch"] = cfg.training.batch;
        m["peak_lr"] = cfg.training.peak_lr;
        m["alpha"] = cfg.training.alpha;
        m["beta"] = cfg.training.beta;
        m["tau"] = cfg.training.tau;
        atomic_write_text(models_dir() / (name + ".json"), m.dump(2) + "\n");
    }

    void train_denoiser_stage() {
        std::filesystem::path final = models_dir() / "denoiser.bin";
        if (std::filesystem::exists(final)) return;
        Dataset& ds = dataset();
        SceneTargets& tg = targets();
        int s_count = static_cast<int>(ds.scenes.size());
        int m_count = s_count - ds.test_scenes;
        Tensor latents({m_count, kLatentC, kLatentH, kLatentW});
        Tensor conds({m_count, kSemTokens, kSemDim});
        int zlen = latents.numel() / m_count;
        for (int i = 0; i < m_count; ++i) {
            int scene = ds.test_scenes + i;
            std::copy(tg.latents.v.begin() + scene * zlen, tg.latents.v.begin() + (scene + 1) * zlen,
                      latents.v.begin() + i * zlen);
            std::copy(tg.semantic.v.begin() + scene * kSemFlat, tg.semantic.v.begin() + (scene + 1) * kSemFlat,
                      conds.v.begin() + i * kSemFlat);
        }
        DenoiserTrainConfig tc;
        tc.epochs = cfg.training.denoiser_epochs;
        tc.batch = cfg.training.batch;
        tc.peak_lr = cfg.training.peak_lr;
        tc.weight_decay = cfg.training.weight_decay;
        tc.cond_dropout = cfg.training.cond_dropout;
        tc.seed = derive_seed(cfg.seeds.denoiser, "train");
        tc.checkpoint = (models_dir() / "denoiser.ckpt").string();
        Denoiser den(derive_seed(cfg.seeds.denoiser, "init"));
        DenoiserTrainLog log = train_denoiser(den, latents, conds, sched, tc);
        TensorMap tm;
        den.ps.export_to(tm, "den.");
        save_tensors(final, tm, {{"stage", "denoiser"}});
        std::ostringstream os;
        os.precision(17);
        os << "epoch,loss\n";
        for (std::size_t e = 0; e < log.epoch_loss.size(); ++e) os << e << "," << log.epoch_loss[e] << "\n";
        std::filesystem::create_directories(models_dir() / "logs");
        atomic_write_text(models_dir() / "logs" / "denoiser.csv", os.str());
        json m;
        m["stage"] = "denoiser";
        m["seed"] = tc.seed;
        m["epochs"] = tc.epochs;
        m["training_pairs"] = m_count;
        m["dropped_conditions"] = log.dropped_conditions;
        m["total_samples"] = log.total_samples;
        atomic_write_text(models_dir() / "denoiser.json", m.dump(2) + "\n");
        std::filesystem::remove(models_dir() / "denoiser.ckpt");
    }

    void train_contrastive_stage(int subject, const std::string& name, int dim, const Tensor& scene_targets,
                                 bool pretrained) {
        std::string file = pipeline_file(subject, name);
        std::filesystem::path final = models_dir() / file;
        if (std::filesystem::exists(final)) return;
        Dataset& ds = dataset();
        std::uint64_t seed = derive_seed(cfg.seeds.decoders, name, subject);
        TrainHyper h = cfg.training.hyper(seed);
        h.checkpoint = (models_dir() / (file + ".ckpt")).string();
        ContrastiveStack stack(dim, derive_seed(seed, "stack"));
        VoxelEncoder enc;
        TrainLog pre, fit;
        SubjectRecords target = make_records(ds.data[subject]);
        if (pretrained && subjects() >= 2) {
            std::vector<SubjectRecords> others;
            for (int s = 0; s < subjects(); ++s)
                if (s != subject) others.push_back(make_records(ds.data[s]));
            std::vector<const SubjectRecords*> views;
            for (auto& o : others) views.push_back(&o);
            FinetuneResult r = pretrain_then_finetune(stack, views, target, scene_targets, h);
            enc = std::move(r.encoder);
            pre = std::move(r.pretrain_log);
            fit = std::move(r.finetune_log);
        } else {
            pretrained = false;
            enc = VoxelEncoder(ds.subjects[subject].d, derive_seed(seed, "encoder"));
            std::vector<VoxelEncoder> encs{enc};
            fit = train_contrastive(encs, stack, {&target}, scene_targets, h);
            enc = std::move(encs[0]);
        }
        TensorMap tm;
        enc.ps.export_to(tm, "enc.");
        stack.export_to(tm, "stack.");
        save_tensors(final, tm, {{"stage", name}});
        write_train_log(file, pre, fit, pretrained);
        write_stage_manifest(file, subject, name, pretrained, seed);
        for (const char* suffix : {".ckpt", ".ckpt.pre", ".ckpt.fit"})
            std::filesystem::remove(models_dir() / (file + suffix));
    }

    void train_lowlevel_stage(int subject) {
        std::string file = pipeline_file(subject, "lowlevel");
        std::filesystem::path final = models_dir() / file;
        if (std::filesystem::exists(final)) return;
        Dataset& ds = dataset();
        std::uint64_t seed = derive_seed(cfg.seeds.decoders, "lowlevel", subject);
        TrainHyper h = cfg.training.hyper(seed);
        h.checkpoint = (models_dir() / (file + ".ckpt")).string();
        LowLevelStack stack(derive_seed(seed, "stack"));
        VoxelEncoder enc;
        TrainLog pre, fit;
        SubjectRecords target = make_records(ds.data[subject]);
        bool pretrained = cfg.training.pretrain_lowlevel && subjects() >= 2;
        if (pretrained) {
            std::vector<SubjectRecords> others;
            for (int s = 0; s < subjects(); ++s)
                if (s != subject) others.push_back(make_records(ds.data[s]));
            std::vector<const SubjectRecords*> views;
            for (auto& o : others) views.push_back(&o);
            FinetuneResult r = pretrain_then_finetune_lowlevel(stack, views, target, targets().latents, h);
            enc = std::move(r.encoder);
            pre = std::move(r.pretrain_log);
            fit = std::move(r.finetune_log);
        } else {
            enc = VoxelEncoder(ds.subjects[subject].d, derive_seed(seed, "encoder"));
            std::vector<VoxelEncoder> encs{enc};
            fit = train_lowlevel(encs, stack, {&target}, targets().latents, h);
            enc = std::move(encs[0]);
        }
        TensorMap tm;
        enc.ps.export_to(tm, "enc.");
        stack.export_to(tm, "stack.");
        save_tensors(final, tm, {{"stage", "lowlevel"}});
        write_train_log(file, pre, fit, pretrained);
        write_stage_manifest(file, subject, "lowlevel", pretrained, seed);
        for (const char* suffix : {".ckpt", ".ckpt.pre", ".ckpt.fit"})
            std::filesystem::remove(models_dir() / (file + suffix));
    }
};

}  // namespace visrecon
