// End-to-end acceptance gate. Builds one full-scale experiment from the
// published default config (dataset, all training stages), then checks twelve
// criteria against it, printing one verdict line per criterion:
//
//   ACCEPTANCE <n> (<name>): PASS|FAIL
//
// Criteria 1-4 and 12 are exact or tolerance-pinned properties. Criteria 5-11
// are directional reproductions of the reference behavior at this scale; the
// thresholds are pinned below.

#include <cstdio>
#include <filesystem>
#include <memory>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "visrecon/experiment.hpp"

namespace visrecon {
namespace {

constexpr double kFdRelTol = 1e-3;       // gradient vs central finite differences
constexpr double kIdentityTol = 1e-10;   // noise/posterior algebraic identities
constexpr double kMomentTol = 1e-6;      // aligned batch moments
constexpr double kAffineTol = 1e-12;     // affine-input invariance of alignment
constexpr double kDecodingMargin = 0.05; // semantic-over-latent decoding margin
constexpr double kItemWinFraction = 0.9; // guided items that must improve the objective
constexpr double kVoteTop1Min = 0.20;    // 20x chance with 100 candidates
constexpr double kV1HoldSlack = 0.002;   // early-visual correlation may not drop more

struct Workbench {
    vrtest::TempDir tmp{"visrecon-accept"};
    ExperimentConfig cfg;
    std::unique_ptr<Experiment> exp;

    Workbench() {
        const char* cpath = std::getenv("VISRECON_CONFIG");
        cfg = cpath ? load_config(cpath) : parse_config(json::object());
        exp = std::make_unique<Experiment>(cfg, tmp.path / "exp");
        std::printf("[setup] generating dataset\n");
        std::fflush(stdout);
        exp->generate();
        for (const char* stage : {"denoiser", "highlevel", "highlevel-scratch", "guidance", "lowlevel"}) {
            std::printf("[setup] training stage '%s'\n", stage);
            std::fflush(stdout);
            exp->train(stage);
        }
        std::printf("[setup] training complete\n");
        std::fflush(stdout);
    }

    ReconResult ensure_recon(int subject, const ReconOptions& o) {
        if (!std::filesystem::exists(exp->recon_dir(subject, o.tag) / "manifest.json"))
            return exp->reconstruct(subject, o);
        return exp->load_recon(subject, o.tag);
    }
};

Workbench& W() {
    static Workbench w;
    return w;
}

template <class Fn>
void criterion(int idx, const char* name, Fn&& fn) {
    bool pass = false;
    std::string err;
    try {
        pass = fn();
    } catch (const std::exception& e) {
        err = e.what();
    }
    std::printf("ACCEPTANCE %d (%s): %s\n", idx, name, pass ? "PASS" : "FAIL");
    std::fflush(stdout);
    EXPECT_TRUE(pass) << "criterion " << idx << " (" << name << ")"
                      << (err.empty() ? "" : " raised: " + err);
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape &&
           std::memcmp(a.v.data(), b.v.data(), a.v.size() * sizeof(double)) == 0;
}

std::string slurp(const std::filesystem::path& p) { return read_text_file(p); }

Tensor latent_of(const Experiment::DecodedTest& dt, int i) {
    Tensor z(latent_shape());
    std::copy(dt.z_init.v.begin() + i * z.numel(), dt.z_init.v.begin() + (i + 1) * z.numel(),
              z.v.begin());
    return z;
}

Tensor cond_of(const Experiment::DecodedTest& dt, int i) {
    Tensor c({kSemTokens, kSemDim});
    std::copy(dt.conds.v.begin() + i * kSemFlat, dt.conds.v.begin() + (i + 1) * kSemFlat, c.v.begin());
    return c;
}

int col_index(const MetricReport& r, const std::string& name) {
    for (std::size_t j = 0; j < r.columns.size(); ++j)
        if (r.columns[j] == name) return static_cast<int>(j);
    throw invariant_error("report is missing column " + name);
}

double agg(const MetricReport& r, const std::string& name) { return r.aggregate[col_index(r, name)]; }

std::vector<double> column(const MetricReport& r, const std::string& name) {
    int j = col_index(r, name);
    std::vector<double> out;
    for (const auto& row : r.rows) out.push_back(row[j]);
    return out;
}

// mean over dimensions of the Pearson correlation across test items,
// skipping dimensions with no variance on either side
double dimwise_r(const Tensor& dec, const Tensor& tru, int n, int dim) {
    double acc = 0.0;
    int used = 0;
    std::vector<double> x(n), y(n);
    for (int k = 0; k < dim; ++k) {
        double mx = 0.0, my = 0.0;
        for (int i = 0; i < n; ++i) {
            x[i] = dec.v[i * dim + k];
            y[i] = tru.v[i * dim + k];
            mx += x[i];
            my += y[i];
        }
        mx /= n;
        my /= n;
        double sx = 0.0, sy = 0.0;
        for (int i = 0; i < n; ++i) {
            sx += (x[i] - mx) * (x[i] - mx);
            sy += (y[i] - my) * (y[i] - my);
        }
        if (sx <= 1e-18 || sy <= 1e-18) continue;
        acc += pearson(x.data(), y.data(), n);
        ++used;
    }
    check(used > 0, "dimwise correlation: all dimensions degenerate");
    return acc / used;
}

// test-split rows of a per-scene target matrix for one subject
Tensor gather_test_rows(Experiment& e, const Tensor& scene_matrix, int subject) {
    Dataset& ds = e.dataset();
    return detail::gather_rows(scene_matrix, ds.data[subject].test_scene_ids);
}

// true latents of a subject's test scenes as a [n, 256] matrix
Tensor true_test_latents(Experiment& e, int subject) {
    Dataset& ds = e.dataset();
    int n = static_cast<int>(ds.data[subject].test_scene_ids.size());
    int zlen = kLatentC * kLatentH * kLatentW;
    Tensor out({n, zlen});
    for (int i = 0; i < n; ++i) {
        Tensor z = e.codec.encode_image(render_scene(ds.scenes[ds.data[subject].test_scene_ids[i]]));
        std::copy(z.v.begin(), z.v.end(), out.v.begin() + i * zlen);
    }
    return out;
}

TEST(Acceptance, GuidanceOffMatchesUnguidedExactly) {
    criterion(1, "guidance-off degeneracy", [] {
        Workbench& w = W();
        Experiment& e = *w.exp;
        const auto& dt = e.decoded_test(0);
        ModelBundle m{&e.denoiser(), &e.codec, &e.fp, &e.sched};
        for (int k = 0; k < 20; ++k) {
            int item = k % 10;
            Tensor z0 = latent_of(dt, item);
            Tensor c = cond_of(dt, item);
            GuidanceFeatureSet tgt = e.item_targets(0, GuidanceSource::feature_decoders, item);
            GuidanceConfig g = w.cfg.guidance;
            g.kappa = 0.0;
            g.seed = derive_seed(4242, "degeneracy", k);
            Tensor a = guided_sample(z0, c, tgt, g, m);
            Tensor b = unguided_sample(z0, c, g, m);
            if (!bit_equal(a, b)) {
                ADD_FAILURE() << "seed " << k << ": guided(kappa=0) differs from unguided";
                return false;
            }
        }
        return true;
    });
}

TEST(Acceptance, GradientSuiteMatchesFiniteDifferences) {
    criterion(2, "gradient suite", [] {
        Workbench& w = W();
        Experiment& e = *w.exp;
        Rng rng(202);
        const double h = 1e-5;
        auto rel_ok = [&](double an, double fd) {
            return std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8}) <= kFdRelTol;
        };

        // full-backprop guidance gradient through denoiser, blend, codec and
        // feature pyramid
        {
            ModelBundle m{&e.denoiser(), &e.codec, &e.fp, &e.sched};
            GuidanceFeatureSet tgt =
                extract_all_features(e.fp, render_scene({2, 5, 1, 0.4, 0.6, 0.35, true}));
            FeatureGuidance obj;
            obj.codec = &e.codec;
            obj.features = &e.fp;
            obj.targets = &tgt;
            obj.kappa = 0.8;
            GuidanceConfig g = w.cfg.guidance;
            g.grad_mode = GradMode::full_backprop;
            Tensor z = Tensor::randn(latent_shape(), rng);
            Tensor c = cond_of(e.decoded_test(0), 3);
            int t = 57;
            auto [loss, grad] = detail::guided_grad_full(z, t, c, obj, g, m);
            EXPECT_TRUE(grad.all_finite());
            for (int k = 0; k < 32; ++k) {
                int i = static_cast<int>(rng.uniform_int(z.numel()));
                Tensor zp = z, zm = z;
                zp.v[i] += h;
                zm.v[i] -= h;
                double fd = (detail::guided_grad_full(zp, t, c, obj, g, m).first -
                             detail::guided_grad_full(zm, t, c, obj, g, m).first) /
                            (2 * h);
                EXPECT_TRUE(rel_ok(grad.v[i], fd)) << "guidance chain coord " << i;
            }
        }

        // denoiser training-loss gradient w.r.t. parameters
        {
            Denoiser den(77);
            for (Tensor& t : den.ps.values)
                for (double& x : t.v) x += 0.02 * rng.normal();
            int n = 4;
            Tensor zt = Tensor::randn({n, kLatentC, kLatentH, kLatentW}, rng);
            Tensor eps = Tensor::randn({n, kLatentC, kLatentH, kLatentW}, rng);
            Tensor cb = Tensor::randn({n, kSemTokens, kSemDim}, rng);
            Tensor temb = timestep_embedding_batch({5, 31, 62, 98}, kTembDim);
            auto loss_value = [&]() {
                Graph g;
                Bound bp = bind_frozen(g, den.ps);
                int pred = den.forward(g, bp, g.input(zt), g.input(temb), g.input(cb));
                return g.val(g.mean_sq_err(pred, g.input(eps)))[0];
            };
            Graph g;
            Bound bp = bind(g, den.ps);
            int pred = den.forward(g, bp, g.input(zt), g.input(temb), g.input(cb));
            g.backward(g.mean_sq_err(pred, g.input(eps)));
            int checked = 0;
            while (checked < 32) {
                int pi = static_cast<int>(rng.uniform_int(den.ps.count()));
                if (!g.has_grad(bp[pi])) continue;
                int j = static_cast<int>(rng.uniform_int(den.ps.values[pi].numel()));
                double an = g.grad(bp[pi]).v[j];
                double orig = den.ps.values[pi].v[j];
                den.ps.values[pi].v[j] = orig + h;
                double lp = loss_value();
                den.ps.values[pi].v[j] = orig - h;
                double lm = loss_value();
                den.ps.values[pi].v[j] = orig;
                EXPECT_TRUE(rel_ok(an, (lp - lm) / (2 * h))) << "denoiser param coord " << j;
                ++checked;
            }
        }

        // codec-decode plus feature-pyramid objective, and the measurement
        // (voxel) objective, each w.r.t. the latent
        {
            GuidanceFeatureSet tgt =
                extract_all_features(e.fp, render_scene({0, 1, 3, 0.7, 0.3, 0.45, false}));
            Tensor z = Tensor::randn(latent_shape(), rng, 0.7);
            auto [loss, grad] = guidance_loss(z, tgt, 0.6, e.codec, e.fp);
            BrainGuidance bobj = e.brain_objective(0, 2, 0.9);
            auto [bloss, bgrad] = guidance_loss(z, bobj);
            for (int k = 0; k < 32; ++k) {
                int i = static_cast<int>(rng.uniform_int(z.numel()));
                Tensor zp = z, zm = z;
                zp.v[i] += h;
                zm.v[i] -= h;
                double fd = (guidance_loss(zp, tgt, 0.6, e.codec, e.fp).first -
                             guidance_loss(zm, tgt, 0.6, e.codec, e.fp).first) /
                            (2 * h);
                EXPECT_TRUE(rel_ok(grad.v[i], fd)) << "feature objective coord " << i;
                double bfd =
                    (guidance_loss(zp, bobj).first - guidance_loss(zm, bobj).first) / (2 * h);
                EXPECT_TRUE(rel_ok(bgrad.v[i], bfd)) << "voxel objective coord " << i;
            }
        }

        // decoder contrastive losses w.r.t. raw predictions
        {
            Tensor p_raw = Tensor::randn({4, 8}, rng);
            Tensor c = Tensor::randn({4, 8}, rng);
            c = detail::normalize_rows(c);
            std::vector<double> lambda{0.4, 0.7, 0.2, 0.9};
            std::vector<int> pairing{2, 0, 3, 1};
            vrtest::check_gradients({p_raw}, [&](Graph& g, const std::vector<int>& ids) {
                int pn = g.row_normalize(ids[0]);
                return mixco_loss_op(g, pn, g.input(c), lambda, pairing, 0.07);
            });
            vrtest::check_gradients({p_raw}, [&](Graph& g, const std::vector<int>& ids) {
                int pn = g.row_normalize(ids[0]);
                return softclip_loss_op(g, pn, c, 0.07);
            });
        }

        return !::testing::Test::HasNonfatalFailure();
    });
}

TEST(Acceptance, NoiseAndPosteriorIdentitiesHold) {
    criterion(3, "schedule and posterior-mean identities", [] {
        Workbench& w = W();
        const NoiseSchedule& s = w.exp->sched;
        Rng rng(303);
        double worst = 0.0;
        for (int t : {0, 7, 23, 57, 84, 99}) {
            for (int rep = 0; rep < 3; ++rep) {
                Tensor z0 = Tensor::randn(latent_shape(), rng);
                Tensor eps = Tensor::randn(latent_shape(), rng);
                Tensor zt = forward_diffuse(z0, t, eps, s);
                Tensor rec = tweedie_estimate(zt, eps, t, s);
                double ab = s.ab(t);
                for (int i = 0; i < rec.numel(); ++i) {
                    // diffuse-then-estimate must invert exactly
                    worst = std::max(worst, std::abs(rec.v[i] - z0.v[i]));
                    // epsilon form and score form must agree
                    double score = -eps.v[i] / std::sqrt(1.0 - ab);
                    double via_score = (zt.v[i] + (1.0 - ab) * score) / std::sqrt(ab);
                    worst = std::max(worst, std::abs(via_score - rec.v[i]));
                }
            }
        }
        EXPECT_LE(worst, kIdentityTol);
        return worst <= kIdentityTol;
    });
}

TEST(Acceptance, AlignedPredictionsMatchTrainingMoments) {
    criterion(4, "prediction moment calibration", [] {
        Rng rng(404);
        Tensor batch = Tensor::randn({40, 64}, rng, 2.3);
        for (double& x : batch.v) x += 0.9;
        double mu_tr = 0.3, sigma_tr = 1.7;
        Tensor out = momentum_align(batch, mu_tr, sigma_tr);
        LatentStats st = population_stats(out);
        EXPECT_NEAR(st.mu, mu_tr, kMomentTol);
        EXPECT_NEAR(st.sigma, sigma_tr, kMomentTol);
        bool ok = std::abs(st.mu - mu_tr) <= kMomentTol && std::abs(st.sigma - sigma_tr) <= kMomentTol;

        Tensor affine = batch;
        for (double& x : affine.v) x = 3.25 * x - 1.5;
        Tensor out2 = momentum_align(affine, mu_tr, sigma_tr);
        for (int i = 0; i < out.numel(); ++i)
            if (std::abs(out.v[i] - out2.v[i]) > kAffineTol) {
                ADD_FAILURE() << "affine invariance broken at coord " << i;
                ok = false;
                break;
            }
        return ok;
    });
}

TEST(Acceptance, SemanticEmbeddingDecodesBetterThanLatent) {
    criterion(5, "decoding ordering", [] {
        Workbench& w = W();
        Experiment& e = *w.exp;
        Dataset& ds = e.dataset();
        bool ok = true;
        for (int s = 0; s < static_cast<int>(ds.subjects.size()); ++s) {
            int n = static_cast<int>(ds.data[s].test_scene_ids.size());
            const auto& dt = e.decoded_test(s);
            double sem_r = dimwise_r(dt.conds, gather_test_rows(e, e.targets().semantic, s), n, kSemFlat);
            double z_r = dimwise_r(dt.z_init, true_test_latents(e, s), n,
                                   kLatentC * kLatentH * kLatentW);
            double margin = sem_r - z_r;
            std::printf("  [5] subject %d: semantic r=%.4f latent r=%.4f margin=%+.4f\n", s, sem_r,
                        z_r, margin);
            EXPECT_GE(margin, kDecodingMargin) << "subject " << s;
            ok = ok && margin >= kDecodingMargin;
        }
        return ok;
    });
}

TEST(Acceptance, GuidanceImprovesFidelityOverUnguided) {
    criterion(6, "guidance trend", [] {
        Workbench& w = W();
        Experiment& e = *w.exp;
        ReconOptions g;
        g.tag = "trend_guided";
        g.items = 50;
        ReconOptions u = g;
        u.tag = "trend_unguided";
        u.unguided = true;
        w.ensure_recon(0, g);
        w.ensure_recon(0, u);
        EvalOptions eo;
        eo.retrieval = false;
        eo.guidance_loss_col = true;
        MetricReport rg = e.evaluate(0, g.tag, eo);
        MetricReport ru = e.evaluate(0, u.tag, eo);

        std::vector<double> lg = column(rg, "guidance_loss_final");
        std::vector<double> lu = column(ru, "guidance_loss_final");
        int wins = 0;
        for (std::size_t i = 0; i < lg.size(); ++i) wins += lg[i] < lu[i] ? 1 : 0;
        double frac = static_cast<double>(wins) / lg.size();
        bool obj_ok = frac >= kItemWinFraction;
        bool pix_ok = agg(rg, "pixcorr") > agg(ru, "pixcorr");
        bool tw_ok = agg(rg, "twoway_layer1") > agg(ru, "twoway_layer1");
        std::printf("  [6] objective wins %.0f%%, pixcorr %+0.4f, layer-1 two-way %+0.4f\n",
                    100 * frac, agg(rg, "pixcorr") - agg(ru, "pixcorr"),
                    agg(rg, "twoway_layer1") - agg(ru, "twoway_layer1"));
        EXPECT_TRUE(obj_ok) << "per-item objective win fraction " << frac;
        EXPECT_TRUE(pix_ok);
        EXPECT_TRUE(tw_ok);
        return obj_ok && pix_ok && tw_ok;
    });
}

TEST(Acceptance, ExcessiveGuidanceDistortsSemanticsNotEarlyVision) {
    criterion(7, "over-guidance failure mode", [] {
        Workbench& w = W();
        Experiment& e = *w.exp;
        ReconOptions g;
        g.tag = "trend_guided";
        g.items = 50;
        w.ensure_recon(0, g);
        ReconOptions o = g;
        o.tag = "over_guided";
        o.kappa_factor = 10.0;
        w.ensure_recon(0, o);
        EvalOptions eo;
        eo.retrieval = false;
        MetricReport rop = e.evaluate(0, g.tag, eo);
        MetricReport rov = e.evaluate(0, o.tag, eo);
        double l3_op = agg(rop, "twoway_layer3"), l3_ov = agg(rov, "twoway_layer3");
        double v1_op = agg(rop, "braincorr_v1"), v1_ov = agg(rov, "braincorr_v1");
        std::printf("  [7] layer-3 two-way %.4f -> %.4f, early-visual corr %.4f -> %.4f\n", l3_op,
                    l3_ov, v1_op, v1_ov);
        bool sem_drops = l3_ov < l3_op;
        bool v1_holds = v1_ov >= v1_op - kV1HoldSlack;
        EXPECT_TRUE(sem_drops) << "semantic-level identification did not drop at 10x scale";
        EXPECT_TRUE(v1_holds);
        return sem_drops && v1_holds;
    });
}

TEST(Acceptance, GuidanceStabilizesResamplingConsistency) {
    criterion(8, "repeat consistency", [] {
        Workbench& w = W();
        Experiment& e = *w.exp;
        int subjects = static_cast<int>(e.dataset().subjects.size());
        int wins = 0;
        EvalOptions eo;
        eo.retrieval = false;
        for (int s = 0; s < subjects; ++s) {
            ReconOptions g;
            g.tag = "consist_guided";
            g.items = 20;
            g.repeats = 5;
            ReconOptions u = g;
            u.tag = "consist_unguided";
            u.unguided = true;
            w.ensure_recon(s, g);
            w.ensure_recon(s, u);
            double cg = agg(e.evaluate(s, g.tag, eo), "repeat_consistency");
            double cu = agg(e.evaluate(s, u.tag, eo), "repeat_consistency");
            std::printf("  [8] subject %d: guided %.4f vs unguided %.4f\n", s, cg, cu);
            wins += cg > cu ? 1 : 0;
        }
        EXPECT_GE(wins, 3) << "guided repeat consistency must win for at least 3 of 4 subjects";
        return wins >= 3;
    });
}

TEST(Acceptance, VotingRetrievalBeatsChanceAndSemanticOnly) {
    criterion(9, "retrieval", [] {
        Workbench& w = W();
        Experiment& e = *w.exp;
        Dataset& ds = e.dataset();
        int subjects = static_cast<int>(ds.subjects.size());
        bool chance_ok = true;
        double sem_sum = 0.0, vote_sum = 0.0;
        for (int s = 0; s < subjects; ++s) {
            auto hl = e.load_contrastive(s, "highlevel", kSemFlat);
            Tensor sem_q = project_embed(hl.enc, hl.stack, ds.data[s].test_voxels);
            Tensor sem_c = detail::normalize_rows(gather_test_rows(e, e.targets().semantic, s));
            std::vector<Tensor> vq, vc;
            for (int l = 1; l <= 3; ++l) {
                auto gd = e.load_contrastive(s, "guidance" + std::to_string(l), kFeatFlat);
                vq.push_back(project_embed(gd.enc, gd.stack, ds.data[s].test_voxels));
                vc.push_back(detail::normalize_rows(gather_test_rows(e, e.targets().features[l - 1], s)));
            }
            double sem_img = retrieval_top1(sem_q, sem_c);
            double sem_brn = retrieval_top1(sem_c, sem_q);
            double vote_img = vote_retrieval_top1(vq, vc);
            double vote_brn = vote_retrieval_top1(vc, vq);
            std::printf("  [9] subject %d: vote %.2f/%.2f, semantic %.2f/%.2f (image/brain)\n", s,
                        vote_img, vote_brn, sem_img, sem_brn);
            EXPECT_GE(vote_img, kVoteTop1Min) << "subject " << s;
            EXPECT_GE(vote_brn, kVoteTop1Min) << "subject " << s;
            chance_ok = chance_ok && vote_img >= kVoteTop1Min && vote_brn >= kVoteTop1Min;
            sem_sum += sem_img + sem_brn;
            vote_sum += vote_img + vote_brn;
        }
        bool ordering_ok = sem_sum < vote_sum;
        std::printf("  [9] pooled semantic %.4f vs voting %.4f\n", sem_sum / (2 * subjects),
                    vote_sum / (2 * subjects));
        EXPECT_TRUE(ordering_ok) << "semantic-only retrieval must be strictly below voting retrieval";
        return chance_ok && ordering_ok;
    });
}

TEST(Acceptance, PretrainingImprovesSemanticDecoding) {
    criterion(10, "pretrain benefit", [] {
        Workbench& w = W();
        Experiment& e = *w.exp;
        Dataset& ds = e.dataset();
        int subjects = static_cast<int>(ds.subjects.size());
        int wins = 0;
        for (int s = 0; s < subjects; ++s) {
            int n = static_cast<int>(ds.data[s].test_scene_ids.size());
            Tensor truth = gather_test_rows(e, e.targets().semantic, s);
            double ft = dimwise_r(e.decoded_test(s).conds, truth, n, kSemFlat);
            auto scr = e.load_contrastive(s, "highlevel-scratch", kSemFlat);
            Tensor dec = contrastive_decode(scr.enc, scr.stack, ds.data[s].test_voxels,
                                            derive_seed(w.cfg.seeds.sampling, "prior-highlevel", s));
            double sc = dimwise_r(dec, truth, n, kSemFlat);
            std::printf("  [10] subject %d: fine-tuned r=%.4f scratch r=%.4f\n", s, ft, sc);
            wins += ft > sc ? 1 : 0;
        }
        EXPECT_GE(wins, 3) << "fine-tuned decoders must beat scratch for at least 3 of 4 subjects";
        return wins >= 3;
    });
}

TEST(Acceptance, MeasurementGuidanceImprovesEarlyVisualAgreement) {
    criterion(11, "measurement-model guidance variant", [] {
        Workbench& w = W();
        Experiment& e = *w.exp;
        int subjects = static_cast<int>(e.dataset().subjects.size());
        int wins = 0;
        EvalOptions eo;
        eo.retrieval = false;
        for (int s = 0; s < subjects; ++s) {
            ReconOptions b;
            b.tag = "voxelobj_guided";
            b.source = GuidanceSource::brain_encoder;
            b.items = 25;
            ReconOptions u;
            u.tag = "voxelobj_unguided";
            u.unguided = true;
            u.items = 25;
            w.ensure_recon(s, b);
            w.ensure_recon(s, u);
            double vb = agg(e.evaluate(s, b.tag, eo), "braincorr_v1");
            double vu = agg(e.evaluate(s, u.tag, eo), "braincorr_v1");
            std::printf("  [11] subject %d: guided %.4f vs unguided %.4f\n", s, vb, vu);
            wins += vb > vu ? 1 : 0;
        }
        EXPECT_GE(wins, 3);
        return wins >= 3;
    });
}

TEST(Acceptance, RerunsAreByteIdentical) {
    criterion(12, "determinism", [] {
        Workbench& w = W();
        Experiment& e = *w.exp;
        std::filesystem::path dir = e.dir;
        bool ok = true;

        // a second workbench over the same directory stands in for a fresh
        // process: models, dataset and caches all reload from disk
        Experiment e2(w.cfg, dir);

        std::string manifest = slurp(dir / "dataset" / "manifest.json");
        e2.generate();
        ok &= slurp(dir / "dataset" / "manifest.json") == manifest;
        EXPECT_TRUE(ok) << "dataset regeneration changed the manifest";

        ReconOptions o;
        o.tag = "rerun_check";
        o.items = 10;
        e.reconstruct(0, o);
        std::string lat = slurp(dir / "recon" / "s0" / o.tag / "latents.bin");
        std::string man = slurp(dir / "recon" / "s0" / o.tag / "manifest.json");
        e2.reconstruct(0, o);
        bool recon_ok = slurp(dir / "recon" / "s0" / o.tag / "latents.bin") == lat &&
                        slurp(dir / "recon" / "s0" / o.tag / "manifest.json") == man;
        EXPECT_TRUE(recon_ok) << "reconstruction rerun is not byte-identical";

        EvalOptions eo;
        eo.retrieval = false;
        eo.guidance_loss_col = true;
        e.evaluate(0, o.tag, eo);
        std::string csv = slurp(dir / "reports" / ("s0_" + o.tag + ".csv"));
        std::string js = slurp(dir / "reports" / ("s0_" + o.tag + ".json"));
        e2.evaluate(0, o.tag, eo);
        bool eval_ok = slurp(dir / "reports" / ("s0_" + o.tag + ".csv")) == csv &&
                       slurp(dir / "reports" / ("s0_" + o.tag + ".json")) == js;
        EXPECT_TRUE(eval_ok) << "evaluation rerun is not byte-identical";

        return ok && recon_ok && eval_ok;
    });
}

}  // namespace
}  // namespace visrecon
