#pragma once

#include <filesystem>

#include "visrecon/decoders.hpp"

namespace visrecon {

struct TrainHyper {
    int epochs = 30;
    int batch = 21;
    double peak_lr = 3e-4;
    double weight_decay = 1e-4;
    double alpha = 30.0;
    double beta = 0.25;
    double tau = 0.07;
    std::uint64_t seed = 0;
    std::string checkpoint;  // optional: per-epoch snapshots, enables resume
    int halt_after = -1;     // stop once this many epochs are done (keeps the
                             // learning-rate schedule of the full run)
};

struct TrainLog {
    std::vector<double> contrastive;
    std::vector<double> prior;
    std::vector<double> mae;
    int switch_epoch = 0;  // first epoch index trained with soft targets
};

// training-side view of one subject: unaveraged records plus the row of
// scene_targets each record corresponds to
struct SubjectRecords {
    Tensor voxels;  // [R, d]
    std::vector<int> rec_scene;
};

struct ContrastiveStack {
    int dim = 0;
    Backbone backbone;
    Projector projector;
    DiffusionPrior prior;

    ContrastiveStack() = default;
    ContrastiveStack(int target_dim, std::uint64_t seed)
        : dim(target_dim),
          backbone(target_dim, derive_seed(seed, "stack-backbone")),
          projector(target_dim, derive_seed(seed, "stack-projector")),
          prior(target_dim, derive_seed(seed, "stack-prior")) {}

    void export_to(TensorMap& tm, const std::string& prefix) const {
        backbone.ps.export_to(tm, prefix + "bb.");
        projector.ps.export_to(tm, prefix + "proj.");
        prior.ps.export_to(tm, prefix + "prior.");
        tm.put(prefix + "prior.trained", Tensor::scalar(prior.trained ? 1.0 : 0.0));
    }

    void import_from(const TensorMap& tm, const std::string& prefix) {
        backbone.ps.import_from(tm, prefix + "bb.");
        projector.ps.import_from(tm, prefix + "proj.");
        prior.ps.import_from(tm, prefix + "prior.");
        prior.trained = tm.get(prefix + "prior.trained")[0] != 0.0;
    }
};

struct LowLevelStack {
    Backbone backbone;
    Upsampler up;
    Projector projector;
    LatentStats stats;

    LowLevelStack() = default;
    explicit LowLevelStack(std::uint64_t seed)
        : backbone(kSharedDim, derive_seed(seed, "low-backbone")),
          up(derive_seed(seed, "low-upsampler")),
          projector(kSharedDim, derive_seed(seed, "low-projector")) {}

    void export_to(TensorMap& tm, const std::string& prefix) const {
        backbone.ps.export_to(tm, prefix + "bb.");
        up.ps.export_to(tm, prefix + "up.");
        projector.ps.export_to(tm, prefix + "proj.");
        Tensor st({2});
        st.v[0] = stats.mu;
        st.v[1] = stats.sigma;
        tm.put(prefix + "stats", st);
    }

    void import_from(const TensorMap& tm, const std::string& prefix) {
        backbone.ps.import_from(tm, prefix + "bb.");
        up.ps.import_from(tm, prefix + "up.");
        projector.ps.import_from(tm, prefix + "proj.");
        const Tensor& st = tm.get(prefix + "stats");
        stats.mu = st.v[0];
        stats.sigma = st.v[1];
    }
};

// ---- batch assembly ----

struct ContrastiveBatch {
    Tensor voxels;        // [B, d], convexly mixed during the mixco phase
    Tensor targets;       // [B, D]
    Tensor targets_norm;  // [B, D]
    bool mixed = false;
    std::vector<double> lambda;
    std::vector<int> pairing;
    Tensor noisy;  // [B, D] corrupted targets for the prior term
    Tensor temb;   // [B, kPriorTembDim]
};

namespace detail {

inline Tensor gather_rows(const Tensor& src, const std::vector<int>& rows) {
    int d = src.shape[1];
    Tensor out({static_cast<int>(rows.size()), d});
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy(src.v.begin() + rows[i] * d, src.v.begin() + (rows[i] + 1) * d, out.v.begin() + i * d);
    return out;
}

inline Tensor normalize_rows(const Tensor& m) {
    Tensor out = m;
    int n = m.shape[0], d = m.shape[1];
    for (int i = 0; i < n; ++i) {
        double nrm = out.mat(n, d).row(i).norm();
        if (nrm > 0.0) out.mat(n, d).row(i) /= nrm;
    }
    return out;
}

}  // namespace detail

inline ContrastiveBatch make_contrastive_batch(const SubjectRecords& rec, const Tensor& scene_targets,
                                               const std::vector<int>& idx, bool mixed,
                                               const NoiseSchedule& prior_sched, Rng& rng) {
    ContrastiveBatch b;
    int bs = static_cast<int>(idx.size());
    int d = rec.voxels.shape[1];
    int dim = scene_targets.shape[1];
    b.voxels = detail::gather_rows(rec.voxels, idx);
    std::vector<int> scenes(bs);
    for (int i = 0; i < bs; ++i) scenes[i] = rec.rec_scene[idx[i]];
    b.targets = detail::gather_rows(scene_targets, scenes);
    b.targets_norm = detail::normalize_rows(b.targets);
    b.mixed = mixed;
    if (mixed) {
        b.pairing = rng.permutation(bs);
        b.lambda.resize(bs);
        for (int i = 0; i < bs; ++i) b.lambda[i] = rng.beta(0.2, 0.2);
        Tensor mixed_v({bs, d});
        for (int i = 0; i < bs; ++i) {
            double l = b.lambda[i];
            int k = b.pairing[i];
            for (int j = 0; j < d; ++j)
                mixed_v.v[i * d + j] = l * b.voxels.v[i * d + j] + (1.0 - l) * b.voxels.v[k * d + j];
        }
        b.voxels = std::move(mixed_v);
    }
    std::vector<int> ts(bs);
    b.noisy = Tensor({bs, dim});
    for (int i = 0; i < bs; ++i) {
        ts[i] = rng.uniform_int(prior_sched.T);
        double ab = prior_sched.ab(ts[i]);
        for (int j = 0; j < dim; ++j)
            b.noisy.v[i * dim + j] = std::sqrt(ab) * b.targets.v[i * dim + j] + std::sqrt(1.0 - ab) * rng.normal();
    }
    b.temb = timestep_embedding_batch(ts, kPriorTembDim);
    return b;
}

struct ContrastiveLossNodes {
    int total = -1;
    int contrastive = -1;
    int prior = -1;
};

inline ContrastiveLossNodes contrastive_batch_loss(Graph& g, const VoxelEncoder& enc, const Bound& eb,
                                                   const ContrastiveStack& st, const Bound& bb, const Bound& pb,
                                                   const Bound& prb, const ContrastiveBatch& batch, double tau,
                                                   double alpha) {
    ContrastiveLossNodes out;
    int shared = enc.forward(g, eb, g.input(batch.voxels));
    int feat = st.backbone.forward(g, bb, shared);
    int proj = g.row_normalize(st.projector.forward(g, pb, feat));
    if (batch.mixed)
        out.contrastive = mixco_loss_op(g, proj, g.input(batch.targets_norm), batch.lambda, batch.pairing, tau);
    else
        out.contrastive = softclip_loss_op(g, proj, batch.targets_norm, tau);
    int pred = st.prior.forward(g, prb, g.input(batch.noisy), feat, g.input(batch.temb));
    out.prior = g.mean_sq_err(pred, g.input(batch.targets));
    out.total = g.sum_scalars({out.contrastive, g.scale(out.prior, alpha)});
    return out;
}

struct LowLevelLossNodes {
    int total = -1;
    int mae = -1;
    int contrastive = -1;
};

inline LowLevelLossNodes lowlevel_batch_loss(Graph& g, const VoxelEncoder& enc, const Bound& eb,
                                             const LowLevelStack& st, const Bound& bb, const Bound& ub,
                                             const Bound& pb, const ContrastiveBatch& batch, double tau,
                                             double beta) {
    LowLevelLossNodes out;
    int bs = batch.voxels.shape[0];
    int shared = enc.forward(g, eb, g.input(batch.voxels));
    int feat = st.backbone.forward(g, bb, shared);
    int zhat = st.up.forward(g, ub, feat);
    int ztgt = g.input(batch.targets.reshaped({bs, kLatentC, kLatentH, kLatentW}));
    out.mae = g.mean_abs_err(zhat, ztgt);
    int proj = g.row_normalize(st.projector.forward(g, pb, feat));
    out.contrastive = softclip_loss_op(g, proj, batch.targets_norm, tau);
    out.total = g.sum_scalars({out.mae, g.scale(out.contrastive, beta)});
    return out;
}

// ---- checkpoint plumbing for resumable epochs ----

namespace detail {

struct TrainStateIo {
    std::vector<std::pair<std::string, ParamSet*>> params;
    std::vector<std::pair<std::string, AdamW*>> opts;
    std::vector<std::pair<std::string, std::vector<double>*>> logs;

    void save(const std::string& path, const Rng& rng, int epochs_done) const {
        TensorMap tm;
        for (auto& [name, ps] : params) ps->export_to(tm, name + ".");
        for (auto& [name, op] : opts) op->export_to(tm, name + ".opt.");
        for (auto& [name, log] : logs) {
            Tensor t({static_cast<int>(log->size())});
            t.v.assign(log->begin(), log->end());
            tm.put("log." + name, t);
        }
        save_tensors(path, tm, {{"epochs_done", std::to_string(epochs_done)}, {"rng", rng.save_state()}});
    }

    // returns the number of completed epochs, or 0 when starting fresh
    int load(const std::string& path, Rng& rng) const {
        if (path.empty() || !std::filesystem::exists(path)) return 0;
        std::map<std::string, std::string> meta;
        TensorMap tm = load_tensors(path, &meta);
        for (auto& [name, ps] : params) ps->import_from(tm, name + ".");
        for (auto& [name, op] : opts) op->import_from(tm, name + ".opt.");
        for (auto& [name, log] : logs) {
            const Tensor& t = tm.get("log." + name);
            log->assign(t.v.begin(), t.v.end());
        }
        rng.load_state(meta.at("rng"));
        return std::stoi(meta.at("epochs_done"));
    }
};

inline std::vector<std::vector<std::vector<int>>> epoch_batches(const std::vector<const SubjectRecords*>& subj,
                                                                int batch, Rng& rng) {
    std::vector<std::vector<std::vector<int>>> per_subject;
    for (const SubjectRecords* r : subj) {
        int n = r->voxels.shape[0];
        std::vector<int> perm = rng.permutation(n);
        std::vector<std::vector<int>> batches;
        for (int k = 0; k * batch < n; ++k) {
            int lo = k * batch, hi = std::min(n, lo + batch);
            if (hi - lo < 2) break;  // contrastive terms need at least a pair
            batches.emplace_back(perm.begin() + lo, perm.begin() + hi);
        }
        per_subject.push_back(std::move(batches));
    }
    return per_subject;
}

inline long total_batches(const std::vector<const SubjectRecords*>& subj, int batch) {
    long n = 0;
    for (const SubjectRecords* r : subj) {
        int rows = r->voxels.shape[0];
        for (int k = 0; k * batch < rows; ++k)
            if (std::min(rows, (k + 1) * batch) - k * batch >= 2) ++n;
    }
    return n;
}

}  // namespace detail

// mixco epochs first, soft-target epochs after the switch point; one shared
// decoder stack, one encoder (and optimizer) per subject, round-robin batches
inline TrainLog train_contrastive(std::vector<VoxelEncoder>& encs, ContrastiveStack& st,
                                  const std::vector<const SubjectRecords*>& subj, const Tensor& scene_targets,
                                  const TrainHyper& h) {
    check(encs.size() == subj.size() && !subj.empty(), "train_contrastive: encoder/subject mismatch");
    check(scene_targets.rank() == 2 && scene_targets.shape[1] == st.dim,
          "train_contrastive: target dim mismatch");
    TrainLog log;
    log.switch_epoch = (h.epochs + 2) / 3;
    Rng rng(derive_seed(h.seed, "contrastive-train"));
    std::vector<AdamW> enc_opt;
    for (auto& e : encs) enc_opt.emplace_back(e.ps, 0.9, 0.999, 1e-8, h.weight_decay);
    AdamW bb_opt(st.backbone.ps, 0.9, 0.999, 1e-8, h.weight_decay);
    AdamW proj_opt(st.projector.ps, 0.9, 0.999, 1e-8, h.weight_decay);
    AdamW prior_opt(st.prior.ps, 0.9, 0.999, 1e-8, h.weight_decay);

    detail::TrainStateIo io;
    for (std::size_t s = 0; s < encs.size(); ++s) {
        io.params.emplace_back("enc" + std::to_string(s), &encs[s].ps);
        io.opts.emplace_back("enc" + std::to_string(s), &enc_opt[s]);
    }
    io.params.emplace_back("bb", &st.backbone.ps);
    io.params.emplace_back("proj", &st.projector.ps);
    io.params.emplace_back("prior", &st.prior.ps);
    io.opts.emplace_back("bb", &bb_opt);
    io.opts.emplace_back("proj", &proj_opt);
    io.opts.emplace_back("prior", &prior_opt);
    io.logs.emplace_back("contrastive", &log.contrastive);
    io.logs.emplace_back("prior", &log.prior);
    int start_epoch = io.load(h.checkpoint, rng);

    long total_steps = static_cast<long>(h.epochs) * detail::total_batches(subj, h.batch);
    int end_epoch = h.halt_after >= 0 ? std::min(h.halt_after, h.epochs) : h.epochs;
    for (int epoch = start_epoch; epoch < end_epoch; ++epoch) {
        bool mixed = epoch < log.switch_epoch;
        auto batches = detail::epoch_batches(subj, h.batch, rng);
        std::size_t rounds = 0;
        for (auto& bs : batches) rounds = std::max(rounds, bs.size());
        double con_sum = 0.0, prior_sum = 0.0;
        long n_batches = 0;
        for (std::size_t k = 0; k < rounds; ++k) {
            for (std::size_t s = 0; s < subj.size(); ++s) {
                if (k >= batches[s].size()) continue;
                ContrastiveBatch batch =
                    make_contrastive_batch(*subj[s], scene_targets, batches[s][k], mixed, st.prior.sched, rng);
                Graph g;
                Bound eb = bind(g, encs[s].ps);
                Bound bb = bind(g, st.backbone.ps);
                Bound pb = bind(g, st.projector.ps);
                Bound prb = bind(g, st.prior.ps);
                ContrastiveLossNodes nodes = contrastive_batch_loss(g, encs[s], eb, st, bb, pb, prb, batch,
                                                                    h.tau, h.alpha);
                double total = g.val(nodes.total)[0];
                if (!std::isfinite(total)) throw numeric_error("train_contrastive: non-finite loss");
                con_sum += g.val(nodes.contrastive)[0];
                prior_sum += g.val(nodes.prior)[0];
                g.backward(nodes.total);
                double lr = one_cycle_lr(h.peak_lr, bb_opt.steps_taken(), total_steps);
                enc_opt[s].step(encs[s].ps, g, eb, lr);
                bb_opt.step(st.backbone.ps, g, bb, lr);
                proj_opt.step(st.projector.ps, g, pb, lr);
                prior_opt.step(st.prior.ps, g, prb, lr);
                ++n_batches;
            }
        }
        log.contrastive.push_back(con_sum / n_batches);
        log.prior.push_back(prior_sum / n_batches);
        if (!h.checkpoint.empty()) io.save(h.checkpoint, rng, epoch + 1);
    }
    if (end_epoch == h.epochs) st.prior.trained = true;
    return log;
}

inline TrainLog train_lowlevel(std::vector<VoxelEncoder>& encs, LowLevelStack& st,
                               const std::vector<const SubjectRecords*>& subj, const Tensor& scene_latents,
                               const TrainHyper& h) {
    check(encs.size() == subj.size() && !subj.empty(), "train_lowlevel: encoder/subject mismatch");
    check(scene_latents.rank() == 2 && scene_latents.shape[1] == kLatentC * kLatentH * kLatentW,
          "train_lowlevel: latent dim mismatch");
    TrainLog log;
    Rng rng(derive_seed(h.seed, "lowlevel-train"));
    NoiseSchedule dummy = make_schedule(kPriorSteps, 1e-4, 0.05, ScheduleKind::linear);
    std::vector<AdamW> enc_opt;
    for (auto& e : encs) enc_opt.emplace_back(e.ps, 0.9, 0.999, 1e-8, h.weight_decay);
    AdamW bb_opt(st.backbone.ps, 0.9, 0.999, 1e-8, h.weight_decay);
    AdamW up_opt(st.up.ps, 0.9, 0.999, 1e-8, h.weight_decay);
    AdamW proj_opt(st.projector.ps, 0.9, 0.999, 1e-8, h.weight_decay);

    detail::TrainStateIo io;
    for (std::size_t s = 0; s < encs.size(); ++s) {
        io.params.emplace_back("enc" + std::to_string(s), &encs[s].ps);
        io.opts.emplace_back("enc" + std::to_string(s), &enc_opt[s]);
    }
    io.params.emplace_back("bb", &st.backbone.ps);
    io.params.emplace_back("up", &st.up.ps);
    io.params.emplace_back("proj", &st.projector.ps);
    io.opts.emplace_back("bb", &bb_opt);
    io.opts.emplace_back("up", &up_opt);
    io.opts.emplace_back("proj", &proj_opt);
    io.logs.emplace_back("mae", &log.mae);
    io.logs.emplace_back("contrastive", &log.contrastive);
    int start_epoch = io.load(h.checkpoint, rng);

    long total_steps = static_cast<long>(h.epochs) * detail::total_batches(subj, h.batch);
    int end_epoch = h.halt_after >= 0 ? std::min(h.halt_after, h.epochs) : h.epochs;
    for (int epoch = start_epoch; epoch < end_epoch; ++epoch) {
        auto batches = detail::epoch_batches(subj, h.batch, rng);
        std::size_t rounds = 0;
        for (auto& bs : batches) rounds = std::max(rounds, bs.size());
        double mae_sum = 0.0, con_sum = 0.0;
        long n_batches = 0;
        for (std::size_t k = 0; k < rounds; ++k) {
            for (std::size_t s = 0; s < subj.size(); ++s) {
                if (k >= batches[s].size()) continue;
                ContrastiveBatch batch =
                    make_contrastive_batch(*subj[s], scene_latents, batches[s][k], false, dummy, rng);
                Graph g;
                Bound eb = bind(g, encs[s].ps);
                Bound bb = bind(g, st.backbone.ps);
                Bound ub = bind(g, st.up.ps);
                Bound pb = bind(g, st.projector.ps);
                LowLevelLossNodes nodes = lowlevel_batch_loss(g, encs[s], eb, st, bb, ub, pb, batch, h.tau, h.beta);
                double total = g.val(nodes.total)[0];
                if (!std::isfinite(total)) throw numeric_error("train_lowlevel: non-finite loss");
                mae_sum += g.val(nodes.mae)[0];
                con_sum += g.val(nodes.contrastive)[0];
                g.backward(nodes.total);
                double lr = one_cycle_lr(h.peak_lr, bb_opt.steps_taken(), total_steps);
                enc_opt[s].step(encs[s].ps, g, eb, lr);
                bb_opt.step(st.backbone.ps, g, bb, lr);
                up_opt.step(st.up.ps, g, ub, lr);
                proj_opt.step(st.projector.ps, g, pb, lr);
                ++n_batches;
            }
        }
        log.mae.push_back(mae_sum / n_batches);
        log.contrastive.push_back(con_sum / n_batches);
        if (!h.checkpoint.empty()) io.save(h.checkpoint, rng, epoch + 1);
    }
    // alignment statistics come from the true latents this stage trained on
    std::vector<int> all_scenes;
    for (const SubjectRecords* r : subj)
        for (int sc : r->rec_scene) all_scenes.push_back(sc);
    st.stats = population_stats(detail::gather_rows(scene_latents, all_scenes));
    return log;
}

// ---- decode-time helpers ----

inline Tensor backbone_features(const VoxelEncoder& enc, const Backbone& bb, const Tensor& voxels) {
    Graph g;
    Bound eb = bind_frozen(g, enc.ps);
    Bound bbb = bind_frozen(g, bb.ps);
    return g.val(bb.forward(g, bbb, enc.forward(g, eb, g.input(voxels))));
}

// normalized projector outputs, the retrieval-side embedding
inline Tensor project_embed(const VoxelEncoder& enc, const ContrastiveStack& st, const Tensor& voxels) {
    Graph g;
    Bound eb = bind_frozen(g, enc.ps);
    Bound bbb = bind_frozen(g, st.backbone.ps);
    Bound pb = bind_frozen(g, st.projector.ps);
    int feat = st.backbone.forward(g, bbb, enc.forward(g, eb, g.input(voxels)));
    return g.val(g.row_normalize(st.projector.forward(g, pb, feat)));
}

// full decode: encoder -> backbone -> diffusion prior reverse chain
inline Tensor contrastive_decode(const VoxelEncoder& enc, const ContrastiveStack& st, const Tensor& voxels,
                                 std::uint64_t sample_seed) {
    return st.prior.sample(backbone_features(enc, st.backbone, voxels), sample_seed);
}

// raw latent prediction; callers apply momentum_align with st.stats
inline Tensor lowlevel_decode(const VoxelEncoder& enc, const LowLevelStack& st, const Tensor& voxels) {
    Graph g;
    Bound eb = bind_frozen(g, enc.ps);
    Bound bbb = bind_frozen(g, st.backbone.ps);
    Bound ub = bind_frozen(g, st.up.ps);
    int feat = st.backbone.forward(g, bbb, enc.forward(g, eb, g.input(voxels)));
    return g.val(st.up.forward(g, ub, feat));
}

// ---- pretrain on other subjects, then fine-tune a fresh target encoder ----

struct FinetuneResult {
    VoxelEncoder encoder;
    TrainLog pretrain_log;
    TrainLog finetune_log;
};

inline FinetuneResult pretrain_then_finetune(ContrastiveStack& st,
                                             const std::vector<const SubjectRecords*>& others,
                                             const SubjectRecords& target, const Tensor& scene_targets,
                                             const TrainHyper& h) {
    check(!others.empty(), "pretrain_then_finetune: no pretraining subjects");
    FinetuneResult out;
    std::vector<VoxelEncoder> pre_encs;
    for (std::size_t s = 0; s < others.size(); ++s)
        pre_encs.emplace_back(others[s]->voxels.shape[1], derive_seed(h.seed, "pretrain-encoder", s));
    TrainHyper pre = h;
    pre.seed = derive_seed(h.seed, "pretrain");
    if (!h.checkpoint.empty()) pre.checkpoint = h.checkpoint + ".pre";
    out.pretrain_log = train_contrastive(pre_encs, st, others, scene_targets, pre);

    out.encoder = VoxelEncoder(target.voxels.shape[1], derive_seed(h.seed, "finetune-encoder"));
    std::vector<VoxelEncoder> fit_encs{out.encoder};
    TrainHyper fit = h;
    fit.seed = derive_seed(h.seed, "finetune");
    if (!h.checkpoint.empty()) fit.checkpoint = h.checkpoint + ".fit";
    out.finetune_log = train_contrastive(fit_encs, st, {&target}, scene_targets, fit);
    out.encoder = std::move(fit_encs[0]);
    return out;
}

inline FinetuneResult pretrain_then_finetune_lowlevel(LowLevelStack& st,
                                                      const std::vector<const SubjectRecords*>& others,
                                                      const SubjectRecords& target, const Tensor& scene_latents,
                                                      const TrainHyper& h) {
    check(!others.empty(), "pretrain_then_finetune_lowlevel: no pretraining subjects");
    FinetuneResult out;
    std::vector<VoxelEncoder> pre_encs;
    for (std::size_t s = 0; s < others.size(); ++s)
        pre_encs.emplace_back(others[s]->voxels.shape[1], derive_seed(h.seed, "pretrain-encoder", s));
    TrainHyper pre = h;
    pre.seed = derive_seed(h.seed, "pretrain");
    if (!h.checkpoint.empty()) pre.checkpoint = h.checkpoint + ".pre";
    out.pretrain_log = train_lowlevel(pre_encs, st, others, scene_latents, pre);

    out.encoder = VoxelEncoder(target.voxels.shape[1], derive_seed(h.seed, "finetune-encoder"));
    std::vector<VoxelEncoder> fit_encs{out.encoder};
    TrainHyper fit = h;
    fit.seed = derive_seed(h.seed, "finetune");
    if (!h.checkpoint.empty()) fit.checkpoint = h.checkpoint + ".fit";
    out.finetune_log = train_lowlevel(fit_encs, st, {&target}, scene_latents, fit);
    out.encoder = std::move(fit_encs[0]);
    return out;
}

}  // namespace visrecon
