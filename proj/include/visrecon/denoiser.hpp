#pragma once

#include "visrecon/diffusion.hpp"
#include "visrecon/feature_space.hpp"
#include "visrecon/nn.hpp"

namespace visrecon {

constexpr int kTembDim = 64;

// Compact conditional noise predictor over 4x8x8 latents: conv encoder-decoder
// with two stride-2 stages, additive skips, per-stage timestep biases and a
// learned softmax pooling of the semantic tokens feeding per-stage condition
// biases. Head is zero-initialized so the untrained net predicts zero noise.
class Denoiser {
public:
    explicit Denoiser(std::uint64_t seed) {
        Rng rng(derive_seed(seed, "denoiser-init"));
        auto conv = [&](const char* name, int o, int c, int k, double gain = 1.0) {
            idx_.push_back(ps.add(std::string(name) + ".w", init_weight({o, c, k, k}, rng, gain)));
            idx_.push_back(ps.add(std::string(name) + ".b", Tensor({o})));
        };
        conv("stem", c1_, kLatentC, 3);
        conv("block1", c1_, c1_, 3);
        conv("down1", c2_, c1_, 3);
        conv("block2", c2_, c2_, 3);
        conv("down2", c3_, c2_, 3);
        conv("mid", c3_, c3_, 3);
        // transposed convs store weights as [in, out, k, k]
        idx_.push_back(ps.add("up1.w", init_weight({c3_, c2_, 2, 2}, rng)));
        idx_.push_back(ps.add("up1.b", Tensor({c2_})));
        conv("dec1", c2_, c2_, 3);
        idx_.push_back(ps.add("up2.w", init_weight({c2_, c1_, 2, 2}, rng)));
        idx_.push_back(ps.add("up2.b", Tensor({c1_})));
        conv("dec2", c1_, c1_, 3);
        idx_.push_back(ps.add("head.w", Tensor({kLatentC, c1_, 3, 3})));
        idx_.push_back(ps.add("head.b", Tensor({kLatentC})));
        idx_.push_back(ps.add("pool.u", Tensor({kSemTokens})));
        auto dense = [&](const char* name, int o, int i) {
            idx_.push_back(ps.add(std::string(name) + ".w", init_weight({o, i}, rng)));
            idx_.push_back(ps.add(std::string(name) + ".b", Tensor({o})));
        };
        dense("temb1", c1_, kTembDim);
        dense("temb2", c2_, kTembDim);
        dense("temb3", c3_, kTembDim);
        dense("cond1", c1_, kSemDim);
        dense("cond2", c2_, kSemDim);
        dense("cond3", c3_, kSemDim);
    }

    ParamSet ps;

    // z [N,4,8,8], temb [N,64], c [N,8,64] -> eps prediction [N,4,8,8]
    int forward(Graph& g, const Bound& bp, int z, int temb, int c) const {
        int i = 0;
        auto next2 = [&]() {
            int a = bp[idx_[i]], b = bp[idx_[i + 1]];
            i += 2;
            return std::pair<int, int>{a, b};
        };
        auto [stem_w, stem_b] = next2();
        auto [b1_w, b1_b] = next2();
        auto [d1_w, d1_b] = next2();
        auto [b2_w, b2_b] = next2();
        auto [d2_w, d2_b] = next2();
        auto [mid_w, mid_b] = next2();
        auto [u1_w, u1_b] = next2();
        auto [e1_w, e1_b] = next2();
        auto [u2_w, u2_b] = next2();
        auto [e2_w, e2_b] = next2();
        auto [hd_w, hd_b] = next2();
        int pool_u = bp[idx_[i++]];
        auto [t1_w, t1_b] = next2();
        auto [t2_w, t2_b] = next2();
        auto [t3_w, t3_b] = next2();
        auto [q1_w, q1_b] = next2();
        auto [q2_w, q2_b] = next2();
        auto [q3_w, q3_b] = next2();

        int cp = g.token_pool(c, pool_u);  // [N,64]
        int tb1 = g.linear(temb, t1_w, t1_b), cb1 = g.linear(cp, q1_w, q1_b);
        int tb2 = g.linear(temb, t2_w, t2_b), cb2 = g.linear(cp, q2_w, q2_b);
        int tb3 = g.linear(temb, t3_w, t3_b), cb3 = g.linear(cp, q3_w, q3_b);

        auto res_block = [&](int x, int w, int b, int tb, int cb) {
            int h = g.conv2d(x, w, b, 1, 1);
            h = g.bias_nchw(h, tb);
            h = g.bias_nchw(h, cb);
            return g.add(x, g.silu(h));
        };

        int x = g.conv2d(z, stem_w, stem_b, 1, 1);          // [N,24,8,8]
        int s1 = res_block(x, b1_w, b1_b, tb1, cb1);
        x = g.conv2d(s1, d1_w, d1_b, 2, 1);                 // [N,48,4,4]
        int s2 = res_block(x, b2_w, b2_b, tb2, cb2);
        x = g.conv2d(s2, d2_w, d2_b, 2, 1);                 // [N,96,2,2]
        x = res_block(x, mid_w, mid_b, tb3, cb3);
        x = g.conv2d_transpose(x, u1_w, u1_b, 2);           // [N,48,4,4]
        x = g.add(x, s2);
        x = g.add(x, g.silu(g.conv2d(x, e1_w, e1_b, 1, 1)));
        x = g.conv2d_transpose(x, u2_w, u2_b, 2);           // [N,24,8,8]
        x = g.add(x, s1);
        x = g.add(x, g.silu(g.conv2d(x, e2_w, e2_b, 1, 1)));
        return g.conv2d(x, hd_w, hd_b, 1, 1);               // [N,4,8,8]
    }

    // single-sample evaluation eps_theta(z_t, t, c)
    Tensor denoiser_forward(const Tensor& z, int t, const Tensor& c) const {
        check_latent(z, "denoiser_forward");
        check(c.shape == std::vector<int>{kSemTokens, kSemDim}, "denoiser_forward: bad condition shape");
        Graph g;
        Bound bp = bind_frozen(g, ps);
        int zi = g.input(z.reshaped({1, kLatentC, kLatentH, kLatentW}));
        int ti = g.input(timestep_embedding(static_cast<double>(t), kTembDim).reshaped({1, kTembDim}));
        int ci = g.input(c.reshaped({1, kSemTokens, kSemDim}));
        int out = forward(g, bp, zi, ti, ci);
        return g.val(out).reshaped(latent_shape());
    }

    // one batched graph evaluation for the conditional/unconditional pair
    Tensor eval_cfg(const Tensor& z, int t, const Tensor& c, const Tensor& null_c, double scale) const {
        Graph g;
        Bound bp = bind_frozen(g, ps);
        Tensor z2({2, kLatentC, kLatentH, kLatentW});
        std::copy(z.v.begin(), z.v.end(), z2.v.begin());
        std::copy(z.v.begin(), z.v.end(), z2.v.begin() + z.numel());
        Tensor c2({2, kSemTokens, kSemDim});
        std::copy(c.v.begin(), c.v.end(), c2.v.begin());
        std::copy(null_c.v.begin(), null_c.v.end(), c2.v.begin() + c.numel());
        Tensor te = timestep_embedding(static_cast<double>(t), kTembDim);
        Tensor t2({2, kTembDim});
        std::copy(te.v.begin(), te.v.end(), t2.v.begin());
        std::copy(te.v.begin(), te.v.end(), t2.v.begin() + kTembDim);
        int out = forward(g, bp, g.input(z2), g.input(t2), g.input(c2));
        const Tensor& both = g.val(out);
        Tensor eps_c(latent_shape()), eps_u(latent_shape());
        std::copy(both.v.begin(), both.v.begin() + eps_c.numel(), eps_c.v.begin());
        std::copy(both.v.begin() + eps_c.numel(), both.v.end(), eps_u.v.begin());
        return cfg_epsilon(eps_c, eps_u, scale);
    }

private:
    static constexpr int c1_ = 24, c2_ = 48, c3_ = 96;
    std::vector<int> idx_;
};

struct DenoiserTrainLog {
    std::vector<double> epoch_loss;
    double first_batch_loss = 0.0;
    long dropped_conditions = 0;
    long total_samples = 0;
};

struct DenoiserTrainConfig {
    int epochs = 24;
    int batch = 21;
    double peak_lr = 3e-4;
    double weight_decay = 1e-4;
    double cond_dropout = 0.1;
    std::uint64_t seed = 0;
    std::string checkpoint;  // optional: per-epoch snapshots, enables resume
    int halt_after = -1;
};

// dataset: paired clean latents [M,4,8,8] and conditions [M,8,64]
inline DenoiserTrainLog train_denoiser(Denoiser& den, const Tensor& latents, const Tensor& conds,
                                       const NoiseSchedule& sched, const DenoiserTrainConfig& tc) {
    int M = latents.shape.empty() ? 0 : latents.shape[0];
    if (M == 0) throw data_error("train_denoiser: empty dataset");
    check(latents.shape == std::vector<int>{M, kLatentC, kLatentH, kLatentW}, "train_denoiser: latent shape");
    check(conds.shape == std::vector<int>{M, kSemTokens, kSemDim}, "train_denoiser: condition shape");

    DenoiserTrainLog log;
    AdamW opt(den.ps, 0.9, 0.999, 1e-8, tc.weight_decay);
    Rng rng(derive_seed(tc.seed, "denoiser-train"));
    int batches_per_epoch = (M + tc.batch - 1) / tc.batch;
    long total_steps = static_cast<long>(batches_per_epoch) * tc.epochs;
    long step = 0;

    int start_epoch = 0;
    if (!tc.checkpoint.empty() && std::filesystem::exists(tc.checkpoint)) {
        std::map<std::string, std::string> meta;
        TensorMap tm = load_tensors(tc.checkpoint, &meta);
        den.ps.import_from(tm, "den.");
        opt.import_from(tm, "den.opt.");
        const Tensor& el_t = tm.get("log.epoch_loss");
        log.epoch_loss.assign(el_t.v.begin(), el_t.v.end());
        log.first_batch_loss = tm.get("log.counters").v[0];
        log.dropped_conditions = static_cast<long>(tm.get("log.counters").v[1]);
        log.total_samples = static_cast<long>(tm.get("log.counters").v[2]);
        rng.load_state(meta.at("rng"));
        start_epoch = std::stoi(meta.at("epochs_done"));
        step = static_cast<long>(start_epoch) * batches_per_epoch;
    }

    int zlen = kLatentC * kLatentH * kLatentW;
    int clen = kSemTokens * kSemDim;
    int end_epoch = tc.halt_after >= 0 ? std::min(tc.halt_after, tc.epochs) : tc.epochs;
    for (int epoch = start_epoch; epoch < end_epoch; ++epoch) {
        std::vector<int> order = rng.permutation(M);
        double acc = 0.0;
        int nb = 0;
        for (int b0 = 0; b0 < M; b0 += tc.batch) {
            int n = std::min(tc.batch, M - b0);
            Tensor zt({n, kLatentC, kLatentH, kLatentW});
            Tensor eps({n, kLatentC, kLatentH, kLatentW});
            Tensor cb({n, kSemTokens, kSemDim});
            std::vector<int> ts(n);
            for (int k = 0; k < n; ++k) {
                int item = order[b0 + k];
                ts[k] = static_cast<int>(rng.uniform_int(sched.T));
                double ab = sched.ab(ts[k]);
                for (int j = 0; j < zlen; ++j) {
                    double e = rng.normal();
                    eps.v[k * zlen + j] = e;
                    zt.v[k * zlen + j] =
                        std::sqrt(ab) * latents.v[item * zlen + j] + std::sqrt(1.0 - ab) * e;
                }
                bool drop = rng.uniform() < tc.cond_dropout;
                log.dropped_conditions += drop ? 1 : 0;
                ++log.total_samples;
                if (!drop)
                    std::copy(conds.v.begin() + item * clen, conds.v.begin() + (item + 1) * clen,
                              cb.v.begin() + k * clen);
            }
            Graph g;
            Bound bp = bind(g, den.ps);
            int pred = den.forward(g, bp, g.input(zt), g.input(timestep_embedding_batch(ts, kTembDim)),
                                   g.input(cb));
            int loss = g.mean_sq_err(pred, g.input(eps));
            g.backward(loss);
            double lv = g.val(loss)[0];
            if (!std::isfinite(lv)) throw numeric_error("train_denoiser: non-finite loss");
            if (step == 0) log.first_batch_loss = lv;
            opt.step(den.ps, g, bp, one_cycle_lr(tc.peak_lr, step, total_steps));
            ++step;
            acc += lv;
            ++nb;
        }
        log.epoch_loss.push_back(acc / nb);
        if (!tc.checkpoint.empty()) {
            TensorMap tm;
            den.ps.export_to(tm, "den.");
            opt.export_to(tm, "den.opt.");
            Tensor el({static_cast<int>(log.epoch_loss.size())});
            el.v.assign(log.epoch_loss.begin(), log.epoch_loss.end());
            tm.put("log.epoch_loss", el);
            Tensor counters({3});
            counters.v = {log.first_batch_loss, static_cast<double>(log.dropped_conditions),
                          static_cast<double>(log.total_samples)};
            tm.put("log.counters", counters);
            save_tensors(tc.checkpoint, tm,
                         {{"epochs_done", std::to_string(epoch + 1)}, {"rng", rng.save_state()}});
        }
    }
    return log;
}

}  // namespace visrecon
