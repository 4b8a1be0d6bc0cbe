#pragma once

#include "visrecon/brain.hpp"
#include "visrecon/nn.hpp"
#include "visrecon/schedule.hpp"

namespace visrecon {

constexpr int kSharedDim = 256;
constexpr int kPriorSteps = 100;
constexpr int kPriorTembDim = 32;
constexpr int kHidden = 128;

// ---- building blocks ----

struct VoxelEncoder {
    int d = 0;
    ParamSet ps;

    VoxelEncoder() = default;
    VoxelEncoder(int d_in, std::uint64_t seed) : d(d_in) {
        Rng rng(derive_seed(seed, "voxel-encoder"));
        ps.add("w", init_weight({kSharedDim, d}, rng));
        ps.add("b", Tensor({kSharedDim}));
    }

    // v [N,d] -> [N,256]
    int forward(Graph& g, const Bound& bp, int v) const { return g.linear(v, bp[0], bp[1]); }

    Tensor encode(const Tensor& voxels) const {
        check(voxels.rank() == 2 && voxels.shape[1] == d, "voxel_encode: wrong voxel length");
        Graph g;
        Bound bp = bind_frozen(g, ps);
        return g.val(forward(g, bp, g.input(voxels)));
    }
};

// 4 mixer blocks over a 4x64 view of the shared vector, then a dense head
struct Backbone {
    int out_dim = 0;
    ParamSet ps;
    static constexpr int kTok = 4, kTokDim = 64, kBlocks = 4;

    Backbone() = default;
    Backbone(int out, std::uint64_t seed) : out_dim(out) {
        Rng rng(derive_seed(seed, "backbone"));
        ps.add("stem.w", init_weight({kSharedDim, kSharedDim}, rng));
        ps.add("stem.b", Tensor({kSharedDim}));
        for (int i = 0; i < kBlocks; ++i) {
            ps.add("tok" + std::to_string(i), init_weight({kTok, kTok}, rng));
            ps.add("chan" + std::to_string(i), init_weight({kTokDim, kTokDim}, rng));
        }
        ps.add("head.w", init_weight({out, kSharedDim}, rng));
        ps.add("head.b", Tensor({out}));
    }

    // x [N,256] -> [N,out_dim]
    int forward(Graph& g, const Bound& bp, int x) const {
        int n = g.val(x).shape[0];
        int h = g.silu(g.linear(x, bp[0], bp[1]));
        int tok = g.reshape(h, {n, kTok, kTokDim});
        for (int i = 0; i < kBlocks; ++i) {
            tok = g.add(tok, g.silu(g.token_mix(tok, bp[2 + 2 * i])));
            int flat = g.reshape(tok, {n * kTok, kTokDim});
            int mixed = g.silu(g.linear(flat, bp[3 + 2 * i], -1));
            tok = g.add(tok, g.reshape(mixed, {n, kTok, kTokDim}));
        }
        int flat = g.reshape(tok, {n, kSharedDim});
        return g.linear(flat, bp[2 + 2 * kBlocks], bp[3 + 2 * kBlocks]);
    }
};

// three hidden layers, used only for the contrastive terms
struct Projector {
    int dim = 0;
    ParamSet ps;

    Projector() = default;
    Projector(int io_dim, std::uint64_t seed) : dim(io_dim) {
        Rng rng(derive_seed(seed, "projector"));
        int dims[5] = {io_dim, kHidden, kHidden, kHidden, io_dim};
        for (int l = 0; l < 4; ++l) {
            ps.add("l" + std::to_string(l) + ".w", init_weight({dims[l + 1], dims[l]}, rng));
            ps.add("l" + std::to_string(l) + ".b", Tensor({dims[l + 1]}));
        }
    }

    int forward(Graph& g, const Bound& bp, int x) const {
        int h = x;
        for (int l = 0; l < 4; ++l) {
            h = g.linear(h, bp[2 * l], bp[2 * l + 1]);
            if (l < 3) h = g.silu(h);
        }
        return h;
    }
};

// conditional clean-target diffusion over flat embeddings
struct DiffusionPrior {
    int dim = 0;
    ParamSet ps;
    NoiseSchedule sched;
    bool trained = false;

    DiffusionPrior() = default;
    DiffusionPrior(int target_dim, std::uint64_t seed) : dim(target_dim) {
        sched = make_schedule(kPriorSteps, 1e-4, 0.05, ScheduleKind::linear);
        Rng rng(derive_seed(seed, "prior"));
        int in = dim + dim + kPriorTembDim;
        ps.add("l0.w", init_weight({kHidden, in}, rng));
        ps.add("l0.b", Tensor({kHidden}));
        ps.add("l1.w", init_weight({kHidden, kHidden}, rng));
        ps.add("l1.b", Tensor({kHidden}));
        ps.add("l2.w", init_weight({dim, kHidden}, rng));
        ps.add("l2.b", Tensor({dim}));
    }

    // noisy [N,dim], cond [N,dim], temb [N,32] -> predicted clean target
    int forward(Graph& g, const Bound& bp, int noisy, int cond, int temb) const {
        int in = g.concat_cols({noisy, cond, temb});
        int h = g.silu(g.linear(in, bp[0], bp[1]));
        h = g.silu(g.linear(h, bp[2], bp[3]));
        return g.linear(h, bp[4], bp[5]);
    }

    // deterministic reverse chain from seeded noise
    Tensor sample(const Tensor& cond, std::uint64_t seed) const {
        if (!trained) throw state_error("prior_sample: prior has not been trained");
        check(cond.rank() == 2 && cond.shape[1] == dim, "prior_sample: bad condition shape");
        int n = cond.shape[0];
        Rng rng(derive_seed(seed, "prior-sample"));
        Tensor e = Tensor::randn({n, dim}, rng);
        for (int t = kPriorSteps - 1; t >= 0; --t) {
            Graph g;
            Bound bp = bind_frozen(g, ps);
            Tensor te({n, kPriorTembDim});
            Tensor row = timestep_embedding(static_cast<double>(t), kPriorTembDim);
            for (int i = 0; i < n; ++i) std::copy(row.v.begin(), row.v.end(), te.v.begin() + i * kPriorTembDim);
            Tensor x0 = g.val(forward(g, bp, g.input(e), g.input(cond), g.input(te)));
            if (t == 0) {
                e = x0;
                break;
            }
            double ab = sched.ab(t), ab_prev = sched.ab(t - 1);
            Tensor eps = e;
            eps.vec() = (e.vec() - std::sqrt(ab) * x0.vec()) / std::sqrt(1.0 - ab);
            e.vec() = std::sqrt(ab_prev) * x0.vec() + std::sqrt(1.0 - ab_prev) * eps.vec();
        }
        if (!e.all_finite()) throw numeric_error("prior_sample: non-finite embedding");
        return e;
    }
};

// latent-side upsampler: 256 -> 16x4x4 -> transposed conv stack -> 4x8x8
struct Upsampler {
    ParamSet ps;

    explicit Upsampler(std::uint64_t seed = 0) {
        Rng rng(derive_seed(seed, "upsampler"));
        ps.add("up.w", init_weight({16, 8, 2, 2}, rng));
        ps.add("up.b", Tensor({8}));
        ps.add("out.w", init_weight({kLatentC, 8, 3, 3}, rng));
        ps.add("out.b", Tensor({kLatentC}));
    }

    // x [N,256] -> [N,4,8,8]
    int forward(Graph& g, const Bound& bp, int x) const {
        int n = g.val(x).shape[0];
        int grid = g.reshape(x, {n, 16, 4, 4});
        int up = g.silu(g.conv2d_transpose(grid, bp[0], bp[1], 2));  // [N,8,8,8]
        return g.conv2d(up, bp[2], bp[3], 1, 1);
    }
};

// ---- losses ----

// targets c are row-normalized; p are the (normalized) embeddings of mixed
// inputs; lambda/pairing describe the convex mixing v_i' = l_i v_i + (1-l_i) v_k(i)
inline int mixco_loss_op(Graph& g, int p_norm, int c_norm, const std::vector<double>& lambda,
                         const std::vector<int>& pairing, double tau) {
    int n = g.val(p_norm).shape[0];
    check(n >= 2, "mixco_loss: batch of at least 2 required");
    check(static_cast<int>(lambda.size()) == n && static_cast<int>(pairing.size()) == n,
          "mixco_loss: coefficient/pairing size mismatch");
    Tensor t({n, n});
    for (int i = 0; i < n; ++i) {
        t.at2(i, i) += lambda[i];
        t.at2(i, pairing[i]) += 1.0 - lambda[i];
    }
    int s = g.scale(g.matmul(p_norm, c_norm, false, true), 1.0 / tau);
    int tin = g.input(t);
    int rows = g.soft_ce_rows(s, tin);
    int cols = g.soft_ce_rows(g.transpose2d(s), g.transpose2d(tin));
    return g.scale(g.sum_scalars({rows, cols}), 1.0 / (2.0 * n));
}

inline double mixco_loss(const Tensor& p_norm, const Tensor& c_norm, const std::vector<double>& lambda,
                         const std::vector<int>& pairing, double tau) {
    Graph g;
    int node = mixco_loss_op(g, g.input(p_norm), g.input(c_norm), lambda, pairing, tau);
    return g.val(node)[0];
}

inline Tensor softmax_rows(const Tensor& s) {
    check(s.rank() == 2, "softmax_rows: rank-2 only");
    Tensor out = s;
    int n = s.shape[0], m = s.shape[1];
    for (int i = 0; i < n; ++i) {
        double mx = out.v[i * m];
        for (int j = 1; j < m; ++j) mx = std::max(mx, out.v[i * m + j]);
        double z = 0.0;
        for (int j = 0; j < m; ++j) z += (out.v[i * m + j] = std::exp(out.v[i * m + j] - mx));
        for (int j = 0; j < m; ++j) out.v[i * m + j] /= z;
    }
    return out;
}

inline int softclip_loss_op(Graph& g, int p_norm, const Tensor& c_norm, double tau) {
    int n = c_norm.shape[0];
    check(n >= 2, "softclip_loss: batch of at least 2 required");
    Tensor sims({n, n});
    sims.mat(n, n).noalias() = c_norm.mat(n, c_norm.shape[1]) * c_norm.mat(n, c_norm.shape[1]).transpose();
    sims *= 1.0 / tau;
    Tensor target = softmax_rows(sims);
    int s = g.scale(g.matmul(p_norm, g.input(c_norm), false, true), 1.0 / tau);
    return g.scale(g.soft_ce_rows(s, g.input(target)), 1.0 / n);
}

inline double softclip_loss(const Tensor& p_norm, const Tensor& c_norm, double tau) {
    Graph g;
    int node = softclip_loss_op(g, g.input(p_norm), c_norm, tau);
    return g.val(node)[0];
}

// ---- momentum alignment ----

struct LatentStats {
    double mu = 0.0;
    double sigma = 1.0;
};

inline LatentStats population_stats(const Tensor& t) {
    LatentStats s;
    s.mu = t.mean();
    double acc = 0.0;
    for (double x : t.v) acc += (x - s.mu) * (x - s.mu);
    s.sigma = std::sqrt(acc / t.numel());
    return s;
}

// standardize the whole prediction batch with its own global scalars, then
// restore the training-set scale
inline Tensor momentum_align(const Tensor& batch, double mu_tr, double sigma_tr) {
    check(batch.rank() >= 2 && batch.shape[0] >= 2, "momentum_align: batch of at least 2 required");
    LatentStats st = population_stats(batch);
    if (!(st.sigma > 0.0)) throw numeric_error("momentum_align: degenerate batch, zero std");
    Tensor out = batch;
    out.vec() = (batch.vec().array() - st.mu).matrix() * (sigma_tr / st.sigma);
    out.vec().array() += mu_tr;
    return out;
}

}  // namespace visrecon
