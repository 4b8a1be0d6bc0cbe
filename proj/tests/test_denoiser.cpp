#include <gtest/gtest.h>

#include "test_util.hpp"
#include "visrecon/denoiser.hpp"

using namespace visrecon;
using vrtest::TempDir;

namespace {

Tensor rand_latent(std::uint64_t seed) {
    Rng rng(seed);
    return Tensor::randn(latent_shape(), rng);
}

Tensor rand_cond(std::uint64_t seed) {
    Rng rng(seed);
    return Tensor::randn({kSemTokens, kSemDim}, rng);
}

struct TrainSet {
    Tensor latents, conds;
};

TrainSet make_train_set(int m, std::uint64_t seed) {
    Rng rng(seed);
    TrainSet s;
    s.latents = Tensor::randn({m, kLatentC, kLatentH, kLatentW}, rng);
    s.conds = Tensor::randn({m, kSemTokens, kSemDim}, rng);
    return s;
}

}  // namespace

TEST(Denoiser, ParameterBudget) {
    Denoiser den(104);
    EXPECT_LE(den.ps.numel(), 500000);
    EXPECT_GT(den.ps.numel(), 10000);
    for (const Tensor& t : den.ps.values) EXPECT_TRUE(t.all_finite());
}

TEST(Denoiser, DeterministicForward) {
    Denoiser den(104);
    Tensor z = rand_latent(1), c = rand_cond(2);
    Tensor a = den.denoiser_forward(z, 10, c);
    Tensor b = den.denoiser_forward(z, 10, c);
    EXPECT_DOUBLE_EQ(max_abs_diff(a, b), 0.0);
}

TEST(Denoiser, OutputShapeAcrossTimesteps) {
    Denoiser den(104);
    NoiseSchedule s = make_schedule(100, 1e-4, 0.02, ScheduleKind::linear);
    Tensor z = rand_latent(3), c = rand_cond(4);
    for (int t : {0, s.T / 2, s.T - 1}) {
        Tensor out = den.denoiser_forward(z, t, c);
        EXPECT_EQ(out.shape, latent_shape());
        EXPECT_TRUE(out.all_finite());
    }
}

TEST(Denoiser, ZeroInitializedHeadPredictsZeroUntrained) {
    Denoiser den(104);
    Tensor out = den.denoiser_forward(rand_latent(5), 7, rand_cond(6));
    EXPECT_DOUBLE_EQ(out.norm(), 0.0);
}

TEST(Denoiser, ParamsSerializeRoundTripBitExact) {
    TempDir td("vr-denoiser");
    Denoiser den(104);
    TensorMap tm;
    den.ps.export_to(tm, "den.");
    save_tensors(td.path / "d.bin", tm);
    Denoiser den2(999);  // different init, then overwritten
    TensorMap back = load_tensors(td.path / "d.bin");
    den2.ps.import_from(back, "den.");
    for (int i = 0; i < den.ps.count(); ++i)
        ASSERT_EQ(0, std::memcmp(den.ps.values[i].v.data(), den2.ps.values[i].v.data(),
                                 den.ps.values[i].v.size() * sizeof(double)));
    Tensor z = rand_latent(7), c = rand_cond(8);
    EXPECT_DOUBLE_EQ(max_abs_diff(den.denoiser_forward(z, 3, c), den2.denoiser_forward(z, 3, c)), 0.0);
}

TEST(Denoiser, EmptyDatasetRejected) {
    Denoiser den(104);
    NoiseSchedule s = make_schedule(100, 1e-4, 0.02, ScheduleKind::linear);
    DenoiserTrainConfig tc;
    EXPECT_THROW(train_denoiser(den, Tensor(), Tensor(), s, tc), data_error);
}

TEST(Denoiser, TrainingReducesLossAndBeatsZeroPredictor) {
    NoiseSchedule s = make_schedule(100, 1e-4, 0.02, ScheduleKind::linear);
    TrainSet ts = make_train_set(210, 50);
    Denoiser den(104);
    DenoiserTrainConfig tc;
    tc.epochs = 3;
    tc.batch = 21;
    tc.seed = 0;
    DenoiserTrainLog log = train_denoiser(den, ts.latents, ts.conds, s, tc);
    ASSERT_EQ(log.epoch_loss.size(), 3u);
    EXPECT_LT(log.epoch_loss.back(), log.first_batch_loss);

    // held-out pairs: trained predictor must beat the zero predictor, whose
    // expected squared error is E||eps||^2 = 1 per coordinate
    TrainSet held = make_train_set(32, 51);
    Rng rng(52);
    double mse_model = 0.0, mse_zero = 0.0;
    int count = 0;
    int zlen = kLatentC * kLatentH * kLatentW;
    for (int i = 0; i < 32; ++i) {
        int t = static_cast<int>(rng.uniform_int(s.T));
        Tensor z0({kLatentC, kLatentH, kLatentW});
        std::copy(held.latents.v.begin() + i * zlen, held.latents.v.begin() + (i + 1) * zlen,
                  z0.v.begin());
        Tensor c({kSemTokens, kSemDim});
        std::copy(held.conds.v.begin() + i * kSemFlat, held.conds.v.begin() + (i + 1) * kSemFlat,
                  c.v.begin());
        Tensor eps = Tensor::randn(latent_shape(), rng);
        Tensor zt = forward_diffuse(z0, t, eps, s);
        Tensor pred = den.denoiser_forward(zt, t, c);
        for (int j = 0; j < zlen; ++j) {
            double d = pred.v[j] - eps.v[j];
            mse_model += d * d;
            mse_zero += eps.v[j] * eps.v[j];
            ++count;
        }
    }
    EXPECT_LT(mse_model / count, mse_zero / count);
}

TEST(Denoiser, ConditionDropoutRate) {
    NoiseSchedule s = make_schedule(100, 1e-4, 0.02, ScheduleKind::linear);
    TrainSet ts = make_train_set(420, 53);
    Denoiser den(104);
    DenoiserTrainConfig tc;
    tc.epochs = 3;
    tc.batch = 21;
    tc.seed = 0;
    DenoiserTrainLog log = train_denoiser(den, ts.latents, ts.conds, s, tc);
    ASSERT_EQ(log.total_samples, 3 * 420);
    double rate = static_cast<double>(log.dropped_conditions) / log.total_samples;
    EXPECT_NEAR(rate, 0.1, 0.02);
}

TEST(Denoiser, TrainingDeterministicPerSeed) {
    NoiseSchedule s = make_schedule(100, 1e-4, 0.02, ScheduleKind::linear);
    TrainSet ts = make_train_set(63, 54);
    DenoiserTrainConfig tc;
    tc.epochs = 2;
    tc.batch = 21;
    tc.seed = 5;
    Denoiser a(104), b(104);
    train_denoiser(a, ts.latents, ts.conds, s, tc);
    train_denoiser(b, ts.latents, ts.conds, s, tc);
    for (int i = 0; i < a.ps.count(); ++i)
        ASSERT_EQ(0, std::memcmp(a.ps.values[i].v.data(), b.ps.values[i].v.data(),
                                 a.ps.values[i].v.size() * sizeof(double)));
    DenoiserTrainConfig tc2 = tc;
    tc2.seed = 6;
    Denoiser c(104);
    train_denoiser(c, ts.latents, ts.conds, s, tc2);
    bool differs = false;
    for (int i = 0; i < a.ps.count() && !differs; ++i)
        differs = max_abs_diff(a.ps.values[i], c.ps.values[i]) > 0.0;
    EXPECT_TRUE(differs);
}

TEST(Denoiser, CheckpointResumeBitIdentical) {
    TempDir td("vr-den-resume");
    NoiseSchedule s = make_schedule(100, 1e-4, 0.02, ScheduleKind::linear);
    TrainSet ts = make_train_set(63, 55);
    DenoiserTrainConfig full;
    full.epochs = 4;
    full.batch = 21;
    full.seed = 9;
    Denoiser uninterrupted(104);
    DenoiserTrainLog want = train_denoiser(uninterrupted, ts.latents, ts.conds, s, full);

    DenoiserTrainConfig first = full;
    first.checkpoint = (td.path / "den.ckpt").string();
    first.halt_after = 2;
    Denoiser resumed(104);
    DenoiserTrainLog l1 = train_denoiser(resumed, ts.latents, ts.conds, s, first);
    ASSERT_EQ(l1.epoch_loss.size(), 2u);

    DenoiserTrainConfig second = full;
    second.checkpoint = first.checkpoint;
    DenoiserTrainLog l2 = train_denoiser(resumed, ts.latents, ts.conds, s, second);
    ASSERT_EQ(l2.epoch_loss.size(), 4u);
    for (int e = 0; e < 4; ++e) EXPECT_DOUBLE_EQ(l2.epoch_loss[e], want.epoch_loss[e]);
    EXPECT_EQ(l2.dropped_conditions, want.dropped_conditions);
    EXPECT_EQ(l2.total_samples, want.total_samples);
    for (int i = 0; i < resumed.ps.count(); ++i)
        ASSERT_EQ(0, std::memcmp(resumed.ps.values[i].v.data(), uninterrupted.ps.values[i].v.data(),
                                 resumed.ps.values[i].v.size() * sizeof(double)));
}

TEST(Denoiser, TrainingLossGradientVsFiniteDifferences) {
    // random 32-coordinate subset of the parameter vector, central differences
    NoiseSchedule s = make_schedule(100, 1e-4, 0.02, ScheduleKind::linear);
    Denoiser den(104);
    // move off the zero-head initialization so head gradients are generic
    {
        Rng prng(60);
        for (Tensor& t : den.ps.values)
            for (double& x : t.v) x += 0.02 * prng.normal();
    }
    int n = 4;
    Rng rng(61);
    Tensor zt = Tensor::randn({n, kLatentC, kLatentH, kLatentW}, rng);
    Tensor eps = Tensor::randn({n, kLatentC, kLatentH, kLatentW}, rng);
    Tensor cb = Tensor::randn({n, kSemTokens, kSemDim}, rng);
    std::vector<int> tsteps{3, 40, 71, 99};
    Tensor temb = timestep_embedding_batch(tsteps, kTembDim);

    auto loss_value = [&]() {
        Graph g;
        Bound bp = bind_frozen(g, den.ps);
        int pred = den.forward(g, bp, g.input(zt), g.input(temb), g.input(cb));
        return g.val(g.mean_sq_err(pred, g.input(eps)))[0];
    };

    Graph g;
    Bound bp = bind(g, den.ps);
    int pred = den.forward(g, bp, g.input(zt), g.input(temb), g.input(cb));
    int loss = g.mean_sq_err(pred, g.input(eps));
    g.backward(loss);

    int checked = 0;
    while (checked < 32) {
        int pi = static_cast<int>(rng.uniform_int(den.ps.count()));
        if (!g.has_grad(bp[pi])) continue;
        int j = static_cast<int>(rng.uniform_int(den.ps.values[pi].numel()));
        double an = g.grad(bp[pi]).v[j];
        double h = 1e-5;
        double orig = den.ps.values[pi].v[j];
        den.ps.values[pi].v[j] = orig + h;
        double lp = loss_value();
        den.ps.values[pi].v[j] = orig - h;
        double lm = loss_value();
        den.ps.values[pi].v[j] = orig;
        double fd = (lp - lm) / (2 * h);
        double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
        EXPECT_LE(std::abs(fd - an) / denom, 1e-3)
            << "param " << den.ps.names[pi] << " coord " << j;
        ++checked;
    }
}

TEST(Denoiser, CfgPathsNonDegenerateAfterTraining) {
    NoiseSchedule s = make_schedule(100, 1e-4, 0.02, ScheduleKind::linear);
    TrainSet ts = make_train_set(210, 62);
    Denoiser den(104);
    DenoiserTrainConfig tc;
    tc.epochs = 3;
    tc.batch = 21;
    tc.seed = 1;
    train_denoiser(den, ts.latents, ts.conds, s, tc);
    Tensor z = rand_latent(63), c = rand_cond(64);
    Tensor null_c({kSemTokens, kSemDim});
    Tensor eps_c = den.denoiser_forward(z, 50, c);
    Tensor eps_u = den.denoiser_forward(z, 50, null_c);
    EXPECT_GT(max_abs_diff(eps_c, eps_u), 1e-8);
    // eval_cfg consistency with the single-sample path
    Tensor combo = den.eval_cfg(z, 50, c, null_c, 7.5);
    Tensor want = cfg_epsilon(eps_c, eps_u, 7.5);
    EXPECT_LE(max_abs_diff(combo, want), 1e-12);
    Tensor cond_only = den.eval_cfg(z, 50, c, null_c, 1.0);
    EXPECT_LE(max_abs_diff(cond_only, eps_c), 1e-12);
}
