#include <gtest/gtest.h>

#include <cstring>

#include "test_util.hpp"
#include "visrecon/decoders.hpp"

namespace visrecon {
namespace {

Tensor unit_rows(int n, int m, std::uint64_t seed) {
    Rng rng(seed);
    Tensor t = Tensor::randn({n, m}, rng);
    for (int i = 0; i < n; ++i) {
        double nrm = 0.0;
        for (int j = 0; j < m; ++j) nrm += t.at2(i, j) * t.at2(i, j);
        nrm = std::sqrt(nrm);
        for (int j = 0; j < m; ++j) t.at2(i, j) /= nrm;
    }
    return t;
}

// independent cross-entropy between soft target rows and score rows, written
// with explicit log-sum-exp rather than the graph ops
double soft_ce_oracle(const Tensor& scores, const Tensor& targets) {
    int n = scores.shape[0], m = scores.shape[1];
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        double mx = scores.at2(i, 0);
        for (int j = 1; j < m; ++j) mx = std::max(mx, scores.at2(i, j));
        double lse = 0.0;
        for (int j = 0; j < m; ++j) lse += std::exp(scores.at2(i, j) - mx);
        lse = mx + std::log(lse);
        for (int j = 0; j < m; ++j) total += targets.at2(i, j) * (lse - scores.at2(i, j));
    }
    return total;
}

double mixco_oracle(const Tensor& p, const Tensor& c, const std::vector<double>& lambda,
                    const std::vector<int>& pairing, double tau) {
    int n = p.shape[0], m = p.shape[1];
    Tensor s({n, n});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int k = 0; k < m; ++k) acc += p.at2(i, k) * c.at2(j, k);
            s.at2(i, j) = acc / tau;
        }
    Tensor t({n, n});
    for (int i = 0; i < n; ++i) {
        t.at2(i, i) += lambda[i];
        t.at2(i, pairing[i]) += 1.0 - lambda[i];
    }
    Tensor st({n, n}), tt({n, n});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            st.at2(i, j) = s.at2(j, i);
            tt.at2(i, j) = t.at2(j, i);
        }
    return (soft_ce_oracle(s, t) + soft_ce_oracle(st, tt)) / (2.0 * n);
}

TEST(Decoders, MixcoLossMatchesHandOracle) {
    Tensor p = unit_rows(3, 6, 1);
    Tensor c = unit_rows(3, 6, 2);
    std::vector<double> lambda{0.3, 0.8, 0.5};
    std::vector<int> pairing{1, 2, 0};
    double got = mixco_loss(p, c, lambda, pairing, 0.07);
    double want = mixco_oracle(p, c, lambda, pairing, 0.07);
    EXPECT_NEAR(got, want, 1e-10 * std::max(1.0, std::abs(want)));
}

TEST(Decoders, MixcoWithUnitLambdaIsPlainInfoNce) {
    Tensor p = unit_rows(4, 5, 3);
    Tensor c = unit_rows(4, 5, 4);
    std::vector<double> lambda{1.0, 1.0, 1.0, 1.0};
    std::vector<int> pairing{1, 2, 3, 0};  // ignored when lambda is 1
    double tau = 0.1;
    double got = mixco_loss(p, c, lambda, pairing, tau);

    // independent bidirectional InfoNCE with identity targets
    int n = 4;
    double total = 0.0;
    for (int dir = 0; dir < 2; ++dir) {
        for (int i = 0; i < n; ++i) {
            double mx = -1e300, lse = 0.0;
            std::vector<double> row(n);
            for (int j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int k = 0; k < 5; ++k)
                    acc += (dir == 0 ? p.at2(i, k) * c.at2(j, k) : p.at2(j, k) * c.at2(i, k));
                row[j] = acc / tau;
                mx = std::max(mx, row[j]);
            }
            for (int j = 0; j < n; ++j) lse += std::exp(row[j] - mx);
            total += mx + std::log(lse) - row[i];
        }
    }
    EXPECT_NEAR(got, total / (2.0 * n), 1e-10 * std::max(1.0, std::abs(got)));
}

TEST(Decoders, MixcoInvariantUnderBatchRelabeling) {
    int n = 5, m = 7;
    Tensor p = unit_rows(n, m, 5);
    Tensor c = unit_rows(n, m, 6);
    std::vector<double> lambda{0.2, 0.9, 0.6, 0.4, 0.7};
    std::vector<int> pairing{2, 0, 4, 1, 3};
    double base = mixco_loss(p, c, lambda, pairing, 0.07);

    std::vector<int> perm{3, 0, 4, 2, 1};  // new position of old row i
    Tensor p2({n, m}), c2({n, m});
    std::vector<double> l2(n);
    std::vector<int> k2(n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < m; ++j) {
            p2.at2(perm[i], j) = p.at2(i, j);
            c2.at2(perm[i], j) = c.at2(i, j);
        }
        l2[perm[i]] = lambda[i];
        k2[perm[i]] = perm[pairing[i]];
    }
    double relabeled = mixco_loss(p2, c2, l2, k2, 0.07);
    EXPECT_NEAR(relabeled, base, 1e-12 * std::max(1.0, std::abs(base)));
}

TEST(Decoders, MixcoValidation) {
    Tensor p = unit_rows(2, 3, 7);
    Graph g;
    EXPECT_THROW(mixco_loss_op(g, g.input(unit_rows(1, 3, 8)), g.input(unit_rows(1, 3, 9)), {0.5}, {0},
                               0.07),
                 invariant_error);
    EXPECT_THROW(mixco_loss(p, p, {0.5}, {1, 0}, 0.07), invariant_error);
}

TEST(Decoders, SoftclipLossMatchesHandOracle) {
    int n = 4, m = 6;
    Tensor p = unit_rows(n, m, 10);
    Tensor c = unit_rows(n, m, 11);
    double tau = 0.07;
    double got = softclip_loss(p, c, tau);

    Tensor cc({n, n}), s({n, n});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double a = 0.0, b = 0.0;
            for (int k = 0; k < m; ++k) {
                a += c.at2(i, k) * c.at2(j, k);
                b += p.at2(i, k) * c.at2(j, k);
            }
            cc.at2(i, j) = a / tau;
            s.at2(i, j) = b / tau;
        }
    // soft targets: row softmax of the target-target similarities
    Tensor soft({n, n});
    for (int i = 0; i < n; ++i) {
        double mx = cc.at2(i, 0);
        for (int j = 1; j < n; ++j) mx = std::max(mx, cc.at2(i, j));
        double z = 0.0;
        for (int j = 0; j < n; ++j) z += (soft.at2(i, j) = std::exp(cc.at2(i, j) - mx));
        for (int j = 0; j < n; ++j) soft.at2(i, j) /= z;
    }
    double want = soft_ce_oracle(s, soft) / n;
    EXPECT_NEAR(got, want, 1e-10 * std::max(1.0, std::abs(want)));
}

TEST(Decoders, ContrastiveLossGradients) {
    Rng rng(20);
    Tensor p_raw = Tensor::randn({3, 6}, rng);
    Tensor c = unit_rows(3, 6, 21);
    std::vector<double> lambda{0.4, 0.7, 0.2};
    std::vector<int> pairing{2, 0, 1};

    vrtest::check_gradients({p_raw}, [&](Graph& g, const std::vector<int>& ids) {
        int pn = g.row_normalize(ids[0]);
        return mixco_loss_op(g, pn, g.input(c), lambda, pairing, 0.07);
    });

    vrtest::check_gradients({p_raw}, [&](Graph& g, const std::vector<int>& ids) {
        int pn = g.row_normalize(ids[0]);
        return softclip_loss_op(g, pn, c, 0.07);
    });
}

TEST(Decoders, VoxelEncoderShapesAndSeeding) {
    VoxelEncoder a(30, 5), b(30, 5), c(30, 6);
    Rng rng(1);
    Tensor v = Tensor::randn({2, 30}, rng);
    Tensor ea = a.encode(v);
    ASSERT_EQ(ea.shape, (std::vector<int>{2, kSharedDim}));
    Tensor eb = b.encode(v);
    EXPECT_TRUE(std::memcmp(ea.v.data(), eb.v.data(), ea.numel() * 8) == 0);
    Tensor ec = c.encode(v);
    EXPECT_FALSE(std::memcmp(ea.v.data(), ec.v.data(), ea.numel() * 8) == 0);
    Tensor bad = Tensor::randn({2, 31}, rng);
    EXPECT_THROW(a.encode(bad), invariant_error);
}

TEST(Decoders, BackboneProjectorUpsamplerShapesAndGradients) {
    Backbone bb(32, 3);
    Projector pj(32, 4);
    Upsampler up(5);
    Rng rng(2);
    Tensor x = Tensor::randn({2, kSharedDim}, rng, 0.3);

    {
        Graph g;
        Bound bp = bind_frozen(g, bb.ps);
        int out = bb.forward(g, bp, g.input(x));
        ASSERT_EQ(g.val(out).shape, (std::vector<int>{2, 32}));
    }
    {
        Graph g;
        Bound bp = bind_frozen(g, up.ps);
        int out = up.forward(g, bp, g.input(x));
        ASSERT_EQ(g.val(out).shape, (std::vector<int>{2, kLatentC, kLatentH, kLatentW}));
    }

    // gradients through every parameter of each block, squared-sum objective
    vrtest::GradCheck gc;
    gc.coords = 6;
    std::vector<Tensor> bb_leaves = bb.ps.values;
    vrtest::check_gradients(bb_leaves, [&](Graph& g, const std::vector<int>& ids) {
        Bound bp{ids};
        return g.sum_sq(bb.forward(g, bp, g.input(x)));
    }, gc);

    std::vector<Tensor> pj_leaves = pj.ps.values;
    Tensor y = Tensor::randn({2, 32}, rng, 0.3);
    vrtest::check_gradients(pj_leaves, [&](Graph& g, const std::vector<int>& ids) {
        Bound bp{ids};
        return g.sum_sq(pj.forward(g, bp, g.input(y)));
    }, gc);

    std::vector<Tensor> up_leaves = up.ps.values;
    vrtest::check_gradients(up_leaves, [&](Graph& g, const std::vector<int>& ids) {
        Bound bp{ids};
        return g.sum_sq(up.forward(g, bp, g.input(x)));
    }, gc);
}

TEST(Decoders, PriorForwardGradientsAndUntrainedGuard) {
    DiffusionPrior prior(16, 9);
    Rng rng(3);
    Tensor noisy = Tensor::randn({2, 16}, rng);
    Tensor cond = Tensor::randn({2, 16}, rng);
    Tensor temb = Tensor::randn({2, kPriorTembDim}, rng, 0.2);

    vrtest::GradCheck gc;
    gc.coords = 6;
    std::vector<Tensor> leaves = prior.ps.values;
    vrtest::check_gradients(leaves, [&](Graph& g, const std::vector<int>& ids) {
        Bound bp{ids};
        return g.sum_sq(prior.forward(g, bp, g.input(noisy), g.input(cond), g.input(temb)));
    }, gc);

    EXPECT_THROW(prior.sample(cond, 1), state_error);
}

TEST(Decoders, PriorSampleMatchesManualReverseChain) {
    DiffusionPrior prior(8, 13);
    prior.trained = true;
    Rng rng(4);
    Tensor cond = Tensor::randn({3, 8}, rng);
    Tensor got = prior.sample(cond, 77);
    ASSERT_EQ(got.shape, (std::vector<int>{3, 8}));

    // re-roll the x0-parameterized reverse updates from the same seeded noise
    Rng nr(derive_seed(77ull, "prior-sample"));
    Tensor e = Tensor::randn({3, 8}, nr);
    for (int t = kPriorSteps - 1; t >= 0; --t) {
        Graph g;
        Bound bp = bind_frozen(g, prior.ps);
        Tensor te({3, kPriorTembDim});
        Tensor row = timestep_embedding(static_cast<double>(t), kPriorTembDim);
        for (int i = 0; i < 3; ++i) std::copy(row.v.begin(), row.v.end(), te.v.begin() + i * kPriorTembDim);
        Tensor x0 = g.val(prior.forward(g, bp, g.input(e), g.input(cond), g.input(te)));
        if (t == 0) {
            e = x0;
            break;
        }
        double ab = prior.sched.ab(t), ab_prev = prior.sched.ab(t - 1);
        for (int i = 0; i < e.numel(); ++i) {
            double eps = (e.v[i] - std::sqrt(ab) * x0.v[i]) / std::sqrt(1.0 - ab);
            e.v[i] = std::sqrt(ab_prev) * x0.v[i] + std::sqrt(1.0 - ab_prev) * eps;
        }
    }
    for (int i = 0; i < got.numel(); ++i)
        ASSERT_NEAR(got.v[i], e.v[i], 1e-12 * std::max(1.0, std::abs(e.v[i])));

    Tensor again = prior.sample(cond, 77);
    EXPECT_TRUE(std::memcmp(again.v.data(), got.v.data(), got.numel() * 8) == 0);
    Tensor other = prior.sample(cond, 78);
    EXPECT_FALSE(std::memcmp(other.v.data(), got.v.data(), got.numel() * 8) == 0);
}

TEST(Decoders, PopulationStatsHandValues) {
    Tensor t({2, 3}, {1.0, 2.0, 3.0, 4.0, 5.0, 9.0});
    LatentStats s = population_stats(t);
    EXPECT_NEAR(s.mu, 4.0, 1e-14);
    // E[x^2] - mu^2 = (1+4+9+16+25+81)/6 - 16 = 136/6 - 16
    EXPECT_NEAR(s.sigma, std::sqrt(136.0 / 6.0 - 16.0), 1e-12);
}

TEST(Decoders, MomentumAlignMomentsAndFixedPoint) {
    Rng rng(8);
    Tensor batch = Tensor::randn({6, 10}, rng, 2.5);
    batch.vec().array() += 1.7;

    Tensor aligned = momentum_align(batch, -0.3, 0.9);
    LatentStats s = population_stats(aligned);
    EXPECT_NEAR(s.mu, -0.3, 1e-12);
    EXPECT_NEAR(s.sigma, 0.9, 1e-12);

    LatentStats own = population_stats(batch);
    Tensor same = momentum_align(batch, own.mu, own.sigma);
    for (int i = 0; i < batch.numel(); ++i) ASSERT_NEAR(same.v[i], batch.v[i], 1e-12);
}

TEST(Decoders, MomentumAlignAffineInvariance) {
    Rng rng(9);
    Tensor batch = Tensor::randn({5, 8}, rng);
    Tensor scaled = batch;
    scaled.vec() = 3.25 * batch.vec();
    scaled.vec().array() += -1.5;

    Tensor a = momentum_align(batch, 0.4, 1.3);
    Tensor b = momentum_align(scaled, 0.4, 1.3);
    for (int i = 0; i < a.numel(); ++i)
        ASSERT_NEAR(a.v[i], b.v[i], 1e-12 * std::max(1.0, std::abs(a.v[i])));
}

TEST(Decoders, MomentumAlignRejectsDegenerateBatches) {
    Tensor flat = Tensor::full({4, 3}, 2.0);
    EXPECT_THROW(momentum_align(flat, 0.0, 1.0), numeric_error);
    Tensor one({1, 3}, {1.0, 2.0, 3.0});
    EXPECT_THROW(momentum_align(one, 0.0, 1.0), invariant_error);
    Tensor rank1({5}, {1.0, 2.0, 3.0, 4.0, 5.0});
    EXPECT_THROW(momentum_align(rank1, 0.0, 1.0), invariant_error);
}

}  // namespace
}  // namespace visrecon
