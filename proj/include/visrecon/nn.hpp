#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "visrecon/autodiff.hpp"
#include "visrecon/serialize.hpp"

namespace visrecon {

// Named trainable tensors for one network. Ops see them as graph leaves via
// bind(); the optimizer reads gradients back through the same binding.
struct ParamSet {
    std::vector<std::string> names;
    std::vector<Tensor> values;

    int add(const std::string& name, Tensor t) {
        names.push_back(name);
        values.push_back(std::move(t));
        return static_cast<int>(values.size()) - 1;
    }

    int count() const { return static_cast<int>(values.size()); }

    int numel() const {
        int n = 0;
        for (const Tensor& t : values) n += t.numel();
        return n;
    }

    void export_to(TensorMap& tm, const std::string& prefix) const {
        for (int i = 0; i < count(); ++i) tm.put(prefix + names[i], values[i]);
    }

    void import_from(const TensorMap& tm, const std::string& prefix) {
        for (int i = 0; i < count(); ++i) {
            const Tensor& src = tm.get(prefix + names[i]);
            check(src.shape == values[i].shape, "checkpoint shape mismatch for " + prefix + names[i]);
            values[i] = src;
        }
    }
};

struct Bound {
    std::vector<int> ids;
    int operator[](int i) const { return ids[i]; }
};

inline Bound bind(Graph& g, const ParamSet& ps) {
    Bound b;
    b.ids.reserve(ps.count());
    for (const Tensor& t : ps.values) b.ids.push_back(g.leaf(t));
    return b;
}

inline Bound bind_frozen(Graph& g, const ParamSet& ps) {
    Bound b;
    b.ids.reserve(ps.count());
    for (const Tensor& t : ps.values) b.ids.push_back(g.input(t));
    return b;
}

// AdamW with decoupled weight decay.
class AdamW {
public:
    AdamW() = default;
    explicit AdamW(const ParamSet& ps, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
                   double weight_decay = 0.0)
        : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
        for (const Tensor& t : ps.values) {
            m_.emplace_back(t.shape);
            v_.emplace_back(t.shape);
        }
    }

    void step(ParamSet& ps, Graph& g, const Bound& bound, double lr) {
        ++t_;
        double bc1 = 1.0 - std::pow(beta1_, t_);
        double bc2 = 1.0 - std::pow(beta2_, t_);
        for (int i = 0; i < ps.count(); ++i) {
            Tensor& p = ps.values[i];
            if (!g.has_grad(bound.ids[i])) continue;
            const Tensor& gr = g.grad(bound.ids[i]);
            Tensor& m = m_[i];
            Tensor& v = v_[i];
            for (int j = 0; j < p.numel(); ++j) {
                double grad = gr.v[j];
                m.v[j] = beta1_ * m.v[j] + (1.0 - beta1_) * grad;
                v.v[j] = beta2_ * v.v[j] + (1.0 - beta2_) * grad * grad;
                double mhat = m.v[j] / bc1;
                double vhat = v.v[j] / bc2;
                p.v[j] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * p.v[j]);
            }
        }
    }

    long steps_taken() const { return t_; }

    void export_to(TensorMap& tm, const std::string& prefix) const {
        for (std::size_t i = 0; i < m_.size(); ++i) {
            tm.put(prefix + "m" + std::to_string(i), m_[i]);
            tm.put(prefix + "v" + std::to_string(i), v_[i]);
        }
        tm.put(prefix + "t", Tensor::scalar(static_cast<double>(t_)));
    }

    void import_from(const TensorMap& tm, const std::string& prefix) {
        for (std::size_t i = 0; i < m_.size(); ++i) {
            m_[i] = tm.get(prefix + "m" + std::to_string(i));
            v_[i] = tm.get(prefix + "v" + std::to_string(i));
        }
        t_ = static_cast<long>(tm.get(prefix + "t")[0]);
    }

private:
    std::vector<Tensor> m_, v_;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, wd_ = 0.0;
    long t_ = 0;
};

// One-cycle schedule: linear warmup over the first tenth of training, cosine
// decay to near zero afterwards.
inline double one_cycle_lr(double peak, long step, long total_steps) {
    check(total_steps > 0, "one_cycle_lr: total_steps must be positive");
    double pct = static_cast<double>(step) / static_cast<double>(total_steps);
    if (pct > 1.0) pct = 1.0;
    double warm = 0.1;
    if (pct < warm) return peak * (pct / warm);
    double p = (pct - warm) / (1.0 - warm);
    return peak * 0.5 * (1.0 + std::cos(M_PI * p));
}

// Sinusoidal position features for a (possibly fractional) timestep index.
inline Tensor timestep_embedding(double t, int dim) {
    check(dim % 2 == 0, "timestep_embedding: dim must be even");
    Tensor e({dim});
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        e.v[i] = std::sin(t * freq);
        e.v[half + i] = std::cos(t * freq);
    }
    return e;
}

inline Tensor timestep_embedding_batch(const std::vector<int>& ts, int dim) {
    Tensor e({static_cast<int>(ts.size()), dim});
    for (std::size_t n = 0; n < ts.size(); ++n) {
        Tensor row = timestep_embedding(static_cast<double>(ts[n]), dim);
        std::copy(row.v.begin(), row.v.end(), e.v.begin() + n * dim);
    }
    return e;
}

// fan-in scaled gaussian init
inline Tensor init_weight(std::vector<int> shape, Rng& rng, double gain = 1.0) {
    int fan_in = 1;
    for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
    return Tensor::randn(std::move(shape), rng, gain / std::sqrt(static_cast<double>(fan_in)));
}

}  // namespace visrecon
