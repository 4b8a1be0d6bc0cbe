#pragma once

#include <functional>
#include <map>

#include "visrecon/brain.hpp"

namespace visrecon {

inline double pearson(const double* a, const double* b, int n) {
    check(n >= 2, "pearson: need at least 2 points");
    double ma = 0.0, mb = 0.0;
    for (int i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (int i = 0; i < n; ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) throw numeric_error("pearson: zero-variance input");
    return sab / std::sqrt(saa * sbb);
}

inline double pearson(const Tensor& a, const Tensor& b) {
    check(a.shape == b.shape, "pearson: shape mismatch");
    return pearson(a.v.data(), b.v.data(), a.numel());
}

inline double pixcorr(const Tensor& a, const Tensor& b) {
    check_image(a, "pixcorr");
    check_image(b, "pixcorr");
    return pearson(a, b);
}

inline Tensor to_grayscale(const Tensor& img) {
    check_image(img, "to_grayscale");
    Tensor g({kImageH, kImageW});
    for (int i = 0; i < kImageH; ++i)
        for (int j = 0; j < kImageW; ++j)
            g.at2(i, j) = 0.299 * img.at3(0, i, j) + 0.587 * img.at3(1, i, j) + 0.114 * img.at3(2, i, j);
    return g;
}

namespace detail {

// separable 1-d uniform filter with reflected borders (abcd -> dcba|abcd|dcba)
inline void uniform_filter_axis(const Tensor& src, Tensor& dst, int h, int w, int win, bool rows) {
    int half = win / 2;
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            double acc = 0.0;
            for (int k = -half; k <= half; ++k) {
                int p = (rows ? i : j) + k;
                int n = rows ? h : w;
                if (p < 0) p = -p - 1;
                if (p >= n) p = 2 * n - 1 - p;
                acc += rows ? src.at2(p, j) : src.at2(i, p);
            }
            (rows ? dst.at2(i, j) : dst.at2(i, j)) = acc / win;
        }
}

inline Tensor uniform_filter(const Tensor& src, int win) {
    int h = src.shape[0], w = src.shape[1];
    Tensor tmp({h, w}), out({h, w});
    uniform_filter_axis(src, tmp, h, w, win, true);
    uniform_filter_axis(tmp, out, h, w, win, false);
    return out;
}

}  // namespace detail

// windowed structural similarity on grayscale conversions: 7x7 uniform
// window, sample-normalized covariances, border crop of half a window
inline double ssim(const Tensor& a, const Tensor& b) {
    Tensor x = to_grayscale(a), y = to_grayscale(b);
    const int win = 7, pad = win / 2;
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    const double cov_norm = static_cast<double>(win * win) / (win * win - 1);
    Tensor ux = detail::uniform_filter(x, win), uy = detail::uniform_filter(y, win);
    Tensor xx = x, yy = y, xy = x;
    for (int i = 0; i < x.numel(); ++i) {
        xx.v[i] = x.v[i] * x.v[i];
        yy.v[i] = y.v[i] * y.v[i];
        xy.v[i] = x.v[i] * y.v[i];
    }
    Tensor uxx = detail::uniform_filter(xx, win), uyy = detail::uniform_filter(yy, win),
           uxy = detail::uniform_filter(xy, win);
    double acc = 0.0;
    int count = 0;
    for (int i = pad; i < kImageH - pad; ++i)
        for (int j = pad; j < kImageW - pad; ++j) {
            double mx = ux.at2(i, j), my = uy.at2(i, j);
            double vx = cov_norm * (uxx.at2(i, j) - mx * mx);
            double vy = cov_norm * (uyy.at2(i, j) - my * my);
            double cxy = cov_norm * (uxy.at2(i, j) - mx * my);
            double num = (2.0 * mx * my + c1) * (2.0 * cxy + c2);
            double den = (mx * mx + my * my + c1) * (vx + vy + c2);
            acc += num / den;
            ++count;
        }
    return acc / count;
}

// per-item fraction of distractors beaten: corr(feat(recon_i), feat(truth_i))
// vs corr(feat(recon_i), feat(truth_j)) over every j != i
using FeatureFn = std::function<Tensor(const Tensor&)>;

inline std::vector<double> two_way_identification_items(const std::vector<Tensor>& recons,
                                                        const std::vector<Tensor>& truths,
                                                        const FeatureFn& feature_fn) {
    int n = static_cast<int>(recons.size());
    check(n >= 2 && truths.size() == recons.size(), "two_way_identification: need paired lists of >= 2");
    std::vector<Tensor> rf(n), tf(n);
    for (int i = 0; i < n; ++i) {
        rf[i] = feature_fn(recons[i]);
        tf[i] = feature_fn(truths[i]);
    }
    std::vector<double> rates(n);
    for (int i = 0; i < n; ++i) {
        double own = pearson(rf[i], tf[i]);
        int wins = 0;
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            if (own > pearson(rf[i], tf[j])) ++wins;
        }
        rates[i] = static_cast<double>(wins) / (n - 1);
    }
    return rates;
}

inline double two_way_identification(const std::vector<Tensor>& recons, const std::vector<Tensor>& truths,
                                     const FeatureFn& feature_fn) {
    std::vector<double> rates = two_way_identification_items(recons, truths, feature_fn);
    double acc = 0.0;
    for (double r : rates) acc += r;
    return acc / rates.size();
}

inline double cosine(const Tensor& a, const Tensor& b) {
    double na = a.norm(), nb = b.norm();
    if (na == 0.0 || nb == 0.0) throw numeric_error("cosine: zero vector");
    return a.dot(b) / (na * nb);
}

namespace detail {

inline double row_cosine(const Tensor& a, int i, const Tensor& b, int j) {
    int d = a.shape[1];
    Eigen::Map<const Eigen::VectorXd> x(a.v.data() + static_cast<std::ptrdiff_t>(i) * d, d);
    Eigen::Map<const Eigen::VectorXd> y(b.v.data() + static_cast<std::ptrdiff_t>(j) * d, d);
    double nx = x.norm(), ny = y.norm();
    if (nx == 0.0 || ny == 0.0) throw numeric_error("cosine: zero vector");
    return x.dot(y) / (nx * ny);
}

}  // namespace detail

// query row i's ground-truth match is candidate row i; 1 where the top-1
// cosine pick is correct
inline std::vector<int> retrieval_hits(const Tensor& queries, const Tensor& candidates) {
    check(queries.rank() == 2 && candidates.rank() == 2 && queries.shape == candidates.shape,
          "retrieval: paired embedding matrices required");
    int n = queries.shape[0];
    std::vector<int> hits(n, 0);
    for (int i = 0; i < n; ++i) {
        int best = -1;
        double best_sim = -2.0;
        for (int j = 0; j < n; ++j) {
            double s = detail::row_cosine(queries, i, candidates, j);
            if (s > best_sim) {
                best_sim = s;
                best = j;
            }
        }
        hits[i] = best == i ? 1 : 0;
    }
    return hits;
}

inline double retrieval_top1(const Tensor& queries, const Tensor& candidates) {
    std::vector<int> hits = retrieval_hits(queries, candidates);
    double acc = 0.0;
    for (int h : hits) acc += h;
    return acc / hits.size();
}

// majority vote over per-layer top-1 picks; ties among the most-voted
// candidates broken by cosine similarity summed across layers
inline std::vector<int> vote_retrieval_hits(const std::vector<Tensor>& queries,
                                            const std::vector<Tensor>& candidates) {
    int L = static_cast<int>(queries.size());
    check(L >= 1 && candidates.size() == queries.size(), "vote_retrieval: layer count mismatch");
    int n = queries[0].shape[0];
    std::vector<int> hits(n, 0);
    for (int i = 0; i < n; ++i) {
        std::vector<int> votes(n, 0);
        std::vector<double> summed(n, 0.0);
        for (int l = 0; l < L; ++l) {
            int best = -1;
            double best_sim = -2.0;
            for (int j = 0; j < n; ++j) {
                double s = detail::row_cosine(queries[l], i, candidates[l], j);
                summed[j] += s;
                if (s > best_sim) {
                    best_sim = s;
                    best = j;
                }
            }
            ++votes[best];
        }
        int max_votes = 0;
        for (int j = 0; j < n; ++j) max_votes = std::max(max_votes, votes[j]);
        int winner = -1;
        double winner_sum = -1e300;
        for (int j = 0; j < n; ++j)
            if (votes[j] == max_votes && summed[j] > winner_sum) {
                winner_sum = summed[j];
                winner = j;
            }
        hits[i] = winner == i ? 1 : 0;
    }
    return hits;
}

inline double vote_retrieval_top1(const std::vector<Tensor>& queries, const std::vector<Tensor>& candidates) {
    std::vector<int> hits = vote_retrieval_hits(queries, candidates);
    double acc = 0.0;
    for (int h : hits) acc += h;
    return acc / hits.size();
}

// per-item correlation across a voxel group between the noiseless forward
// prediction for the reconstruction and the measured (repeat-averaged) voxels
inline std::vector<double> brain_correlation_items(const std::vector<Tensor>& recons, const Tensor& measured,
                                                   const SubjectModel& subject, const FeaturePyramid& fp,
                                                   int group) {
    int n = static_cast<int>(recons.size());
    check(measured.rank() == 2 && measured.shape[0] == n && measured.shape[1] == subject.d,
          "brain_correlation: measured voxel matrix mismatch");
    std::vector<int> vox;
    if (group < 0)
        for (int v = 0; v < subject.d; ++v) vox.push_back(v);
    else
        vox = subject.group_voxels(group);
    std::vector<double> out(n);
    for (int i = 0; i < n; ++i) {
        Tensor pred = noiseless_signal(subject, feature_vector(fp, recons[i]));
        std::vector<double> pv(vox.size()), mv(vox.size());
        for (std::size_t k = 0; k < vox.size(); ++k) {
            pv[k] = pred.v[vox[k]];
            mv[k] = measured.v[i * subject.d + vox[k]];
        }
        out[i] = pearson(pv.data(), mv.data(), static_cast<int>(pv.size()));
    }
    return out;
}

inline double brain_correlation(const std::vector<Tensor>& recons, const Tensor& measured,
                                const SubjectModel& subject, const FeaturePyramid& fp, int group) {
    std::vector<double> items = brain_correlation_items(recons, measured, subject, fp, group);
    double acc = 0.0;
    for (double r : items) acc += r;
    return acc / items.size();
}

// mean pairwise pixel correlation across repeated reconstructions of one item
inline double repeat_consistency(const std::vector<Tensor>& repeats) {
    int n = static_cast<int>(repeats.size());
    check(n >= 2, "repeat_consistency: need at least 2 repeats");
    double acc = 0.0;
    int pairs = 0;
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            acc += pixcorr(repeats[i], repeats[j]);
            ++pairs;
        }
    return acc / pairs;
}

// ---- report container ----

struct MetricReport {
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;
    std::vector<double> aggregate;
    std::vector<std::pair<std::string, std::string>> meta;

    void add_row(std::vector<double> r) {
        check(r.size() == columns.size(), "metric report: row width mismatch");
        rows.push_back(std::move(r));
    }

    void finalize() {
        aggregate.assign(columns.size(), 0.0);
        check(!rows.empty(), "metric report: no rows");
        for (const auto& r : rows)
            for (std::size_t j = 0; j < r.size(); ++j) aggregate[j] += r[j];
        for (double& a : aggregate) a /= rows.size();
    }

    std::string to_csv() const {
        check(aggregate.size() == columns.size(), "metric report: finalize before writing");
        std::ostringstream os;
        os.precision(17);
        os << "item";
        for (const auto& c : columns) os << "," << c;
        os << "\n";
        for (std::size_t i = 0; i < rows.size(); ++i) {
            os << i;
            for (double v : rows[i]) os << "," << v;
            os << "\n";
        }
        os << "aggregate";
        for (double v : aggregate) os << "," << v;
        os << "\n";
        return os.str();
    }
};

}  // namespace visrecon
