#pragma once

#include <filesystem>
#include <map>

#include "visrecon/diffusion.hpp"
#include "visrecon/scene.hpp"
#include "visrecon/serialize.hpp"

namespace visrecon {

constexpr int kNumSubjects = 4;
constexpr int kNumVoxelGroups = 4;  // V1-like, V2-like, V3-like, higher-like
constexpr int kFeatureVecDim = 3 * kFeatFlat + kSemFlat;  // 3584

inline const char* voxel_group_name(int g) {
    static const char* names[kNumVoxelGroups] = {"v1_like", "v2_like", "v3_like", "higher_like"};
    check(g >= 0 && g < kNumVoxelGroups, "voxel group index out of range");
    return names[g];
}

// Stimulus-side signal: pyramid layers plus the image-side semantic readout.
// The whole vector is a pure function of the image, which is what makes the
// encoding-model evaluation an exact oracle for reconstructed images.
inline Tensor feature_vector(const FeaturePyramid& fp, const Tensor& img) {
    Tensor f({kFeatureVecDim});
    int off = 0;
    for (int l = 1; l <= 3; ++l) {
        Tensor g = fp.extract_features(img, l);
        std::copy(g.v.begin(), g.v.end(), f.v.begin() + off);
        off += kFeatFlat;
    }
    Tensor r = fp.semantic_readout(img);
    std::copy(r.v.begin(), r.v.end(), f.v.begin() + off);
    return f;
}

inline int feature_vector_op(Graph& g, const FeaturePyramid& fp, int img_node) {
    std::vector<int> parts;
    for (int l = 1; l <= 3; ++l) parts.push_back(g.reshape(fp.extract_op(g, img_node, l), {1, kFeatFlat}));
    parts.push_back(g.reshape(fp.readout_op(g, img_node), {1, kSemFlat}));
    return g.reshape(g.concat_cols(parts), {kFeatureVecDim});
}

// Linear-plus-noise voxel forward model. Each voxel's weight row is dominated
// by one feature block (variance-equalized across blocks first), which pins
// its functional group.
struct SubjectModel {
    int subject_id = 0;
    int d = 0;
    Tensor W;                    // [d, 3584], unit rows
    double sigma = 0.0;          // per-draw noise std
    std::vector<int> group;      // voxel -> group label
    std::array<double, kNumVoxelGroups> block_scale{};  // calibration stds per block

    void validate() const {
        check(W.shape == std::vector<int>{d, kFeatureVecDim}, "subject W shape mismatch");
        check(static_cast<int>(group.size()) == d, "subject group labels incomplete");
        for (int gg : group) check(gg >= 0 && gg < kNumVoxelGroups, "bad voxel group label");
    }

    std::vector<int> group_voxels(int g) const {
        std::vector<int> ids;
        for (int i = 0; i < d; ++i)
            if (group[i] == g) ids.push_back(i);
        return ids;
    }
};

inline std::pair<int, int> feature_block_range(int block) {
    check(block >= 0 && block < kNumVoxelGroups, "feature block out of range");
    if (block < 3) return {block * kFeatFlat, (block + 1) * kFeatFlat};
    return {3 * kFeatFlat, kFeatureVecDim};
}

inline Tensor noiseless_signal(const SubjectModel& s, const Tensor& feat) {
    check(feat.numel() == kFeatureVecDim, "feature vector length mismatch");
    Tensor out({s.d});
    out.vec().noalias() = s.W.mat(s.d, kFeatureVecDim) * feat.vec();
    return out;
}

inline Tensor simulate_voxels(const Tensor& img, const SceneParams& p, const SubjectModel& s,
                              const FeaturePyramid& fp, Rng& rng) {
    p.validate();
    Tensor v = noiseless_signal(s, feature_vector(fp, img));
    for (int i = 0; i < s.d; ++i) v.v[i] += s.sigma * rng.normal();
    return v;
}

// dominant-block variance share ~ gamma^2/(gamma^2+3) ~ 0.8
constexpr double kBlockDominance = 3.5;

inline SubjectModel make_subject_model(int subject_id, int d, std::uint64_t seed,
                                       const std::vector<Tensor>& calibration_features,
                                       double target_snr) {
    check(!calibration_features.empty(), "make_subject_model: empty calibration set");
    SubjectModel s;
    s.subject_id = subject_id;
    s.d = d;
    s.W = Tensor({d, kFeatureVecDim});

    // per-block RMS std over the calibration scenes, for variance equalization
    int n = static_cast<int>(calibration_features.size());
    Tensor mean({kFeatureVecDim}), var({kFeatureVecDim});
    for (const Tensor& f : calibration_features) mean.vec() += f.vec() / n;
    for (const Tensor& f : calibration_features) {
        Eigen::VectorXd c = f.vec() - mean.vec();
        var.vec().array() += c.array().square() / n;
    }
    for (int b = 0; b < kNumVoxelGroups; ++b) {
        auto [lo, hi] = feature_block_range(b);
        double acc = 0.0;
        for (int i = lo; i < hi; ++i) acc += var.v[i];
        s.block_scale[b] = std::sqrt(acc / (hi - lo));
        check(s.block_scale[b] > 0.0, "degenerate calibration features");
    }

    // group proportions: 30/25/25/20
    static const double props[kNumVoxelGroups] = {0.30, 0.25, 0.25, 0.20};
    s.group.resize(d);
    int off = 0;
    for (int g = 0; g < kNumVoxelGroups; ++g) {
        int cnt = (g == kNumVoxelGroups - 1) ? d - off : static_cast<int>(std::lround(props[g] * d));
        for (int i = 0; i < cnt && off < d; ++i) s.group[off++] = g;
    }
    while (off < d) s.group[off++] = kNumVoxelGroups - 1;

    Rng rng(derive_seed(seed, "subject-forward", static_cast<std::uint64_t>(subject_id)));
    for (int i = 0; i < d; ++i) {
        double nrm = 0.0;
        for (int b = 0; b < kNumVoxelGroups; ++b) {
            auto [lo, hi] = feature_block_range(b);
            double gain = (1.0 / s.block_scale[b]) * (b == s.group[i] ? kBlockDominance : 1.0);
            for (int j = lo; j < hi; ++j) {
                double w = gain * rng.normal();
                s.W.at2(i, j) = w;
                nrm += w * w;
            }
        }
        nrm = std::sqrt(nrm);
        for (int j = 0; j < kFeatureVecDim; ++j) s.W.at2(i, j) /= nrm;
    }

    // sigma so that single-draw SNR (centered signal RMS / noise RMS) ~ target
    double acc = 0.0;
    Tensor smean({d});
    std::vector<Tensor> sigs;
    sigs.reserve(n);
    for (const Tensor& f : calibration_features) {
        sigs.push_back(noiseless_signal(s, f));
        smean.vec() += sigs.back().vec() / n;
    }
    for (const Tensor& sg : sigs) acc += (sg.vec() - smean.vec()).squaredNorm();
    double signal_rms = std::sqrt(acc / (static_cast<double>(n) * d));
    check(signal_rms > 0.0, "degenerate signal for sigma calibration");
    s.sigma = signal_rms / target_snr;
    return s;
}

struct SubjectData {
    int subject_id = 0;
    std::vector<int> train_scene_ids;  // one per unaveraged record
    Tensor train_voxels;               // [records, d]
    std::vector<int> test_scene_ids;   // shared scene ids
    Tensor test_voxels;                // [items, d], mean of the stored repeats
    Tensor test_repeats;               // [items*repeats, d], item-major
};

struct Dataset {
    std::uint64_t seed = 0;
    int train_scenes = 0, test_scenes = 0, repeats = 0;
    double snr = 1.0;
    std::vector<SceneParams> scenes;  // first test_scenes entries are the shared split
    std::vector<SubjectModel> subjects;
    std::vector<SubjectData> data;

    const SceneParams& scene(int id) const { return scenes.at(id); }
};

struct DatasetSpec {
    int subjects = kNumSubjects;
    std::vector<int> voxel_counts{900, 1000, 1100, 1200};
    int train_scenes = 900;
    int test_scenes = 100;
    int repeats = 3;
    double snr = 1.0;
};

// forward-model calibration pool: features of the first scenes in the pool
inline std::vector<Tensor> dataset_calibration_features(const std::vector<SceneParams>& scenes,
                                                        const FeaturePyramid& fp) {
    std::vector<Tensor> calib;
    int n = std::min(200, static_cast<int>(scenes.size()));
    calib.reserve(n);
    for (int i = 0; i < n; ++i) calib.push_back(feature_vector(fp, render_scene(scenes[i])));
    return calib;
}

inline Dataset build_dataset(const DatasetSpec& spec, const FeaturePyramid& fp, std::uint64_t seed) {
    check(spec.subjects >= 1 && spec.subjects <= static_cast<int>(spec.voxel_counts.size()),
          "dataset spec: subject/voxel count mismatch");
    Dataset ds;
    ds.seed = seed;
    ds.train_scenes = spec.train_scenes;
    ds.test_scenes = spec.test_scenes;
    ds.repeats = spec.repeats;
    ds.snr = spec.snr;

    // globally distinct scenes by rendered content
    Rng srng(derive_seed(seed, "scenes"));
    std::map<std::uint64_t, int> seen;
    int total = spec.test_scenes + spec.subjects * spec.train_scenes;
    std::vector<Tensor> images;
    images.reserve(total);
    while (static_cast<int>(ds.scenes.size()) < total) {
        SceneParams p = random_scene_params(srng);
        Tensor img = render_scene(p);
        std::uint64_t h = image_content_hash(img);
        if (seen.count(h)) continue;
        seen[h] = static_cast<int>(ds.scenes.size());
        ds.scenes.push_back(p);
        images.push_back(std::move(img));
    }

    // subject forward models calibrated on a slice of the scene pool
    std::vector<Tensor> calib = dataset_calibration_features(ds.scenes, fp);
    for (int sidx = 0; sidx < spec.subjects; ++sidx)
        ds.subjects.push_back(make_subject_model(sidx, spec.voxel_counts[sidx],
                                                 derive_seed(seed, "subject-model", sidx), calib, spec.snr));

    for (int sidx = 0; sidx < spec.subjects; ++sidx) {
        const SubjectModel& sm = ds.subjects[sidx];
        SubjectData sd;
        sd.subject_id = sidx;
        Rng nrng(derive_seed(seed, "voxel-noise", sidx));

        int base = spec.test_scenes + sidx * spec.train_scenes;
        sd.train_voxels = Tensor({spec.train_scenes * spec.repeats, sm.d});
        for (int i = 0; i < spec.train_scenes; ++i) {
            int scene_id = base + i;
            Tensor sig = noiseless_signal(sm, feature_vector(fp, images[scene_id]));
            for (int r = 0; r < spec.repeats; ++r) {
                int rec = i * spec.repeats + r;
                sd.train_scene_ids.push_back(scene_id);
                for (int j = 0; j < sm.d; ++j)
                    sd.train_voxels.at2(rec, j) = sig.v[j] + sm.sigma * nrng.normal();
            }
        }

        sd.test_voxels = Tensor({spec.test_scenes, sm.d});
        sd.test_repeats = Tensor({spec.test_scenes * spec.repeats, sm.d});
        for (int i = 0; i < spec.test_scenes; ++i) {
            sd.test_scene_ids.push_back(i);
            Tensor sig = noiseless_signal(sm, feature_vector(fp, images[i]));
            for (int r = 0; r < spec.repeats; ++r)
                for (int j = 0; j < sm.d; ++j)
                    sd.test_repeats.at2(i * spec.repeats + r, j) = sig.v[j] + sm.sigma * nrng.normal();
            for (int j = 0; j < sm.d; ++j) {
                double acc = 0.0;
                for (int r = 0; r < spec.repeats; ++r) acc += sd.test_repeats.at2(i * spec.repeats + r, j);
                sd.test_voxels.at2(i, j) = acc / spec.repeats;
            }
        }
        ds.data.push_back(std::move(sd));
    }
    return ds;
}

// objective for steering sampling toward measured voxels through the forward model
struct BrainGuidance final : GuidanceObjective {
    const LatentCodec* codec = nullptr;
    const FeaturePyramid* features = nullptr;
    const SubjectModel* subject = nullptr;
    Tensor measured;  // [d]
    double kappa = 0.0;

    int build_loss(Graph& g, int z_hat_t_node) const override {
        check(codec && features && subject, "brain guidance objective not wired");
        check(measured.numel() == subject->d, "brain guidance: measured voxel length mismatch");
        int img = codec->decode_op(g, z_hat_t_node);
        int f = g.reshape(feature_vector_op(g, *features, img), {1, kFeatureVecDim});
        int pred = g.linear(f, g.input(subject->W), -1);
        int diff = g.sub(pred, g.input(measured.reshaped({1, subject->d})));
        return g.scale(g.sum_sq(diff), kappa);
    }
};

}  // namespace visrecon
