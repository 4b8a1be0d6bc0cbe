#pragma once

#include <array>

#include "visrecon/autodiff.hpp"
#include "visrecon/latent_codec.hpp"
#include "visrecon/nn.hpp"

namespace visrecon {

constexpr int kFeatTokens = 16, kFeatDim = 64;     // each pyramid layer -> 16x64
constexpr int kSemTokens = 8, kSemDim = 64;        // semantic embedding 8x64
constexpr int kSemFlat = kSemTokens * kSemDim;     // 512
constexpr int kFeatFlat = kFeatTokens * kFeatDim;  // 1024

constexpr int kNumShapes = 6, kNumColors = 8, kNumBackgrounds = 4;

struct SceneParams {
    int shape = 0;        // 0..5
    int color = 0;        // 0..7
    int background = 0;   // 0..3
    double pos_x = 0.5;   // [0,1]
    double pos_y = 0.5;   // [0,1]
    double size = 0.3;    // [0.2,0.5]
    bool textured = false;

    void validate() const {
        check(shape >= 0 && shape < kNumShapes, "scene shape index out of range");
        check(color >= 0 && color < kNumColors, "scene color index out of range");
        check(background >= 0 && background < kNumBackgrounds, "scene background index out of range");
        check(pos_x >= 0.0 && pos_x <= 1.0 && pos_y >= 0.0 && pos_y <= 1.0, "scene position out of range");
        check(size >= 0.2 && size <= 0.5, "scene size out of range");
    }
};

inline int bin4(double x, double lo, double hi) {
    int b = static_cast<int>((x - lo) / (hi - lo) * 4.0);
    return b < 0 ? 0 : (b > 3 ? 3 : b);
}

// Frozen random conv pyramid standing in for a pretrained image encoder: three
// stride-2 stages with smooth nonlinearity, each stage reshaped to 16 tokens
// of 64 dims, plus a linear readout of pooled top-layer tokens into the
// semantic space and fixed embedding tables for scene attributes.
class FeaturePyramid {
public:
    explicit FeaturePyramid(std::uint64_t seed) : seed_(seed) {
        Rng rng(derive_seed(seed, "feature-pyramid"));
        // stage 1 keeps full-band random kernels (sensitive to pixel-level
        // detail); deeper stages use spatially smooth kernels so white noise
        // attenuates with depth while low-frequency scene content survives
        w1_ = init_weight({4, 3, 3, 3}, rng, 1.2);
        b1_ = Tensor::randn({4}, rng, 0.05);
        w2_ = smooth_kernel(16, 4, rng, 1.2);
        b2_ = Tensor::randn({16}, rng, 0.05);
        w3_ = smooth_kernel(64, 16, rng, 1.2);
        b3_ = Tensor::randn({64}, rng, 0.05);
        readout_ = init_weight({kSemFlat, kFeatDim}, rng, 1.0);
        Rng trng(derive_seed(seed, "semantic-tables"));
        auto make_table = [&](int rows) {
            Tensor t({rows, kSemDim});
            for (int r = 0; r < rows; ++r) {
                double nrm = 0.0;
                for (int j = 0; j < kSemDim; ++j) {
                    t.at2(r, j) = trng.normal();
                    nrm += t.at2(r, j) * t.at2(r, j);
                }
                nrm = std::sqrt(nrm);
                for (int j = 0; j < kSemDim; ++j) t.at2(r, j) /= nrm;
            }
            return t;
        };
        shape_table_ = make_table(kNumShapes);
        color_table_ = make_table(kNumColors);
        bg_table_ = make_table(kNumBackgrounds);
        tex_table_ = make_table(2);
        posx_table_ = make_table(4);
        posy_table_ = make_table(4);
        size_table_ = make_table(4);
        build_token_indices();
    }

    std::uint64_t seed() const { return seed_; }

    // ---- feature extraction ----

    Tensor extract_features(const Tensor& img, int layer) const {
        Graph g;
        int node = extract_op(g, g.input(img), layer);
        return g.val(node);
    }

    int extract_op(Graph& g, int img_node, int layer) const {
        if (layer < 1 || layer > 3) throw config_error("feature layer must be 1, 2 or 3");
        int x = g.reshape(img_node, {1, kImageC, kImageH, kImageW});
        int h1 = g.tanh_op(g.conv2d(x, g.input(w1_), g.input(b1_), 2, 1));  // 1x4x16x16
        if (layer == 1) return g.gather(h1, token_idx_[0], {kFeatTokens, kFeatDim});
        int h2 = g.tanh_op(g.conv2d(h1, g.input(w2_), g.input(b2_), 2, 1));  // 1x16x8x8
        if (layer == 2) return g.gather(h2, token_idx_[1], {kFeatTokens, kFeatDim});
        int h3 = g.tanh_op(g.conv2d(h2, g.input(w3_), g.input(b3_), 2, 1));  // 1x64x4x4
        return g.gather(h3, token_idx_[2], {kFeatTokens, kFeatDim});
    }

    // image -> semantic-space vector (pooled top-layer tokens through a fixed
    // linear head); the image-side counterpart of semantic_embedding
    Tensor semantic_readout(const Tensor& img) const {
        Graph g;
        int node = readout_op(g, g.input(img));
        return g.val(node);
    }

    int readout_op(Graph& g, int img_node) const {
        int l3 = extract_op(g, img_node, 3);
        int tok = g.reshape(l3, {1, kFeatTokens, kFeatDim});
        int pooled = g.token_mean(tok);                       // [1,64]
        int out = g.linear(pooled, g.input(readout_), -1);    // [1,512]
        return g.reshape(out, {kSemFlat});
    }

    // ---- semantic embedding ----

    Tensor semantic_embedding(const SceneParams& p) const {
        p.validate();
        Tensor c({kSemTokens, kSemDim});
        auto put = [&](int row, const Tensor& table, int idx) {
            for (int j = 0; j < kSemDim; ++j) c.at2(row, j) = table.at2(idx, j);
        };
        put(0, shape_table_, p.shape);
        put(1, color_table_, p.color);
        put(2, bg_table_, p.background);
        put(3, tex_table_, p.textured ? 1 : 0);
        put(4, posx_table_, bin4(p.pos_x, 0.0, 1.0));
        put(5, posy_table_, bin4(p.pos_y, 0.0, 1.0));
        put(6, size_table_, bin4(p.size, 0.2, 0.5));
        // row 7 stays zero padding
        return c;
    }

    Tensor null_embedding() const { return Tensor({kSemTokens, kSemDim}); }

    std::vector<const Tensor*> all_table_rows() const {
        std::vector<const Tensor*> t{&shape_table_, &color_table_, &bg_table_, &tex_table_,
                                     &posx_table_, &posy_table_, &size_table_};
        return t;
    }

private:
    // random cross-channel mixing with a fixed separable blur profile in
    // space; a low-pass stride-2 conv
    static Tensor smooth_kernel(int oc, int ic, Rng& rng, double gain) {
        static const double s[3] = {0.25, 0.5, 0.25};
        Tensor w({oc, ic, 3, 3});
        double sd = gain / std::sqrt(static_cast<double>(ic));
        for (int o = 0; o < oc; ++o)
            for (int i = 0; i < ic; ++i) {
                double r = sd * rng.normal();
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx) w.at4(o, i, ky, kx) = r * s[ky] * s[kx];
            }
        return w;
    }

    void build_token_indices() {
        // layer 1: 4 channels, 16x16 -> 4x4 grid of 4x4 patches
        token_idx_[0] = patch_tokens(4, 16, 4);
        // layer 2: 16 channels, 8x8 -> 4x4 grid of 2x2 patches
        token_idx_[1] = patch_tokens(16, 8, 2);
        // layer 3: 64 channels, 4x4 -> 16 spatial tokens of 64 channels
        token_idx_[2].resize(kFeatTokens * kFeatDim);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j)
                for (int ch = 0; ch < 64; ++ch)
                    token_idx_[2][(i * 4 + j) * kFeatDim + ch] = (ch * 4 + i) * 4 + j;
    }

    static std::vector<int> patch_tokens(int C, int HW, int patch) {
        int grid = HW / patch;
        std::vector<int> idx(grid * grid * C * patch * patch);
        int d = 0;
        for (int i = 0; i < grid; ++i)
            for (int j = 0; j < grid; ++j)
                for (int c = 0; c < C; ++c)
                    for (int dy = 0; dy < patch; ++dy)
                        for (int dx = 0; dx < patch; ++dx)
                            idx[d++] = (c * HW + i * patch + dy) * HW + j * patch + dx;
        return idx;
    }

    std::uint64_t seed_;
    Tensor w1_, b1_, w2_, b2_, w3_, b3_;
    Tensor readout_;
    Tensor shape_table_, color_table_, bg_table_, tex_table_, posx_table_, posy_table_, size_table_;
    std::array<std::vector<int>, 3> token_idx_;
};

// guidance target bundle: one 16x64 tensor per pyramid layer
struct GuidanceFeatureSet {
    std::array<Tensor, 3> layers;  // index 0 -> layer 1

    const Tensor& layer(int l) const {
        if (l < 1 || l > 3) throw config_error("guidance layer must be 1, 2 or 3");
        const Tensor& t = layers[l - 1];
        if (t.numel() == 0) throw config_error("guidance target for layer " + std::to_string(l) + " missing");
        return t;
    }
};

inline GuidanceFeatureSet extract_all_features(const FeaturePyramid& fp, const Tensor& img) {
    GuidanceFeatureSet s;
    for (int l = 1; l <= 3; ++l) s.layers[l - 1] = fp.extract_features(img, l);
    return s;
}

}  // namespace visrecon
