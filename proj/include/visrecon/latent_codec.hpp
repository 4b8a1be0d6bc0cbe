#pragma once

#include <Eigen/QR>

#include "visrecon/autodiff.hpp"
#include "visrecon/diffusion.hpp"

namespace visrecon {

constexpr int kImageC = 3, kImageH = 32, kImageW = 32;
constexpr int kBlock = 4;                         // space-to-depth factor
constexpr int kDepthC = kImageC * kBlock * kBlock;  // 48
constexpr int kBlocks = kLatentH * kLatentW;        // 64 spatial blocks

inline std::vector<int> image_shape() { return {kImageC, kImageH, kImageW}; }

inline void check_image(const Tensor& x, const char* what) {
    check(x.shape == image_shape(), std::string(what) + ": expected 3x32x32 image");
}

// Fixed invertible-on-its-range image<->latent transform: space-to-depth 4x
// (3->48 channels at 8x8) followed by an orthonormal 48->4 projection. The
// projection basis is seeded, except that its first three directions span the
// per-channel block means, so flat color regions survive the bottleneck while
// sub-block detail is deliberately lost.
class LatentCodec {
public:
    explicit LatentCodec(std::uint64_t seed) : seed_(seed), proj_({kLatentC, kDepthC}) {
        Eigen::MatrixXd A = Eigen::MatrixXd::Zero(kDepthC, kDepthC);
        for (int c = 0; c < kImageC; ++c)
            for (int k = 0; k < kBlock * kBlock; ++k) A(c * kBlock * kBlock + k, c) = 0.25;
        Rng rng(derive_seed(seed, "codec-basis"));
        for (int j = kImageC; j < kDepthC; ++j)
            for (int i = 0; i < kDepthC; ++i) A(i, j) = rng.normal();
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(A);
        Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(kDepthC, kDepthC);
        Eigen::MatrixXd R = qr.matrixQR().topRows(kDepthC).triangularView<Eigen::Upper>();
        for (int j = 0; j < kLatentC; ++j) {
            double s = R(j, j) < 0.0 ? -1.0 : 1.0;
            for (int i = 0; i < kDepthC; ++i) proj_.at2(j, i) = s * Q(i, j);
        }
        build_index();
    }

    std::uint64_t seed() const { return seed_; }
    const Tensor& projection() const { return proj_; }

    Tensor encode_image(const Tensor& img) const {
        check_image(img, "encode_image");
        Tensor y({kDepthC, kBlocks});
        for (int i = 0; i < y.numel(); ++i) y.v[i] = img.v[s2d_index_[i]];
        Tensor z({kLatentC, kLatentH, kLatentW});
        z.mat(kLatentC, kBlocks).noalias() = proj_.mat(kLatentC, kDepthC) * y.mat(kDepthC, kBlocks);
        return z;
    }

    // unclamped; callers clamp to [0,1] for display/metrics
    Tensor decode_latent(const Tensor& z) const {
        check_latent(z, "decode_latent");
        Tensor y({kDepthC, kBlocks});
        y.mat(kDepthC, kBlocks).noalias() =
            proj_.mat(kLatentC, kDepthC).transpose() * z.mat(kLatentC, kBlocks);
        Tensor img(image_shape());
        for (int i = 0; i < y.numel(); ++i) img.v[s2d_index_[i]] = y.v[i];
        return img;
    }

    // decode as graph ops (linear, so the VJP is exact)
    int decode_op(Graph& g, int z_node) const {
        int z2d = g.reshape(z_node, {kLatentC, kBlocks});
        int p = g.input(proj_);
        int y = g.matmul(p, z2d, true, false);  // [48,64]
        return g.gather(y, d2s_index_, image_shape());
    }

    int encode_op(Graph& g, int img_node) const {
        int y = g.gather(img_node, s2d_index_, {kDepthC, kBlocks});
        int p = g.input(proj_);
        int z2d = g.matmul(p, y, false, false);
        return g.reshape(z2d, latent_shape());
    }

private:
    void build_index() {
        s2d_index_.resize(kDepthC * kBlocks);
        d2s_index_.resize(kImageC * kImageH * kImageW);
        for (int c = 0; c < kImageC; ++c)
            for (int dy = 0; dy < kBlock; ++dy)
                for (int dx = 0; dx < kBlock; ++dx)
                    for (int bi = 0; bi < kLatentH; ++bi)
                        for (int bj = 0; bj < kLatentW; ++bj) {
                            int s = (c * kBlock + dy) * kBlock + dx;
                            int depth_flat = s * kBlocks + bi * kLatentW + bj;
                            int img_flat = (c * kImageH + bi * kBlock + dy) * kImageW + bj * kBlock + dx;
                            s2d_index_[depth_flat] = img_flat;
                            d2s_index_[img_flat] = depth_flat;
                        }
    }

    std::uint64_t seed_;
    Tensor proj_;
    std::vector<int> s2d_index_;  // depth-layout flat -> image flat
    std::vector<int> d2s_index_;  // image flat -> depth-layout flat
};

inline Tensor clamp01(const Tensor& img) {
    Tensor out = img;
    for (double& x : out.v) x = x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x);
    return out;
}

}  // namespace visrecon
