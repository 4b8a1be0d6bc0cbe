#pragma once

#include <array>

#include "visrecon/feature_space.hpp"

namespace visrecon {

// Scenes are drawn on the 4-pixel block grid (8x8 blocks): a colored shape
// over a background, with an optional sub-block checker texture on the shape.
// Keeping geometry block-aligned means untextured content lies exactly in the
// codec's retained subspace; the texture is the part the bottleneck loses.

constexpr double kTextureAmp = 0.10;

inline const std::array<std::array<double, 3>, kNumColors>& shape_palette() {
    static const std::array<std::array<double, 3>, kNumColors> p = {{
        {0.90, 0.10, 0.10},  // red
        {0.10, 0.80, 0.15},  // green
        {0.15, 0.20, 0.90},  // blue
        {0.95, 0.85, 0.10},  // yellow
        {0.85, 0.10, 0.80},  // magenta
        {0.10, 0.80, 0.85},  // cyan
        {0.95, 0.50, 0.05},  // orange
        {0.55, 0.15, 0.85},  // purple
    }};
    return p;
}

// background color at block (bi,bj)
inline std::array<double, 3> background_color(int background, int bi, int bj) {
    switch (background) {
        case 0: return {0.12, 0.12, 0.16};  // uniform dark
        case 1: return {0.82, 0.80, 0.76};  // uniform light
        case 2: {                           // vertical ramp, cool tint
            double v = 0.15 + 0.5 * (static_cast<double>(bi) / (kLatentH - 1));
            return {v * 0.7, v * 0.85, v};
        }
        default: {                          // horizontal ramp, warm tint
            double v = 0.15 + 0.5 * (static_cast<double>(bj) / (kLatentW - 1));
            return {v, v * 0.85, v * 0.6};
        }
    }
}

// object side length in blocks, from the continuous size parameter
inline int size_to_blocks(double size) {
    int b = 2 + static_cast<int>((size - 0.2) / 0.1);
    return b < 2 ? 2 : (b > 4 ? 4 : b);
}

// shape footprint on a b x b block canvas
inline bool shape_mask(int shape, int b, int i, int j) {
    int c = (b - 1) / 2;
    switch (shape) {
        case 0: return true;                        // square
        case 1: return i == c || (b == 4 && i == c + 1);  // horizontal bar
        case 2: return j == c || (b == 4 && j == c + 1);  // vertical bar
        case 3: return i == c || j == c;            // cross
        case 4: return j == 0 || i == b - 1;        // L
        default: return i == 0 || j == b - 1 - c;   // tee
    }
}

inline Tensor render_background(const SceneParams& p) {
    p.validate();
    Tensor img(image_shape());
    for (int bi = 0; bi < kLatentH; ++bi)
        for (int bj = 0; bj < kLatentW; ++bj) {
            auto col = background_color(p.background, bi, bj);
            for (int ch = 0; ch < kImageC; ++ch)
                for (int dy = 0; dy < kBlock; ++dy)
                    for (int dx = 0; dx < kBlock; ++dx)
                        img.at3(ch, bi * kBlock + dy, bj * kBlock + dx) = col[ch];
        }
    return img;
}

inline Tensor render_scene(const SceneParams& p) {
    Tensor img = render_background(p);
    int b = size_to_blocks(p.size);
    int oy = static_cast<int>(std::lround(p.pos_y * (kLatentH - b)));
    int ox = static_cast<int>(std::lround(p.pos_x * (kLatentW - b)));
    const auto& col = shape_palette()[p.color];
    for (int i = 0; i < b; ++i)
        for (int j = 0; j < b; ++j) {
            if (!shape_mask(p.shape, b, i, j)) continue;
            int bi = oy + i, bj = ox + j;
            for (int dy = 0; dy < kBlock; ++dy)
                for (int dx = 0; dx < kBlock; ++dx) {
                    int py = bi * kBlock + dy, px = bj * kBlock + dx;
                    double m = 1.0;
                    if (p.textured) m += kTextureAmp * (((py / 2 + px / 2) % 2 == 0) ? 1.0 : -1.0);
                    for (int ch = 0; ch < kImageC; ++ch) {
                        double v = col[ch] * m;
                        img.at3(ch, py, px) = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
                    }
                }
        }
    return img;
}

inline int shape_pixel_count(const SceneParams& p) {
    int b = size_to_blocks(p.size);
    int n = 0;
    for (int i = 0; i < b; ++i)
        for (int j = 0; j < b; ++j)
            if (shape_mask(p.shape, b, i, j)) ++n;
    return n * kBlock * kBlock;
}

inline std::uint64_t image_content_hash(const Tensor& img) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (double x : img.v) {
        std::uint64_t bits;
        std::memcpy(&bits, &x, sizeof(bits));
        for (int k = 0; k < 8; ++k) {
            h ^= (bits >> (8 * k)) & 0xff;
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

inline SceneParams random_scene_params(Rng& rng) {
    SceneParams p;
    p.shape = static_cast<int>(rng.uniform_int(kNumShapes));
    p.color = static_cast<int>(rng.uniform_int(kNumColors));
    p.background = static_cast<int>(rng.uniform_int(kNumBackgrounds));
    p.pos_x = rng.uniform();
    p.pos_y = rng.uniform();
    p.size = 0.2 + 0.3 * rng.uniform();
    p.textured = rng.uniform() < 0.5;
    return p;
}

}  // namespace visrecon
