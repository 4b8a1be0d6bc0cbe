#pragma once

#include "visrecon/latent_codec.hpp"
#include "visrecon/serialize.hpp"

namespace visrecon {

inline void write_ppm(const std::filesystem::path& path, const Tensor& img) {
    check_image(img, "write_ppm");
    atomic_write(path, [&](std::ostream& os) {
        os << "P6\n" << kImageW << " " << kImageH << "\n255\n";
        for (int i = 0; i < kImageH; ++i)
            for (int j = 0; j < kImageW; ++j)
                for (int c = 0; c < 3; ++c) {
                    double v = std::clamp(img.at3(c, i, j), 0.0, 1.0);
                    os.put(static_cast<char>(std::lround(v * 255.0)));
                }
    });
}

// tile a list of images into one grid with a 2-pixel separator
inline void write_ppm_grid(const std::filesystem::path& path, const std::vector<Tensor>& images, int cols) {
    check(!images.empty() && cols >= 1, "write_ppm_grid: empty grid");
    int n = static_cast<int>(images.size());
    int rows = (n + cols - 1) / cols;
    const int sep = 2;
    int gh = rows * kImageH + (rows - 1) * sep;
    int gw = cols * kImageW + (cols - 1) * sep;
    std::vector<unsigned char> px(static_cast<std::size_t>(gh) * gw * 3, 32);
    for (int k = 0; k < n; ++k) {
        check_image(images[k], "write_ppm_grid");
        int r0 = (k / cols) * (kImageH + sep), c0 = (k % cols) * (kImageW + sep);
        for (int i = 0; i < kImageH; ++i)
            for (int j = 0; j < kImageW; ++j)
                for (int c = 0; c < 3; ++c) {
                    double v = std::clamp(images[k].at3(c, i, j), 0.0, 1.0);
                    px[(static_cast<std::size_t>(r0 + i) * gw + (c0 + j)) * 3 + c] =
                        static_cast<unsigned char>(std::lround(v * 255.0));
                }
    }
    atomic_write(path, [&](std::ostream& os) {
        os << "P6\n" << gw << " " << gh << "\n255\n";
        os.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
    });
}

inline Tensor read_ppm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw data_error("cannot open: " + path.string());
    std::string magic;
    int w = 0, h = 0, maxv = 0;
    is >> magic >> w >> h >> maxv;
    if (magic != "P6" || maxv != 255) throw data_error("unsupported pixel-map format: " + path.string());
    if (w != kImageW || h != kImageH) throw data_error("unexpected pixel-map size: " + path.string());
    is.get();
    Tensor img(image_shape());
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            for (int c = 0; c < 3; ++c) {
                int b = is.get();
                if (b < 0) throw data_error("truncated pixel map: " + path.string());
                img.at3(c, i, j) = b / 255.0;
            }
    return img;
}

}  // namespace visrecon
