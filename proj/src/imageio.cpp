#include "uswb/imageio.hpp"

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <memory>
#include <vector>

namespace uswb::imageio {

namespace {

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}

void write_png(const std::string& path, int nx, int ny, int channels,
               const std::vector<png_byte>& pixels) {
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw InputError("cannot write PNG: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        std::fclose(fp);
        throw InputError("PNG write failed: " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, nx, ny, 8,
                 channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(ny);
    for (int iy = 0; iy < ny; ++iy) {
        rows[iy] = const_cast<png_bytep>(pixels.data() + size_t(iy) * nx * channels);
    }
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

}  // namespace

void save_float_grid(const ImageGrid& image, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("cannot write image: " + path);
    os.write("FGR1", 4);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(image.grid.nx));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(image.grid.ny));
    write_pod<double>(os, image.grid.x0);
    write_pod<double>(os, image.grid.y0);
    write_pod<double>(os, image.grid.spacing);
    for (double v : image.values) write_pod<float>(os, static_cast<float>(v));
    if (!os) throw InputError("short write on image: " + path);
}

ImageGrid load_float_grid(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("cannot open image: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "FGR1") throw InputError("not an image file: " + path);
    RasterGrid g;
    g.nx = static_cast<int>(read_pod<std::uint32_t>(is));
    g.ny = static_cast<int>(read_pod<std::uint32_t>(is));
    g.x0 = read_pod<double>(is);
    g.y0 = read_pod<double>(is);
    g.spacing = read_pod<double>(is);
    ImageGrid img(g);
    for (double& v : img.values) v = read_pod<float>(is);
    if (!is) throw InputError("truncated image file: " + path);
    return img;
}

void save_png_gray(const ImageGrid& image, const std::string& path) {
    const auto [lo_it, hi_it] = std::minmax_element(image.values.begin(), image.values.end());
    const double lo = *lo_it, hi = *hi_it;
    const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
    std::vector<png_byte> pixels(image.values.size());
    for (size_t k = 0; k < image.values.size(); ++k) {
        pixels[k] = static_cast<png_byte>(std::clamp((image.values[k] - lo) * scale, 0.0, 255.0));
    }
    write_png(path, image.grid.nx, image.grid.ny, 1, pixels);
}

void save_png_overlay(const ImageGrid& image, const model::GroundTruthMask& truth,
                      double tau, const metrics::ExclusionRegion& exclusion,
                      const std::string& path) {
    if (!image.grid.same_shape(truth.grid)) {
        throw InputError("overlay: image and truth grids differ");
    }
    const int nx = image.grid.nx, ny = image.grid.ny;
    const int ny_eval = ny - exclusion.excluded_rows(ny);
    std::vector<png_byte> pixels(size_t(nx) * ny * 3, 0);
    for (int iy = 0; iy < ny; ++iy) {
        for (int ix = 0; ix < nx; ++ix) {
            const int k = image.grid.index(ix, iy);
            png_byte* px = pixels.data() + size_t(k) * 3;
            if (iy >= ny_eval) {
                px[0] = px[1] = px[2] = 64;  // excluded band
                continue;
            }
            const bool positive = image.values[k] >= tau;
            const bool defect = truth.mask[k] != 0;
            if (positive && defect) {
                px[0] = px[1] = px[2] = 255;
            } else if (positive) {
                px[0] = 220;  // false positive: red
            } else if (defect) {
                px[2] = 220;  // false negative: blue
            }
        }
    }
    write_png(path, nx, ny, 3, pixels);
}

}  // namespace uswb::imageio
