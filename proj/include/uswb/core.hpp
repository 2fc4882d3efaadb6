#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace uswb {

inline constexpr const char* kVersion = "0.1.0";

/// Bad input or configuration (CLI exit code 2).
class InputError : public std::runtime_error {
public:
    explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Numerical failure at runtime, e.g. solver instability (CLI exit code 1).
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

struct Vec2 {
    double x = 0.0;
    double y = 0.0;

    Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
    Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
    Vec2 operator*(double s) const { return {x * s, y * s}; }
    double dot(const Vec2& o) const { return x * o.x + y * o.y; }
    double norm() const { return std::hypot(x, y); }
};

inline double distance(const Vec2& a, const Vec2& b) { return (a - b).norm(); }

/// Uniform pixel grid. (x0, y0) is the outer corner of pixel (0, 0); pixel
/// centers sit at x0 + (ix + 0.5) * spacing. The y axis points down into the
/// specimen: iy = 0 is the row closest to the probe surface.
struct RasterGrid {
    int nx = 0;
    int ny = 0;
    double x0 = 0.0;
    double y0 = 0.0;
    double spacing = 0.0;

    int size() const { return nx * ny; }
    int index(int ix, int iy) const { return iy * nx + ix; }
    Vec2 pixel_center(int ix, int iy) const {
        return {x0 + (ix + 0.5) * spacing, y0 + (iy + 0.5) * spacing};
    }
    double width() const { return nx * spacing; }
    double height() const { return ny * spacing; }

    bool same_shape(const RasterGrid& o) const {
        return nx == o.nx && ny == o.ny;
    }
};

/// Scalar image on a raster grid. TFM envelopes are nonnegative; RTM/FWI
/// derived maps are signed.
struct ImageGrid {
    RasterGrid grid;
    std::vector<double> values;  // row-major, index = iy * nx + ix

    ImageGrid() = default;
    explicit ImageGrid(const RasterGrid& g) : grid(g), values(g.size(), 0.0) {}

    double& at(int ix, int iy) { return values[grid.index(ix, iy)]; }
    double at(int ix, int iy) const { return values[grid.index(ix, iy)]; }
};

/// FNV-1a over a byte string; used for stable config hashes in manifests.
inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace uswb
