#pragma once

#include <string>

#include "uswb/core.hpp"
#include "uswb/metrics.hpp"
#include "uswb/model.hpp"

namespace uswb::imageio {

/// Float-grid image file: "FGR1" magic, u32 nx, u32 ny, f64 x0, f64 y0,
/// f64 spacing, then nx*ny little-endian f32 values in row-major order.
void save_float_grid(const ImageGrid& image, const std::string& path);
ImageGrid load_float_grid(const std::string& path);

/// 8-bit grayscale PNG, values normalized to [min, max].
void save_png_gray(const ImageGrid& image, const std::string& path);

/// Classification overlay at a threshold: TP white, FP red, FN blue, TN black,
/// excluded rows dark gray.
void save_png_overlay(const ImageGrid& image, const model::GroundTruthMask& truth,
                      double tau, const metrics::ExclusionRegion& exclusion,
                      const std::string& path);

}  // namespace uswb::imageio
