#pragma once

#include <complex>
#include <vector>

#include "uswb/acquisition.hpp"
#include "uswb/core.hpp"

namespace uswb::tfm {

enum class Interpolation { kNearest, kLinear };

struct TfmConfig {
    RasterGrid grid;
    double speed = 0.0;  // m/s, p-wave speed used for the delays
    Interpolation interpolation = Interpolation::kLinear;
};

/// Analytic signal via the frequency-domain construction: positive
/// frequencies doubled, negative zeroed, DC and Nyquist unchanged.
std::vector<std::complex<double>> analytic_signal(const std::vector<double>& trace);

/// Two-leg direct-path delay (|pixel-tx| + |pixel-rx|) / c.
double travel_time(const Vec2& tx, const Vec2& pixel, const Vec2& rx, double c);

/// Delay-and-sum of the Hilbert-transformed information matrix over the pixel
/// grid; the envelope (modulus) of the complex sum per pixel. Out-of-range
/// delays contribute zero.
ImageGrid tfm_image(const acq::FmcDataset& fmc, const TfmConfig& cfg);

}  // namespace uswb::tfm
