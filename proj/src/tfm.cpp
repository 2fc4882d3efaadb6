#include "uswb/tfm.hpp"

#include <cmath>

#include "uswb/fft.hpp"

namespace uswb::tfm {

std::vector<std::complex<double>> analytic_signal(const std::vector<double>& trace) {
    const size_t n = trace.size();
    if (n < 2) throw InputError("analytic_signal: trace too short");
    auto spec = fft::forward(trace);
    // Positive frequencies doubled, negative zeroed; DC (and Nyquist for even
    // length) unchanged.
    const size_t nyquist = n / 2;
    for (size_t k = 1; k < n; ++k) {
        if (n % 2 == 0 && k == nyquist) continue;
        if (k < (n + 1) / 2) {
            spec[k] *= 2.0;
        } else {
            spec[k] = 0.0;
        }
    }
    return fft::transform(spec, +1);
}

double travel_time(const Vec2& tx, const Vec2& pixel, const Vec2& rx, double c) {
    if (c <= 0) throw InputError("travel_time: speed must be positive");
    return (distance(pixel, tx) + distance(pixel, rx)) / c;
}

ImageGrid tfm_image(const acq::FmcDataset& fmc, const TfmConfig& cfg) {
    if (cfg.grid.size() <= 0) throw InputError("tfm_image: empty pixel grid");
    if (cfg.speed <= 0) throw InputError("tfm_image: speed must be positive");

    const int n = fmc.n;
    const int n_t = fmc.n_samples;

    // Hilbert-transform the whole information matrix once.
    std::vector<std::complex<double>> analytic(size_t(n) * n * n_t);
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(dynamic)
#endif
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            std::vector<double> trace(n_t);
            for (int k = 0; k < n_t; ++k) trace[k] = fmc.at(i, j, k);
            const auto a = analytic_signal(trace);
            std::copy(a.begin(), a.end(), analytic.begin() + (size_t(i) * n + j) * n_t);
        }
    }

    std::vector<Vec2> elements(n);
    for (int i = 0; i < n; ++i) elements[i] = fmc.array.element_position(i);

    ImageGrid img(cfg.grid);
    const bool linear = cfg.interpolation == Interpolation::kLinear;

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 8)
#endif
    for (int iy = 0; iy < cfg.grid.ny; ++iy) {
        std::vector<double> leg(n);
        for (int ix = 0; ix < cfg.grid.nx; ++ix) {
            const Vec2 px = cfg.grid.pixel_center(ix, iy);
            for (int i = 0; i < n; ++i) leg[i] = distance(px, elements[i]);
            std::complex<double> sum = 0.0;
            for (int i = 0; i < n; ++i) {
                const std::complex<double>* row = analytic.data() + size_t(i) * n * n_t;
                for (int j = 0; j < n; ++j) {
                    const double t = (leg[i] + leg[j]) / cfg.speed - fmc.t0;
                    const double pos = t / fmc.dt;
                    if (linear) {
                        const int k = static_cast<int>(pos);
                        if (pos < 0.0 || k + 1 >= n_t) continue;
                        const double frac = pos - k;
                        sum += (1.0 - frac) * row[size_t(j) * n_t + k] +
                               frac * row[size_t(j) * n_t + k + 1];
                    } else {
                        const int k = static_cast<int>(std::lround(pos));
                        if (k < 0 || k >= n_t) continue;
                        sum += row[size_t(j) * n_t + k];
                    }
                }
            }
            img.at(ix, iy) = std::abs(sum);
        }
    }
    return img;
}

}  // namespace uswb::tfm
