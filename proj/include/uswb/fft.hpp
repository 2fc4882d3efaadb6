#pragma once

#include <complex>
#include <vector>

namespace uswb::fft {

/// Complex DFT, forward (sign = -1) or inverse (sign = +1). The inverse is
/// normalized by 1/n so that inverse(forward(x)) == x.
std::vector<std::complex<double>> transform(const std::vector<std::complex<double>>& in,
                                            int sign);

std::vector<std::complex<double>> forward(const std::vector<double>& in);

/// Power spectrum |X_k|^2 of a real signal for the one-sided bins
/// k = 0 .. floor(n/2); bin width is 1 / (n * dt).
std::vector<double> power_spectrum(const std::vector<double>& in);

}  // namespace uswb::fft
