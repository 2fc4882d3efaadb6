#include "uswb/fft.hpp"

#include <fftw3.h>

#include <mutex>

namespace uswb::fft {

namespace {
// FFTW planning is not thread-safe; execution of independent plans is.
std::mutex g_plan_mutex;
}  // namespace

std::vector<std::complex<double>> transform(const std::vector<std::complex<double>>& in,
                                            int sign) {
    const int n = static_cast<int>(in.size());
    std::vector<std::complex<double>> out(in.size());
    if (n == 0) return out;

    std::vector<std::complex<double>> buf(in);
    fftw_plan plan;
    {
        std::lock_guard<std::mutex> lock(g_plan_mutex);
        plan = fftw_plan_dft_1d(n, reinterpret_cast<fftw_complex*>(buf.data()),
                                reinterpret_cast<fftw_complex*>(out.data()),
                                sign < 0 ? FFTW_FORWARD : FFTW_BACKWARD, FFTW_ESTIMATE);
    }
    fftw_execute(plan);
    {
        std::lock_guard<std::mutex> lock(g_plan_mutex);
        fftw_destroy_plan(plan);
    }
    if (sign > 0) {
        const double scale = 1.0 / n;
        for (auto& v : out) v *= scale;
    }
    return out;
}

std::vector<std::complex<double>> forward(const std::vector<double>& in) {
    std::vector<std::complex<double>> cin(in.size());
    for (size_t i = 0; i < in.size(); ++i) cin[i] = {in[i], 0.0};
    return transform(cin, -1);
}

std::vector<double> power_spectrum(const std::vector<double>& in) {
    const auto spec = forward(in);
    const size_t n_half = in.size() / 2 + 1;
    std::vector<double> power(n_half);
    for (size_t k = 0; k < n_half; ++k) power[k] = std::norm(spec[k]);
    return power;
}

}  // namespace uswb::fft
