#include "uswb/acquisition.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <numeric>

#include "uswb/fft.hpp"

namespace uswb::acq {

namespace {
constexpr double kPi = 3.14159265358979323846;

size_t padded_length(size_t n) {
    size_t len = 8192;
    while (len < 8 * n) len *= 2;
    return len;
}
}  // namespace

SpectrumStats spectrum_stats(const std::vector<double>& samples, double dt) {
    if (samples.size() < 2 || dt <= 0) throw InputError("spectrum_stats: invalid signal");
    double energy = 0.0;
    for (double s : samples) energy += s * s;
    if (energy == 0.0) throw InputError("spectrum_stats: all-zero signal");

    std::vector<double> padded(samples);
    padded.resize(padded_length(samples.size()), 0.0);
    const auto power = fft::power_spectrum(padded);
    const double df = 1.0 / (padded.size() * dt);

    // One-sided spectral energy; interior bins carry their mirrored half.
    std::vector<double> weight(power.size(), 2.0);
    weight.front() = 1.0;
    if (padded.size() % 2 == 0) weight.back() = 1.0;

    size_t peak = 0;
    double total = 0.0;
    for (size_t k = 0; k < power.size(); ++k) {
        total += weight[k] * power[k];
        if (power[k] > power[peak]) peak = k;
    }
    SpectrumStats st;
    st.f_max = peak * df;
    double cum = 0.0;
    for (size_t k = 0; k < power.size(); ++k) {
        cum += weight[k] * power[k];
        if (cum >= 0.95 * total) {
            st.f_95 = k * df;
            break;
        }
    }
    return st;
}

SourceTimeFunction estimate_stf(const std::vector<double>& trace, double dt, double t_a,
                                double t_b, double taper_fraction) {
    if (dt <= 0) throw InputError("estimate_stf: invalid dt");
    if (!(t_a < t_b)) throw InputError("estimate_stf: empty window");
    const double t_end = (trace.size() - 1) * dt;
    if (t_a < 0 || t_b > t_end) throw InputError("estimate_stf: window outside trace span");
    const int a = static_cast<int>(std::ceil(t_a / dt));
    const int b = static_cast<int>(std::floor(t_b / dt));
    if (b - a + 1 < 2) throw InputError("estimate_stf: window too short");

    SourceTimeFunction stf;
    stf.dt = dt;
    stf.samples.assign(trace.begin() + a, trace.begin() + b + 1);

    const int n = static_cast<int>(stf.samples.size());
    const int edge = std::min(n / 2, static_cast<int>(std::round(taper_fraction * n)));
    for (int k = 0; k < edge; ++k) {
        const double w = 0.5 * (1.0 - std::cos(kPi * (k + 1) / (edge + 1)));
        stf.samples[k] *= w;
        stf.samples[n - 1 - k] *= w;
    }

    double peak = 0.0;
    for (double s : stf.samples) peak = std::max(peak, std::abs(s));
    if (peak == 0.0) throw InputError("estimate_stf: window contains only zeros");
    for (double& s : stf.samples) s /= peak;

    stf.stats = spectrum_stats(stf.samples, dt);
    return stf;
}

SourceTimeFunction gaussian_tone(double f_center, double sigma_t, double dt,
                                 double duration) {
    if (f_center <= 0 || sigma_t <= 0 || dt <= 0 || duration <= 0) {
        throw InputError("gaussian_tone: invalid parameters");
    }
    SourceTimeFunction stf;
    stf.dt = dt;
    const int n = static_cast<int>(std::round(duration / dt)) + 1;
    const double t0 = duration / 2.0;
    stf.samples.resize(n);
    for (int k = 0; k < n; ++k) {
        const double t = k * dt - t0;
        stf.samples[k] = std::exp(-t * t / (2.0 * sigma_t * sigma_t)) *
                         std::sin(2.0 * kPi * f_center * t);
    }
    double peak = 0.0;
    for (double s : stf.samples) peak = std::max(peak, std::abs(s));
    for (double& s : stf.samples) s /= peak;
    stf.stats = spectrum_stats(stf.samples, dt);
    return stf;
}

namespace {

SourceTimeFunction shaped_pulse(double dt, double f_peak, double sigma_f, double duration) {
    const int n = static_cast<int>(std::round(duration / dt)) + 1;
    const size_t len = padded_length(n);
    const double df = 1.0 / (len * dt);
    const double t0 = duration / 2.0;

    std::vector<std::complex<double>> spec(len, 0.0);
    for (size_t k = 1; k <= len / 2; ++k) {
        const double f = k * df;
        const double amp = std::exp(-(f - f_peak) * (f - f_peak) / (2.0 * sigma_f * sigma_f));
        const std::complex<double> val =
            amp * std::exp(std::complex<double>(0.0, -2.0 * kPi * f * t0));
        spec[k] = val;
        if (k < len - k) spec[len - k] = std::conj(val);
    }
    const auto wave = fft::transform(spec, +1);

    SourceTimeFunction stf;
    stf.dt = dt;
    stf.samples.resize(n);
    for (int k = 0; k < n; ++k) stf.samples[k] = wave[k].real();
    double peak = 0.0;
    for (double s : stf.samples) peak = std::max(peak, std::abs(s));
    for (double& s : stf.samples) s /= peak;
    return stf;
}

}  // namespace

SourceTimeFunction default_pulse(double dt) {
    if (dt <= 0) throw InputError("default_pulse: invalid dt");
    constexpr double kPeak = 2.296e6;
    constexpr double kF95Target = 3.284e6;
    constexpr double kDuration = 2.5e-6;
    constexpr double kCanonicalDt = 5e-9;

    // The spectral width is calibrated once at a canonical sampling rate so
    // that the discrete 95%-energy frequency hits the target; every sampling
    // of the pulse then shares the same shape and the same nominal stats
    // (mesh sizing must not depend on the rate the pulse was sampled at).
    struct Calibration {
        double sigma_f;
        SpectrumStats stats;
    };
    static const Calibration cal = [] {
        double lo = 0.2e6, hi = 2.5e6;
        for (int it = 0; it < 48 && hi - lo >= 1.0; ++it) {
            const double sigma_f = 0.5 * (lo + hi);
            const auto pulse = shaped_pulse(kCanonicalDt, kPeak, sigma_f, kDuration);
            const auto stats = spectrum_stats(pulse.samples, kCanonicalDt);
            (stats.f_95 < kF95Target ? lo : hi) = sigma_f;
        }
        Calibration c;
        c.sigma_f = 0.5 * (lo + hi);
        const auto pulse = shaped_pulse(kCanonicalDt, kPeak, c.sigma_f, kDuration);
        c.stats = spectrum_stats(pulse.samples, kCanonicalDt);
        return c;
    }();

    SourceTimeFunction stf = shaped_pulse(dt, kPeak, cal.sigma_f, kDuration);
    stf.stats = cal.stats;
    return stf;
}

wavesim::Traces FmcDataset::transmit_row(int i) const {
    wavesim::Traces tr(n, n_samples, dt, t0);
    for (int j = 0; j < n; ++j) {
        for (int k = 0; k < n_samples; ++k) tr.at(j, k) = at(i, j, k);
    }
    return tr;
}

double FmcDataset::max_abs() const {
    double m = 0.0;
    for (double v : data) m = std::max(m, std::abs(v));
    return m;
}

void FmcDataset::scale(double s) {
    for (double& v : data) v *= s;
}

wavesim::ReceiverSpec array_receivers(const model::ArraySpec& array) {
    wavesim::ReceiverSpec rec;
    rec.positions.reserve(array.n_elements);
    rec.directions.assign(array.n_elements, Vec2{0.0, 1.0});
    for (int i = 0; i < array.n_elements; ++i) {
        rec.positions.push_back(array.element_position(i));
    }
    return rec;
}

FmcDataset generate_fmc(const wavesim::SpectralMesh& mesh, const wavesim::NodalMaterial& mat,
                        const model::ArraySpec& array, const SourceTimeFunction& stf,
                        const wavesim::TimeParams& time, const std::vector<double>& damping,
                        int record_stride) {
    const int n = array.n_elements;
    const int n_samples = time.n_steps() / record_stride + 1;
    FmcDataset fmc(n, n_samples, time.dt * record_stride);
    fmc.array = array;

    const auto receivers = array_receivers(array);

    std::string error;
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (int i = 0; i < n; ++i) {
        if (!error.empty()) continue;
        try {
            wavesim::SourceTerm src;
            src.position = array.element_position(i);
            src.direction = {0.0, 1.0};
            src.waveform = stf.samples;
            src.waveform_dt = stf.dt;
            wavesim::ForwardOptions opt;
            opt.record_stride = record_stride;
            const auto result =
                wavesim::run_forward(mesh, mat, {src}, receivers, time, damping, opt);
            for (int j = 0; j < n; ++j) {
                for (int k = 0; k < n_samples; ++k) {
                    fmc.at(i, j, k) = result.traces.at(j, k);
                }
            }
        } catch (const std::exception& e) {
#ifdef _OPENMP
#pragma omp critical
#endif
            error = e.what();
        }
    }
    if (!error.empty()) throw NumericalError("generate_fmc: " + error);
    return fmc;
}

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

}  // namespace

void save_fmc(const FmcDataset& fmc, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("cannot write FMC file: " + path);
    os.write("FMC1", 4);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(fmc.n));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(fmc.n_samples));
    write_pod<double>(os, fmc.dt);
    write_pod<double>(os, fmc.t0);
    write_pod<double>(os, fmc.array.pitch);
    write_pod<double>(os, fmc.array.first_element_x);
    os.write(reinterpret_cast<const char*>(fmc.data.data()),
             static_cast<std::streamsize>(fmc.data.size() * sizeof(double)));
    if (!os) throw InputError("short write on FMC file: " + path);
}

FmcDataset load_fmc(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("cannot open FMC file: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "FMC1") throw InputError("not an FMC file: " + path);
    const auto n = read_pod<std::uint32_t>(is);
    const auto n_t = read_pod<std::uint32_t>(is);
    FmcDataset fmc(static_cast<int>(n), static_cast<int>(n_t), 0.0);
    fmc.dt = read_pod<double>(is);
    fmc.t0 = read_pod<double>(is);
    fmc.array.n_elements = static_cast<int>(n);
    fmc.array.pitch = read_pod<double>(is);
    fmc.array.first_element_x = read_pod<double>(is);
    is.read(reinterpret_cast<char*>(fmc.data.data()),
            static_cast<std::streamsize>(fmc.data.size() * sizeof(double)));
    if (!is) throw InputError("truncated FMC file: " + path);
    return fmc;
}

void export_fmc_csv(const FmcDataset& fmc, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw InputError("cannot write CSV: " + path);
    os << "transmitter,receiver,sample,time_s,amplitude\n";
    for (int i = 0; i < fmc.n; ++i) {
        for (int j = 0; j < fmc.n; ++j) {
            for (int k = 0; k < fmc.n_samples; ++k) {
                os << i << ',' << j << ',' << k << ',' << fmc.t0 + k * fmc.dt << ','
                   << fmc.at(i, j, k) << '\n';
            }
        }
    }
}

}  // namespace uswb::acq
