#pragma once

#include <string>
#include <vector>

#include "uswb/core.hpp"
#include "uswb/model.hpp"
#include "uswb/wavesim.hpp"

namespace uswb::acq {

struct SpectrumStats {
    double f_max = 0.0;  // Hz, frequency of maximum power
    double f_95 = 0.0;   // Hz, 95% of signal energy lies below
};

/// Power-spectrum statistics of a sampled signal (zero-padded FFT).
/// Throws on an all-zero signal.
SpectrumStats spectrum_stats(const std::vector<double>& samples, double dt);

struct SourceTimeFunction {
    std::vector<double> samples;  // peak-normalized
    double dt = 0.0;
    SpectrumStats stats;

    double duration() const { return (samples.size() - 1) * dt; }
};

/// Excitation pulse estimation: cut [t_a, t_b] out of a trace, cosine-taper
/// the window edges (taper_fraction of the window length on each side),
/// peak-normalize, attach spectrum stats.
SourceTimeFunction estimate_stf(const std::vector<double>& trace, double dt, double t_a,
                                double t_b, double taper_fraction = 0.1);

/// The shipped default transducer pulse: band-limited with peak power at
/// 2.296 MHz and 95% of its energy below 3.284 MHz, 2.5 us long. Built in the
/// frequency domain and calibrated against spectrum_stats.
SourceTimeFunction default_pulse(double dt);

/// Gaussian-modulated tone burst (test fixture and generic excitation).
SourceTimeFunction gaussian_tone(double f_center, double sigma_t, double dt,
                                 double duration);

/// Full-matrix-capture dataset: one A-scan per (transmitter i, receiver j).
struct FmcDataset {
    int n = 0;          // array elements
    int n_samples = 0;  // per trace
    double dt = 0.0;
    double t0 = 0.0;
    model::ArraySpec array;
    std::vector<double> data;  // (i, j, k) row-major

    FmcDataset() = default;
    FmcDataset(int n_, int n_samples_, double dt_)
        : n(n_), n_samples(n_samples_), dt(dt_),
          data(size_t(n_) * n_ * n_samples_, 0.0) {}

    double& at(int i, int j, int k) {
        return data[(size_t(i) * n + j) * n_samples + k];
    }
    double at(int i, int j, int k) const {
        return data[(size_t(i) * n + j) * n_samples + k];
    }
    /// All receiver traces for transmitter i.
    wavesim::Traces transmit_row(int i) const;
    double max_abs() const;
    void scale(double s);
};

/// One forward run per transmitter, recording every element; deterministic
/// and independent of transmitter scheduling order.
FmcDataset generate_fmc(const wavesim::SpectralMesh& mesh, const wavesim::NodalMaterial& mat,
                        const model::ArraySpec& array, const SourceTimeFunction& stf,
                        const wavesim::TimeParams& time, const std::vector<double>& damping,
                        int record_stride = 1);

wavesim::ReceiverSpec array_receivers(const model::ArraySpec& array);

/// FMC file: "FMC1" magic, u32 n, u32 n_t, f64 dt, f64 t0, f64 pitch,
/// f64 first_x, then n*n*n_t little-endian f64 samples in (i, j, k) order.
void save_fmc(const FmcDataset& fmc, const std::string& path);
FmcDataset load_fmc(const std::string& path);

/// Long-format CSV (i, j, k, t, amplitude); intended for small datasets.
void export_fmc_csv(const FmcDataset& fmc, const std::string& path);

}  // namespace uswb::acq
