#pragma once

#include <string>
#include <vector>

#include "uswb/acquisition.hpp"
#include "uswb/core.hpp"
#include "uswb/setup.hpp"
#include "uswb/wavesim.hpp"

namespace uswb::rtm {

/// Per-receiver residual time series injected along the receiver directions.
struct AdjointSourceSet {
    wavesim::Traces traces;        // sim - obs
    wavesim::ReceiverSpec receivers;
};

AdjointSourceSet build_adjoint_sources(const wavesim::Traces& sim,
                                       const wavesim::Traces& obs,
                                       const wavesim::ReceiverSpec& receivers);

/// Zero-lag correlation of two stored wavefield histories: time-trapezoid of
/// the pointwise dot product. Returns one value per store grid point.
std::vector<double> rtm_classic(const wavesim::SnapshotStore& forward,
                                const wavesim::SnapshotStore& backward);

/// Density sensitivity accumulation from stored histories (both must carry
/// velocities): trapezoid of v.v_adj - grad u : Ct : grad u_adj. Matches the
/// on-the-fly accumulation of run_adjoint in decimated mode.
std::vector<double> rtm_density_kernel(const wavesim::SpectralMesh& mesh,
                                       const wavesim::SnapshotStore& forward,
                                       const wavesim::SnapshotStore& backward,
                                       const wavesim::NodalMaterial& mat);

enum class KernelType { kDensity, kClassic };

struct RtmImage {
    ImageGrid image;
    KernelType kernel = KernelType::kDensity;
    double sigma = 3.0;  // pixels
    int shots = 0;
};

/// Normalized Gaussian blur, truncated at 4 sigma, half-sample reflect padding.
ImageGrid gaussian_blur(const ImageGrid& in, double sigma_px);

/// Sum over shots -> absolute value -> Gaussian blur (sigma in pixels).
RtmImage finalize_rtm(const std::vector<ImageGrid>& shot_images, double sigma_px);

struct RtmConfig {
    KernelType kernel = KernelType::kDensity;
    double sigma = 3.0;       // pixels
    double image_spacing = 1e-4;  // m
    int group_size = 1;           // transmitters per backpropagated shot
    int snapshot_stride = 1;      // wavefield history decimation
    setup::SimConfig sim;
};

struct RtmResult {
    RtmImage final_image;
    /// Shot-summed field before absolute value and blur (the raw kernel sum),
    /// on the same grid.
    ImageGrid raw_sum;
};

/// Full driver: background simulations per (stacked) shot, residual adjoint
/// backpropagation, kernel accumulation, finalize.
RtmResult reconstruct(const model::ScenarioSpec& spec, const acq::FmcDataset& fmc,
                      const acq::SourceTimeFunction& stf, const RtmConfig& cfg);

void save_rtm_metadata(const RtmImage& image, const std::string& path);

}  // namespace uswb::rtm
