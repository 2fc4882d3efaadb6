#pragma once

#include <string>
#include <vector>

#include "uswb/acquisition.hpp"
#include "uswb/core.hpp"
#include "uswb/model.hpp"
#include "uswb/setup.hpp"
#include "uswb/wavesim.hpp"

namespace uswb::fwi {

/// Density unknowns: bilinear nodal basis on a regular inversion grid over the
/// region of interest. Outside the ROI the density is frozen at background.
struct DensityParameterization {
    double x0 = 0.0, y0 = 0.0;  // ROI origin, m
    double dx = 0.0, dy = 0.0;  // cell size, m
    int ncx = 0, ncy = 0;       // cells per axis
    double rho_background = 0.0;
    double lo = 0.0, hi = 0.0;  // box bounds on every coefficient
    std::vector<double> coeffs;  // (ncx+1) x (ncy+1), row-major

    static DensityParameterization regular(double x0, double y0, double width, double depth,
                                           double spacing, double rho_background,
                                           double lo_factor, double hi_factor);

    int nx() const { return ncx + 1; }
    int ny() const { return ncy + 1; }
    int n_coeffs() const { return nx() * ny(); }
    Vec2 coeff_pos(int i) const {
        return {x0 + (i % nx()) * dx, y0 + (i / nx()) * dy};
    }
    bool inside(const Vec2& p) const;
    double eval(const Vec2& p) const;  // background outside the ROI
    void clamp_bounds();

    /// Density at every mesh node (basis evaluation inside the ROI).
    std::vector<double> nodal_density(const wavesim::SpectralMesh& mesh) const;
    /// Transpose of nodal_density's linearization: projects a per-volume nodal
    /// kernel onto coefficient space, g_i = sum_nodes kernel * volume * N_i.
    std::vector<double> project_gradient(const wavesim::SpectralMesh& mesh,
                                         const std::vector<double>& nodal_kernel) const;

    /// Coefficient grid as a raster whose pixel centers sit on the nodes.
    RasterGrid image_grid() const;
    /// Density contrast 1 - rho/rho_background (bright = defect).
    ImageGrid contrast_image() const;
};

struct Supershot {
    std::vector<int> members;  // transmitter indices
    wavesim::Traces observed;  // sum of the members' information-matrix rows
};

/// Groups transmitters contiguously by element position; the last group may be
/// smaller. An empty selection means all transmitters.
std::vector<Supershot> stack_sources(const acq::FmcDataset& fmc, int group_size,
                                     const std::vector<int>& selection = {});

/// 0.5 sum_r integral((sim - obs) . n)^2 dt, trapezoidal in time.
double misfit(const wavesim::Traces& sim, const wavesim::Traces& obs);

/// Multiplicative envelope that zeroes [t_a, t_b] with cosine-tapered edges of
/// the given width (seconds); 1 elsewhere.
std::vector<double> window_envelope(int n_samples, double dt, double t_a, double t_b,
                                    double taper);
void apply_time_window(wavesim::Traces& traces, double t_a, double t_b, double taper);

/// Coefficients above threshold * rho_background snap back to background.
void reset_high_densities(DensityParameterization& param, double threshold);

struct StageConfig {
    int max_iters = 20;
    int group_size = 8;
    bool exclude_backwall = false;   // drop data past the first back-wall p-echo
    double reset_threshold = 0.0;    // applied to the incoming model (0 = off)
    double rel_decrease_tol = 1e-4;
};

struct MisfitRecord {
    int iteration = 0;
    double chi = 0.0;
    double grad_norm = 0.0;
    bool accepted = true;
};

struct InversionConfig {
    double roi_width = 50e-3;   // m
    double roi_depth = 25e-3;   // m
    double roi_x0 = -1.0;       // m; negative = center the ROI under the aperture
    /// Top of the ROI below the probe surface. The direct surface waves are
    /// the worst-resolved part of the data; keeping the first fraction of a
    /// wavelength out of the ROI stops the inversion from sculpting the skin
    /// to fit their discretization noise.
    double roi_y0 = 0.0;        // m
    double inv_spacing = 0.25e-3;
    double bound_lo_factor = 0.1;
    double bound_hi_factor = 1.0;
    int lbfgs_memory = 10;
    double max_step_fraction = 0.05;  // first-step scaling vs background density
    double backwall_band_fraction = 0.10;  // ROI-bottom artifact reset band
    bool calibrate_source = true;
    int snapshot_stride = 1;
    StageConfig stage1{20, 8, true, 0.0, 1e-4};
    StageConfig stage2{20, 2, false, 0.9, 1e-4};
    setup::SimConfig sim;

    DensityParameterization make_parameterization(const model::ScenarioSpec& spec) const;
};

InversionConfig load_inversion_config(const std::string& path);
InversionConfig parse_inversion_config_json(const std::string& text,
                                            const std::string& origin = "<string>");

struct GradientResult {
    double chi = 0.0;
    std::vector<double> coeff_gradient;
    std::vector<double> nodal_kernel;  // per-volume density sensitivity, per node
    /// Forward-wavefield energy projected onto the coefficients; used as a
    /// diagonal preconditioner (illumination compensation).
    std::vector<double> coeff_illumination;
};

/// Shared simulation state for one inversion (mesh, background, sponge, STF).
struct InversionContext {
    model::ScenarioSpec scenario;
    setup::SimSetup sim;
    acq::SourceTimeFunction stf;
    wavesim::ReceiverSpec receivers;
    double source_amplitude = 1.0;
    int snapshot_stride = 1;

    static InversionContext create(const model::ScenarioSpec& spec,
                                   const acq::SourceTimeFunction& stf,
                                   const setup::SimConfig& sim_cfg, int snapshot_stride);
};

double evaluate_misfit(const InversionContext& ctx, const DensityParameterization& param,
                       const std::vector<Supershot>& shots, const std::vector<double>& window);

GradientResult gradient(const InversionContext& ctx, const DensityParameterization& param,
                        const std::vector<Supershot>& shots,
                        const std::vector<double>& window);

/// Projected-bound L-BFGS with Armijo backtracking; accepted misfits are
/// non-increasing. Stops on max_iters, a failed line search, or a relative
/// decrease below rel_decrease_tol.
std::vector<MisfitRecord> run_stage(const InversionContext& ctx,
                                    DensityParameterization& param,
                                    const acq::FmcDataset& fmc, const StageConfig& stage,
                                    const InversionConfig& cfg, int record_offset = 0);

struct InversionResult {
    DensityParameterization param;
    ImageGrid image;  // density contrast on the coefficient grid
    std::vector<MisfitRecord> history;
    double normalization = 1.0;      // observed-data scale factor
    double source_amplitude = 1.0;   // calibrated excitation amplitude
};

/// The full two-run workflow: stage 1 on back-wall-free data with heavy
/// stacking, artifact reset, stage 2 on full signals with light stacking.
InversionResult two_stage_inversion(const model::ScenarioSpec& spec,
                                    const acq::FmcDataset& fmc,
                                    const acq::SourceTimeFunction& stf,
                                    const InversionConfig& cfg);

/// Iteration-0 density kernel at the background model (no window, unit
/// amplitude), resampled onto a raster. Matches the raw RTM density sum.
ImageGrid gradient_field_image(const model::ScenarioSpec& spec, const acq::FmcDataset& fmc,
                               const acq::SourceTimeFunction& stf, const InversionConfig& cfg,
                               int group_size, const RasterGrid& grid);

void save_history_csv(const std::vector<MisfitRecord>& history, const std::string& path);

}  // namespace uswb::fwi
