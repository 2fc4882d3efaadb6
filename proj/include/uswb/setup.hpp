#pragma once

#include "uswb/acquisition.hpp"
#include "uswb/model.hpp"
#include "uswb/wavesim.hpp"

namespace uswb::setup {

/// Discretization knobs shared by the simulation and inversion drivers.
struct SimConfig {
    int degree = 4;
    double elements_per_wavelength = 1.5;  // s-wavelength at f_95
    double courant = wavesim::kDefaultCourant;
    double t_end = 2.5e-5;       // s
    double dt = 0.0;             // 0 = derive from the CFL limit
    double sponge_wavelengths = 3.0;  // sponge width in dominant p-wavelengths
    double sponge_strength = 0.0;     // 1/s; 0 = tuned default
    bool absorbing_sides = true;
    double defect_density_factor = 0.01;
    double raster_spacing = 0.0;  // material raster; 0 = tie to node spacing

    /// Replaces the scenario's p-wave speed (phase correction for measured
    /// data); 0 keeps the scenario value.
    double vp_override = 0.0;

    /// Smallest density (as a fraction of background) any run of this
    /// pipeline may contain. Sharp density drops with fixed wave speeds
    /// shrink the stable time step roughly with sqrt(rho_min/rho_bg); the
    /// time step ladder reserves margin for it so that observed-data and
    /// inversion runs stay on one dyadic time axis.
    double density_floor = 0.1;

    /// Resolution separation for reference (observed-data) runs: mesh this
    /// many times finer and dt this many times smaller than the base setup.
    double reference_factor = 1.0;
};

struct SimSetup {
    wavesim::SpectralMesh mesh;
    wavesim::NodalMaterial material;      // scenario material (with defects)
    wavesim::NodalMaterial background;    // defect-free variant
    std::vector<double> damping;
    wavesim::TimeParams time;
    int record_stride = 1;  // brings reference traces onto the base time axis
    double sponge_width = 0.0;
};

/// Builds mesh, nodal materials, sponge profile and stable time stepping for
/// a scenario. The time step is derived from the base-resolution CFL limit so
/// that a reference_factor=2 setup steps at exactly half the base dt.
SimSetup build_setup(const model::ScenarioSpec& spec, const acq::SpectrumStats& stf_stats,
                     const SimConfig& cfg);

wavesim::SourceTerm element_source(const model::ArraySpec& array, int element,
                                   const acq::SourceTimeFunction& stf,
                                   double amplitude = 1.0);

}  // namespace uswb::setup
