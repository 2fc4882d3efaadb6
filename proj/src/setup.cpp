#include "uswb/setup.hpp"

#include <algorithm>
#include <cmath>

namespace uswb::setup {

namespace {

// Tuned so the default quadratic sponge (three dominant p-wavelengths wide)
// reflects < 1% of the incident energy (see the sponge calibration test).
constexpr double kSpongeStrengthFactor = 3.0;

wavesim::SpectralMesh make_mesh(const model::ScenarioSpec& spec, double f95,
                                const SimConfig& cfg, double refine) {
    const double lambda_s = spec.background.vs / f95;
    const double h = lambda_s / cfg.elements_per_wavelength / refine;
    return wavesim::SpectralMesh::regular(spec.domain_width, spec.domain_height, h,
                                          cfg.degree);
}

}  // namespace

SimSetup build_setup(const model::ScenarioSpec& input_spec,
                     const acq::SpectrumStats& stf_stats, const SimConfig& cfg) {
    model::ScenarioSpec spec = input_spec;
    if (cfg.vp_override > 0) spec.background.vp = cfg.vp_override;
    spec.validate();
    if (stf_stats.f_95 <= 0 || stf_stats.f_max <= 0) {
        throw InputError("build_setup: source spectrum stats required");
    }
    if (cfg.reference_factor < 1.0) {
        throw InputError("build_setup: reference_factor must be >= 1");
    }

    SimSetup s;
    s.mesh = make_mesh(spec, stf_stats.f_95, cfg, cfg.reference_factor);

    double raster = cfg.raster_spacing;
    if (raster <= 0) raster = s.mesh.min_node_spacing() / 2.0;
    const auto raster_model = model::build_material_model(spec, raster,
                                                          cfg.defect_density_factor);
    s.material = wavesim::sample_material(s.mesh, raster_model);
    s.background = wavesim::uniform_material(s.mesh, spec.background);

    // All runs of one pipeline step at dt_base / 2^k, where dt_base is the
    // vp-CFL limit of the base-resolution mesh. k combines the density
    // stability reserve with the reference-resolution refinement, so any two
    // setups' recordings line up on the shared axis dt_base / 2^k_axis.
    if (cfg.dt > 0) {
        s.time.dt = cfg.dt;
        s.record_stride = std::max(1, static_cast<int>(std::lround(cfg.reference_factor)));
    } else {
        const auto base_mesh = make_mesh(spec, stf_stats.f_95, cfg, 1.0);
        const auto base_mat = wavesim::uniform_material(base_mesh, spec.background);
        const double dt_base = wavesim::cfl_limit(base_mesh, base_mat, cfg.courant);

        auto ladder_rung = [](double floor) {
            if (floor >= 1.0) return 0;
            return static_cast<int>(std::ceil(std::log2(1.0 / std::sqrt(floor)) - 1e-12));
        };
        double rho_min = spec.background.rho;
        for (double r : s.material.rho) rho_min = std::min(rho_min, r);
        const double floor_eff =
            std::min(cfg.density_floor, rho_min / spec.background.rho);
        const int k_axis = ladder_rung(cfg.density_floor);
        const int k_ref = static_cast<int>(std::ceil(std::log2(cfg.reference_factor) - 1e-12));
        const int k_run = std::max(k_axis, ladder_rung(floor_eff)) + k_ref;
        s.time.dt = dt_base / double(1 << k_run);
        s.record_stride = 1 << (k_run - k_axis);
    }
    // Quantize the end time to whole recording-axis samples so runs at
    // different ladder rungs agree on the recorded sample count.
    const double dt_axis = s.time.dt * s.record_stride;
    const double n_axis = std::llround(cfg.t_end / dt_axis);
    s.time.t_end = n_axis * dt_axis;

    if (cfg.absorbing_sides) {
        s.sponge_width = cfg.sponge_wavelengths * spec.background.vp / stf_stats.f_max;
        const double max_width = 0.45 * spec.domain_width;
        s.sponge_width = std::min(s.sponge_width, max_width);
        double strength = cfg.sponge_strength;
        if (strength <= 0) {
            strength = kSpongeStrengthFactor * spec.background.vp / s.sponge_width;
        }
        s.damping = wavesim::absorbing_profile(s.mesh, s.sponge_width, strength);
    } else {
        s.damping.clear();
    }
    return s;
}

wavesim::SourceTerm element_source(const model::ArraySpec& array, int element,
                                   const acq::SourceTimeFunction& stf, double amplitude) {
    if (element < 0 || element >= array.n_elements) {
        throw InputError("element_source: element index out of range");
    }
    wavesim::SourceTerm src;
    src.position = array.element_position(element);
    src.direction = {0.0, 1.0};
    src.waveform = stf.samples;
    src.waveform_dt = stf.dt;
    src.amplitude = amplitude;
    return src;
}

}  // namespace uswb::setup
