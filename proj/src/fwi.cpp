#include "uswb/fwi.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace uswb::fwi {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

// ---------------------------------------------------------------------------
// Parameterization
// ---------------------------------------------------------------------------

DensityParameterization DensityParameterization::regular(double x0, double y0, double width,
                                                         double depth, double spacing,
                                                         double rho_background,
                                                         double lo_factor, double hi_factor) {
    if (width <= 0 || depth <= 0 || spacing <= 0) {
        throw InputError("parameterization: ROI and spacing must be positive");
    }
    if (!(lo_factor > 0 && lo_factor <= hi_factor)) {
        throw InputError("parameterization: invalid bound factors");
    }
    DensityParameterization p;
    p.x0 = x0;
    p.y0 = y0;
    p.ncx = std::max(1, static_cast<int>(std::round(width / spacing)));
    p.ncy = std::max(1, static_cast<int>(std::round(depth / spacing)));
    p.dx = width / p.ncx;
    p.dy = depth / p.ncy;
    p.rho_background = rho_background;
    p.lo = lo_factor * rho_background;
    p.hi = hi_factor * rho_background;
    p.coeffs.assign(p.n_coeffs(), rho_background);
    p.clamp_bounds();
    return p;
}

bool DensityParameterization::inside(const Vec2& p) const {
    return p.x >= x0 && p.x <= x0 + ncx * dx && p.y >= y0 && p.y <= y0 + ncy * dy;
}

double DensityParameterization::eval(const Vec2& p) const {
    if (!inside(p)) return rho_background;
    const double fx = (p.x - x0) / dx;
    const double fy = (p.y - y0) / dy;
    const int cx = std::min(ncx - 1, static_cast<int>(fx));
    const int cy = std::min(ncy - 1, static_cast<int>(fy));
    const double ax = fx - cx, ay = fy - cy;
    const int base = cy * nx() + cx;
    const double v00 = coeffs[base], v10 = coeffs[base + 1];
    const double v01 = coeffs[base + nx()], v11 = coeffs[base + nx() + 1];
    // Incremental form: exact for equal corners, so an all-background model
    // reproduces the background density to the bit.
    return v00 + ax * (v10 - v00) + ay * (v01 - v00) + ax * ay * (v00 + v11 - v10 - v01);
}

void DensityParameterization::clamp_bounds() {
    for (double& c : coeffs) c = std::clamp(c, lo, hi);
}

std::vector<double> DensityParameterization::nodal_density(
    const wavesim::SpectralMesh& mesh) const {
    std::vector<double> rho(mesh.n_nodes(), rho_background);
    for (int gy = 0; gy < mesh.nny(); ++gy) {
        for (int gx = 0; gx < mesh.nnx(); ++gx) {
            const Vec2 p = mesh.node_pos(gx, gy);
            if (inside(p)) rho[mesh.node_index(gx, gy)] = eval(p);
        }
    }
    return rho;
}

std::vector<double> DensityParameterization::project_gradient(
    const wavesim::SpectralMesh& mesh, const std::vector<double>& nodal_kernel) const {
    if (static_cast<int>(nodal_kernel.size()) != mesh.n_nodes()) {
        throw InputError("project_gradient: kernel size mismatch");
    }
    std::vector<double> g(n_coeffs(), 0.0);
    for (int gy = 0; gy < mesh.nny(); ++gy) {
        for (int gx = 0; gx < mesh.nnx(); ++gx) {
            const Vec2 p = mesh.node_pos(gx, gy);
            if (!inside(p)) continue;
            const int node = mesh.node_index(gx, gy);
            const double contrib = nodal_kernel[node] * mesh.node_volume[node];
            const double fx = (p.x - x0) / dx;
            const double fy = (p.y - y0) / dy;
            const int cx = std::min(ncx - 1, static_cast<int>(fx));
            const int cy = std::min(ncy - 1, static_cast<int>(fy));
            const double ax = fx - cx, ay = fy - cy;
            const int base = cy * nx() + cx;
            g[base] += contrib * (1 - ax) * (1 - ay);
            g[base + 1] += contrib * ax * (1 - ay);
            g[base + nx()] += contrib * (1 - ax) * ay;
            g[base + nx() + 1] += contrib * ax * ay;
        }
    }
    return g;
}

RasterGrid DensityParameterization::image_grid() const {
    RasterGrid g;
    g.nx = nx();
    g.ny = ny();
    g.spacing = dx;
    g.x0 = x0 - dx / 2.0;
    g.y0 = y0 - dy / 2.0;
    return g;
}

ImageGrid DensityParameterization::contrast_image() const {
    ImageGrid img(image_grid());
    for (int i = 0; i < n_coeffs(); ++i) {
        img.values[i] = 1.0 - coeffs[i] / rho_background;
    }
    return img;
}

// ---------------------------------------------------------------------------
// Data plumbing
// ---------------------------------------------------------------------------

std::vector<Supershot> stack_sources(const acq::FmcDataset& fmc, int group_size,
                                     const std::vector<int>& selection) {
    if (group_size < 1) throw InputError("stack_sources: group size must be >= 1");
    std::vector<int> sel = selection;
    if (sel.empty()) {
        sel.resize(fmc.n);
        std::iota(sel.begin(), sel.end(), 0);
    }
    if (sel.empty()) throw InputError("stack_sources: empty transmitter selection");
    for (int i : sel) {
        if (i < 0 || i >= fmc.n) throw InputError("stack_sources: transmitter out of range");
    }
    // Contiguous by element position (element order == position order).
    std::sort(sel.begin(), sel.end());

    std::vector<Supershot> shots;
    for (size_t start = 0; start < sel.size(); start += group_size) {
        Supershot shot;
        const size_t end = std::min(sel.size(), start + group_size);
        shot.observed = wavesim::Traces(fmc.n, fmc.n_samples, fmc.dt, fmc.t0);
        for (size_t s = start; s < end; ++s) {
            shot.members.push_back(sel[s]);
            for (int j = 0; j < fmc.n; ++j) {
                for (int k = 0; k < fmc.n_samples; ++k) {
                    shot.observed.at(j, k) += fmc.at(sel[s], j, k);
                }
            }
        }
        shots.push_back(std::move(shot));
    }
    return shots;
}

double misfit(const wavesim::Traces& sim, const wavesim::Traces& obs) {
    if (sim.n_receivers != obs.n_receivers || sim.n_samples != obs.n_samples) {
        throw InputError("misfit: trace shape mismatch");
    }
    double chi = 0.0;
    const int n = sim.n_samples;
    for (int r = 0; r < sim.n_receivers; ++r) {
        for (int k = 0; k < n; ++k) {
            const double w = (k == 0 || k == n - 1) ? 0.5 : 1.0;
            const double d = sim.at(r, k) - obs.at(r, k);
            chi += w * d * d;
        }
    }
    return 0.5 * chi * sim.dt;
}

std::vector<double> window_envelope(int n_samples, double dt, double t_a, double t_b,
                                    double taper) {
    if (t_a > t_b) throw InputError("window_envelope: inverted window");
    if (taper < 0) throw InputError("window_envelope: negative taper");
    std::vector<double> g(n_samples, 1.0);
    for (int k = 0; k < n_samples; ++k) {
        const double t = k * dt;
        if (t >= t_a && t <= t_b) {
            g[k] = 0.0;
        } else if (taper > 0 && t > t_a - taper && t < t_a) {
            g[k] = 0.5 * (1.0 + std::cos(kPi * (t - (t_a - taper)) / taper));
        } else if (taper > 0 && t > t_b && t < t_b + taper) {
            g[k] = 0.5 * (1.0 - std::cos(kPi * (t - t_b) / taper));
        }
    }
    return g;
}

void apply_time_window(wavesim::Traces& traces, double t_a, double t_b, double taper) {
    const auto g = window_envelope(traces.n_samples, traces.dt, t_a, t_b, taper);
    for (int r = 0; r < traces.n_receivers; ++r) {
        for (int k = 0; k < traces.n_samples; ++k) traces.at(r, k) *= g[k];
    }
}

void reset_high_densities(DensityParameterization& param, double threshold) {
    if (!(threshold > 0 && threshold < 1)) {
        throw InputError("reset_high_densities: threshold must be in (0, 1)");
    }
    const double cut = threshold * param.rho_background;
    for (double& c : param.coeffs) {
        if (c > cut) c = param.rho_background;
    }
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

DensityParameterization InversionConfig::make_parameterization(
    const model::ScenarioSpec& spec) const {
    double x_start = roi_x0;
    if (x_start < 0) x_start = spec.array.center_x() - roi_width / 2.0;
    const double x_end = x_start + roi_width;
    if (x_start < 0 || x_end > spec.domain_width || roi_y0 < 0 ||
        roi_y0 + roi_depth > spec.domain_height) {
        throw InputError("inversion ROI does not fit inside the domain");
    }
    return DensityParameterization::regular(x_start, roi_y0, roi_width, roi_depth,
                                            inv_spacing, spec.background.rho,
                                            bound_lo_factor, bound_hi_factor);
}

namespace {

using nlohmann::json;

void parse_stage(const json& j, StageConfig& s) {
    s.max_iters = j.value("max_iters", s.max_iters);
    s.group_size = j.value("group_size", s.group_size);
    s.exclude_backwall = j.value("exclude_backwall", s.exclude_backwall);
    s.reset_threshold = j.value("reset_threshold", s.reset_threshold);
    s.rel_decrease_tol = j.value("rel_decrease_tol", s.rel_decrease_tol);
    if (s.max_iters < 0) throw InputError("inversion config: max_iters must be >= 0");
    if (s.group_size < 1) throw InputError("inversion config: group_size must be >= 1");
}

void parse_sim(const json& j, setup::SimConfig& s) {
    s.degree = j.value("degree", s.degree);
    s.elements_per_wavelength = j.value("elements_per_wavelength", s.elements_per_wavelength);
    s.courant = j.value("courant", s.courant);
    s.t_end = j.value("t_end", s.t_end);
    s.dt = j.value("dt", s.dt);
    s.sponge_wavelengths = j.value("sponge_wavelengths", s.sponge_wavelengths);
    s.sponge_strength = j.value("sponge_strength", s.sponge_strength);
    s.absorbing_sides = j.value("absorbing_sides", s.absorbing_sides);
    s.defect_density_factor = j.value("defect_density_factor", s.defect_density_factor);
    s.raster_spacing = j.value("raster_spacing", s.raster_spacing);
    s.vp_override = j.value("vp_override", s.vp_override);
    s.density_floor = j.value("density_floor", s.density_floor);
}

}  // namespace

InversionConfig parse_inversion_config_json(const std::string& text,
                                            const std::string& origin) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw InputError("inversion config " + origin + ": " + e.what());
    }
    try {
        InversionConfig cfg;
        cfg.roi_width = j.value("roi_width_mm", cfg.roi_width * 1e3) * 1e-3;
        cfg.roi_depth = j.value("roi_depth_mm", cfg.roi_depth * 1e3) * 1e-3;
        if (j.contains("roi_x0_mm")) cfg.roi_x0 = j["roi_x0_mm"].get<double>() * 1e-3;
        cfg.roi_y0 = j.value("roi_y0_mm", cfg.roi_y0 * 1e3) * 1e-3;
        cfg.inv_spacing = j.value("inv_spacing_mm", cfg.inv_spacing * 1e3) * 1e-3;
        cfg.bound_lo_factor = j.value("bound_lo_factor", cfg.bound_lo_factor);
        cfg.bound_hi_factor = j.value("bound_hi_factor", cfg.bound_hi_factor);
        cfg.lbfgs_memory = j.value("lbfgs_memory", cfg.lbfgs_memory);
        cfg.max_step_fraction = j.value("max_step_fraction", cfg.max_step_fraction);
        cfg.backwall_band_fraction =
            j.value("backwall_band_fraction", cfg.backwall_band_fraction);
        cfg.calibrate_source = j.value("calibrate_source", cfg.calibrate_source);
        cfg.snapshot_stride = j.value("snapshot_stride", cfg.snapshot_stride);
        if (j.contains("stage1")) parse_stage(j["stage1"], cfg.stage1);
        if (j.contains("stage2")) parse_stage(j["stage2"], cfg.stage2);
        if (j.contains("sim")) parse_sim(j["sim"], cfg.sim);
        return cfg;
    } catch (const json::exception& e) {
        throw InputError("inversion config " + origin + ": " + e.what());
    }
}

InversionConfig load_inversion_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open inversion config: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_inversion_config_json(ss.str(), path);
}

// ---------------------------------------------------------------------------
// Misfit and gradient evaluation
// ---------------------------------------------------------------------------

InversionContext InversionContext::create(const model::ScenarioSpec& spec,
                                          const acq::SourceTimeFunction& stf,
                                          const setup::SimConfig& sim_cfg,
                                          int snapshot_stride) {
    InversionContext ctx;
    ctx.scenario = spec;
    ctx.sim = setup::build_setup(spec, stf.stats, sim_cfg);
    ctx.stf = stf;
    ctx.receivers = acq::array_receivers(spec.array);
    ctx.snapshot_stride = std::max(1, snapshot_stride);
    return ctx;
}

namespace {

std::vector<wavesim::SourceTerm> shot_sources(const InversionContext& ctx,
                                              const Supershot& shot) {
    std::vector<wavesim::SourceTerm> sources;
    sources.reserve(shot.members.size());
    for (int i : shot.members) {
        sources.push_back(
            setup::element_source(ctx.scenario.array, i, ctx.stf, ctx.source_amplitude));
    }
    return sources;
}

void check_shot_axes(const InversionContext& ctx, const Supershot& shot) {
    const int n_samples = ctx.sim.time.n_steps() + 1;
    if (shot.observed.n_samples != n_samples ||
        std::abs(shot.observed.dt - ctx.sim.time.dt) >
            1e-12 * std::max(1.0, ctx.sim.time.dt)) {
        throw InputError(
            "fwi: observed data is not on the solver time axis; regenerate the dataset "
            "with matching t_end/dt");
    }
}

/// chi contribution and (optionally) the windowed-residual adjoint source for
/// one shot, given its simulated traces.
double shot_misfit(const wavesim::Traces& sim, const Supershot& shot,
                   const std::vector<double>& window, wavesim::Traces* adjoint_src) {
    double chi = 0.0;
    const int n = sim.n_samples;
    if (adjoint_src) *adjoint_src = wavesim::Traces(sim.n_receivers, n, sim.dt);
    for (int r = 0; r < sim.n_receivers; ++r) {
        for (int k = 0; k < n; ++k) {
            const double g = window.empty() ? 1.0 : window[k];
            const double w = (k == 0 || k == n - 1) ? 0.5 : 1.0;
            const double rw = g * (sim.at(r, k) - shot.observed.at(r, k));
            chi += w * rw * rw;
            if (adjoint_src) adjoint_src->at(r, k) = w * g * rw;
        }
    }
    return 0.5 * chi * sim.dt;
}

}  // namespace

double evaluate_misfit(const InversionContext& ctx, const DensityParameterization& param,
                       const std::vector<Supershot>& shots,
                       const std::vector<double>& window) {
    wavesim::NodalMaterial mat = ctx.sim.background;
    mat.set_density(param.nodal_density(ctx.sim.mesh));

    std::vector<double> partial(shots.size(), 0.0);
    std::string error;
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (int s = 0; s < static_cast<int>(shots.size()); ++s) {
        if (!error.empty()) continue;
        try {
            check_shot_axes(ctx, shots[s]);
            const auto fwd = wavesim::run_forward(ctx.sim.mesh, mat, shot_sources(ctx, shots[s]),
                                                  ctx.receivers, ctx.sim.time, ctx.sim.damping);
            partial[s] = shot_misfit(fwd.traces, shots[s], window, nullptr);
        } catch (const std::exception& e) {
#ifdef _OPENMP
#pragma omp critical
#endif
            error = e.what();
        }
    }
    if (!error.empty()) throw NumericalError("fwi misfit: " + error);
    double chi = 0.0;
    for (double p : partial) chi += p;
    return chi;
}

GradientResult gradient(const InversionContext& ctx, const DensityParameterization& param,
                        const std::vector<Supershot>& shots,
                        const std::vector<double>& window) {
    wavesim::NodalMaterial mat = ctx.sim.background;
    mat.set_density(param.nodal_density(ctx.sim.mesh));
    const int nn = ctx.sim.mesh.n_nodes();

    std::vector<std::vector<double>> kernels(shots.size()), illums(shots.size());
    std::vector<double> partial(shots.size(), 0.0);
    std::string error;
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (int s = 0; s < static_cast<int>(shots.size()); ++s) {
        if (!error.empty()) continue;
        try {
            check_shot_axes(ctx, shots[s]);
            wavesim::ForwardOptions fopt;
            fopt.store_snapshots = true;
            fopt.snapshot_stride = ctx.snapshot_stride;
            fopt.store_velocity = ctx.snapshot_stride > 1;
            const auto fwd = wavesim::run_forward(ctx.sim.mesh, mat, shot_sources(ctx, shots[s]),
                                                  ctx.receivers, ctx.sim.time, ctx.sim.damping,
                                                  fopt);
            wavesim::Traces adj_src;
            partial[s] = shot_misfit(fwd.traces, shots[s], window, &adj_src);
            wavesim::AdjointOptions aopt;
            aopt.accumulate_density_kernel = true;
            const auto adj = wavesim::run_adjoint(ctx.sim.mesh, mat, ctx.receivers, adj_src,
                                                  ctx.sim.time, ctx.sim.damping, fwd.snapshots,
                                                  aopt);
            kernels[s] = adj.density_kernel;

            // Illumination: time integral of the forward velocity energy,
            // from the stored displacement frames.
            const auto& store = fwd.snapshots;
            const int n_frames = store.n_snapshots();
            std::vector<double> ill(nn, 0.0);
            for (int j = 1; j + 1 < n_frames; ++j) {
                const float* um = store.u_frame(j - 1);
                const float* up = store.u_frame(j + 1);
                const double inv2dt = 1.0 / (2.0 * store.dt_snap);
                for (int g = 0; g < nn; ++g) {
                    const size_t k = size_t(g) * 2;
                    const double vx = (double(up[k]) - um[k]) * inv2dt;
                    const double vy = (double(up[k + 1]) - um[k + 1]) * inv2dt;
                    ill[g] += store.dt_snap * (vx * vx + vy * vy);
                }
            }
            illums[s] = std::move(ill);
        } catch (const std::exception& e) {
#ifdef _OPENMP
#pragma omp critical
#endif
            error = e.what();
        }
    }
    if (!error.empty()) throw NumericalError("fwi gradient: " + error);

    GradientResult res;
    res.nodal_kernel.assign(nn, 0.0);
    std::vector<double> ill_total(nn, 0.0);
    for (size_t s = 0; s < kernels.size(); ++s) {
        res.chi += partial[s];
        for (int g = 0; g < nn; ++g) {
            res.nodal_kernel[g] += kernels[s][g];
            ill_total[g] += illums[s][g];
        }
    }
    res.coeff_gradient = param.project_gradient(ctx.sim.mesh, res.nodal_kernel);
    res.coeff_illumination = param.project_gradient(ctx.sim.mesh, ill_total);
    return res;
}

// ---------------------------------------------------------------------------
// Projected L-BFGS
// ---------------------------------------------------------------------------

namespace {

class LbfgsMemory {
public:
    explicit LbfgsMemory(int capacity) : capacity_(capacity) {}

    /// Fixed diagonal initial inverse Hessian (illumination preconditioner).
    void set_h0(std::vector<double> h0) { h0_ = std::move(h0); }

    void push(std::vector<double> s, std::vector<double> y) {
        double sy = 0.0, ss = 0.0, yy = 0.0;
        for (size_t i = 0; i < s.size(); ++i) {
            sy += s[i] * y[i];
            ss += s[i] * s[i];
            yy += y[i] * y[i];
        }
        if (sy <= 1e-12 * std::sqrt(ss * yy) || sy <= 0.0) return;  // skip bad curvature
        pairs_.push_back({std::move(s), std::move(y), sy});
        if (static_cast<int>(pairs_.size()) > capacity_) pairs_.pop_front();
    }

    bool empty() const { return pairs_.empty(); }

    /// Two-loop recursion: d = -H g with H0 = gamma * diag(h0).
    std::vector<double> direction(const std::vector<double>& g) const {
        std::vector<double> q = g;
        std::vector<double> alpha(pairs_.size());
        for (int i = static_cast<int>(pairs_.size()) - 1; i >= 0; --i) {
            const auto& p = pairs_[i];
            double sq = 0.0;
            for (size_t k = 0; k < q.size(); ++k) sq += p.s[k] * q[k];
            alpha[i] = sq / p.sy;
            for (size_t k = 0; k < q.size(); ++k) q[k] -= alpha[i] * p.y[k];
        }
        apply_h0(q);
        if (!pairs_.empty()) {
            const auto& last = pairs_.back();
            double yhy = 0.0;
            for (size_t k = 0; k < last.y.size(); ++k) {
                yhy += last.y[k] * last.y[k] * (h0_.empty() ? 1.0 : h0_[k]);
            }
            const double gamma = last.sy / yhy;
            for (double& v : q) v *= gamma;
        }
        for (size_t i = 0; i < pairs_.size(); ++i) {
            const auto& p = pairs_[i];
            double yq = 0.0;
            for (size_t k = 0; k < q.size(); ++k) yq += p.y[k] * q[k];
            const double beta = yq / p.sy;
            for (size_t k = 0; k < q.size(); ++k) q[k] += (alpha[i] - beta) * p.s[k];
        }
        for (double& v : q) v = -v;
        return q;
    }

private:
    void apply_h0(std::vector<double>& q) const {
        if (h0_.empty()) return;
        for (size_t k = 0; k < q.size(); ++k) q[k] *= h0_[k];
    }

    struct Pair {
        std::vector<double> s, y;
        double sy;
    };
    int capacity_;
    std::deque<Pair> pairs_;
    std::vector<double> h0_;
};

double inf_norm(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

double l2_norm(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x * x;
    return std::sqrt(m);
}

}  // namespace

std::vector<MisfitRecord> run_stage(const InversionContext& ctx,
                                    DensityParameterization& param,
                                    const acq::FmcDataset& fmc, const StageConfig& stage,
                                    const InversionConfig& cfg, int record_offset) {
    std::vector<MisfitRecord> history;
    if (stage.max_iters == 0) return history;

    auto shots = stack_sources(fmc, stage.group_size);
    std::vector<double> window;
    if (stage.exclude_backwall) {
        const double t_bw = 2.0 * ctx.scenario.domain_height / ctx.scenario.background.vp;
        const double period = 1.0 / ctx.stf.stats.f_max;
        const double t_a = std::max(0.0, t_bw - 2.0 * period);
        window = window_envelope(ctx.sim.time.n_steps() + 1, ctx.sim.time.dt, t_a,
                                 ctx.sim.time.t_end, period);
    }

    auto grad_res = gradient(ctx, param, shots, window);
    double chi = grad_res.chi;
    std::vector<double> g = grad_res.coeff_gradient;
    history.push_back({record_offset, chi, l2_norm(g), true});
    if (chi == 0.0) return history;

    LbfgsMemory lbfgs(cfg.lbfgs_memory);
    // Illumination-compensated initial metric: cells the wavefield barely
    // reaches get correspondingly larger inverse-Hessian entries.
    {
        const double ill_max = inf_norm(grad_res.coeff_illumination);
        if (ill_max > 0) {
            std::vector<double> h0(grad_res.coeff_illumination.size());
            double h0_max = 0.0;
            for (size_t k = 0; k < h0.size(); ++k) {
                h0[k] = 1.0 / (grad_res.coeff_illumination[k] + 1e-3 * ill_max);
                h0_max = std::max(h0_max, h0[k]);
            }
            for (double& v : h0) v /= h0_max;
            lbfgs.set_h0(std::move(h0));
        }
    }
    const double c1 = 1e-4;

    for (int iter = 1; iter <= stage.max_iters; ++iter) {
        std::vector<double> d;
        double alpha0 = 1.0;
        if (lbfgs.empty()) {
            d = lbfgs.direction(g);  // preconditioned steepest descent
            const double dmax = inf_norm(d);
            if (dmax == 0.0) break;
            alpha0 = cfg.max_step_fraction * param.rho_background / dmax;
        } else {
            d = lbfgs.direction(g);
        }

        // Backtracking Armijo on the projected trial point.
        double alpha = alpha0;
        bool accepted = false;
        std::vector<double> x_trial;
        double chi_trial = 0.0;
        for (int ls = 0; ls < 20; ++ls) {
            x_trial = param.coeffs;
            for (size_t k = 0; k < x_trial.size(); ++k) {
                x_trial[k] = std::clamp(x_trial[k] + alpha * d[k], param.lo, param.hi);
            }
            double gdx = 0.0;
            bool moved = false;
            for (size_t k = 0; k < x_trial.size(); ++k) {
                const double dx = x_trial[k] - param.coeffs[k];
                gdx += g[k] * dx;
                moved = moved || dx != 0.0;
            }
            if (!moved || gdx >= 0.0) {
                alpha *= 0.5;
                continue;
            }
            DensityParameterization trial = param;
            trial.coeffs = x_trial;
            chi_trial = evaluate_misfit(ctx, trial, shots, window);
            if (chi_trial <= chi + c1 * gdx) {
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if (!accepted) {
            history.push_back({record_offset + iter, chi, l2_norm(g), false});
            break;  // no better solution found
        }

        std::vector<double> s(x_trial.size());
        for (size_t k = 0; k < s.size(); ++k) s[k] = x_trial[k] - param.coeffs[k];
        param.coeffs = x_trial;

        grad_res = gradient(ctx, param, shots, window);
        std::vector<double> y(g.size());
        for (size_t k = 0; k < y.size(); ++k) y[k] = grad_res.coeff_gradient[k] - g[k];
        lbfgs.push(std::move(s), std::move(y));

        const double chi_prev = chi;
        chi = grad_res.chi;
        g = grad_res.coeff_gradient;
        history.push_back({record_offset + iter, chi, l2_norm(g), true});

        if (chi_prev - chi < stage.rel_decrease_tol * chi_prev) break;
    }
    return history;
}

// ---------------------------------------------------------------------------
// Two-run workflow
// ---------------------------------------------------------------------------

namespace {

double calibrate_source_amplitude(const InversionContext& ctx,
                                  const DensityParameterization& param,
                                  const std::vector<Supershot>& shots) {
    wavesim::NodalMaterial mat = ctx.sim.background;
    mat.set_density(param.nodal_density(ctx.sim.mesh));
    double num = 0.0, den = 0.0;
    for (const auto& shot : shots) {
        const auto fwd = wavesim::run_forward(ctx.sim.mesh, mat, shot_sources(ctx, shot),
                                              ctx.receivers, ctx.sim.time, ctx.sim.damping);
        for (int r = 0; r < fwd.traces.n_receivers; ++r) {
            for (int k = 0; k < fwd.traces.n_samples; ++k) {
                num += fwd.traces.at(r, k) * shot.observed.at(r, k);
                den += fwd.traces.at(r, k) * fwd.traces.at(r, k);
            }
        }
    }
    if (den <= 0.0) throw NumericalError("source calibration: zero simulated energy");
    return num / den;
}

}  // namespace

InversionResult two_stage_inversion(const model::ScenarioSpec& spec,
                                    const acq::FmcDataset& fmc,
                                    const acq::SourceTimeFunction& stf,
                                    const InversionConfig& cfg) {
    InversionResult out;

    // Observed data normalized to unit peak amplitude; the calibrated source
    // amplitude absorbs the scale.
    acq::FmcDataset data = fmc;
    const double peak = data.max_abs();
    if (peak <= 0.0) throw InputError("fwi: observed dataset is identically zero");
    data.scale(1.0 / peak);
    out.normalization = peak;

    InversionContext ctx = InversionContext::create(spec, stf, cfg.sim, cfg.snapshot_stride);
    out.param = cfg.make_parameterization(spec);

    if (cfg.calibrate_source) {
        const auto shots = stack_sources(data, cfg.stage1.group_size);
        ctx.source_amplitude = calibrate_source_amplitude(ctx, out.param, shots);
        if (ctx.source_amplitude <= 0.0) {
            throw NumericalError("source calibration produced a non-positive amplitude");
        }
    }
    out.source_amplitude = ctx.source_amplitude;

    auto h1 = run_stage(ctx, out.param, data, cfg.stage1, cfg, 0);
    out.history.insert(out.history.end(), h1.begin(), h1.end());

    // Between stages: drop back-wall artifacts in the ROI bottom band and
    // reset near-background densities.
    if (cfg.stage2.reset_threshold > 0) {
        reset_high_densities(out.param, cfg.stage2.reset_threshold);
    }
    if (cfg.backwall_band_fraction > 0) {
        const double y_cut = out.param.y0 +
                             (1.0 - cfg.backwall_band_fraction) * out.param.ncy * out.param.dy;
        for (int i = 0; i < out.param.n_coeffs(); ++i) {
            if (out.param.coeff_pos(i).y >= y_cut) {
                out.param.coeffs[i] = out.param.rho_background;
            }
        }
    }

    const int offset = h1.empty() ? 0 : h1.back().iteration + 1;
    auto h2 = run_stage(ctx, out.param, data, cfg.stage2, cfg, offset);
    out.history.insert(out.history.end(), h2.begin(), h2.end());

    out.image = out.param.contrast_image();
    return out;
}

ImageGrid gradient_field_image(const model::ScenarioSpec& spec, const acq::FmcDataset& fmc,
                               const acq::SourceTimeFunction& stf, const InversionConfig& cfg,
                               int group_size, const RasterGrid& grid) {
    InversionContext ctx = InversionContext::create(spec, stf, cfg.sim, cfg.snapshot_stride);
    const auto param = cfg.make_parameterization(spec);
    const auto shots = stack_sources(fmc, group_size);
    const auto res = gradient(ctx, param, shots, {});
    return wavesim::interpolate_to_raster(ctx.sim.mesh, res.nodal_kernel, grid);
}

void save_history_csv(const std::vector<MisfitRecord>& history, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw InputError("cannot write history: " + path);
    os.precision(12);
    os << "iteration,misfit,grad_norm,accepted\n";
    for (const auto& r : history) {
        os << r.iteration << ',' << r.chi << ',' << r.grad_norm << ',' << (r.accepted ? 1 : 0)
           << "\n";
    }
}

}  // namespace uswb::fwi
