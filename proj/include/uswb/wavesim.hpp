#pragma once

#include <string>
#include <vector>

#include "uswb/core.hpp"
#include "uswb/model.hpp"

namespace uswb::wavesim {

/// Gauss-Lobatto-Legendre quadrature on [-1, 1], degree p (p+1 points).
std::vector<double> gll_nodes(int p);
std::vector<double> gll_weights(int p);
/// Differentiation matrix, row-major (p+1)^2: D[i][j] = l_j'(x_i).
std::vector<double> gll_diff_matrix(int p);

/// Structured quadrilateral spectral-element mesh over [0, width] x [0, height]
/// with GLL nodes. Shared edge nodes map to a single global index; the global
/// node grid is (nex*p+1) x (ney*p+1).
struct SpectralMesh {
    int nex = 0;
    int ney = 0;
    int degree = 4;
    double width = 0.0;   // m
    double height = 0.0;  // m

    std::vector<double> ref_nodes;    // p+1 GLL nodes on [-1, 1]
    std::vector<double> ref_weights;  // p+1
    std::vector<double> diff;         // (p+1)^2 differentiation matrix
    std::vector<double> node_x;       // nnx() global x coordinates
    std::vector<double> node_y;       // nny()
    std::vector<double> node_volume;  // per global node, lumped quadrature volume

    int nnx() const { return nex * degree + 1; }
    int nny() const { return ney * degree + 1; }
    int n_nodes() const { return nnx() * nny(); }
    double hx() const { return width / nex; }
    double hy() const { return height / ney; }
    int node_index(int gx, int gy) const { return gy * nnx() + gx; }
    Vec2 node_pos(int gx, int gy) const { return {node_x[gx], node_y[gy]}; }

    /// Smallest gap between adjacent nodes (the CFL-relevant length).
    double min_node_spacing() const;

    /// Builds a mesh whose element edges do not exceed max_element_size.
    static SpectralMesh regular(double width, double height, double max_element_size,
                                int degree = 4);
};

/// Material sampled at global mesh nodes. Lame parameters are derived from
/// (rho, vp, vs); set_density refreshes them with wave speeds held fixed.
struct NodalMaterial {
    std::vector<double> rho;
    std::vector<double> vp;
    std::vector<double> vs;
    std::vector<double> lambda;  // rho * (vp^2 - 2 vs^2)
    std::vector<double> mu;      // rho * vs^2

    void derive_lame();
    void set_density(const std::vector<double>& new_rho);
};

/// Nearest-pixel sampling of a raster material model at the mesh nodes.
NodalMaterial sample_material(const SpectralMesh& mesh, const model::MaterialModel& m);
NodalMaterial uniform_material(const SpectralMesh& mesh, const model::BackgroundMaterial& bg);

struct TimeParams {
    double dt = 0.0;     // s
    double t_end = 0.0;  // s

    int n_steps() const { return static_cast<int>(std::llround(t_end / dt)); }
};

struct SourceTerm {
    Vec2 position;
    Vec2 direction{0.0, 1.0};       // unit vector; default points into the specimen
    std::vector<double> waveform;   // sampled at waveform_dt
    double waveform_dt = 0.0;
    double amplitude = 1.0;
};

struct ReceiverSpec {
    std::vector<Vec2> positions;
    std::vector<Vec2> directions;  // unit vector per receiver

    int count() const { return static_cast<int>(positions.size()); }
};

/// Scalar traces u(x_r, t) . n_r, one row per receiver.
struct Traces {
    int n_receivers = 0;
    int n_samples = 0;
    double dt = 0.0;
    double t0 = 0.0;
    std::vector<double> data;  // row-major [receiver][sample]

    Traces() = default;
    Traces(int nr, int ns, double dt_, double t0_ = 0.0)
        : n_receivers(nr), n_samples(ns), dt(dt_), t0(t0_), data(size_t(nr) * ns, 0.0) {}

    double& at(int r, int k) { return data[size_t(r) * n_samples + k]; }
    double at(int r, int k) const { return data[size_t(r) * n_samples + k]; }
};

/// Decimated wavefield history on the global node grid, stored as 32-bit
/// floats. Frame j holds the state at step j * stride.
struct SnapshotStore {
    int nx = 0;  // node-grid dims
    int ny = 0;
    int stride = 1;
    double dt_snap = 0.0;
    bool has_velocity = false;
    std::vector<float> u;  // frame-major, [frame][node*2 + comp]
    std::vector<float> v;

    int n_snapshots() const {
        return nx > 0 && ny > 0 ? static_cast<int>(u.size() / (size_t(nx) * ny * 2)) : 0;
    }
    const float* u_frame(int j) const { return u.data() + size_t(j) * nx * ny * 2; }
    const float* v_frame(int j) const { return v.data() + size_t(j) * nx * ny * 2; }

    void save(const std::string& path) const;
    static SnapshotStore load(const std::string& path);
};

/// Velocity-proportional sponge damping on the left/right sides: zero in the
/// interior, quadratic ramp to `strength` (1/s) at the side edges.
std::vector<double> absorbing_profile(const SpectralMesh& mesh, double layer_width,
                                      double strength);

/// Default Courant factor: 0.7 of the empirically measured stability edge of
/// the degree-4 scheme, which sits at 0.700 * min_node_spacing / vp (see the
/// stability-margin test).
inline constexpr double kDefaultCourant = 0.49;

/// Largest stable time step estimate: courant * min(node spacing / local vp).
double cfl_limit(const SpectralMesh& mesh, const NodalMaterial& mat,
                 double courant = kDefaultCourant);

struct ForwardOptions {
    bool store_snapshots = false;
    int snapshot_stride = 1;
    bool store_velocity = false;  // needed for decimated kernel accumulation
    int record_stride = 1;        // trace decimation
    int nan_check_interval = 50;
    int energy_stride = 0;        // record discrete energy every k steps (0 = off)
};

struct ForwardResult {
    Traces traces;
    SnapshotStore snapshots;
    std::vector<double> energies;  // when energy_stride > 0
};

struct AdjointOptions {
    bool accumulate_density_kernel = true;
    bool accumulate_classic = false;
    bool store_snapshots = false;  // backward snapshots, aligned with forward frames
};

struct AdjointResult {
    /// Misfit sensitivity per unit density per unit volume, on global nodes.
    std::vector<double> density_kernel;
    /// Zero-lag correlation of forward and backward displacement fields.
    std::vector<double> classic_image;
    SnapshotStore snapshots;
};

/// Explicit central-difference time stepping of the 2D elastic wave equation,
/// free-surface top/bottom boundaries, optional sponge damping. Initial
/// conditions are u = du/dt = 0.
ForwardResult run_forward(const SpectralMesh& mesh, const NodalMaterial& mat,
                          const std::vector<SourceTerm>& sources,
                          const ReceiverSpec& receivers, const TimeParams& time,
                          const std::vector<double>& damping,
                          const ForwardOptions& opt = {});

/// Backward integration from zero end conditions with per-receiver adjoint
/// source traces injected along the receiver directions. Accumulates the
/// imaging integrands against the forward snapshot history on the fly.
AdjointResult run_adjoint(const SpectralMesh& mesh, const NodalMaterial& mat,
                          const ReceiverSpec& receivers, const Traces& adjoint_sources,
                          const TimeParams& time, const std::vector<double>& damping,
                          const SnapshotStore& forward, const AdjointOptions& opt = {});

/// Discrete energy 0.5 (v' M v + u' K u) for a state sampled at the nodes.
double field_energy(const SpectralMesh& mesh, const NodalMaterial& mat,
                    const std::vector<double>& u, const std::vector<double>& v);

/// acc[node] += scale * sum over incident elements of
/// w_quad * (grad a : Ct : grad b), where Ct is the density derivative of the
/// constitutive tensor built from the local (vp, vs) and w_quad the element's
/// GLL quadrature weight at that node. The result is an integrated
/// (volume-weighted) quantity; divide by node_volume for a per-volume field.
/// a and b are interleaved 2-component nodal fields.
void add_strain_correlation(const SpectralMesh& mesh, const NodalMaterial& mat,
                            const double* a, const double* b, double scale,
                            std::vector<double>& acc);

/// Polynomial (spectral-basis) evaluation of a nodal field at pixel centers.
ImageGrid interpolate_to_raster(const SpectralMesh& mesh, const std::vector<double>& nodal,
                                const RasterGrid& grid);

}  // namespace uswb::wavesim
