#include "uswb/wavesim.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace uswb::wavesim {

namespace {

constexpr int kMaxQ = 16;  // supports degree <= 15

// Legendre polynomial value and first derivative (derivative valid for |x|<1).
void legendre(int p, double x, double& value, double& deriv) {
    double p0 = 1.0, p1 = x;
    if (p == 0) {
        value = 1.0;
        deriv = 0.0;
        return;
    }
    for (int k = 2; k <= p; ++k) {
        const double pk = ((2 * k - 1) * x * p1 - (k - 1) * p0) / k;
        p0 = p1;
        p1 = pk;
    }
    value = p1;
    deriv = p * (x * p1 - p0) / (x * x - 1.0);
}

double legendre_value(int p, double x) {
    if (x <= -1.0) return (p % 2 == 0) ? 1.0 : -1.0;
    if (x >= 1.0) return 1.0;
    double v, d;
    legendre(p, x, v, d);
    return v;
}

}  // namespace

std::vector<double> gll_nodes(int p) {
    if (p < 1) throw InputError("gll_nodes: degree must be >= 1");
    if (p >= kMaxQ) throw InputError("gll_nodes: degree too high");
    std::vector<double> x(p + 1);
    x[0] = -1.0;
    x[p] = 1.0;
    // Interior nodes are the roots of P_p'; Newton from Chebyshev-Lobatto guesses.
    for (int i = 1; i < p; ++i) {
        double xi = -std::cos(3.14159265358979323846 * i / p);
        for (int it = 0; it < 100; ++it) {
            double v, d;
            legendre(p, xi, v, d);
            const double d2 = (2.0 * xi * d - p * (p + 1) * v) / (1.0 - xi * xi);
            const double step = d / d2;
            xi -= step;
            if (std::abs(step) < 1e-15) break;
        }
        x[i] = xi;
    }
    std::sort(x.begin(), x.end());
    // Symmetrize to keep the set bit-clean.
    for (int i = 0; i <= p / 2; ++i) {
        const double s = 0.5 * (x[i] - x[p - i]);
        x[i] = s;
        x[p - i] = -s;
    }
    if (p % 2 == 0) x[p / 2] = 0.0;
    return x;
}

std::vector<double> gll_weights(int p) {
    const auto x = gll_nodes(p);
    std::vector<double> w(p + 1);
    for (int i = 0; i <= p; ++i) {
        const double v = legendre_value(p, x[i]);
        w[i] = 2.0 / (p * (p + 1) * v * v);
    }
    return w;
}

std::vector<double> gll_diff_matrix(int p) {
    const auto x = gll_nodes(p);
    const int q = p + 1;
    std::vector<double> leg(q);
    for (int i = 0; i < q; ++i) leg[i] = legendre_value(p, x[i]);
    std::vector<double> D(q * q, 0.0);
    for (int i = 0; i < q; ++i) {
        for (int j = 0; j < q; ++j) {
            if (i != j) D[i * q + j] = leg[i] / (leg[j] * (x[i] - x[j]));
        }
    }
    D[0] = -0.25 * p * (p + 1);
    D[q * q - 1] = 0.25 * p * (p + 1);
    return D;
}

double SpectralMesh::min_node_spacing() const {
    double gap = std::numeric_limits<double>::max();
    for (int a = 0; a + 1 <= degree; ++a) {
        gap = std::min(gap,
                       (ref_nodes[a + 1] - ref_nodes[a]) / 2.0 * std::min(hx(), hy()));
    }
    return gap;
}

SpectralMesh SpectralMesh::regular(double width, double height, double max_element_size,
                                   int degree) {
    if (width <= 0 || height <= 0) throw InputError("mesh: domain must be positive");
    if (max_element_size <= 0) throw InputError("mesh: element size must be positive");
    SpectralMesh m;
    m.degree = degree;
    m.width = width;
    m.height = height;
    m.nex = std::max(1, static_cast<int>(std::ceil(width / max_element_size - 1e-9)));
    m.ney = std::max(1, static_cast<int>(std::ceil(height / max_element_size - 1e-9)));
    m.ref_nodes = gll_nodes(degree);
    m.ref_weights = gll_weights(degree);
    m.diff = gll_diff_matrix(degree);

    m.node_x.resize(m.nnx());
    m.node_y.resize(m.nny());
    for (int ex = 0; ex < m.nex; ++ex) {
        for (int a = 0; a <= degree; ++a) {
            m.node_x[ex * degree + a] = ex * m.hx() + (m.ref_nodes[a] + 1.0) * m.hx() / 2.0;
        }
    }
    for (int ey = 0; ey < m.ney; ++ey) {
        for (int b = 0; b <= degree; ++b) {
            m.node_y[ey * degree + b] = ey * m.hy() + (m.ref_nodes[b] + 1.0) * m.hy() / 2.0;
        }
    }

    m.node_volume.assign(m.n_nodes(), 0.0);
    const double jac = (m.hx() / 2.0) * (m.hy() / 2.0);
    for (int ey = 0; ey < m.ney; ++ey) {
        for (int ex = 0; ex < m.nex; ++ex) {
            for (int b = 0; b <= degree; ++b) {
                for (int a = 0; a <= degree; ++a) {
                    m.node_volume[m.node_index(ex * degree + a, ey * degree + b)] +=
                        m.ref_weights[a] * m.ref_weights[b] * jac;
                }
            }
        }
    }
    return m;
}

void NodalMaterial::derive_lame() {
    const size_t n = rho.size();
    lambda.resize(n);
    mu.resize(n);
    for (size_t i = 0; i < n; ++i) {
        lambda[i] = rho[i] * (vp[i] * vp[i] - 2.0 * vs[i] * vs[i]);
        mu[i] = rho[i] * vs[i] * vs[i];
    }
}

void NodalMaterial::set_density(const std::vector<double>& new_rho) {
    if (new_rho.size() != rho.size()) throw InputError("set_density: size mismatch");
    rho = new_rho;
    derive_lame();
}

NodalMaterial sample_material(const SpectralMesh& mesh, const model::MaterialModel& m) {
    NodalMaterial out;
    const int nn = mesh.n_nodes();
    out.rho.resize(nn);
    out.vp.resize(nn);
    out.vs.resize(nn);
    for (int gy = 0; gy < mesh.nny(); ++gy) {
        const int iy = std::clamp(
            static_cast<int>((mesh.node_y[gy] - m.grid.y0) / m.grid.spacing), 0,
            m.grid.ny - 1);
        for (int gx = 0; gx < mesh.nnx(); ++gx) {
            const int ix = std::clamp(
                static_cast<int>((mesh.node_x[gx] - m.grid.x0) / m.grid.spacing), 0,
                m.grid.nx - 1);
            const int g = mesh.node_index(gx, gy);
            const int pix = m.grid.index(ix, iy);
            out.rho[g] = m.rho[pix];
            out.vp[g] = m.vp[pix];
            out.vs[g] = m.vs[pix];
        }
    }
    out.derive_lame();
    return out;
}

NodalMaterial uniform_material(const SpectralMesh& mesh, const model::BackgroundMaterial& bg) {
    NodalMaterial out;
    const int nn = mesh.n_nodes();
    out.rho.assign(nn, bg.rho);
    out.vp.assign(nn, bg.vp);
    out.vs.assign(nn, bg.vs);
    out.derive_lame();
    return out;
}

std::vector<double> absorbing_profile(const SpectralMesh& mesh, double layer_width,
                                      double strength) {
    if (layer_width < 0) throw InputError("absorbing_profile: negative width");
    if (2.0 * layer_width >= mesh.width && layer_width > 0) {
        throw InputError("absorbing_profile: layers do not fit inside the domain");
    }
    std::vector<double> d(mesh.n_nodes(), 0.0);
    if (layer_width == 0.0 || strength == 0.0) return d;
    for (int gx = 0; gx < mesh.nnx(); ++gx) {
        const double x = mesh.node_x[gx];
        double r = 0.0;
        if (x < layer_width) {
            r = (layer_width - x) / layer_width;
        } else if (x > mesh.width - layer_width) {
            r = (x - (mesh.width - layer_width)) / layer_width;
        }
        if (r <= 0.0) continue;
        const double val = strength * r * r;
        for (int gy = 0; gy < mesh.nny(); ++gy) {
            d[mesh.node_index(gx, gy)] = val;
        }
    }
    return d;
}

double cfl_limit(const SpectralMesh& mesh, const NodalMaterial& mat, double courant) {
    auto axis_gap = [](const std::vector<double>& c, int i) {
        double g = std::numeric_limits<double>::max();
        if (i > 0) g = std::min(g, c[i] - c[i - 1]);
        if (i + 1 < static_cast<int>(c.size())) g = std::min(g, c[i + 1] - c[i]);
        return g;
    };
    double limit = std::numeric_limits<double>::max();
    for (int gy = 0; gy < mesh.nny(); ++gy) {
        const double gy_gap = axis_gap(mesh.node_y, gy);
        for (int gx = 0; gx < mesh.nnx(); ++gx) {
            const double gap = std::min(axis_gap(mesh.node_x, gx), gy_gap);
            const double vp = mat.vp[mesh.node_index(gx, gy)];
            if (vp > 0) limit = std::min(limit, gap / vp);
        }
    }
    return courant * limit;
}

// ---------------------------------------------------------------------------
// Snapshot store I/O
// ---------------------------------------------------------------------------

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

void SnapshotStore::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("cannot write snapshot file: " + path);
    os.write("SNP1", 4);
    write_pod<std::int32_t>(os, nx);
    write_pod<std::int32_t>(os, ny);
    write_pod<std::int32_t>(os, n_snapshots());
    write_pod<std::int32_t>(os, stride);
    write_pod<double>(os, dt_snap);
    write_pod<std::uint8_t>(os, has_velocity ? 1 : 0);
    os.write(reinterpret_cast<const char*>(u.data()),
             static_cast<std::streamsize>(u.size() * sizeof(float)));
    if (has_velocity) {
        os.write(reinterpret_cast<const char*>(v.data()),
                 static_cast<std::streamsize>(v.size() * sizeof(float)));
    }
    if (!os) throw InputError("short write on snapshot file: " + path);
}

SnapshotStore SnapshotStore::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("cannot open snapshot file: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "SNP1") {
        throw InputError("not a snapshot file: " + path);
    }
    SnapshotStore s;
    s.nx = read_pod<std::int32_t>(is);
    s.ny = read_pod<std::int32_t>(is);
    const int n_frames = read_pod<std::int32_t>(is);
    s.stride = read_pod<std::int32_t>(is);
    s.dt_snap = read_pod<double>(is);
    s.has_velocity = read_pod<std::uint8_t>(is) != 0;
    const size_t frame = size_t(s.nx) * s.ny * 2;
    s.u.resize(frame * n_frames);
    is.read(reinterpret_cast<char*>(s.u.data()),
            static_cast<std::streamsize>(s.u.size() * sizeof(float)));
    if (s.has_velocity) {
        s.v.resize(frame * n_frames);
        is.read(reinterpret_cast<char*>(s.v.data()),
                static_cast<std::streamsize>(s.v.size() * sizeof(float)));
    }
    if (!is) throw InputError("truncated snapshot file: " + path);
    return s;
}

// ---------------------------------------------------------------------------
// Stepping engine
// ---------------------------------------------------------------------------

namespace {

struct PointEval {
    int ex = 0, ey = 0;
    std::array<double, kMaxQ> wx{}, wy{};
};

void lagrange_eval_1d(const std::vector<double>& nodes, double xi, double* out) {
    const int q = static_cast<int>(nodes.size());
    std::array<double, kMaxQ> bw{};
    for (int j = 0; j < q; ++j) {
        double prod = 1.0;
        for (int k = 0; k < q; ++k) {
            if (k != j) prod *= nodes[j] - nodes[k];
        }
        bw[j] = 1.0 / prod;
    }
    for (int j = 0; j < q; ++j) {
        if (std::abs(xi - nodes[j]) < 1e-13) {
            for (int k = 0; k < q; ++k) out[k] = (k == j) ? 1.0 : 0.0;
            return;
        }
    }
    double denom = 0.0;
    for (int j = 0; j < q; ++j) {
        out[j] = bw[j] / (xi - nodes[j]);
        denom += out[j];
    }
    for (int j = 0; j < q; ++j) out[j] /= denom;
}

PointEval locate_point(const SpectralMesh& mesh, const Vec2& p) {
    PointEval e;
    e.ex = std::clamp(static_cast<int>(p.x / mesh.hx()), 0, mesh.nex - 1);
    e.ey = std::clamp(static_cast<int>(p.y / mesh.hy()), 0, mesh.ney - 1);
    const double xi = std::clamp(2.0 * (p.x - e.ex * mesh.hx()) / mesh.hx() - 1.0, -1.0, 1.0);
    const double eta = std::clamp(2.0 * (p.y - e.ey * mesh.hy()) / mesh.hy() - 1.0, -1.0, 1.0);
    lagrange_eval_1d(mesh.ref_nodes, xi, e.wx.data());
    lagrange_eval_1d(mesh.ref_nodes, eta, e.wy.data());
    return e;
}

double sample_waveform(const SourceTerm& s, double t) {
    if (s.waveform.empty() || s.waveform_dt <= 0 || t < 0) return 0.0;
    const double pos = t / s.waveform_dt;
    const int k = static_cast<int>(pos);
    if (k + 1 >= static_cast<int>(s.waveform.size())) return 0.0;
    const double frac = pos - k;
    return s.amplitude * ((1.0 - frac) * s.waveform[k] + frac * s.waveform[k + 1]);
}

/// Central-difference update of the damped semi-discrete system
///   M u'' + M D u' + K u = f
/// with diagonal (lumped) M and per-node damping D. One advance() maps the
/// state pair (u^{n-1}, u^n) to (u^n, u^{n+1}); the exact same recursion run
/// over reversed step order is the discrete transpose, which run_adjoint
/// relies on.
class Stepper {
public:
    Stepper(const SpectralMesh& mesh, const NodalMaterial& mat,
            const std::vector<double>& damping, double dt)
        : mesh_(mesh), mat_(mat), q_(mesh.degree + 1) {
        if (dt <= 0) throw InputError("time step must be positive");
        const int nn = mesh.n_nodes();
        if (static_cast<int>(mat.rho.size()) != nn) {
            throw InputError("material not sampled on this mesh");
        }
        if (!damping.empty() && static_cast<int>(damping.size()) != nn) {
            throw InputError("damping field size mismatch");
        }
        c_force_.resize(nn);
        c_new_.resize(nn);
        c_old_.resize(nn);
        for (int i = 0; i < nn; ++i) {
            const double m = mat.rho[i] * mesh.node_volume[i];
            const double d = damping.empty() ? 0.0 : damping[i];
            c_force_[i] = dt * dt / m;
            c_new_[i] = 1.0 / (1.0 + d * dt / 2.0);
            c_old_[i] = 1.0 - d * dt / 2.0;
        }
        u_.assign(size_t(nn) * 2, 0.0);
        uold_.assign(size_t(nn) * 2, 0.0);
        unew_.assign(size_t(nn) * 2, 0.0);
        f_.assign(size_t(nn) * 2, 0.0);
    }

    const std::vector<double>& u() const { return u_; }
    const std::vector<double>& uold() const { return uold_; }
    /// State from two steps back; valid right after advance().
    const std::vector<double>& prev2() const { return unew_; }

    void advance() {
        const int nn = mesh_.n_nodes();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int i = 0; i < nn; ++i) {
            const double cf = c_force_[i], cn = c_new_[i], co = c_old_[i];
            const size_t k = size_t(i) * 2;
            unew_[k] = cn * (cf * f_[k] + 2.0 * u_[k] - co * uold_[k]);
            unew_[k + 1] = cn * (cf * f_[k + 1] + 2.0 * u_[k + 1] - co * uold_[k + 1]);
        }
        std::swap(uold_, u_);
        std::swap(u_, unew_);
    }

    void assemble_internal_forces() {
        std::fill(f_.begin(), f_.end(), 0.0);
        add_stiffness_times(u_.data(), f_.data(), -1.0);
    }

    /// f += sign * K x. Elements are processed in a 4-color order so that
    /// concurrent scatter-adds never touch the same node; results are
    /// bit-identical for any thread count.
    void add_stiffness_times(const double* x, double* f, double sign) const {
        for (int cy = 0; cy < 2; ++cy) {
            for (int cx = 0; cx < 2; ++cx) {
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
                for (int ey = cy; ey < mesh_.ney; ey += 2) {
                    for (int ex = cx; ex < mesh_.nex; ex += 2) {
                        element_stiffness(ex, ey, x, f, sign);
                    }
                }
            }
        }
    }

    void inject(const PointEval& e, const Vec2& dir, double value) {
        const int p = mesh_.degree, nnx = mesh_.nnx();
        for (int b = 0; b <= p; ++b) {
            const double wyb = e.wy[b];
            if (wyb == 0.0) continue;
            const int row = (e.ey * p + b) * nnx + e.ex * p;
            for (int a = 0; a <= p; ++a) {
                const double wgt = e.wx[a] * wyb;
                if (wgt == 0.0) continue;
                f_[size_t(row + a) * 2] += wgt * dir.x * value;
                f_[size_t(row + a) * 2 + 1] += wgt * dir.y * value;
            }
        }
    }

    double sample(const PointEval& e, const Vec2& dir, const std::vector<double>& field) const {
        const int p = mesh_.degree, nnx = mesh_.nnx();
        double val = 0.0;
        for (int b = 0; b <= p; ++b) {
            const double wyb = e.wy[b];
            if (wyb == 0.0) continue;
            const int row = (e.ey * p + b) * nnx + e.ex * p;
            for (int a = 0; a <= p; ++a) {
                const double wgt = e.wx[a] * wyb;
                if (wgt == 0.0) continue;
                val += wgt * (dir.x * field[size_t(row + a) * 2] +
                              dir.y * field[size_t(row + a) * 2 + 1]);
            }
        }
        return val;
    }

    void check_finite(int step) const {
        double acc = 0.0;
        for (size_t i = 0; i < u_.size(); i += 7) acc += u_[i];
        if (!std::isfinite(acc)) {
            throw NumericalError("instability: non-finite field at step " +
                                 std::to_string(step));
        }
    }

private:
    void element_stiffness(int ex, int ey, const double* x, double* f, double sign) const {
        const int p = mesh_.degree, q = q_;
        const int nnx = mesh_.nnx();
        const double sx = 2.0 / mesh_.hx(), sy = 2.0 / mesh_.hy();
        const double fx_fac = mesh_.hy() / 2.0, fy_fac = mesh_.hx() / 2.0;
        double ux[kMaxQ * kMaxQ], uy[kMaxQ * kMaxQ];
        double sxx[kMaxQ * kMaxQ], syy[kMaxQ * kMaxQ], sxy[kMaxQ * kMaxQ];

        for (int b = 0; b <= p; ++b) {
            const int row = (ey * p + b) * nnx + ex * p;
            for (int a = 0; a <= p; ++a) {
                ux[b * q + a] = x[size_t(row + a) * 2];
                uy[b * q + a] = x[size_t(row + a) * 2 + 1];
            }
        }

        const double* D = mesh_.diff.data();
        for (int b = 0; b <= p; ++b) {
            const int row = (ey * p + b) * nnx + ex * p;
            for (int a = 0; a <= p; ++a) {
                double dxi_ux = 0, dxi_uy = 0, deta_ux = 0, deta_uy = 0;
                for (int k = 0; k <= p; ++k) {
                    dxi_ux += D[a * q + k] * ux[b * q + k];
                    dxi_uy += D[a * q + k] * uy[b * q + k];
                    deta_ux += D[b * q + k] * ux[k * q + a];
                    deta_uy += D[b * q + k] * uy[k * q + a];
                }
                const double duxdx = dxi_ux * sx, duydx = dxi_uy * sx;
                const double duxdy = deta_ux * sy, duydy = deta_uy * sy;
                const int g = row + a;
                const double l = mat_.lambda[g], m = mat_.mu[g];
                sxx[b * q + a] = (l + 2 * m) * duxdx + l * duydy;
                syy[b * q + a] = l * duxdx + (l + 2 * m) * duydy;
                sxy[b * q + a] = m * (duxdy + duydx);
            }
        }

        const double* w = mesh_.ref_weights.data();
        for (int b = 0; b <= p; ++b) {
            const int row = (ey * p + b) * nnx + ex * p;
            for (int a = 0; a <= p; ++a) {
                double fx = 0, fy = 0;
                for (int k = 0; k <= p; ++k) {
                    const double dwa = w[k] * D[k * q + a];
                    fx += dwa * sxx[b * q + k];
                    fy += dwa * sxy[b * q + k];
                }
                fx *= fx_fac * w[b];
                fy *= fx_fac * w[b];
                double gx = 0, gy = 0;
                for (int k = 0; k <= p; ++k) {
                    const double dwb = w[k] * D[k * q + b];
                    gx += dwb * sxy[k * q + a];
                    gy += dwb * syy[k * q + a];
                }
                fx += fy_fac * w[a] * gx;
                fy += fy_fac * w[a] * gy;
                f[size_t(row + a) * 2] += sign * fx;
                f[size_t(row + a) * 2 + 1] += sign * fy;
            }
        }
    }

    const SpectralMesh& mesh_;
    const NodalMaterial& mat_;
    int q_;
    std::vector<double> c_force_, c_new_, c_old_;
    std::vector<double> u_, uold_, unew_, f_;
};

void append_frame(SnapshotStore& store, const std::vector<double>& field, bool velocity) {
    auto& dst = velocity ? store.v : store.u;
    const size_t base = dst.size();
    dst.resize(base + field.size());
    for (size_t i = 0; i < field.size(); ++i) dst[base + i] = static_cast<float>(field[i]);
}

}  // namespace

void add_strain_correlation(const SpectralMesh& mesh, const NodalMaterial& mat,
                            const double* a_field, const double* b_field, double scale,
                            std::vector<double>& acc) {
    if (static_cast<int>(acc.size()) != mesh.n_nodes()) {
        throw InputError("add_strain_correlation: accumulator size mismatch");
    }
    const int p = mesh.degree, q = p + 1, nnx = mesh.nnx();
    const double sxs = 2.0 / mesh.hx(), sys = 2.0 / mesh.hy();
    const double jac = (mesh.hx() / 2.0) * (mesh.hy() / 2.0);
    for (int cy = 0; cy < 2; ++cy) {
        for (int cx = 0; cx < 2; ++cx) {
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
            for (int ey = cy; ey < mesh.ney; ey += 2) {
                for (int ex = cx; ex < mesh.nex; ex += 2) {
                    double ax[kMaxQ * kMaxQ], ay[kMaxQ * kMaxQ];
                    double bx[kMaxQ * kMaxQ], by[kMaxQ * kMaxQ];
                    for (int b = 0; b <= p; ++b) {
                        const int row = (ey * p + b) * nnx + ex * p;
                        for (int a = 0; a <= p; ++a) {
                            const size_t g = size_t(row + a) * 2;
                            ax[b * q + a] = a_field[g];
                            ay[b * q + a] = a_field[g + 1];
                            bx[b * q + a] = b_field[g];
                            by[b * q + a] = b_field[g + 1];
                        }
                    }
                    const double* D = mesh.diff.data();
                    for (int b = 0; b <= p; ++b) {
                        const int row = (ey * p + b) * nnx + ex * p;
                        for (int a = 0; a <= p; ++a) {
                            double axx = 0, axy = 0, ayx = 0, ayy = 0;
                            double bxx = 0, bxy = 0, byx = 0, byy = 0;
                            for (int k = 0; k <= p; ++k) {
                                const double Dak = D[a * q + k], Dbk = D[b * q + k];
                                axx += Dak * ax[b * q + k];
                                ayx += Dak * ay[b * q + k];
                                axy += Dbk * ax[k * q + a];
                                ayy += Dbk * ay[k * q + a];
                                bxx += Dak * bx[b * q + k];
                                byx += Dak * by[b * q + k];
                                bxy += Dbk * bx[k * q + a];
                                byy += Dbk * by[k * q + a];
                            }
                            axx *= sxs;
                            ayx *= sxs;
                            axy *= sys;
                            ayy *= sys;
                            bxx *= sxs;
                            byx *= sxs;
                            bxy *= sys;
                            byy *= sys;
                            const int g = row + a;
                            const double vp = mat.vp[g], vs = mat.vs[g];
                            const double lam_t = vp * vp - 2.0 * vs * vs;
                            const double mu_t = vs * vs;
                            const double diva = axx + ayy, divb = bxx + byy;
                            const double dots = axx * bxx + axy * bxy + ayx * byx + ayy * byy;
                            const double cross = axx * bxx + axy * byx + ayx * bxy + ayy * byy;
                            // One-sided element gradients at shared nodes each
                            // carry their own quadrature weight; the caller
                            // divides by the total nodal volume if an
                            // intensive (per-volume) field is wanted.
                            const double wq = mesh.ref_weights[a] * mesh.ref_weights[b] * jac;
                            acc[g] += scale * wq *
                                      (lam_t * diva * divb + mu_t * (dots + cross));
                        }
                    }
                }
            }
        }
    }
}

double field_energy(const SpectralMesh& mesh, const NodalMaterial& mat,
                    const std::vector<double>& u, const std::vector<double>& v) {
    Stepper st(mesh, mat, {}, 1.0);
    std::vector<double> ku(u.size(), 0.0);
    st.add_stiffness_times(u.data(), ku.data(), 1.0);
    double e_kin = 0.0, e_pot = 0.0;
    for (int i = 0; i < mesh.n_nodes(); ++i) {
        const double m = mat.rho[i] * mesh.node_volume[i];
        const size_t k = size_t(i) * 2;
        e_kin += m * (v[k] * v[k] + v[k + 1] * v[k + 1]);
        e_pot += u[k] * ku[k] + u[k + 1] * ku[k + 1];
    }
    return 0.5 * (e_kin + e_pot);
}

ForwardResult run_forward(const SpectralMesh& mesh, const NodalMaterial& mat,
                          const std::vector<SourceTerm>& sources,
                          const ReceiverSpec& receivers, const TimeParams& time,
                          const std::vector<double>& damping, const ForwardOptions& opt) {
    const int n_steps = time.n_steps();
    if (n_steps < 1) throw InputError("run_forward: no time steps");
    if (opt.record_stride < 1 || opt.snapshot_stride < 1) {
        throw InputError("run_forward: strides must be >= 1");
    }
    if (receivers.count() != static_cast<int>(receivers.directions.size())) {
        throw InputError("run_forward: receiver positions/directions mismatch");
    }

    Stepper st(mesh, mat, damping, time.dt);

    std::vector<PointEval> src_eval, rcv_eval;
    src_eval.reserve(sources.size());
    for (const auto& s : sources) {
        if (std::abs(s.direction.norm() - 1.0) > 1e-9) {
            throw InputError("run_forward: source direction must be a unit vector");
        }
        src_eval.push_back(locate_point(mesh, s.position));
    }
    for (int r = 0; r < receivers.count(); ++r) {
        rcv_eval.push_back(locate_point(mesh, receivers.positions[r]));
    }

    ForwardResult res;
    const int n_rec_samples = n_steps / opt.record_stride + 1;
    res.traces = Traces(receivers.count(), n_rec_samples, time.dt * opt.record_stride);

    const bool snaps = opt.store_snapshots;
    if (snaps) {
        res.snapshots.nx = mesh.nnx();
        res.snapshots.ny = mesh.nny();
        res.snapshots.stride = opt.snapshot_stride;
        res.snapshots.dt_snap = time.dt * opt.snapshot_stride;
        res.snapshots.has_velocity = opt.store_velocity;
        const size_t n_frames = size_t(n_steps / opt.snapshot_stride) + 1;
        res.snapshots.u.reserve(n_frames * mesh.n_nodes() * 2);
        if (opt.store_velocity) res.snapshots.v.reserve(n_frames * mesh.n_nodes() * 2);
        append_frame(res.snapshots, st.u(), false);  // step 0 (zeros)
    }

    std::vector<double> vwork;
    const bool need_velocity = (snaps && opt.store_velocity) || opt.energy_stride > 0;
    if (need_velocity) vwork.assign(size_t(mesh.n_nodes()) * 2, 0.0);

    auto record = [&](int sample) {
        for (int r = 0; r < receivers.count(); ++r) {
            res.traces.at(r, sample) = st.sample(rcv_eval[r], receivers.directions[r], st.u());
        }
    };
    record(0);
    if (opt.energy_stride > 0) res.energies.push_back(0.0);  // zero state at t = 0

    for (int n = 0; n < n_steps; ++n) {
        st.assemble_internal_forces();
        const double t = n * time.dt;
        for (size_t s = 0; s < sources.size(); ++s) {
            const double val = sample_waveform(sources[s], t);
            if (val != 0.0) st.inject(src_eval[s], sources[s].direction, val);
        }
        st.advance();
        // u() = u^{n+1}, uold() = u^n, prev2() = u^{n-1}; the central
        // velocity v^n = (u^{n+1} - u^{n-1}) / (2 dt) is available now.
        if (need_velocity && n > 0) {
            const bool want_vframe = snaps && opt.store_velocity && n % opt.snapshot_stride == 0;
            const bool want_energy = opt.energy_stride > 0 && n % opt.energy_stride == 0;
            if (want_vframe || want_energy) {
                for (size_t i = 0; i < vwork.size(); ++i) {
                    vwork[i] = (st.u()[i] - st.prev2()[i]) / (2.0 * time.dt);
                }
                if (want_vframe) append_frame(res.snapshots, vwork, true);
                if (want_energy) res.energies.push_back(field_energy(mesh, mat, st.uold(), vwork));
            }
        } else if (need_velocity && n == 0 && snaps && opt.store_velocity) {
            // v^0 = u^1 / (2 dt) with u^{-1} = 0.
            for (size_t i = 0; i < vwork.size(); ++i) vwork[i] = st.u()[i] / (2.0 * time.dt);
            append_frame(res.snapshots, vwork, true);
        }

        const int n_now = n + 1;
        if (snaps && n_now % opt.snapshot_stride == 0) {
            append_frame(res.snapshots, st.u(), false);
        }
        if (n_now % opt.record_stride == 0) record(n_now / opt.record_stride);
        if (opt.nan_check_interval > 0 && n_now % opt.nan_check_interval == 0) {
            st.check_finite(n_now);
        }
    }
    // Final velocity frame at step n_steps (if on the snapshot grid): one-sided.
    if (snaps && opt.store_velocity && n_steps % opt.snapshot_stride == 0) {
        for (size_t i = 0; i < vwork.size(); ++i) {
            vwork[i] = (st.u()[i] - st.uold()[i]) / time.dt;
        }
        append_frame(res.snapshots, vwork, true);
    }
    st.check_finite(n_steps);
    return res;
}

AdjointResult run_adjoint(const SpectralMesh& mesh, const NodalMaterial& mat,
                          const ReceiverSpec& receivers, const Traces& adjoint_sources,
                          const TimeParams& time, const std::vector<double>& damping,
                          const SnapshotStore& forward, const AdjointOptions& opt) {
    const int n_steps = time.n_steps();
    if (forward.nx != mesh.nnx() || forward.ny != mesh.nny()) {
        throw InputError("run_adjoint: snapshot grid does not match mesh");
    }
    if (adjoint_sources.n_receivers != receivers.count()) {
        throw InputError("run_adjoint: adjoint source count mismatch");
    }
    if (adjoint_sources.n_samples != n_steps + 1 ||
        std::abs(adjoint_sources.dt - time.dt) > 1e-15 * std::max(1.0, time.dt)) {
        throw InputError("run_adjoint: adjoint sources not on the solver time axis");
    }
    const bool exact_mode = forward.stride == 1;
    if (!exact_mode && !forward.has_velocity) {
        throw InputError("run_adjoint: decimated snapshots need stored velocities");
    }
    const int expected_frames = n_steps / forward.stride + 1;
    if (forward.n_snapshots() != expected_frames) {
        throw InputError("run_adjoint: snapshot/time mismatch (" +
                         std::to_string(forward.n_snapshots()) + " frames, expected " +
                         std::to_string(expected_frames) + ")");
    }

    Stepper st(mesh, mat, damping, time.dt);
    const int nn = mesh.n_nodes();
    const double dt = time.dt;

    std::vector<PointEval> rcv_eval;
    for (int r = 0; r < receivers.count(); ++r) {
        rcv_eval.push_back(locate_point(mesh, receivers.positions[r]));
    }

    AdjointResult res;
    if (opt.accumulate_density_kernel) res.density_kernel.assign(nn, 0.0);
    if (opt.accumulate_classic) res.classic_image.assign(nn, 0.0);
    if (opt.store_snapshots) {
        res.snapshots.nx = mesh.nnx();
        res.snapshots.ny = mesh.nny();
        res.snapshots.stride = forward.stride;
        res.snapshots.dt_snap = forward.dt_snap;
        res.snapshots.has_velocity = forward.has_velocity;
        const size_t frame = size_t(nn) * 2;
        res.snapshots.u.assign(frame * expected_frames, 0.0f);
        if (forward.has_velocity) res.snapshots.v.assign(frame * expected_frames, 0.0f);
    }

    auto frame_as_double = [&](const float* f, std::vector<double>& out) {
        out.resize(size_t(nn) * 2);
        for (size_t i = 0; i < out.size(); ++i) out[i] = f[i];
    };

    std::vector<double> fwd_a, fwd_b, fwd_c, vadj;

    // End conditions lambda^{N+1} = lambda^{N+2} = 0; march m = N .. 1.
    for (int m = n_steps; m >= 1; --m) {
        st.assemble_internal_forces();
        for (int r = 0; r < receivers.count(); ++r) {
            const double val = adjoint_sources.at(r, m);
            if (val != 0.0) st.inject(rcv_eval[r], receivers.directions[r], val);
        }
        st.advance();
        // u() = lambda^m, uold() = lambda^{m+1}, prev2() = lambda^{m+2}.
        const std::vector<double>& lam_m = st.u();
        const std::vector<double>& lam_m1 = st.uold();
        const std::vector<double>& lam_m2 = st.prev2();

        if (opt.store_snapshots && m % forward.stride == 0) {
            const int j = m / forward.stride;
            float* dst = res.snapshots.u.data() + size_t(j) * nn * 2;
            for (size_t i = 0; i < lam_m.size(); ++i) dst[i] = static_cast<float>(lam_m[i]);
        }
        if (opt.store_snapshots && forward.has_velocity && (m + 1) % forward.stride == 0 &&
            m + 1 <= n_steps) {
            // Adjoint velocity in physical time at step m+1.
            const int j = (m + 1) / forward.stride;
            float* dst = res.snapshots.v.data() + size_t(j) * nn * 2;
            for (size_t i = 0; i < lam_m.size(); ++i) {
                dst[i] = static_cast<float>((lam_m2[i] - lam_m[i]) / (2.0 * dt));
            }
        }

        if (exact_mode && opt.accumulate_density_kernel) {
            // Discrete-exact pairing: lambda^m against the second difference
            // of u around step m-1 and against the strain of u^{m-1}. This is
            // the exact derivative of the discrete misfit when the adjoint
            // sources carry the misfit quadrature weights.
            frame_as_double(forward.u_frame(m), fwd_a);
            frame_as_double(forward.u_frame(m - 1), fwd_b);
            if (m >= 2) {
                frame_as_double(forward.u_frame(m - 2), fwd_c);
            } else {
                fwd_c.assign(size_t(nn) * 2, 0.0);
            }
            auto& kern = res.density_kernel;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (int g = 0; g < nn; ++g) {
                const double d = damping.empty() ? 0.0 : damping[g];
                double dot = 0.0;
                for (int c = 0; c < 2; ++c) {
                    const size_t k = size_t(g) * 2 + c;
                    const double acc = (fwd_a[k] - 2.0 * fwd_b[k] + fwd_c[k]) / (dt * dt);
                    const double vel = (fwd_a[k] - fwd_c[k]) / (2.0 * dt);
                    dot += lam_m[k] * (acc + d * vel);
                }
                kern[g] -= dt * dot * mesh.node_volume[g];
            }
            add_strain_correlation(mesh, mat, lam_m.data(), fwd_b.data(), -dt,
                                   res.density_kernel);
        }

        if (exact_mode && opt.accumulate_classic) {
            if (!opt.accumulate_density_kernel) frame_as_double(forward.u_frame(m), fwd_a);
            const double w = (m == n_steps) ? 0.5 : 1.0;
            auto& img = res.classic_image;
            for (int g = 0; g < nn; ++g) {
                const size_t k = size_t(g) * 2;
                img[g] += w * dt * (lam_m[k] * fwd_a[k] + lam_m[k + 1] * fwd_a[k + 1]);
            }
        }

        if (!exact_mode && (m + 1) % forward.stride == 0 && m + 1 <= n_steps) {
            // Trapezoid accumulation over the snapshot grid at physical step
            // m+1: adjoint displacement lambda^{m+1}, adjoint velocity
            // (lambda^{m+2} - lambda^m) / (2 dt).
            const int j = (m + 1) / forward.stride;
            const double w = (j == forward.n_snapshots() - 1) ? 0.5 : 1.0;
            const double wdt = w * forward.dt_snap;
            frame_as_double(forward.u_frame(j), fwd_a);
            vadj.resize(size_t(nn) * 2);
            for (size_t i = 0; i < vadj.size(); ++i) {
                vadj[i] = (lam_m2[i] - lam_m[i]) / (2.0 * dt);
            }
            if (opt.accumulate_density_kernel) {
                const float* vf = forward.v_frame(j);
                auto& kern = res.density_kernel;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
                for (int g = 0; g < nn; ++g) {
                    const size_t k = size_t(g) * 2;
                    kern[g] += wdt * (vadj[k] * vf[k] + vadj[k + 1] * vf[k + 1]) *
                               mesh.node_volume[g];
                }
                add_strain_correlation(mesh, mat, lam_m1.data(), fwd_a.data(), -wdt,
                                       res.density_kernel);
            }
            if (opt.accumulate_classic) {
                auto& img = res.classic_image;
                for (int g = 0; g < nn; ++g) {
                    const size_t k = size_t(g) * 2;
                    img[g] += wdt * (lam_m1[k] * fwd_a[k] + lam_m1[k + 1] * fwd_a[k + 1]);
                }
            }
        }

        if (m % 64 == 0) st.check_finite(m);
    }
    if (opt.accumulate_density_kernel) {
        // The accumulators hold the integrated gradient; report the intensive
        // per-volume sensitivity.
        for (int g = 0; g < nn; ++g) res.density_kernel[g] /= mesh.node_volume[g];
    }
    return res;
}

ImageGrid interpolate_to_raster(const SpectralMesh& mesh, const std::vector<double>& nodal,
                                const RasterGrid& grid) {
    if (static_cast<int>(nodal.size()) != mesh.n_nodes()) {
        throw InputError("interpolate_to_raster: field size mismatch");
    }
    ImageGrid img(grid);
    const int p = mesh.degree;
    for (int iy = 0; iy < grid.ny; ++iy) {
        for (int ix = 0; ix < grid.nx; ++ix) {
            const Vec2 c = grid.pixel_center(ix, iy);
            const PointEval e = locate_point(mesh, c);
            double val = 0.0;
            for (int b = 0; b <= p; ++b) {
                if (e.wy[b] == 0.0) continue;
                for (int a = 0; a <= p; ++a) {
                    if (e.wx[a] == 0.0) continue;
                    val += e.wx[a] * e.wy[b] *
                           nodal[mesh.node_index(e.ex * p + a, e.ey * p + b)];
                }
            }
            img.at(ix, iy) = val;
        }
    }
    return img;
}

}  // namespace uswb::wavesim
