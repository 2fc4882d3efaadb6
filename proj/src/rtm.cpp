#include "uswb/rtm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace uswb::rtm {

AdjointSourceSet build_adjoint_sources(const wavesim::Traces& sim,
                                       const wavesim::Traces& obs,
                                       const wavesim::ReceiverSpec& receivers) {
    if (sim.n_receivers != obs.n_receivers || sim.n_samples != obs.n_samples) {
        throw InputError("build_adjoint_sources: trace shape mismatch");
    }
    if (std::abs(sim.dt - obs.dt) > 1e-15 * std::max(1.0, sim.dt)) {
        throw InputError("build_adjoint_sources: time axis mismatch");
    }
    if (sim.n_receivers != receivers.count()) {
        throw InputError("build_adjoint_sources: receiver count mismatch");
    }
    AdjointSourceSet out;
    out.receivers = receivers;
    out.traces = sim;
    for (size_t k = 0; k < out.traces.data.size(); ++k) {
        out.traces.data[k] -= obs.data[k];
    }
    return out;
}

std::vector<double> rtm_classic(const wavesim::SnapshotStore& forward,
                                const wavesim::SnapshotStore& backward) {
    if (forward.nx != backward.nx || forward.ny != backward.ny) {
        throw InputError("rtm_classic: snapshot grid mismatch");
    }
    if (forward.n_snapshots() != backward.n_snapshots()) {
        throw InputError("rtm_classic: snapshot count mismatch");
    }
    const int n_frames = forward.n_snapshots();
    const size_t n_pts = size_t(forward.nx) * forward.ny;
    std::vector<double> img(n_pts, 0.0);
    for (int j = 0; j < n_frames; ++j) {
        const double w = (j == 0 || j == n_frames - 1) ? 0.5 : 1.0;
        const float* uf = forward.u_frame(j);
        const float* ub = backward.u_frame(j);
        for (size_t g = 0; g < n_pts; ++g) {
            img[g] += w * forward.dt_snap *
                      (double(uf[g * 2]) * ub[g * 2] + double(uf[g * 2 + 1]) * ub[g * 2 + 1]);
        }
    }
    return img;
}

std::vector<double> rtm_density_kernel(const wavesim::SpectralMesh& mesh,
                                       const wavesim::SnapshotStore& forward,
                                       const wavesim::SnapshotStore& backward,
                                       const wavesim::NodalMaterial& mat) {
    if (forward.nx != backward.nx || forward.ny != backward.ny ||
        forward.nx != mesh.nnx() || forward.ny != mesh.nny()) {
        throw InputError("rtm_density_kernel: snapshot grid mismatch");
    }
    if (forward.n_snapshots() != backward.n_snapshots()) {
        throw InputError("rtm_density_kernel: snapshot count mismatch");
    }
    if (!forward.has_velocity || !backward.has_velocity) {
        throw InputError("rtm_density_kernel: stores must carry velocities");
    }
    const int n_frames = forward.n_snapshots();
    const int nn = mesh.n_nodes();
    std::vector<double> kern(nn, 0.0);
    std::vector<double> fa(size_t(nn) * 2), fb(size_t(nn) * 2);
    for (int j = 0; j < n_frames; ++j) {
        const double w = (j == 0 || j == n_frames - 1) ? 0.5 : 1.0;
        const double wdt = w * forward.dt_snap;
        const float* vf = forward.v_frame(j);
        const float* vb = backward.v_frame(j);
        for (int g = 0; g < nn; ++g) {
            const size_t k = size_t(g) * 2;
            kern[g] += wdt * (double(vf[k]) * vb[k] + double(vf[k + 1]) * vb[k + 1]) *
                       mesh.node_volume[g];
        }
        const float* uf = forward.u_frame(j);
        const float* ub = backward.u_frame(j);
        for (size_t i = 0; i < fa.size(); ++i) {
            fa[i] = ub[i];
            fb[i] = uf[i];
        }
        wavesim::add_strain_correlation(mesh, mat, fa.data(), fb.data(), -wdt, kern);
    }
    for (int g = 0; g < nn; ++g) kern[g] /= mesh.node_volume[g];
    return kern;
}

ImageGrid gaussian_blur(const ImageGrid& in, double sigma_px) {
    if (sigma_px < 0) throw InputError("gaussian_blur: negative sigma");
    if (sigma_px == 0.0) return in;
    const int radius = static_cast<int>(std::ceil(4.0 * sigma_px));
    std::vector<double> kernel(2 * radius + 1);
    double sum = 0.0;
    for (int k = -radius; k <= radius; ++k) {
        kernel[k + radius] = std::exp(-0.5 * k * k / (sigma_px * sigma_px));
        sum += kernel[k + radius];
    }
    for (double& w : kernel) w /= sum;

    auto reflect = [](int i, int n) {
        while (i < 0 || i >= n) {
            if (i < 0) i = -i - 1;
            if (i >= n) i = 2 * n - 1 - i;
        }
        return i;
    };

    const int nx = in.grid.nx, ny = in.grid.ny;
    ImageGrid tmp(in.grid), out(in.grid);
    for (int iy = 0; iy < ny; ++iy) {
        for (int ix = 0; ix < nx; ++ix) {
            double acc = 0.0;
            for (int k = -radius; k <= radius; ++k) {
                acc += kernel[k + radius] * in.at(reflect(ix + k, nx), iy);
            }
            tmp.at(ix, iy) = acc;
        }
    }
    for (int iy = 0; iy < ny; ++iy) {
        for (int ix = 0; ix < nx; ++ix) {
            double acc = 0.0;
            for (int k = -radius; k <= radius; ++k) {
                acc += kernel[k + radius] * tmp.at(ix, reflect(iy + k, ny));
            }
            out.at(ix, iy) = acc;
        }
    }
    return out;
}

RtmImage finalize_rtm(const std::vector<ImageGrid>& shot_images, double sigma_px) {
    if (shot_images.empty()) throw InputError("finalize_rtm: no shot images");
    ImageGrid sum = shot_images.front();
    for (size_t s = 1; s < shot_images.size(); ++s) {
        if (!shot_images[s].grid.same_shape(sum.grid)) {
            throw InputError("finalize_rtm: inconsistent shot image grids");
        }
        for (size_t k = 0; k < sum.values.size(); ++k) {
            sum.values[k] += shot_images[s].values[k];
        }
    }
    for (double& v : sum.values) v = std::abs(v);
    RtmImage out;
    out.image = gaussian_blur(sum, sigma_px);
    out.sigma = sigma_px;
    out.shots = static_cast<int>(shot_images.size());
    return out;
}

RtmResult reconstruct(const model::ScenarioSpec& spec, const acq::FmcDataset& fmc,
                      const acq::SourceTimeFunction& stf, const RtmConfig& cfg) {
    if (fmc.n != spec.array.n_elements) {
        throw InputError("rtm: FMC element count does not match the scenario array");
    }
    auto s = setup::build_setup(spec, stf.stats, cfg.sim);

    RasterGrid grid;
    grid.spacing = cfg.image_spacing;
    grid.x0 = 0.0;
    grid.y0 = 0.0;
    grid.nx = static_cast<int>(std::floor(spec.domain_width / grid.spacing));
    grid.ny = static_cast<int>(std::floor(spec.domain_height / grid.spacing));

    const auto receivers = acq::array_receivers(fmc.array);
    const int n_steps = s.time.n_steps();
    const int n_samples = n_steps + 1;
    if (fmc.n_samples != n_samples ||
        std::abs(fmc.dt - s.time.dt) > 1e-12 * std::max(1.0, s.time.dt)) {
        throw InputError("rtm: FMC time axis does not match the simulation setup "
                         "(resample or regenerate the dataset)");
    }

    const int group = std::max(1, cfg.group_size);
    const int n_shots = (fmc.n + group - 1) / group;

    std::vector<std::vector<double>> shot_kernels(n_shots);
    std::string error;

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (int shot = 0; shot < n_shots; ++shot) {
        if (!error.empty()) continue;
        try {
            const int first = shot * group;
            const int last = std::min(fmc.n, first + group) - 1;
            std::vector<wavesim::SourceTerm> sources;
            for (int i = first; i <= last; ++i) {
                sources.push_back(setup::element_source(fmc.array, i, stf));
            }
            wavesim::Traces obs(fmc.n, n_samples, fmc.dt);
            for (int i = first; i <= last; ++i) {
                for (int j = 0; j < fmc.n; ++j) {
                    for (int k = 0; k < n_samples; ++k) obs.at(j, k) += fmc.at(i, j, k);
                }
            }

            wavesim::ForwardOptions fopt;
            fopt.store_snapshots = true;
            fopt.snapshot_stride = std::max(1, cfg.snapshot_stride);
            fopt.store_velocity = fopt.snapshot_stride > 1;
            const auto fwd = wavesim::run_forward(s.mesh, s.background, sources, receivers,
                                                  s.time, s.damping, fopt);

            auto adj = build_adjoint_sources(fwd.traces, obs, receivers);
            // Misfit time-quadrature weights, so the kernel equals the
            // discrete density gradient of the L2 misfit.
            for (int r = 0; r < adj.traces.n_receivers; ++r) {
                adj.traces.at(r, 0) *= 0.5;
                adj.traces.at(r, n_samples - 1) *= 0.5;
            }

            wavesim::AdjointOptions aopt;
            aopt.accumulate_density_kernel = cfg.kernel == KernelType::kDensity;
            aopt.accumulate_classic = cfg.kernel == KernelType::kClassic;
            const auto res = wavesim::run_adjoint(s.mesh, s.background, receivers, adj.traces,
                                                  s.time, s.damping, fwd.snapshots, aopt);
            shot_kernels[shot] = cfg.kernel == KernelType::kDensity ? res.density_kernel
                                                                    : res.classic_image;
        } catch (const std::exception& e) {
#ifdef _OPENMP
#pragma omp critical
#endif
            error = e.what();
        }
    }
    if (!error.empty()) throw NumericalError("rtm: " + error);

    std::vector<ImageGrid> shot_images;
    shot_images.reserve(n_shots);
    for (const auto& kern : shot_kernels) {
        shot_images.push_back(wavesim::interpolate_to_raster(s.mesh, kern, grid));
    }

    RtmResult out;
    out.raw_sum = shot_images.front();
    for (int shot = 1; shot < n_shots; ++shot) {
        for (size_t k = 0; k < out.raw_sum.values.size(); ++k) {
            out.raw_sum.values[k] += shot_images[shot].values[k];
        }
    }
    out.final_image = finalize_rtm(shot_images, cfg.sigma);
    out.final_image.kernel = cfg.kernel;
    return out;
}

void save_rtm_metadata(const RtmImage& image, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw InputError("cannot write metadata: " + path);
    os << "kernel=" << (image.kernel == KernelType::kDensity ? "density" : "classic") << "\n";
    os << "sigma_px=" << image.sigma << "\n";
    os << "shots=" << image.shots << "\n";
}

}  // namespace uswb::rtm
