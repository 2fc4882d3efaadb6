#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <json.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "uswb/acquisition.hpp"
#include "uswb/core.hpp"
#include "uswb/fwi.hpp"
#include "uswb/imageio.hpp"
#include "uswb/metrics.hpp"
#include "uswb/model.hpp"
#include "uswb/rtm.hpp"
#include "uswb/setup.hpp"
#include "uswb/tfm.hpp"
#include "uswb/wavesim.hpp"

namespace {

using nlohmann::json;
using namespace uswb;

std::string read_file_or_empty(const std::string& path) {
    if (path.empty()) return {};
    std::ifstream in(path);
    if (!in) throw InputError("cannot open file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json load_config_json(const std::string& path) {
    if (path.empty()) return json::object();
    try {
        return json::parse(read_file_or_empty(path));
    } catch (const json::parse_error& e) {
        throw InputError("config " + path + ": " + e.what());
    }
}

struct ManifestInput {
    std::string command;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
    std::string scenario_name;
    std::string method;
    std::string config_payload;  // everything that determines the outputs
    double seconds = 0.0;
};

void write_manifest(const ManifestInput& m, const std::string& path) {
    json j;
    j["tool"] = "uswb";
    j["version"] = kVersion;
    j["command"] = m.command;
    j["scenario"] = m.scenario_name;
    if (!m.method.empty()) j["method"] = m.method;
    j["inputs"] = m.inputs;
    j["outputs"] = m.outputs;
    char hash[32];
    std::snprintf(hash, sizeof(hash), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(m.command + "\n" + m.config_payload)));
    j["config_hash"] = hash;
    j["elapsed_seconds"] = m.seconds;
    std::ofstream os(path);
    if (!os) throw InputError("cannot write manifest: " + path);
    os << j.dump(2) << "\n";
}

class Timer {
public:
    Timer() : start_(std::chrono::steady_clock::now()) {}
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

setup::SimConfig sim_config_from_json(const json& j) {
    setup::SimConfig cfg;
    if (!j.contains("sim")) return cfg;
    const auto& s = j["sim"];
    cfg.degree = s.value("degree", cfg.degree);
    cfg.elements_per_wavelength = s.value("elements_per_wavelength", cfg.elements_per_wavelength);
    cfg.courant = s.value("courant", cfg.courant);
    cfg.t_end = s.value("t_end", cfg.t_end);
    cfg.dt = s.value("dt", cfg.dt);
    cfg.sponge_wavelengths = s.value("sponge_wavelengths", cfg.sponge_wavelengths);
    cfg.sponge_strength = s.value("sponge_strength", cfg.sponge_strength);
    cfg.absorbing_sides = s.value("absorbing_sides", cfg.absorbing_sides);
    cfg.defect_density_factor = s.value("defect_density_factor", cfg.defect_density_factor);
    cfg.raster_spacing = s.value("raster_spacing", cfg.raster_spacing);
    cfg.vp_override = s.value("vp_override", cfg.vp_override);
    cfg.density_floor = s.value("density_floor", cfg.density_floor);
    return cfg;
}

int cmd_simulate(const std::string& scenario_path, const std::string& out_path,
                 const std::string& config_path, bool reference, bool defect_free,
                 bool csv_export) {
    Timer timer;
    const auto spec = model::load_scenario(scenario_path);
    const json cfg_json = load_config_json(config_path);
    setup::SimConfig cfg = sim_config_from_json(cfg_json);
    if (reference) cfg.reference_factor = 2.0;

    model::ScenarioSpec used = spec;
    if (defect_free) used.defects.clear();

    // The pulse is generated on the solver time axis, so build the setup with
    // placeholder stats first, then refine.
    auto stf_probe = acq::default_pulse(1e-8);
    auto s = setup::build_setup(used, stf_probe.stats, cfg);
    const auto stf = acq::default_pulse(s.time.dt);

    std::cerr << "simulate: mesh " << s.mesh.nex << "x" << s.mesh.ney << " elements, dt "
              << s.time.dt << " s, " << s.time.n_steps() << " steps\n";
    const auto fmc = acq::generate_fmc(s.mesh, s.material, used.array, stf, s.time, s.damping,
                                       s.record_stride);
    acq::save_fmc(fmc, out_path);
    if (csv_export) acq::export_fmc_csv(fmc, out_path + ".csv");

    ManifestInput m;
    m.command = "simulate";
    m.inputs = {scenario_path};
    if (!config_path.empty()) m.inputs.push_back(config_path);
    m.outputs = {out_path};
    m.scenario_name = used.name;
    m.config_payload = read_file_or_empty(scenario_path) + cfg_json.dump() +
                       (reference ? "ref" : "") + (defect_free ? "nodefect" : "");
    m.seconds = timer.seconds();
    write_manifest(m, out_path + ".manifest.json");
    std::cerr << "simulate: wrote " << out_path << " (" << m.seconds << " s)\n";
    return 0;
}

RasterGrid default_image_grid(const model::ScenarioSpec& spec, double spacing) {
    RasterGrid g;
    g.spacing = spacing;
    g.x0 = 0.0;
    g.y0 = 0.0;
    g.nx = static_cast<int>(std::floor(spec.domain_width / spacing));
    g.ny = static_cast<int>(std::floor(spec.domain_height / spacing));
    return g;
}

int cmd_reconstruct(const std::string& method, const std::string& fmc_path,
                    const std::string& scenario_path, const std::string& out_path,
                    const std::string& config_path, bool png) {
    Timer timer;
    const auto spec = model::load_scenario(scenario_path);
    const auto fmc = acq::load_fmc(fmc_path);
    if (fmc.n != spec.array.n_elements ||
        std::abs(fmc.array.pitch - spec.array.pitch) > 1e-12) {
        throw InputError("reconstruct: FMC array geometry does not match the scenario");
    }
    const json cfg_json = load_config_json(config_path);

    ImageGrid image;
    std::vector<std::string> outputs = {out_path};

    if (method == "tfm") {
        tfm::TfmConfig cfg;
        const auto& t = cfg_json.contains("tfm") ? cfg_json["tfm"] : json::object();
        const double spacing = t.value("spacing_mm", 0.1) * 1e-3;
        cfg.grid = default_image_grid(spec, spacing);
        cfg.speed = t.value("speed", spec.background.vp);
        cfg.interpolation = t.value("interpolation", std::string("linear")) == "nearest"
                                ? tfm::Interpolation::kNearest
                                : tfm::Interpolation::kLinear;
        // Optional time-zero correction (seconds): echo envelopes of a
        // symmetric pulse peak this long after the geometric arrival.
        auto data = fmc;
        data.t0 -= t.value("time_zero_s", 0.0);
        image = tfm::tfm_image(data, cfg);
    } else if (method == "rtm") {
        rtm::RtmConfig cfg;
        cfg.sim = sim_config_from_json(cfg_json);
        const auto& r = cfg_json.contains("rtm") ? cfg_json["rtm"] : json::object();
        cfg.sigma = r.value("sigma", cfg.sigma);
        cfg.group_size = r.value("group_size", cfg.group_size);
        cfg.snapshot_stride = r.value("snapshot_stride", cfg.snapshot_stride);
        cfg.image_spacing = r.value("spacing_mm", cfg.image_spacing * 1e3) * 1e-3;
        cfg.kernel = r.value("kernel", std::string("density")) == "classic"
                         ? rtm::KernelType::kClassic
                         : rtm::KernelType::kDensity;
        const auto stf = acq::default_pulse(fmc.dt);
        const auto res = rtm::reconstruct(spec, fmc, stf, cfg);
        image = res.final_image.image;
        imageio::save_float_grid(res.raw_sum, out_path + ".raw.fgr");
        rtm::save_rtm_metadata(res.final_image, out_path + ".meta.txt");
        outputs.push_back(out_path + ".raw.fgr");
        outputs.push_back(out_path + ".meta.txt");
    } else if (method == "fwi") {
        fwi::InversionConfig cfg;
        if (!config_path.empty()) cfg = fwi::load_inversion_config(config_path);
        const auto stf_probe = acq::default_pulse(1e-8);
        auto s = setup::build_setup(spec, stf_probe.stats, cfg.sim);
        const auto stf = acq::default_pulse(s.time.dt);
        const auto res = fwi::two_stage_inversion(spec, fmc, stf, cfg);
        image = res.image;
        fwi::save_history_csv(res.history, out_path + ".history.csv");
        outputs.push_back(out_path + ".history.csv");
    } else if (method == "fwi-gradient") {
        fwi::InversionConfig cfg;
        if (!config_path.empty()) cfg = fwi::load_inversion_config(config_path);
        const auto& r = cfg_json.contains("rtm") ? cfg_json["rtm"] : json::object();
        const double spacing = r.value("spacing_mm", 0.1);
        const int group = r.value("group_size", 1);
        const auto stf_probe = acq::default_pulse(1e-8);
        auto s = setup::build_setup(spec, stf_probe.stats, cfg.sim);
        const auto stf = acq::default_pulse(s.time.dt);
        image = fwi::gradient_field_image(spec, fmc, stf, cfg, group,
                                          default_image_grid(spec, spacing * 1e-3));
    } else {
        throw InputError("unknown method '" + method + "' (tfm, rtm, fwi, fwi-gradient)");
    }

    imageio::save_float_grid(image, out_path);
    if (png) {
        imageio::save_png_gray(image, out_path + ".png");
        outputs.push_back(out_path + ".png");
    }

    ManifestInput m;
    m.command = "reconstruct";
    m.method = method;
    m.inputs = {fmc_path, scenario_path};
    if (!config_path.empty()) m.inputs.push_back(config_path);
    m.outputs = outputs;
    m.scenario_name = spec.name;
    m.config_payload = method + read_file_or_empty(scenario_path) + cfg_json.dump();
    m.seconds = timer.seconds();
    write_manifest(m, out_path + ".manifest.json");
    std::cerr << "reconstruct " << method << ": wrote " << out_path << " (" << m.seconds
              << " s)\n";
    return 0;
}

int cmd_evaluate(const std::string& image_path, const std::string& scenario_path,
                 const std::string& out_prefix, double exclude_bottom,
                 const std::string& method) {
    Timer timer;
    const auto spec = model::load_scenario(scenario_path);
    const auto image = imageio::load_float_grid(image_path);
    const auto truth = model::rasterize_ground_truth(spec, image.grid);

    metrics::ExclusionRegion excl{exclude_bottom};
    const auto report = metrics::evaluate(image, truth, excl);

    const std::string metrics_path = out_prefix + ".metrics.csv";
    metrics::save_report_csv(report, metrics_path);
    {
        std::ofstream os(metrics_path, std::ios::app);
        os << "scenario," << spec.name << "\n";
        os << "method," << (method.empty() ? "unknown" : method) << "\n";
    }
    metrics::save_curve_csv(report.roc, out_prefix + ".roc.csv", "fpr", "tpr");
    metrics::save_curve_csv(report.prc, out_prefix + ".prc.csv", "recall", "precision");

    const auto norm = metrics::normalize_image(image);
    imageio::save_png_overlay(norm, truth, report.tau_roc_value, excl,
                              out_prefix + ".overlay_roc.png");
    imageio::save_png_overlay(norm, truth, report.tau_prc_value, excl,
                              out_prefix + ".overlay_prc.png");
    imageio::save_png_overlay(norm, truth, report.tau_f1_value, excl,
                              out_prefix + ".overlay_f1.png");

    ManifestInput m;
    m.command = "evaluate";
    m.method = method;
    m.inputs = {image_path, scenario_path};
    m.outputs = {metrics_path, out_prefix + ".roc.csv", out_prefix + ".prc.csv"};
    m.scenario_name = spec.name;
    m.config_payload = read_file_or_empty(scenario_path) + std::to_string(exclude_bottom);
    m.seconds = timer.seconds();
    write_manifest(m, out_prefix + ".manifest.json");

    std::cout << "auroc=" << report.auroc_value << " auprc=" << report.auprc_value
              << " f1_max=" << report.f1_max << "\n";
    return 0;
}

struct ReportEntry {
    std::string scenario;
    std::string method;
    std::map<std::string, double> values;
};

ReportEntry read_report_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open report: " + path);
    ReportEntry e;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        const auto comma = line.find(',');
        if (comma == std::string::npos) continue;
        const std::string key = line.substr(0, comma);
        const std::string value = line.substr(comma + 1);
        if (key == "scenario") {
            e.scenario = value;
        } else if (key == "method") {
            e.method = value;
        } else {
            try {
                e.values[key] = std::stod(value);
            } catch (...) {
            }
        }
    }
    if (e.scenario.empty()) e.scenario = path;
    if (e.method.empty()) e.method = "unknown";
    return e;
}

int cmd_compare(const std::vector<std::string>& report_paths, const std::string& out_path) {
    if (report_paths.empty()) throw InputError("compare: need at least one report");
    std::vector<ReportEntry> entries;
    for (const auto& p : report_paths) entries.push_back(read_report_csv(p));

    std::vector<std::string> scenarios, methods;
    for (const auto& e : entries) {
        if (std::find(scenarios.begin(), scenarios.end(), e.scenario) == scenarios.end()) {
            scenarios.push_back(e.scenario);
        }
        if (std::find(methods.begin(), methods.end(), e.method) == methods.end()) {
            methods.push_back(e.method);
        }
    }
    const std::vector<std::string> metric_names = {"f1_max", "auprc", "auroc"};

    auto lookup = [&](const std::string& sc, const std::string& me,
                      const std::string& metric) -> const double* {
        for (const auto& e : entries) {
            if (e.scenario == sc && e.method == me) {
                const auto it = e.values.find(metric);
                if (it != e.values.end()) return &it->second;
            }
        }
        return nullptr;
    };

    std::ofstream os(out_path);
    if (!os) throw InputError("cannot write table: " + out_path);
    os << "metric,method";
    for (const auto& sc : scenarios) os << ',' << sc << ',' << sc << "_best";
    os << "\n";
    os.precision(6);
    for (const auto& metric : metric_names) {
        for (const auto& me : methods) {
            os << metric << ',' << me;
            for (const auto& sc : scenarios) {
                const double* v = lookup(sc, me, metric);
                // Best method per metric/scenario gets the flag.
                bool best = v != nullptr;
                if (v) {
                    for (const auto& other : methods) {
                        const double* w = lookup(sc, other, metric);
                        if (w && *w > *v) best = false;
                    }
                }
                if (v) {
                    os << ',' << *v << ',' << (best ? 1 : 0);
                } else {
                    os << ",,";
                }
            }
            os << "\n";
        }
    }
    std::cerr << "compare: wrote " << out_path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Ultrasonic FMC imaging workbench: simulation, TFM/RTM/FWI reconstruction, "
                 "and threshold-metric evaluation"};
    app.require_subcommand(1);

    std::string scenario_path, out_path, config_path, fmc_path, image_path, method,
        out_prefix;
    std::vector<std::string> reports;
    bool reference = false, defect_free = false, csv_export = false, png = false;
    double exclude_bottom = 0.1;
    int threads = 0;

    app.add_option("--threads", threads, "Cap worker threads (0 = library default)");

    auto* sim = app.add_subcommand("simulate", "Synthesize an FMC dataset for a scenario");
    sim->add_option("scenario", scenario_path, "Scenario JSON file")->required();
    sim->add_option("output", out_path, "Output FMC file")->required();
    sim->add_option("--config", config_path, "Config JSON (sim section)");
    sim->add_flag("--reference-resolution", reference,
                  "2x finer mesh and time step (reference/observed data)");
    sim->add_flag("--defect-free", defect_free, "Simulate the background model only");
    sim->add_flag("--csv", csv_export, "Also export traces as CSV");

    auto* rec = app.add_subcommand("reconstruct", "Reconstruct an image from FMC data");
    rec->add_option("method", method, "tfm | rtm | fwi | fwi-gradient")->required();
    rec->add_option("fmc", fmc_path, "Input FMC file")->required();
    rec->add_option("scenario", scenario_path, "Scenario JSON file")->required();
    rec->add_option("output", out_path, "Output image (float grid)")->required();
    rec->add_option("--config", config_path, "Config JSON");
    rec->add_flag("--png", png, "Also write a grayscale PNG");

    auto* eva = app.add_subcommand("evaluate", "Score an image against the ground truth");
    eva->add_option("image", image_path, "Reconstruction image (float grid)")->required();
    eva->add_option("scenario", scenario_path, "Scenario JSON file")->required();
    eva->add_option("out_prefix", out_prefix, "Output prefix for CSVs and overlays")
        ->required();
    eva->add_option("--exclude-bottom", exclude_bottom,
                    "Bottom fraction of the image excluded from evaluation");
    eva->add_option("--method", method, "Method label recorded in the report");

    auto* cmp = app.add_subcommand("compare", "Merge metric reports into a comparison table");
    cmp->add_option("reports", reports, "Metric CSV files")->required();
    cmp->add_option("--out", out_path, "Output table CSV")->required();

    CLI11_PARSE(app, argc, argv);

#ifdef _OPENMP
    if (threads > 0) omp_set_num_threads(threads);
#endif

    try {
        if (sim->parsed()) {
            return cmd_simulate(scenario_path, out_path, config_path, reference, defect_free,
                                csv_export);
        }
        if (rec->parsed()) {
            return cmd_reconstruct(method, fmc_path, scenario_path, out_path, config_path, png);
        }
        if (eva->parsed()) {
            return cmd_evaluate(image_path, scenario_path, out_prefix, exclude_bottom, method);
        }
        if (cmp->parsed()) {
            return cmd_compare(reports, out_path);
        }
    } catch (const uswb::InputError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const uswb::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
