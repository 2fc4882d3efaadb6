#include "uswb/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

namespace uswb::model {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

bool contains(const Circle& c, const Vec2& p) {
    return distance(c.center, p) <= c.radius;
}

bool contains(const Polygon& poly, const Vec2& p) {
    // Even-odd ray cast along +x.
    const auto& v = poly.vertices;
    const size_t n = v.size();
    bool inside = false;
    for (size_t i = 0, j = n - 1; i < n; j = i++) {
        const bool crosses = (v[i].y > p.y) != (v[j].y > p.y);
        if (crosses) {
            const double x_cross = v[j].x + (p.y - v[j].y) / (v[i].y - v[j].y) * (v[i].x - v[j].x);
            if (p.x < x_cross) inside = !inside;
        }
    }
    return inside;
}

bool contains(const DefectShape& shape, const Vec2& p) {
    return std::visit([&](const auto& s) { return contains(s, p); }, shape);
}

double shoelace_area(const Polygon& poly) {
    const auto& v = poly.vertices;
    double twice_area = 0.0;
    for (size_t i = 0, j = v.size() - 1; i < v.size(); j = i++) {
        twice_area += v[j].x * v[i].y - v[i].x * v[j].y;
    }
    return std::abs(twice_area) / 2.0;
}

namespace {

bool segments_intersect(const Vec2& a, const Vec2& b, const Vec2& c, const Vec2& d) {
    auto orient = [](const Vec2& p, const Vec2& q, const Vec2& r) {
        const double v = (q.x - p.x) * (r.y - p.y) - (q.y - p.y) * (r.x - p.x);
        return (v > 0) - (v < 0);
    };
    const int o1 = orient(a, b, c), o2 = orient(a, b, d);
    const int o3 = orient(c, d, a), o4 = orient(c, d, b);
    return o1 != o2 && o3 != o4;
}

}  // namespace

bool is_simple_polygon(const Polygon& poly) {
    const auto& v = poly.vertices;
    const size_t n = v.size();
    if (n < 3) return false;
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = i + 1; j < n; ++j) {
            // Skip adjacent edges (they share a vertex).
            if (j == i || (j + 1) % n == i || (i + 1) % n == j) continue;
            if (segments_intersect(v[i], v[(i + 1) % n], v[j], v[(j + 1) % n])) return false;
        }
    }
    return true;
}

double feature_size(const DefectShape& shape) {
    if (const auto* c = std::get_if<Circle>(&shape)) return 2.0 * c->radius;
    const auto& poly = std::get<Polygon>(shape);
    double xmin = std::numeric_limits<double>::max(), xmax = -xmin;
    double ymin = xmin, ymax = -xmin;
    for (const auto& v : poly.vertices) {
        xmin = std::min(xmin, v.x);
        xmax = std::max(xmax, v.x);
        ymin = std::min(ymin, v.y);
        ymax = std::max(ymax, v.y);
    }
    return std::min(xmax - xmin, ymax - ymin);
}

std::vector<Polygon> make_y_notch(Vec2 junction, double arm_length, double arm_angle_deg,
                                  double slit_length, double width) {
    if (arm_length <= 0 || slit_length <= 0 || width <= 0) {
        throw InputError("y_notch: arm_length, slit_length and width must be positive");
    }
    if (arm_angle_deg <= 0 || arm_angle_deg >= 90) {
        throw InputError("y_notch: arm angle must be in (0, 90) degrees");
    }
    const double a = arm_angle_deg * kPi / 180.0;

    auto slot = [&](Vec2 from, Vec2 dir) {
        const Vec2 to = from + dir * arm_length;
        const Vec2 perp{-dir.y, dir.x};
        const Vec2 h = perp * (width / 2.0);
        return Polygon{{from + h, to + h, to - h, from - h}};
    };

    // Arms point up and outward (negative y is toward the probe surface).
    std::vector<Polygon> parts;
    parts.push_back(slot(junction, {std::sin(a), -std::cos(a)}));
    parts.push_back(slot(junction, {-std::sin(a), -std::cos(a)}));
    const Vec2 slit_end{junction.x, junction.y + slit_length};
    parts.push_back(Polygon{{{junction.x - width / 2, junction.y},
                             {junction.x + width / 2, junction.y},
                             {slit_end.x + width / 2, slit_end.y},
                             {slit_end.x - width / 2, slit_end.y}}});
    return parts;
}

void ScenarioSpec::validate() const {
    if (domain_width <= 0 || domain_height <= 0) {
        throw InputError("scenario '" + name + "': domain dimensions must be positive");
    }
    if (background.rho <= 0 || background.vp <= 0 || background.vs <= 0) {
        throw InputError("scenario '" + name + "': background material values must be positive");
    }
    if (background.vp <= background.vs * std::sqrt(2.0)) {
        throw InputError("scenario '" + name + "': vp must exceed vs*sqrt(2)");
    }
    if (array.n_elements < 1 || array.pitch <= 0) {
        throw InputError("scenario '" + name + "': invalid array (need n_elements >= 1, pitch > 0)");
    }
    if (array.first_element_x < 0 ||
        array.first_element_x + array.aperture() > domain_width) {
        throw InputError("scenario '" + name + "': array aperture does not fit inside the domain");
    }
    for (const auto& shape : defects) {
        if (const auto* c = std::get_if<Circle>(&shape)) {
            if (c->radius <= 0) throw InputError("scenario '" + name + "': circle radius must be positive");
            if (c->center.x - c->radius <= 0 || c->center.x + c->radius >= domain_width ||
                c->center.y - c->radius <= 0 || c->center.y + c->radius >= domain_height) {
                throw InputError("scenario '" + name + "': circle defect not strictly inside the domain");
            }
        } else {
            const auto& poly = std::get<Polygon>(shape);
            if (poly.vertices.size() < 3) {
                throw InputError("scenario '" + name + "': polygon needs at least 3 vertices");
            }
            if (!is_simple_polygon(poly)) {
                throw InputError("scenario '" + name + "': polygon is self-intersecting");
            }
            for (const auto& v : poly.vertices) {
                if (v.x <= 0 || v.x >= domain_width || v.y <= 0 || v.y >= domain_height) {
                    throw InputError("scenario '" + name + "': polygon defect not strictly inside the domain");
                }
            }
        }
    }
}

bool ScenarioSpec::inside_defect(const Vec2& p) const {
    for (const auto& shape : defects) {
        if (contains(shape, p)) return true;
    }
    return false;
}

int GroundTruthMask::positive_count() const {
    int n = 0;
    for (auto m : mask) n += m;
    return n;
}

MaterialModel build_material_model(const ScenarioSpec& spec, double spacing,
                                   double defect_density_factor) {
    spec.validate();
    if (spacing <= 0) throw InputError("build_material_model: spacing must be positive");
    if (defect_density_factor <= 0 || defect_density_factor > 1) {
        throw InputError("build_material_model: density factor must be in (0, 1] "
                         "(got " + std::to_string(defect_density_factor) + ")");
    }
    for (const auto& shape : spec.defects) {
        const double feat = feature_size(shape);
        if (spacing > feat / 4.0) {
            std::ostringstream msg;
            msg << "build_material_model: spacing " << spacing
                << " m too coarse for smallest defect feature " << feat
                << " m (need >= 4 pixels across)";
            throw InputError(msg.str());
        }
    }

    MaterialModel m;
    m.grid.nx = static_cast<int>(std::ceil(spec.domain_width / spacing));
    m.grid.ny = static_cast<int>(std::ceil(spec.domain_height / spacing));
    m.grid.x0 = 0.0;
    m.grid.y0 = 0.0;
    m.grid.spacing = spacing;
    m.rho.assign(m.grid.size(), spec.background.rho);
    m.vp.assign(m.grid.size(), spec.background.vp);
    m.vs.assign(m.grid.size(), spec.background.vs);

    for (int iy = 0; iy < m.grid.ny; ++iy) {
        for (int ix = 0; ix < m.grid.nx; ++ix) {
            if (spec.inside_defect(m.grid.pixel_center(ix, iy))) {
                m.rho[m.grid.index(ix, iy)] = spec.background.rho * defect_density_factor;
            }
        }
    }
    return m;
}

GroundTruthMask rasterize_ground_truth(const ScenarioSpec& spec, const RasterGrid& grid) {
    GroundTruthMask out;
    out.grid = grid;
    out.mask.assign(grid.size(), 0);
    for (int iy = 0; iy < grid.ny; ++iy) {
        for (int ix = 0; ix < grid.nx; ++ix) {
            if (spec.inside_defect(grid.pixel_center(ix, iy))) {
                out.mask[grid.index(ix, iy)] = 1;
            }
        }
    }
    return out;
}

ConstitutiveComponents constitutive_components(double rho, double vp, double vs) {
    if (rho <= 0 || vp <= 0 || vs < 0) {
        throw InputError("constitutive_components: need rho > 0, vp > 0, vs >= 0");
    }
    ConstitutiveComponents c;
    c.c1111 = rho * vp * vp;
    c.c1122 = rho * (vp * vp - 2.0 * vs * vs);
    c.c1212 = rho * vs * vs;
    return c;
}

namespace {

using nlohmann::json;

constexpr double kMm = 1e-3;

Vec2 point_mm(const json& j) {
    if (!j.is_array() || j.size() != 2) throw InputError("scenario: points must be [x, y] in mm");
    return {j[0].get<double>() * kMm, j[1].get<double>() * kMm};
}

}  // namespace

ScenarioSpec parse_scenario_json(const std::string& text, const std::string& origin) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw InputError("scenario " + origin + ": " + e.what());
    }
    try {
        ScenarioSpec spec;
        spec.name = j.value("name", std::string("unnamed"));
        spec.domain_width = j.at("domain").at("width_mm").get<double>() * kMm;
        spec.domain_height = j.at("domain").at("height_mm").get<double>() * kMm;
        spec.background.rho = j.at("background").at("rho").get<double>();
        spec.background.vp = j.at("background").at("vp").get<double>();
        spec.background.vs = j.at("background").at("vs").get<double>();

        const auto& arr = j.at("array");
        spec.array.n_elements = arr.value("n_elements", 64);
        spec.array.pitch = arr.value("pitch_mm", 0.75) * kMm;
        if (arr.contains("first_element_x_mm")) {
            spec.array.first_element_x = arr["first_element_x_mm"].get<double>() * kMm;
        } else {
            // Centered on the top surface by default.
            spec.array.first_element_x = (spec.domain_width - spec.array.aperture()) / 2.0;
        }
        spec.array.surface_y = arr.value("surface_y_mm", 0.0) * kMm;

        for (const auto& d : j.value("defects", json::array())) {
            const std::string type = d.at("type").get<std::string>();
            if (type == "circle") {
                spec.defects.emplace_back(Circle{point_mm(d.at("center_mm")),
                                                 d.at("radius_mm").get<double>() * kMm});
            } else if (type == "polygon") {
                Polygon poly;
                for (const auto& v : d.at("vertices_mm")) poly.vertices.push_back(point_mm(v));
                spec.defects.emplace_back(std::move(poly));
            } else if (type == "y_notch") {
                auto parts = make_y_notch(point_mm(d.at("junction_mm")),
                                          d.at("arm_length_mm").get<double>() * kMm,
                                          d.at("arm_angle_deg").get<double>(),
                                          d.at("slit_length_mm").get<double>() * kMm,
                                          d.at("width_mm").get<double>() * kMm);
                for (auto& p : parts) spec.defects.emplace_back(std::move(p));
            } else {
                throw InputError("scenario " + origin + ": unknown defect type '" + type + "'");
            }
        }
        spec.validate();
        return spec;
    } catch (const json::exception& e) {
        throw InputError("scenario " + origin + ": " + e.what());
    }
}

ScenarioSpec load_scenario(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open scenario file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_scenario_json(ss.str(), path);
}

void save_scenario(const ScenarioSpec& spec, const std::string& path) {
    using nlohmann::json;
    json j;
    j["name"] = spec.name;
    j["domain"] = {{"width_mm", spec.domain_width / kMm}, {"height_mm", spec.domain_height / kMm}};
    j["background"] = {{"rho", spec.background.rho},
                       {"vp", spec.background.vp},
                       {"vs", spec.background.vs}};
    j["array"] = {{"n_elements", spec.array.n_elements},
                  {"pitch_mm", spec.array.pitch / kMm},
                  {"first_element_x_mm", spec.array.first_element_x / kMm},
                  {"surface_y_mm", spec.array.surface_y / kMm}};
    j["defects"] = json::array();
    for (const auto& shape : spec.defects) {
        json d;
        if (const auto* c = std::get_if<Circle>(&shape)) {
            d["type"] = "circle";
            d["center_mm"] = {c->center.x / kMm, c->center.y / kMm};
            d["radius_mm"] = c->radius / kMm;
        } else {
            d["type"] = "polygon";
            d["vertices_mm"] = json::array();
            for (const auto& v : std::get<Polygon>(shape).vertices) {
                d["vertices_mm"].push_back({v.x / kMm, v.y / kMm});
            }
        }
        j["defects"].push_back(d);
    }
    std::ofstream out(path);
    if (!out) throw InputError("cannot write scenario file: " + path);
    out << j.dump(2) << "\n";
}

}  // namespace uswb::model
