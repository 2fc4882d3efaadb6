#pragma once

#include <string>
#include <variant>
#include <vector>

#include "uswb/core.hpp"

namespace uswb::model {

struct Circle {
    Vec2 center;     // m
    double radius;   // m
};

struct Polygon {
    std::vector<Vec2> vertices;  // m, simple (non-self-intersecting), >= 3
};

using DefectShape = std::variant<Circle, Polygon>;

bool contains(const Circle& c, const Vec2& p);
bool contains(const Polygon& poly, const Vec2& p);  // even-odd rule
bool contains(const DefectShape& shape, const Vec2& p);

double shoelace_area(const Polygon& poly);
bool is_simple_polygon(const Polygon& poly);

/// Smallest feature length of a shape: circle diameter, or the shorter side
/// of a polygon's bounding box.
double feature_size(const DefectShape& shape);

/// Y-shaped notch: two slanted arms opening upward from a junction point plus
/// a vertical slit below it, each piece a 4-vertex slot polygon of the given
/// width. Angles are measured from the vertical (depth) axis.
std::vector<Polygon> make_y_notch(Vec2 junction, double arm_length, double arm_angle_deg,
                                  double slit_length, double width);

struct BackgroundMaterial {
    double rho = 0.0;  // kg/m^3
    double vp = 0.0;   // m/s
    double vs = 0.0;   // m/s
};

struct ArraySpec {
    int n_elements = 64;
    double pitch = 0.75e-3;        // m
    double first_element_x = 0.0;  // m
    double surface_y = 0.0;        // m, top edge

    double aperture() const { return (n_elements - 1) * pitch; }
    Vec2 element_position(int i) const {
        return {first_element_x + i * pitch, surface_y};
    }
    double center_x() const { return first_element_x + aperture() / 2.0; }
};

struct ScenarioSpec {
    std::string name;
    double domain_width = 0.0;   // m
    double domain_height = 0.0;  // m
    BackgroundMaterial background;
    std::vector<DefectShape> defects;
    ArraySpec array;

    /// Throws InputError on any violated invariant (positivity, vp > vs*sqrt(2),
    /// defects inside the domain, array fits on the top surface).
    void validate() const;

    bool inside_defect(const Vec2& p) const;
};

struct MaterialModel {
    RasterGrid grid;
    std::vector<double> rho;  // kg/m^3, per pixel
    std::vector<double> vp;   // m/s
    std::vector<double> vs;   // m/s
};

struct GroundTruthMask {
    RasterGrid grid;
    std::vector<std::uint8_t> mask;  // 1 = defect pixel

    int positive_count() const;
};

/// Rasterizes the scenario onto a pixel grid covering the full domain.
/// Pixels whose centers fall inside any defect get rho * factor; vp and vs
/// stay at background everywhere (voids are modeled by density contrast).
/// Rejects a spacing that resolves the smallest defect feature with < 4 pixels.
MaterialModel build_material_model(const ScenarioSpec& spec, double spacing,
                                   double defect_density_factor = 0.01);

/// Binary defect mask on an arbitrary grid; pixel-center point test.
GroundTruthMask rasterize_ground_truth(const ScenarioSpec& spec, const RasterGrid& grid);

struct ConstitutiveComponents {
    double c1111 = 0.0;  // Pa, = rho * vp^2
    double c1122 = 0.0;  // Pa, = rho * (vp^2 - 2 vs^2)
    double c1212 = 0.0;  // Pa, = rho * vs^2
};

/// Isotropic plane-strain constitutive components from (rho, vp, vs).
/// vp^2 < 2 vs^2 gives a negative c1122; computed anyway, caller may warn.
ConstitutiveComponents constitutive_components(double rho, double vp, double vs);

/// Scenario file I/O. Files are JSON with lengths in millimeters; see the
/// README for the schema. Defect entries may be circles, polygons, or
/// y_notch parameter blocks (expanded to polygons on load).
ScenarioSpec load_scenario(const std::string& path);
void save_scenario(const ScenarioSpec& spec, const std::string& path);
ScenarioSpec parse_scenario_json(const std::string& text, const std::string& origin = "<string>");

}  // namespace uswb::model
