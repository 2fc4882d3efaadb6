#include <doctest.h>

#include <cmath>

#include "uswb/model.hpp"

using namespace uswb;
using namespace uswb::model;

namespace {

ScenarioSpec basic_scenario() {
    ScenarioSpec s;
    s.name = "test";
    s.domain_width = 40e-3;
    s.domain_height = 30e-3;
    s.background = {2582.8, 6315.8, 3129.3};
    s.array.n_elements = 8;
    s.array.pitch = 0.75e-3;
    s.array.first_element_x = 10e-3;
    return s;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("constitutive components match the closed forms") {
    SUBCASE("unit-style values") {
        const auto c = constitutive_components(1.0, 2.0, 1.0);
        CHECK(c.c1111 == doctest::Approx(4.0));
        CHECK(c.c1122 == doctest::Approx(2.0));
        CHECK(c.c1212 == doctest::Approx(1.0));
    }
    SUBCASE("acoustic limit vs = 0") {
        const auto c = constitutive_components(1.0, 5000.0, 0.0);
        CHECK(c.c1111 == doctest::Approx(2.5e7));
        CHECK(c.c1122 == doctest::Approx(c.c1111));
        CHECK(c.c1212 == doctest::Approx(0.0));
    }
    SUBCASE("aluminum values") {
        // 2582.8 * 6315.8^2 evaluated independently.
        const auto c = constitutive_components(2582.8, 6315.8, 3129.3);
        CHECK(c.c1111 == doctest::Approx(1.03026e11).epsilon(1e-4));
        CHECK(c.c1212 == doctest::Approx(2582.8 * 3129.3 * 3129.3).epsilon(1e-12));
        // Symmetry of the full tensor reduces to these three numbers in 2D
        // isotropy; c1122 = c1111 - 2 c1212 must hold.
        CHECK(c.c1122 == doctest::Approx(c.c1111 - 2.0 * c.c1212).epsilon(1e-12));
    }
    SUBCASE("rejects nonpositive inputs") {
        CHECK_THROWS_AS(constitutive_components(0.0, 1.0, 1.0), InputError);
        CHECK_THROWS_AS(constitutive_components(1.0, -1.0, 0.0), InputError);
    }
}

TEST_CASE("homogeneous scenario gives constant fields") {
    auto s = basic_scenario();
    const auto m = build_material_model(s, 0.5e-3);
    for (double v : m.rho) CHECK(v == doctest::Approx(2582.8));
    for (double v : m.vp) CHECK(v == doctest::Approx(6315.8));
    for (double v : m.vs) CHECK(v == doctest::Approx(3129.3));
}

TEST_CASE("defect density factor must stay positive") {
    auto s = basic_scenario();
    s.defects.push_back(Circle{{20e-3, 15e-3}, 2e-3});
    CHECK_THROWS_AS(build_material_model(s, 0.25e-3, 0.0), InputError);
    CHECK_THROWS_AS(build_material_model(s, 0.25e-3, -0.5), InputError);
}

TEST_CASE("too-coarse spacing is rejected with the feature size") {
    auto s = basic_scenario();
    s.defects.push_back(Circle{{20e-3, 15e-3}, 1e-3});  // feature = 2 mm
    CHECK_THROWS_WITH_AS(build_material_model(s, 1e-3), doctest::Contains("0.002"),
                         InputError);
    CHECK_NOTHROW(build_material_model(s, 0.5e-3));
}

TEST_CASE("circle covering exactly one pixel center modifies one pixel") {
    // Hand-built 4x4 grid, 1 mm spacing; pixel centers at 0.5, 1.5, 2.5, 3.5 mm.
    // A circle at (1.5, 2.5) mm with radius 0.4 mm covers exactly one center.
    ScenarioSpec s = basic_scenario();
    s.domain_width = 4e-3;
    s.domain_height = 4e-3;
    s.array.n_elements = 1;
    s.array.first_element_x = 2e-3;
    s.defects.push_back(Circle{{1.5e-3, 2.5e-3}, 0.4e-3});
    const auto m = build_material_model(s, 0.1e-3, 0.01);

    RasterGrid coarse{4, 4, 0.0, 0.0, 1e-3};
    const auto mask = rasterize_ground_truth(s, coarse);
    CHECK(mask.positive_count() == 1);
    CHECK(mask.mask[coarse.index(1, 2)] == 1);
    (void)m;
}

TEST_CASE("material and mask defect footprints agree") {
    auto s = basic_scenario();
    s.defects.push_back(Circle{{20e-3, 15e-3}, 2.5e-3});
    s.defects.push_back(Circle{{12e-3, 8e-3}, 1.5e-3});
    const double spacing = 0.25e-3;
    const auto m = build_material_model(s, spacing, 0.01);
    const auto mask = rasterize_ground_truth(s, m.grid);
    for (int k = 0; k < m.grid.size(); ++k) {
        CHECK((m.rho[k] < s.background.rho) == (mask.mask[k] == 1));
    }
}

TEST_CASE("build_material_model is deterministic") {
    auto s = basic_scenario();
    s.defects.push_back(Circle{{20e-3, 15e-3}, 2e-3});
    const auto a = build_material_model(s, 0.25e-3, 0.01);
    const auto b = build_material_model(s, 0.25e-3, 0.01);
    CHECK(a.rho == b.rho);
    CHECK(a.vp == b.vp);
    CHECK(a.vs == b.vs);
}

TEST_CASE("empty scenario rasterizes to an all-zero mask") {
    const auto s = basic_scenario();
    RasterGrid g{32, 24, 0.0, 0.0, 1e-3};
    const auto mask = rasterize_ground_truth(s, g);
    CHECK(mask.positive_count() == 0);
}

TEST_CASE("centered circle mask is symmetric and matches the point test") {
    auto s = basic_scenario();
    const double spacing = 0.5e-3;
    // Center the circle on the grid so the mask is 4-fold symmetric: pixel
    // centers at k*spacing + spacing/2, so put the center on a pixel center.
    const Vec2 c{20.25e-3, 15.25e-3};
    const double radius = 1.5 * spacing;
    s.defects.push_back(Circle{c, radius});
    RasterGrid g{80, 60, 0.0, 0.0, spacing};
    const auto mask = rasterize_ground_truth(s, g);

    int brute = 0;
    for (int iy = 0; iy < g.ny; ++iy) {
        for (int ix = 0; ix < g.nx; ++ix) {
            if (distance(g.pixel_center(ix, iy), c) <= radius) ++brute;
        }
    }
    CHECK(mask.positive_count() == brute);
    CHECK(brute > 0);

    // Symmetry about the center pixel.
    for (int dy = -3; dy <= 3; ++dy) {
        for (int dx = -3; dx <= 3; ++dx) {
            const int x0 = 40, y0 = 30;
            CHECK(mask.mask[g.index(x0 + dx, y0 + dy)] ==
                  mask.mask[g.index(x0 - dx, y0 - dy)]);
        }
    }
}

TEST_CASE("polygon raster area approaches the shoelace area") {
    // Slanted rectangle (one arm of a notch) at 0.1 mm spacing: pixel-count
    // area within 2% of the exact area.
    auto s = basic_scenario();
    const auto parts = make_y_notch({20e-3, 12e-3}, 8e-3, 45.0, 6e-3, 1.2e-3);
    REQUIRE(parts.size() == 3);
    const Polygon arm = parts[0];
    s.defects.push_back(arm);
    const double spacing = 0.1e-3;
    RasterGrid g{400, 300, 0.0, 0.0, spacing};
    const auto mask = rasterize_ground_truth(s, g);
    const double raster_area = mask.positive_count() * spacing * spacing;
    const double exact = shoelace_area(arm);
    CHECK(raster_area == doctest::Approx(exact).epsilon(0.02));
}

TEST_CASE("y-notch construction") {
    const auto parts = make_y_notch({20e-3, 12e-3}, 8e-3, 30.0, 6e-3, 1e-3);
    REQUIRE(parts.size() == 3);
    for (const auto& p : parts) {
        CHECK(p.vertices.size() == 4);
        CHECK(is_simple_polygon(p));
        CHECK(shoelace_area(p) > 0);
    }
    // Arms reach upward from the junction, slit downward.
    CHECK(parts[0].vertices[1].y < 12e-3);
    CHECK(parts[2].vertices[2].y > 12e-3);
    CHECK_THROWS_AS(make_y_notch({0, 0}, -1.0, 30.0, 1e-3, 1e-3), InputError);
}

TEST_CASE("scenario validation catches violations") {
    auto s = basic_scenario();
    SUBCASE("vp/vs ratio") {
        s.background.vs = s.background.vp;  // vp < vs*sqrt(2)
        CHECK_THROWS_AS(s.validate(), InputError);
    }
    SUBCASE("defect outside the domain") {
        s.defects.push_back(Circle{{39.9e-3, 15e-3}, 1e-3});
        CHECK_THROWS_AS(s.validate(), InputError);
    }
    SUBCASE("aperture too wide") {
        s.array.n_elements = 64;
        CHECK_THROWS_AS(s.validate(), InputError);
    }
    SUBCASE("self-intersecting polygon") {
        s.defects.push_back(Polygon{{{10e-3, 10e-3},
                                     {14e-3, 14e-3},
                                     {14e-3, 10e-3},
                                     {10e-3, 14e-3}}});
        CHECK_THROWS_AS(s.validate(), InputError);
    }
}

TEST_CASE("scenario JSON round trip") {
    auto s = basic_scenario();
    s.defects.push_back(Circle{{20e-3, 15e-3}, 2e-3});
    const auto parts = make_y_notch({14e-3, 10e-3}, 4e-3, 45.0, 3e-3, 0.8e-3);
    for (const auto& p : parts) s.defects.push_back(p);
    const std::string path = "/tmp/uswb_test_scenario.json";
    save_scenario(s, path);
    const auto loaded = load_scenario(path);
    CHECK(loaded.name == s.name);
    CHECK(loaded.domain_width == doctest::Approx(s.domain_width));
    CHECK(loaded.array.n_elements == s.array.n_elements);
    REQUIRE(loaded.defects.size() == s.defects.size());
    // Spot-check geometry equivalence through the point test.
    for (double x = 1e-3; x < 39e-3; x += 1.7e-3) {
        for (double y = 1e-3; y < 29e-3; y += 1.3e-3) {
            CHECK(loaded.inside_defect({x, y}) == s.inside_defect({x, y}));
        }
    }
}

TEST_CASE("missing scenario file raises InputError with the path") {
    CHECK_THROWS_WITH_AS(load_scenario("/nonexistent/foo.json"),
                         doctest::Contains("/nonexistent/foo.json"), InputError);
}

}  // TEST_SUITE
