#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "uswb/metrics.hpp"

using namespace uswb;
using namespace uswb::metrics;

namespace {

ImageGrid make_image(int nx, int ny, const std::vector<double>& values) {
    ImageGrid img(RasterGrid{nx, ny, 0.0, 0.0, 1e-3});
    img.values = values;
    return img;
}

model::GroundTruthMask make_mask(int nx, int ny, const std::vector<std::uint8_t>& mask) {
    model::GroundTruthMask m;
    m.grid = RasterGrid{nx, ny, 0.0, 0.0, 1e-3};
    m.mask = mask;
    return m;
}

/// Exhaustive per-threshold confusion enumeration (the oracle).
struct OracleResult {
    std::vector<double> thresholds;
    std::vector<ConfusionCounts> counts;
};

OracleResult oracle_sweep(const ImageGrid& img, const model::GroundTruthMask& truth,
                          const ExclusionRegion& excl = {}) {
    OracleResult out;
    std::set<double, std::greater<double>> uniq(img.values.begin(), img.values.end());
    out.thresholds.push_back(std::numeric_limits<double>::infinity());
    for (double t : uniq) out.thresholds.push_back(t);
    for (double tau : out.thresholds) out.counts.push_back(confusion(img, truth, tau, excl));
    return out;
}

/// Pairwise rank statistic P(score+ > score-) + 0.5 P(=).
double mann_whitney(const ImageGrid& img, const model::GroundTruthMask& truth) {
    double wins = 0.0;
    long long pairs = 0;
    for (size_t a = 0; a < img.values.size(); ++a) {
        if (!truth.mask[a]) continue;
        for (size_t b = 0; b < img.values.size(); ++b) {
            if (truth.mask[b]) continue;
            ++pairs;
            if (img.values[a] > img.values[b]) {
                wins += 1.0;
            } else if (img.values[a] == img.values[b]) {
                wins += 0.5;
            }
        }
    }
    return wins / pairs;
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("confusion basics") {
    const auto img = make_image(2, 2, {0.9, 0.1, 0.8, 0.2});
    const auto truth = make_mask(2, 2, {1, 0, 0, 0});

    SUBCASE("hand case tau = 0.5") {
        const auto c = confusion(img, truth, 0.5);
        CHECK(c.tp == 1);
        CHECK(c.fp == 1);
        CHECK(c.fn == 0);
        CHECK(c.tn == 2);
        CHECK(c.total() == 4);
    }
    SUBCASE("tau above the maximum yields no positives") {
        const auto c = confusion(img, truth, 1.5);
        CHECK(c.tp == 0);
        CHECK(c.fp == 0);
    }
    SUBCASE("tau at or below the minimum yields no negatives") {
        const auto c = confusion(img, truth, 0.1);
        CHECK(c.fn == 0);
        CHECK(c.tn == 0);
    }
    SUBCASE("grid mismatch is rejected") {
        const auto other = make_mask(3, 2, std::vector<std::uint8_t>(6, 0));
        CHECK_THROWS_AS(confusion(img, other, 0.5), InputError);
    }
}

TEST_CASE("f1 formula") {
    CHECK(f1({1, 0, 0, 0}) == doctest::Approx(1.0));
    CHECK(f1({50, 25, 25, 0}) == doctest::Approx(2.0 / 3.0));
    CHECK(f1({0, 5, 0, 10}) == doctest::Approx(0.0));
    CHECK(f1({0, 0, 0, 10}) == doctest::Approx(0.0));  // degenerate, defined as 0
}

TEST_CASE("monotone threshold property") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::vector<double> vals(48);
    std::vector<std::uint8_t> mask(48);
    for (auto& v : vals) v = uni(rng);
    for (auto& m : mask) m = uni(rng) < 0.3;
    const auto img = make_image(8, 6, vals);
    const auto truth = make_mask(8, 6, mask);
    long long prev_tp = 1e9, prev_fp = 1e9;
    for (double tau = 0.0; tau <= 1.01; tau += 0.05) {
        const auto c = confusion(img, truth, tau);
        CHECK(c.tp <= prev_tp);
        CHECK(c.fp <= prev_fp);
        prev_tp = c.tp;
        prev_fp = c.fp;
    }
}

TEST_CASE("six-pixel hand case matches exhaustive enumeration") {
    const auto img = make_image(3, 2, {0.9, 0.4, 0.4, 0.7, 0.1, 0.2});
    const auto truth = make_mask(3, 2, {1, 0, 1, 0, 0, 1});

    const auto roc = roc_curve(img, truth);
    const auto prc = prc_curve(img, truth);
    const auto oracle = oracle_sweep(img, truth);

    REQUIRE(roc.size() == oracle.thresholds.size());
    REQUIRE(prc.size() == oracle.thresholds.size());
    for (size_t i = 0; i < oracle.thresholds.size(); ++i) {
        const auto& c = oracle.counts[i];
        CHECK(roc[i].threshold == oracle.thresholds[i]);
        CHECK(roc[i].x == doctest::Approx(double(c.fp) / (c.fp + c.tn)));
        CHECK(roc[i].y == doctest::Approx(double(c.tp) / (c.tp + c.fn)));
        CHECK(prc[i].x == doctest::Approx(recall(c)));
        CHECK(prc[i].y == doctest::Approx(precision(c)));
    }

    // tau selections against brute force.
    double best_roc_d = 1e9, best_roc_tau = 0, best_prc_d = 1e9, best_prc_tau = 0;
    double best_f1 = -1, best_f1_tau = 0;
    for (size_t i = 1; i < oracle.thresholds.size(); ++i) {  // finite taus
        const auto& c = oracle.counts[i];
        const double tpr = double(c.tp) / (c.tp + c.fn);
        const double fpr = double(c.fp) / (c.fp + c.tn);
        const double droc = std::hypot(1.0 - tpr, fpr);
        if (droc < best_roc_d) {
            best_roc_d = droc;
            best_roc_tau = oracle.thresholds[i];
        }
        const double dprc = std::hypot(1.0 - precision(c), 1.0 - recall(c));
        if (dprc < best_prc_d) {
            best_prc_d = dprc;
            best_prc_tau = oracle.thresholds[i];
        }
        if (f1(c) > best_f1) {
            best_f1 = f1(c);
            best_f1_tau = oracle.thresholds[i];
        }
    }
    CHECK(tau_roc(roc) == doctest::Approx(best_roc_tau));
    CHECK(tau_prc(prc) == doctest::Approx(best_prc_tau));
    CHECK(tau_f1(img, truth) == doctest::Approx(best_f1_tau));
}

TEST_CASE("perfect separation") {
    const auto img = make_image(3, 2, {0.9, 0.8, 0.85, 0.2, 0.1, 0.3});
    const auto truth = make_mask(3, 2, {1, 1, 1, 0, 0, 0});
    const auto roc = roc_curve(img, truth);
    CHECK(auroc(roc) == doctest::Approx(1.0));
    bool passes_corner = false;
    for (const auto& p : roc) {
        if (p.x == 0.0 && p.y == 1.0) passes_corner = true;
    }
    CHECK(passes_corner);
    CHECK(std::hypot(0.0, 1.0 - 1.0) == 0.0);
    // tau_roc reaches distance zero.
    const double tau = tau_roc(roc);
    const auto c = confusion(img, truth, tau);
    CHECK(c.fp == 0);
    CHECK(c.fn == 0);
    const auto prc = prc_curve(img, truth);
    CHECK(auprc(prc) == doctest::Approx(1.0));
}

TEST_CASE("image equal to mask gives a perfect PRC point") {
    const auto img = make_image(2, 2, {1.0, 0.0, 0.0, 1.0});
    const auto truth = make_mask(2, 2, {1, 0, 0, 1});
    const auto prc = prc_curve(img, truth);
    bool perfect = false;
    for (const auto& p : prc) {
        if (p.x == 1.0 && p.y == 1.0) perfect = true;
    }
    CHECK(perfect);
}

TEST_CASE("single-class truth is rejected with class counts") {
    const auto img = make_image(2, 2, {0.1, 0.2, 0.3, 0.4});
    const auto truth = make_mask(2, 2, {0, 0, 0, 0});
    CHECK_THROWS_WITH_AS(roc_curve(img, truth), doctest::Contains("0 positive"), InputError);
}

TEST_CASE("AUROC equals the pairwise rank oracle on random fixtures") {
    std::mt19937_64 rng(1234);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::uniform_int_distribution<int> size_dist(3, 14);
    for (int fixture = 0; fixture < 50; ++fixture) {
        const int nx = size_dist(rng), ny = size_dist(rng);
        const int n = nx * ny;  // <= 196
        std::vector<double> vals(n);
        std::vector<std::uint8_t> mask(n, 0);
        // Quantize some values to force ties.
        for (auto& v : vals) v = std::round(uni(rng) * 12.0) / 12.0;
        int pos = 0;
        for (auto& m : mask) {
            m = uni(rng) < 0.35;
            pos += m;
        }
        if (pos == 0) mask[0] = 1;
        if (pos == n) mask[0] = 0;
        const auto img = make_image(nx, ny, vals);
        const auto truth = make_mask(nx, ny, mask);
        const double a = auroc(roc_curve(img, truth));
        const double mw = mann_whitney(img, truth);
        CHECK(std::abs(a - mw) < 1e-12);
    }
}

TEST_CASE("random scores give AUROC near one half") {
    std::mt19937_64 rng(42);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const int nx = 100, ny = 100;
    std::vector<double> vals(nx * ny);
    std::vector<std::uint8_t> mask(nx * ny);
    for (auto& v : vals) v = uni(rng);
    for (size_t k = 0; k < mask.size(); ++k) mask[k] = k % 2 == 0;  // balanced
    const double a = auroc(roc_curve(make_image(nx, ny, vals), make_mask(nx, ny, mask)));
    CHECK(a == doctest::Approx(0.5).epsilon(0.04));
    CHECK(std::abs(a - 0.5) < 0.02);
}

TEST_CASE("AUROC is invariant under strictly increasing transforms") {
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const int n = 64;
    std::vector<double> vals(n);
    std::vector<std::uint8_t> mask(n);
    for (auto& v : vals) v = uni(rng);
    for (auto& m : mask) m = uni(rng) < 0.4;
    mask[0] = 1;
    mask[1] = 0;
    const auto img = make_image(8, 8, vals);
    const auto truth = make_mask(8, 8, mask);
    const double a0 = auroc(roc_curve(img, truth));

    auto transformed = vals;
    for (auto& v : transformed) v = std::exp(3.0 * v) - 0.5;
    const double a1 = auroc(roc_curve(make_image(8, 8, transformed), truth));
    CHECK(a0 == doctest::Approx(a1).epsilon(1e-12));
}

TEST_CASE("ROC is monotone nondecreasing as tau decreases") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::vector<double> vals(60);
    std::vector<std::uint8_t> mask(60);
    for (auto& v : vals) v = uni(rng);
    for (auto& m : mask) m = uni(rng) < 0.5;
    mask[0] = 1;
    mask[1] = 0;
    const auto roc = roc_curve(make_image(10, 6, vals), make_mask(10, 6, mask));
    for (size_t i = 1; i < roc.size(); ++i) {
        CHECK(roc[i].x >= roc[i - 1].x);
        CHECK(roc[i].y >= roc[i - 1].y);
    }
}

TEST_CASE("f1_max dominates the f1 at the curve-selected thresholds") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> vals(80);
        std::vector<std::uint8_t> mask(80);
        for (auto& v : vals) v = uni(rng);
        for (auto& m : mask) m = uni(rng) < 0.3;
        mask[0] = 1;
        mask[1] = 0;
        const auto img = make_image(10, 8, vals);
        const auto truth = make_mask(10, 8, mask);
        const auto report = evaluate(img, truth);
        const auto norm = normalize_image(img);
        CHECK(report.f1_max >=
              f1(confusion(norm, truth, report.tau_roc_value)) - 1e-12);
        CHECK(report.f1_max >=
              f1(confusion(norm, truth, report.tau_prc_value)) - 1e-12);
    }
}

TEST_CASE("constant image tie-break returns the highest candidate") {
    const auto img = make_image(2, 2, {0.4, 0.4, 0.4, 0.4});
    const auto truth = make_mask(2, 2, {1, 0, 1, 0});
    CHECK(tau_f1(img, truth) == doctest::Approx(0.4));
    const auto roc = roc_curve(img, truth);
    CHECK(tau_roc(roc) == doctest::Approx(0.4));
}

TEST_CASE("exclusion region removes exactly its pixel count") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const int nx = 12, ny = 20;
    std::vector<double> vals(nx * ny);
    std::vector<std::uint8_t> mask(nx * ny);
    for (auto& v : vals) v = uni(rng);
    for (auto& m : mask) m = uni(rng) < 0.4;
    mask[0] = 1;
    mask[1] = 0;
    const auto img = make_image(nx, ny, vals);
    const auto truth = make_mask(nx, ny, mask);

    ExclusionRegion excl{0.25};  // 5 rows of 12 pixels
    CHECK(excl.excluded_rows(ny) == 5);
    const auto c_all = confusion(img, truth, 0.5);
    const auto c_ex = confusion(img, truth, 0.5, excl);
    CHECK(c_all.total() - c_ex.total() == 5 * nx);

    const auto report = evaluate(img, truth, excl);
    CHECK(report.evaluated_pixels == (ny - 5) * nx);
}

TEST_CASE("evaluate on the exact mask image is perfect") {
    const auto truth = make_mask(4, 3, {1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 1, 0});
    std::vector<double> vals(truth.mask.begin(), truth.mask.end());
    const auto img = make_image(4, 3, vals);
    const auto report = evaluate(img, truth);
    CHECK(report.auroc_value == doctest::Approx(1.0));
    CHECK(report.auprc_value == doctest::Approx(1.0));
    CHECK(report.f1_max == doctest::Approx(1.0));
}

TEST_CASE("inverted image scores zero AUROC") {
    const auto truth = make_mask(4, 3, {1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 1, 0});
    std::vector<double> vals(truth.mask.size());
    for (size_t k = 0; k < vals.size(); ++k) vals[k] = 1.0 - truth.mask[k];
    const auto report = evaluate(make_image(4, 3, vals), truth);
    CHECK(report.auroc_value == doctest::Approx(0.0));
}

}  // TEST_SUITE
