#include "uswb/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

namespace uswb::metrics {

namespace {

void check_grids(const ImageGrid& image, const model::GroundTruthMask& truth) {
    if (!image.grid.same_shape(truth.grid)) {
        throw InputError("metrics: image and ground-truth grids differ");
    }
}

/// (value, is_defect) pairs for all evaluated pixels.
std::vector<std::pair<double, bool>> evaluated_pixels(const ImageGrid& image,
                                                      const model::GroundTruthMask& truth,
                                                      const ExclusionRegion& exclusion) {
    check_grids(image, truth);
    const int ny_eval = image.grid.ny - exclusion.excluded_rows(image.grid.ny);
    std::vector<std::pair<double, bool>> px;
    px.reserve(size_t(image.grid.nx) * ny_eval);
    for (int iy = 0; iy < ny_eval; ++iy) {
        for (int ix = 0; ix < image.grid.nx; ++ix) {
            const int k = image.grid.index(ix, iy);
            px.emplace_back(image.values[k], truth.mask[k] != 0);
        }
    }
    return px;
}

struct SweepPoint {
    double threshold;
    long long tp, fp;
};

/// Cumulative (tp, fp) for thresholds = +inf then each unique value descending.
std::vector<SweepPoint> threshold_sweep(std::vector<std::pair<double, bool>> px,
                                        long long& n_pos, long long& n_neg) {
    std::sort(px.begin(), px.end(),
              [](const auto& a, const auto& b) { return a.first > b.first; });
    n_pos = 0;
    n_neg = 0;
    for (const auto& [v, d] : px) {
        (void)v;
        d ? ++n_pos : ++n_neg;
    }
    std::vector<SweepPoint> pts;
    pts.push_back({std::numeric_limits<double>::infinity(), 0, 0});
    long long tp = 0, fp = 0;
    size_t i = 0;
    while (i < px.size()) {
        const double v = px[i].first;
        while (i < px.size() && px[i].first == v) {
            px[i].second ? ++tp : ++fp;
            ++i;
        }
        pts.push_back({v, tp, fp});
    }
    return pts;
}

}  // namespace

ConfusionCounts confusion(const ImageGrid& image, const model::GroundTruthMask& truth,
                          double tau, const ExclusionRegion& exclusion) {
    const auto px = evaluated_pixels(image, truth, exclusion);
    ConfusionCounts c;
    for (const auto& [value, defect] : px) {
        const bool positive = value >= tau;
        if (positive && defect) {
            ++c.tp;
        } else if (positive) {
            ++c.fp;
        } else if (defect) {
            ++c.fn;
        } else {
            ++c.tn;
        }
    }
    return c;
}

double f1(const ConfusionCounts& c) {
    const double denom = c.tp + 0.5 * (c.fp + c.fn);
    return denom > 0 ? c.tp / denom : 0.0;
}

double precision(const ConfusionCounts& c) {
    return (c.tp + c.fp) > 0 ? double(c.tp) / (c.tp + c.fp) : 1.0;
}

double recall(const ConfusionCounts& c) {
    return (c.tp + c.fn) > 0 ? double(c.tp) / (c.tp + c.fn) : 0.0;
}

namespace {

std::vector<CurvePoint> curve_impl(const ImageGrid& image, const model::GroundTruthMask& truth,
                                   const ExclusionRegion& exclusion, bool roc) {
    long long n_pos = 0, n_neg = 0;
    const auto sweep = threshold_sweep(evaluated_pixels(image, truth, exclusion), n_pos, n_neg);
    if (n_pos == 0 || n_neg == 0) {
        throw InputError("metrics: ground truth has a single class in the evaluated region (" +
                         std::to_string(n_pos) + " positive, " + std::to_string(n_neg) +
                         " negative)");
    }
    std::vector<CurvePoint> curve;
    curve.reserve(sweep.size());
    for (const auto& s : sweep) {
        CurvePoint p;
        p.threshold = s.threshold;
        if (roc) {
            p.x = double(s.fp) / n_neg;                       // FPR
            p.y = double(s.tp) / n_pos;                       // TPR
        } else {
            p.x = double(s.tp) / n_pos;                       // recall
            p.y = (s.tp + s.fp) > 0 ? double(s.tp) / (s.tp + s.fp) : 1.0;  // precision
        }
        curve.push_back(p);
    }
    return curve;
}

}  // namespace

std::vector<CurvePoint> roc_curve(const ImageGrid& image, const model::GroundTruthMask& truth,
                                  const ExclusionRegion& exclusion) {
    return curve_impl(image, truth, exclusion, true);
}

std::vector<CurvePoint> prc_curve(const ImageGrid& image, const model::GroundTruthMask& truth,
                                  const ExclusionRegion& exclusion) {
    return curve_impl(image, truth, exclusion, false);
}

namespace {

double trapezoid_over_x(const std::vector<CurvePoint>& curve, double x_first, double x_last,
                        double y_anchor_first) {
    if (curve.size() < 2) throw InputError("metrics: curve needs at least 2 points");
    double area = 0.0;
    double px = x_first, py = curve.front().x == x_first ? curve.front().y : y_anchor_first;
    for (const auto& p : curve) {
        area += 0.5 * (p.y + py) * (p.x - px);
        px = p.x;
        py = p.y;
    }
    area += 0.5 * (py + py) * (x_last - px);
    return area;
}

}  // namespace

double auroc(const std::vector<CurvePoint>& curve) {
    // Curve starts at (0,0) for tau = +inf and ends at (1,1); anchors are a
    // no-op unless a degenerate curve was supplied.
    return trapezoid_over_x(curve, 0.0, 1.0, 0.0);
}

double auprc(const std::vector<CurvePoint>& curve) {
    // Recall runs 0 -> 1; the recall-0 anchor copies the first point's
    // precision (convention; the oracle tests use the same rule).
    return trapezoid_over_x(curve, 0.0, 1.0, curve.empty() ? 1.0 : curve.front().y);
}

namespace {

double best_threshold(const std::vector<CurvePoint>& curve, double target_x, double target_y) {
    // Curves run from the +inf sentinel through descending thresholds, so
    // keeping the first strict improvement resolves ties to the larger
    // threshold (fewer positives).
    double best_d = std::numeric_limits<double>::max();
    double best_tau = 0.0;
    for (const auto& p : curve) {
        if (!std::isfinite(p.threshold)) continue;
        const double d = std::hypot(p.x - target_x, p.y - target_y);
        if (d < best_d) {
            best_d = d;
            best_tau = p.threshold;
        }
    }
    return best_tau;
}

}  // namespace

double tau_roc(const std::vector<CurvePoint>& curve) { return best_threshold(curve, 0.0, 1.0); }

double tau_prc(const std::vector<CurvePoint>& curve) { return best_threshold(curve, 1.0, 1.0); }

double tau_f1(const ImageGrid& image, const model::GroundTruthMask& truth,
              const ExclusionRegion& exclusion) {
    long long n_pos = 0, n_neg = 0;
    const auto sweep = threshold_sweep(evaluated_pixels(image, truth, exclusion), n_pos, n_neg);
    // Descending sweep order: first strict improvement == larger-threshold
    // tie rule.
    double best_f1 = -1.0, best_tau = 0.0;
    for (const auto& s : sweep) {
        if (!std::isfinite(s.threshold)) continue;
        ConfusionCounts c;
        c.tp = s.tp;
        c.fp = s.fp;
        c.fn = n_pos - s.tp;
        c.tn = n_neg - s.fp;
        const double f = f1(c);
        if (f > best_f1) {
            best_f1 = f;
            best_tau = s.threshold;
        }
    }
    return best_tau;
}

ImageGrid normalize_image(const ImageGrid& image) {
    ImageGrid out = image;
    const auto [lo_it, hi_it] = std::minmax_element(out.values.begin(), out.values.end());
    const double lo = *lo_it, hi = *hi_it;
    if (hi > lo) {
        for (double& v : out.values) v = (v - lo) / (hi - lo);
    } else {
        std::fill(out.values.begin(), out.values.end(), 0.0);
    }
    return out;
}

EvalReport evaluate(const ImageGrid& image, const model::GroundTruthMask& truth,
                    const ExclusionRegion& exclusion) {
    const ImageGrid norm = normalize_image(image);
    EvalReport r;
    r.exclusion = exclusion;
    r.roc = roc_curve(norm, truth, exclusion);
    r.prc = prc_curve(norm, truth, exclusion);
    r.auroc_value = auroc(r.roc);
    r.auprc_value = auprc(r.prc);
    r.tau_roc_value = tau_roc(r.roc);
    r.tau_prc_value = tau_prc(r.prc);
    r.tau_f1_value = tau_f1(norm, truth, exclusion);
    r.f1_max = f1(confusion(norm, truth, r.tau_f1_value, exclusion));
    const int ny_eval = image.grid.ny - exclusion.excluded_rows(image.grid.ny);
    r.evaluated_pixels = static_cast<long long>(image.grid.nx) * ny_eval;
    long long pos = 0;
    for (int iy = 0; iy < ny_eval; ++iy) {
        for (int ix = 0; ix < image.grid.nx; ++ix) {
            pos += truth.mask[truth.grid.index(ix, iy)];
        }
    }
    r.positive_pixels = pos;
    return r;
}

void save_report_csv(const EvalReport& report, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw InputError("cannot write report: " + path);
    os.precision(12);
    os << "metric,value\n";
    os << "auroc," << report.auroc_value << "\n";
    os << "auprc," << report.auprc_value << "\n";
    os << "f1_max," << report.f1_max << "\n";
    os << "tau_roc," << report.tau_roc_value << "\n";
    os << "tau_prc," << report.tau_prc_value << "\n";
    os << "tau_f1," << report.tau_f1_value << "\n";
    os << "evaluated_pixels," << report.evaluated_pixels << "\n";
    os << "positive_pixels," << report.positive_pixels << "\n";
    os << "excluded_bottom_fraction," << report.exclusion.bottom_fraction << "\n";
}

void save_curve_csv(const std::vector<CurvePoint>& curve, const std::string& path,
                    const std::string& x_name, const std::string& y_name) {
    std::ofstream os(path);
    if (!os) throw InputError("cannot write curve: " + path);
    os.precision(12);
    os << "threshold," << x_name << ',' << y_name << "\n";
    for (const auto& p : curve) {
        os << p.threshold << ',' << p.x << ',' << p.y << "\n";
    }
}

}  // namespace uswb::metrics
