#pragma once

#include <string>
#include <vector>

#include "uswb/core.hpp"
#include "uswb/model.hpp"

namespace uswb::metrics {

struct ConfusionCounts {
    long long tp = 0, fp = 0, fn = 0, tn = 0;

    long long total() const { return tp + fp + fn + tn; }
};

/// Rows excluded from evaluation at the bottom of the image (back-wall band):
/// the last round(ny * bottom_fraction) rows.
struct ExclusionRegion {
    double bottom_fraction = 0.0;

    int excluded_rows(int ny) const {
        return std::min(ny, static_cast<int>(std::lround(bottom_fraction * ny)));
    }
};

/// Pixel positive iff value >= tau; excluded pixels are skipped entirely.
ConfusionCounts confusion(const ImageGrid& image, const model::GroundTruthMask& truth,
                          double tau, const ExclusionRegion& exclusion = {});

/// F1 = tp / (tp + 0.5 (fp + fn)); 0 when tp = fp = fn = 0.
double f1(const ConfusionCounts& c);
double precision(const ConfusionCounts& c);
double recall(const ConfusionCounts& c);

struct CurvePoint {
    double threshold = 0.0;
    double x = 0.0;  // FPR (ROC) or recall (PRC)
    double y = 0.0;  // TPR (ROC) or precision (PRC)
};

/// Thresholds are the sorted unique image values (descending) plus a +inf
/// sentinel; points by cumulative counting. Throws on single-class truth.
std::vector<CurvePoint> roc_curve(const ImageGrid& image, const model::GroundTruthMask& truth,
                                  const ExclusionRegion& exclusion = {});
std::vector<CurvePoint> prc_curve(const ImageGrid& image, const model::GroundTruthMask& truth,
                                  const ExclusionRegion& exclusion = {});

/// Trapezoidal areas; ROC anchored at FPR 0 and 1, PRC at recall 0 and 1.
double auroc(const std::vector<CurvePoint>& curve);
double auprc(const std::vector<CurvePoint>& curve);

/// Optimal thresholds: closest curve point to perfect classification
/// ((FPR,TPR) = (0,1) resp. (precision,recall) = (1,1)), and the F1-maximizing
/// threshold. Ties resolve to the larger threshold.
double tau_roc(const std::vector<CurvePoint>& curve);
double tau_prc(const std::vector<CurvePoint>& curve);
double tau_f1(const ImageGrid& image, const model::GroundTruthMask& truth,
              const ExclusionRegion& exclusion = {});

struct EvalReport {
    double auroc_value = 0.0;
    double auprc_value = 0.0;
    double f1_max = 0.0;
    double tau_roc_value = 0.0;
    double tau_prc_value = 0.0;
    double tau_f1_value = 0.0;
    std::vector<CurvePoint> roc;
    std::vector<CurvePoint> prc;
    ExclusionRegion exclusion;
    long long evaluated_pixels = 0;
    long long positive_pixels = 0;
};

/// Image values are min-max normalized to [0, 1] before thresholding so that
/// thresholds are comparable across methods; rank metrics are unaffected.
EvalReport evaluate(const ImageGrid& image, const model::GroundTruthMask& truth,
                    const ExclusionRegion& exclusion = {});

ImageGrid normalize_image(const ImageGrid& image);

void save_report_csv(const EvalReport& report, const std::string& path);
void save_curve_csv(const std::vector<CurvePoint>& curve, const std::string& path,
                    const std::string& x_name, const std::string& y_name);

}  // namespace uswb::metrics
