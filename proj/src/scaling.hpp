#pragma once

#include <utility>

#include "chart.hpp"

namespace hpn::scaling {

// Log-domain scale parameters, two per (row, feature) group:
//   t_min   = log10(x_min + 1.1 + gamma)
//   t_range = log10(x_max + 1.1 + gamma) - t_min
// Box charts carry a single (t_min, t_range) pair per row, computed over the
// whole row, so the matrix is [h, 2] instead of [h, 2D].
struct ScaleParams {
    nn::Tensor t;  // [h, 2*D] (box: [h, 2])
    double gamma = 1e-4;
};

// Same padded layout as ChartTensor; true-region entries lie in [0,1]. Box
// rows hold the normalized minimum in feature 0 and nonnegative offsets from
// it in features 1..4.
struct NormalizedTensor {
    nn::Tensor values;
    int h = 0;
    int w = 0;
};

constexpr double kDefaultGamma = 1e-4;
// groups narrower than this are treated as constant (normalized to 0)
constexpr double kDegenerateRange = 1e-12;

ScaleParams compute_scale_params(const ChartTensor& x, ChartType type,
                                 double gamma = kDefaultGamma);

std::pair<NormalizedTensor, ScaleParams> normalize(const ChartTensor& x, ChartType type,
                                                   double gamma = kDefaultGamma);

// Exact inverse of normalize up to floating-point rounding. Box offsets are
// clamped to [0,1] and re-sorted so reconstructed rows stay valid box plots
// even for noisy model output.
ChartTensor denormalize(const NormalizedTensor& x_prime, const ScaleParams& t,
                        ChartType type);

// number of scale features per row for a chart type (2D, or 2 for box)
inline int scale_width(ChartType type) {
    return type.kind == ChartKind::Box ? 2 : 2 * type.feature_count();
}

}  // namespace hpn::scaling
