#include "scaling.hpp"

#include <algorithm>
#include <cmath>

namespace hpn::scaling {

namespace {
struct Group {
    double lo, hi;
};

// min/max over one (row, feature) group; box groups span the whole row
Group group_bounds(const ChartTensor& x, int row, int feat_lo, int feat_hi) {
    double lo = x.at(row, 0, feat_lo), hi = lo;
    for (int j = 0; j < x.w; ++j)
        for (int k = feat_lo; k <= feat_hi; ++k) {
            double v = x.at(row, j, k);
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    return {lo, hi};
}

void check_domain(double lo, double gamma) {
    if (!(lo > -(1.1 + gamma))) throw ValidationError("scale domain violation");
}
}  // namespace

ScaleParams compute_scale_params(const ChartTensor& x, ChartType type, double gamma) {
    const bool box = type.kind == ChartKind::Box;
    const int d = type.feature_count();
    ScaleParams out;
    out.gamma = gamma;
    out.t = nn::Tensor({x.h, scale_width(type)});
    const double shift = 1.1 + gamma;
    for (int i = 0; i < x.h; ++i) {
        const int groups = box ? 1 : d;
        for (int k = 0; k < groups; ++k) {
            Group g = box ? group_bounds(x, i, 0, d - 1) : group_bounds(x, i, k, k);
            check_domain(g.lo, gamma);
            double t_min = std::log10(g.lo + shift);
            double t_max = std::log10(g.hi + shift);
            out.t.at(i, 2 * k) = t_min;
            out.t.at(i, 2 * k + 1) = t_max - t_min;
        }
    }
    return out;
}

std::pair<NormalizedTensor, ScaleParams> normalize(const ChartTensor& x, ChartType type,
                                                   double gamma) {
    const bool box = type.kind == ChartKind::Box;
    const int d = type.feature_count();
    ScaleParams sp = compute_scale_params(x, type, gamma);
    NormalizedTensor out;
    out.values = nn::Tensor(x.values.shape());
    out.h = x.h;
    out.w = x.w;
    for (int i = 0; i < x.h; ++i) {
        if (box) {
            Group g = group_bounds(x, i, 0, d - 1);
            double range = g.hi - g.lo;
            for (int j = 0; j < x.w; ++j) {
                double nmin = range < kDegenerateRange ? 0.0 : (x.at(i, j, 0) - g.lo) / range;
                out.values[(static_cast<int64_t>(i) * x.w_max() + j) * d + 0] = nmin;
                for (int k = 1; k < d; ++k) {
                    double nv =
                        range < kDegenerateRange ? 0.0 : (x.at(i, j, k) - g.lo) / range;
                    out.values[(static_cast<int64_t>(i) * x.w_max() + j) * d + k] = nv - nmin;
                }
            }
        } else {
            for (int k = 0; k < d; ++k) {
                Group g = group_bounds(x, i, k, k);
                double range = g.hi - g.lo;
                for (int j = 0; j < x.w; ++j) {
                    double nv =
                        range < kDegenerateRange ? 0.0 : (x.at(i, j, k) - g.lo) / range;
                    out.values[(static_cast<int64_t>(i) * x.w_max() + j) * d + k] = nv;
                }
            }
        }
    }
    return {std::move(out), std::move(sp)};
}

ChartTensor denormalize(const NormalizedTensor& x_prime, const ScaleParams& sp,
                        ChartType type) {
    const bool box = type.kind == ChartKind::Box;
    const int d = type.feature_count();
    const auto& shape = x_prime.values.shape();
    if (shape.size() != 3 || shape[2] != d)
        throw ShapeError("denormalize: tensor shape does not match chart type");
    if (sp.t.rank() != 2 || sp.t.dim(0) < x_prime.h || sp.t.dim(1) != scale_width(type))
        throw ShapeError("denormalize: scale params shape mismatch");

    ChartTensor out;
    out.values = nn::Tensor(shape);
    out.h = x_prime.h;
    out.w = x_prime.w;
    const int w_max = shape[1];
    const double shift = 1.1 + sp.gamma;
    for (int i = 0; i < out.h; ++i) {
        const int groups = box ? 1 : d;
        for (int k = 0; k < groups; ++k) {
            double t_min = sp.t.at(i, 2 * k);
            double t_range = sp.t.at(i, 2 * k + 1);
            double lo = std::pow(10.0, t_min) - shift;
            double hi = std::pow(10.0, t_min + t_range) - shift;
            double range = hi - lo;
            for (int j = 0; j < out.w; ++j) {
                int64_t base = (static_cast<int64_t>(i) * w_max + j) * d;
                if (box) {
                    double nmin = x_prime.values[base + 0];
                    double offsets[4];
                    for (int f = 1; f < d; ++f)
                        offsets[f - 1] = std::clamp(x_prime.values[base + f], 0.0, 1.0);
                    std::sort(offsets, offsets + d - 1);
                    out.values[base + 0] = nmin * range + lo;
                    for (int f = 1; f < d; ++f)
                        out.values[base + f] = (nmin + offsets[f - 1]) * range + lo;
                } else {
                    out.values[base + k] = x_prime.values[base + k] * range + lo;
                }
            }
        }
    }
    return out;
}

}  // namespace hpn::scaling
