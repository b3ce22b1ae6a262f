#pragma once

#include <string>
#include <vector>

#include "chart.hpp"
#include "common.hpp"

namespace hpn::testsupport {

// One uniformly random (but valid) chart; exercises edge shapes and scales.
ChartTensor random_valid_chart(ChartType type, Rng& rng, const GridLimits& grid = {},
                               int max_h = 6, int max_w = 12);

// Structured corpus drawn from a few smooth parametric families per chart
// type. Values are nonnegative, shapes come from small per-type menus, and
// captions/sentences follow templates, so desk-scale models can actually fit.
std::vector<DocumentChartPair> synthetic_corpus(int n, uint64_t seed,
                                                const GridLimits& grid = {});

}  // namespace hpn::testsupport
