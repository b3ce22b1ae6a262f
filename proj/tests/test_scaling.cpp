#include <cmath>

#include "doctest.h"
#include "scaling.hpp"

using namespace hpn;
using namespace hpn::scaling;

namespace {
const GridLimits kGrid;

ChartTensor make_row_chart(ChartType type, const std::vector<std::vector<double>>& cells) {
    // cells[j] holds the D features of column j for a single-row chart
    ChartTensor x(kGrid, type, 1, static_cast<int>(cells.size()));
    for (size_t j = 0; j < cells.size(); ++j)
        for (size_t k = 0; k < cells[j].size(); ++k)
            x.at(0, static_cast<int>(j), static_cast<int>(k)) = cells[j][k];
    return x;
}

ChartTensor random_chart(ChartType type, Rng& rng) {
    int h = rng.range_int(1, 6);
    int w = rng.range_int(2, 12);
    ChartTensor x(kGrid, type, h, w);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            if (type.kind == ChartKind::Box) {
                double vals[5];
                for (double& v : vals) v = rng.uniform(-0.9, 5000.0);
                std::sort(vals, vals + 5);
                for (int k = 0; k < 5; ++k) x.at(i, j, k) = vals[k];
            } else {
                for (int k = 0; k < type.feature_count(); ++k)
                    x.at(i, j, k) = rng.uniform(-0.9, 5000.0);
            }
        }
    return x;
}
}  // namespace

TEST_CASE("eq-1 spot values for row [0,9,99]") {
    ChartType vbar(ChartKind::VerticalBar);
    ChartTensor x = make_row_chart(vbar, {{0.0}, {9.0}, {99.0}});
    ScaleParams sp = compute_scale_params(x, vbar, 1e-4);
    // extended-precision oracle: log10(1.1001), log10(100.1001) - log10(1.1001)
    CHECK(sp.t.at(0, 0) == doctest::Approx(0.041432164680265159).epsilon(1e-12));
    CHECK(sp.t.at(0, 1) == doctest::Approx(1.959002346659458).epsilon(1e-12));
}

TEST_CASE("constant row has zero range") {
    ChartType vbar(ChartKind::VerticalBar);
    ChartTensor x = make_row_chart(vbar, {{5.0}, {5.0}, {5.0}});
    auto [norm, sp] = normalize(x, vbar);
    CHECK(sp.t.at(0, 1) == 0.0);
    for (int j = 0; j < 3; ++j) CHECK(norm.values[j] == 0.0);
    // t_min still encodes the constant value
    ChartTensor back = denormalize(norm, sp, vbar);
    for (int j = 0; j < 3; ++j) CHECK(back.at(0, j, 0) == doctest::Approx(5.0).epsilon(1e-12));
}

TEST_CASE("affine map endpoints") {
    ChartType vbar(ChartKind::VerticalBar);
    ChartTensor x = make_row_chart(vbar, {{2.0}, {4.0}, {6.0}});
    auto [norm, sp] = normalize(x, vbar);
    CHECK(norm.values[0] == doctest::Approx(0.0));
    CHECK(norm.values[1] == doctest::Approx(0.5));
    CHECK(norm.values[2] == doctest::Approx(1.0));

    ChartTensor back = denormalize(norm, sp, vbar);
    CHECK(back.at(0, 0, 0) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(back.at(0, 1, 0) == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(back.at(0, 2, 0) == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("box row transform: normalized minimum plus offsets") {
    ChartType box(ChartKind::Box);
    ChartTensor x = make_row_chart(box, {{1.0, 2.0, 3.0, 4.0, 5.0}});
    auto [norm, sp] = normalize(x, box);
    CHECK(sp.t.dim(1) == 2);  // two parameters per box row
    CHECK(norm.values[0] == doctest::Approx(0.0));
    CHECK(norm.values[1] == doctest::Approx(0.25));
    CHECK(norm.values[2] == doctest::Approx(0.5));
    CHECK(norm.values[3] == doctest::Approx(0.75));
    CHECK(norm.values[4] == doctest::Approx(1.0));
}

TEST_CASE("hand inversion of [0, 0.5, 1] with min 2 max 6") {
    ChartType vbar(ChartKind::VerticalBar);
    NormalizedTensor norm;
    norm.values = nn::Tensor({kGrid.h_max, kGrid.w_max, 1});
    norm.h = 1;
    norm.w = 3;
    norm.values[0] = 0.0;
    norm.values[1] = 0.5;
    norm.values[2] = 1.0;
    ScaleParams sp;
    sp.gamma = 1e-4;
    sp.t = nn::Tensor({1, 2});
    sp.t.at(0, 0) = std::log10(2.0 + 1.1001);
    sp.t.at(0, 1) = std::log10(6.0 + 1.1001) - sp.t.at(0, 0);
    ChartTensor back = denormalize(norm, sp, vbar);
    CHECK(back.at(0, 0, 0) == doctest::Approx(2.0).epsilon(1e-10));
    CHECK(back.at(0, 1, 0) == doctest::Approx(4.0).epsilon(1e-10));
    CHECK(back.at(0, 2, 0) == doctest::Approx(6.0).epsilon(1e-10));
}

TEST_CASE("scale domain violation raises") {
    ChartType line(ChartKind::Line);
    ChartTensor x = make_row_chart(line, {{-2.0, 1.0}, {0.0, 2.0}});
    CHECK_THROWS_AS((void)compute_scale_params(x, line), ValidationError);
}

TEST_CASE("round trip across all chart types") {
    Rng rng(20240601);
    int checked = 0;
    for (int iter = 0; iter < 200; ++iter) {
        ChartType type(kChartKinds[iter % kChartKinds.size()]);
        ChartTensor x = random_chart(type, rng);
        auto [norm, sp] = normalize(x, type);
        // normalized true region stays in [0,1]
        for (int i = 0; i < x.h; ++i)
            for (int j = 0; j < x.w; ++j)
                for (int k = 0; k < type.feature_count(); ++k) {
                    double v = norm.values[(static_cast<int64_t>(i) * x.w_max() + j) *
                                               type.feature_count() +
                                           k];
                    CHECK(v >= -1e-12);
                    CHECK(v <= 1.0 + 1e-12);
                }
        ChartTensor back = denormalize(norm, sp, type);
        for (int i = 0; i < x.h; ++i)
            for (int j = 0; j < x.w; ++j)
                for (int k = 0; k < type.feature_count(); ++k) {
                    CHECK(std::abs(back.at(i, j, k) - x.at(i, j, k)) < 1e-9);
                    ++checked;
                }
        if (type.kind == ChartKind::Box)
            for (int i = 0; i < back.h; ++i)
                for (int j = 0; j < back.w; ++j)
                    for (int k = 1; k < 5; ++k)
                        CHECK(back.at(i, j, k) >= back.at(i, j, k - 1));
    }
    CHECK(checked > 1000);
}

TEST_CASE("shift changes t but not normalized data") {
    ChartType line(ChartKind::Line);
    Rng rng(7);
    ChartTensor x = random_chart(line, rng);
    auto [norm_a, sp_a] = normalize(x, line);

    ChartTensor shifted = x;
    for (int i = 0; i < x.h; ++i)
        for (int j = 0; j < x.w; ++j)
            for (int k = 0; k < 2; ++k) shifted.at(i, j, k) = x.at(i, j, k) + 37.5;
    auto [norm_b, sp_b] = normalize(shifted, line);

    for (int64_t i = 0; i < norm_a.values.numel(); ++i)
        CHECK(norm_b.values[i] == doctest::Approx(norm_a.values[i]).epsilon(1e-9));
    // log scaling is not shift invariant
    bool t_changed = false;
    for (int64_t i = 0; i < sp_a.t.numel(); ++i)
        if (std::abs(sp_a.t[i] - sp_b.t[i]) > 1e-9) t_changed = true;
    CHECK(t_changed);
}

TEST_CASE("degenerate model output: offsets clamped and sorted") {
    ChartType box(ChartKind::Box);
    NormalizedTensor norm;
    norm.values = nn::Tensor({kGrid.h_max, kGrid.w_max, 5});
    norm.h = 1;
    norm.w = 1;
    // noisy decoder output: unsorted offsets, one above 1
    norm.values[0] = 0.1;
    norm.values[1] = 0.9;
    norm.values[2] = 0.2;
    norm.values[3] = 1.4;
    norm.values[4] = 0.05;
    ScaleParams sp;
    sp.t = nn::Tensor({1, 2});
    sp.t.at(0, 0) = std::log10(0.0 + 1.1001);
    sp.t.at(0, 1) = std::log10(10.0 + 1.1001) - sp.t.at(0, 0);
    ChartTensor back = denormalize(norm, sp, box);
    for (int k = 1; k < 5; ++k) CHECK(back.at(0, 0, k) >= back.at(0, 0, k - 1));
    CHECK(back.at(0, 0, 4) <= 10.0 + 10.0 + 1e-9);  // offset clamp bounds the maximum
}
