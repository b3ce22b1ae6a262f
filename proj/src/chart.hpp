#pragma once

#include <array>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace hpn {

// Padded grid limits shared by the corpus, the data model and the renderer.
struct GridLimits {
    int h_max = 16;
    int w_max = 64;
};

enum class ChartKind { Line, Scatter, VerticalBar, HorizontalBar, Box };

constexpr std::array<ChartKind, 5> kChartKinds = {
    ChartKind::Line, ChartKind::Scatter, ChartKind::VerticalBar,
    ChartKind::HorizontalBar, ChartKind::Box};

struct ChartType {
    ChartKind kind = ChartKind::Line;

    ChartType() = default;
    explicit ChartType(ChartKind k) : kind(k) {}

    // features per cell: (x,y) for line/scatter, height for bars,
    // (min,q1,median,q3,max) for box
    int feature_count() const {
        switch (kind) {
            case ChartKind::Line:
            case ChartKind::Scatter: return 2;
            case ChartKind::VerticalBar:
            case ChartKind::HorizontalBar: return 1;
            case ChartKind::Box: return 5;
        }
        return 0;
    }

    // fixed enumeration used for data-token conditioning
    int index() const { return static_cast<int>(kind); }

    bool is_bar() const {
        return kind == ChartKind::VerticalBar || kind == ChartKind::HorizontalBar;
    }

    const char* name() const {
        switch (kind) {
            case ChartKind::Line: return "line";
            case ChartKind::Scatter: return "scatter";
            case ChartKind::VerticalBar: return "vbar";
            case ChartKind::HorizontalBar: return "hbar";
            case ChartKind::Box: return "box";
        }
        return "?";
    }

    static ChartType from_index(int i);
    // returns false for unknown names
    static bool parse(const std::string& name, ChartType& out);

    bool operator==(const ChartType& o) const { return kind == o.kind; }
};

// Raw chart data as a padded 3-tensor [h_max, w_max, D] with the true extent
// recorded separately. Everything outside the true h x w region is zero.
struct ChartTensor {
    nn::Tensor values;  // [h_max, w_max, D]
    int h = 0;
    int w = 0;

    ChartTensor() = default;
    ChartTensor(const GridLimits& grid, ChartType type, int rows, int cols)
        : values({grid.h_max, grid.w_max, type.feature_count()}), h(rows), w(cols) {}

    int h_max() const { return values.dim(0); }
    int w_max() const { return values.dim(1); }
    int features() const { return values.dim(2); }

    double& at(int i, int j, int k) {
        return values[(static_cast<int64_t>(i) * w_max() + j) * features() + k];
    }
    double at(int i, int j, int k) const {
        return values[(static_cast<int64_t>(i) * w_max() + j) * features() + k];
    }
};

struct ChartRecord {
    std::string id;
    ChartType type;
    std::string caption;
    std::vector<std::string> axis_titles;
    std::vector<std::string> series_names;
    std::vector<std::string> categorical_labels;
    ChartTensor data;
};

struct DocumentChartPair {
    ChartRecord chart;
    std::vector<std::string> sentences;
    int figure_ref_index = 0;
};

struct SnippetConfig {
    int n = 16;      // sentences per side of the figure reference
    double p = 0.1;  // probability of perturbing each side by +/-1
};

}  // namespace hpn
