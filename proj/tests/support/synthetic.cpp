#include "synthetic.hpp"

#include <algorithm>
#include <cmath>

namespace hpn::testsupport {

ChartTensor random_valid_chart(ChartType type, Rng& rng, const GridLimits& grid, int max_h,
                               int max_w) {
    int h = rng.range_int(1, max_h);
    int w = rng.range_int(2, max_w);
    ChartTensor x(grid, type, h, w);
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

namespace {

const std::vector<std::string> kTopics = {
    "antibody response", "rainfall",    "network latency", "vaccination coverage",
    "protein expression", "market share", "cell viability",  "energy output"};
const std::vector<std::string> kUnits = {"percent", "millimetres", "milliseconds",
                                         "micrograms", "kilowatts"};
const std::vector<std::string> kGroups = {"control", "treatment", "placebo", "cohort"};
const std::vector<std::string> kCategoryPools[3] = {
    {"north", "south", "east", "west", "central", "coastal", "inland", "urban"},
    {"Q1", "Q2", "Q3", "Q4", "Q5", "Q6", "Q7", "Q8"},
    {"group A", "group B", "group C", "group D", "group E", "group F", "group G",
     "group H"}};

std::string chart_phrase(ChartKind k) {
    switch (k) {
        case ChartKind::Line: return "over time";
        case ChartKind::Scatter: return "scatter across samples";
        case ChartKind::VerticalBar: return "by category";
        case ChartKind::HorizontalBar: return "ranked by group";
        case ChartKind::Box: return "distribution by cohort";
    }
    return "";
}

}  // namespace

std::vector<DocumentChartPair> synthetic_corpus(int n, uint64_t seed,
                                                const GridLimits& grid) {
    Rng rng(seed);
    std::vector<DocumentChartPair> out;
    out.reserve(static_cast<size_t>(n));
    for (int idx = 0; idx < n; ++idx) {
        ChartType type(kChartKinds[static_cast<size_t>(idx) % kChartKinds.size()]);
        const std::string& topic = kTopics[rng.below(kTopics.size())];
        const std::string& unit = kUnits[rng.below(kUnits.size())];
        const double scale = std::pow(10.0, static_cast<double>(rng.range_int(0, 3)));

        int h = 1, w = 4;
        switch (type.kind) {
            case ChartKind::Line:
            case ChartKind::Scatter:
                h = rng.range_int(1, 3);
                w = 6 + 2 * rng.range_int(0, 3);  // 6, 8, 10, 12
                break;
            case ChartKind::VerticalBar:
                h = 1;
                w = rng.range_int(4, 8);
                break;
            case ChartKind::HorizontalBar:
                h = 1;
                w = rng.range_int(3, 6);
                break;
            case ChartKind::Box:
                h = rng.range_int(1, 2);
                w = rng.range_int(3, 6);
                break;
        }

        ChartTensor x(grid, type, h, w);
        for (int i = 0; i < h; ++i) {
            const double base = scale * rng.uniform(0.5, 2.0);
            const double slope = scale * rng.uniform(-0.08, 0.15);
            const double amp = scale * rng.uniform(0.05, 0.3);
            const double phase = rng.uniform(0.0, 6.28);
            for (int j = 0; j < w; ++j) {
                double level =
                    base + slope * j + amp * std::sin(0.6 * j + phase);
                level = std::max(level, 0.01 * scale);
                switch (type.kind) {
                    case ChartKind::Line:
                        x.at(i, j, 0) = static_cast<double>(j);
                        x.at(i, j, 1) = level;
                        break;
                    case ChartKind::Scatter:
                        x.at(i, j, 0) = j + rng.uniform(-0.3, 0.3);
                        x.at(i, j, 1) = level * rng.uniform(0.9, 1.1);
                        break;
                    case ChartKind::VerticalBar:
                    case ChartKind::HorizontalBar:
                        x.at(i, j, 0) = level;
                        break;
                    case ChartKind::Box: {
                        double spread = level * rng.uniform(0.08, 0.25);
                        x.at(i, j, 0) = level - 1.5 * spread;
                        x.at(i, j, 1) = level - 0.5 * spread;
                        x.at(i, j, 2) = level;
                        x.at(i, j, 3) = level + 0.6 * spread;
                        x.at(i, j, 4) = level + 1.6 * spread;
                        if (x.at(i, j, 0) < 0.0) {
                            double lift = -x.at(i, j, 0);
                            for (int k = 0; k < 5; ++k) x.at(i, j, k) += lift;
                        }
                        break;
                    }
                }
            }
        }

        DocumentChartPair pair;
        pair.chart.id = "synt-" + std::to_string(idx);
        pair.chart.type = type;
        pair.chart.caption =
            std::string(type.name()) + " chart of " + topic + " " + chart_phrase(type.kind);
        pair.chart.axis_titles = {type.kind == ChartKind::HorizontalBar ? unit : "index",
                                  type.kind == ChartKind::HorizontalBar ? "group" : unit};
        for (int i = 0; i < h; ++i)
            pair.chart.series_names.push_back(kGroups[static_cast<size_t>(i) %
                                                      kGroups.size()]);
        if (type.is_bar()) {
            const auto& pool = kCategoryPools[rng.below(3)];
            for (int j = 0; j < w; ++j)
                pair.chart.categorical_labels.push_back(pool[static_cast<size_t>(j)]);
        }
        pair.chart.data = std::move(x);

        const int before = rng.range_int(3, 6);
        const int after = rng.range_int(3, 6);
        for (int i = 0; i < before; ++i)
            pair.sentences.push_back("The study measured " + topic + " in " + unit + ".");
        pair.figure_ref_index = static_cast<int>(pair.sentences.size());
        pair.sentences.push_back("Figure shows " + topic + " " + chart_phrase(type.kind) +
                                 ".");
        for (int i = 0; i < after; ++i)
            pair.sentences.push_back("Results varied across the " +
                                     kGroups[rng.below(kGroups.size())] + " samples.");
        out.push_back(std::move(pair));
    }
    return out;
}

}  // namespace hpn::testsupport
