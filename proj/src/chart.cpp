#include "chart.hpp"

namespace hpn {

ChartType ChartType::from_index(int i) {
    if (i < 0 || i >= static_cast<int>(kChartKinds.size()))
        throw ValidationError("chart type index out of range");
    return ChartType(kChartKinds[static_cast<size_t>(i)]);
}

bool ChartType::parse(const std::string& name, ChartType& out) {
    for (ChartKind k : kChartKinds) {
        if (name == ChartType(k).name()) {
            out = ChartType(k);
            return true;
        }
    }
    return false;
}

}  // namespace hpn
