#include "corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

#include "json.hpp"

namespace hpn::corpus {

using Json = nlohmann::ordered_json;

namespace {

std::vector<std::string> string_list(const Json& j, const char* field) {
    if (!j.contains(field)) throw ValidationError(std::string("missing field: ") + field);
    const Json& a = j.at(field);
    if (!a.is_array()) throw ValidationError(std::string("bad field: ") + field);
    std::vector<std::string> out;
    for (const auto& e : a) {
        if (!e.is_string()) throw ValidationError(std::string("bad field: ") + field);
        out.push_back(e.get<std::string>());
    }
    return out;
}

std::string string_field(const Json& j, const char* field) {
    if (!j.contains(field)) throw ValidationError(std::string("missing field: ") + field);
    if (!j.at(field).is_string()) throw ValidationError(std::string("bad field: ") + field);
    return j.at(field).get<std::string>();
}

ChartTensor tensor_from_json(const Json& data, ChartType type, const GridLimits& grid) {
    if (!data.is_array() || data.empty()) throw ValidationError("empty data");
    const int d = type.feature_count();
    const int h = static_cast<int>(data.size());
    int w = -1;
    for (const auto& row : data) {
        if (!row.is_array() || row.empty()) throw ValidationError("empty data");
        if (w < 0)
            w = static_cast<int>(row.size());
        else if (w != static_cast<int>(row.size()))
            throw ValidationError("ragged series");
    }
    if (h > grid.h_max || w > grid.w_max) throw ValidationError("chart exceeds grid");
    ChartTensor x(grid, type, h, w);
    for (int i = 0; i < h; ++i) {
        const Json& row = data[static_cast<size_t>(i)];
        for (int j = 0; j < w; ++j) {
            const Json& cell = row[static_cast<size_t>(j)];
            if (!cell.is_array() || static_cast<int>(cell.size()) != d)
                throw ValidationError("bad feature count");
            for (int k = 0; k < d; ++k) {
                const Json& v = cell[static_cast<size_t>(k)];
                if (!v.is_number()) throw ValidationError("non-numeric data");
                x.at(i, j, k) = v.get<double>();
            }
        }
    }
    return x;
}

Json tensor_to_json(const ChartTensor& x, ChartType type) {
    Json rows = Json::array();
    for (int i = 0; i < x.h; ++i) {
        Json row = Json::array();
        for (int j = 0; j < x.w; ++j) {
            Json cell = Json::array();
            for (int k = 0; k < type.feature_count(); ++k) cell.push_back(x.at(i, j, k));
            row.push_back(std::move(cell));
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace

std::string validate_pair(const DocumentChartPair& pair, const GridLimits& grid) {
    const ChartRecord& c = pair.chart;
    const ChartTensor& x = c.data;
    const int d = c.type.feature_count();
    if (x.values.rank() != 3 || x.features() != d) return "bad feature count";
    if (x.h < 1 || x.w < 1 || x.h > grid.h_max || x.w > grid.w_max)
        return "chart exceeds grid";
    for (int64_t i = 0; i < x.values.numel(); ++i)
        if (!std::isfinite(x.values[i])) return "non-finite data";
    // padding must stay zero
    for (int i = 0; i < x.h_max(); ++i)
        for (int j = 0; j < x.w_max(); ++j) {
            if (i < x.h && j < x.w) continue;
            for (int k = 0; k < d; ++k)
                if (x.at(i, j, k) != 0.0) return "nonzero padding";
        }
    if (c.type.kind == ChartKind::Box)
        for (int i = 0; i < x.h; ++i)
            for (int j = 0; j < x.w; ++j)
                for (int k = 1; k < 5; ++k)
                    if (x.at(i, j, k) < x.at(i, j, k - 1)) return "box order violation";
    // Eq. 1 needs a positive log argument for every (row, feature) group
    for (int i = 0; i < x.h; ++i)
        for (int j = 0; j < x.w; ++j)
            for (int k = 0; k < d; ++k)
                if (x.at(i, j, k) <= -1.1) return "scale domain violation";
    if (!c.series_names.empty() && static_cast<int>(c.series_names.size()) != x.h)
        return "series names length mismatch";
    if (!c.categorical_labels.empty() &&
        static_cast<int>(c.categorical_labels.size()) != x.w)
        return "categorical labels length mismatch";
    if (pair.sentences.empty()) return "missing field: sentences";
    if (pair.figure_ref_index < 0 ||
        pair.figure_ref_index >= static_cast<int>(pair.sentences.size()))
        return "bad figure ref";
    return "";
}

DocumentChartPair from_json_line(const std::string& line, const GridLimits& grid) {
    Json j = Json::parse(line);  // nlohmann errors are translated by the caller
    DocumentChartPair pair;
    pair.chart.id = string_field(j, "id");
    std::string type_name = string_field(j, "chart_type");
    if (!ChartType::parse(type_name, pair.chart.type))
        throw ValidationError("unknown chart type");
    pair.chart.caption = string_field(j, "caption");
    pair.chart.axis_titles = string_list(j, "axis_titles");
    pair.chart.series_names = string_list(j, "series_names");
    pair.chart.categorical_labels = string_list(j, "categorical_labels");
    if (!j.contains("data")) throw ValidationError("missing field: data");
    pair.chart.data = tensor_from_json(j.at("data"), pair.chart.type, grid);
    pair.sentences = string_list(j, "sentences");
    if (!j.contains("figure_ref_index") || !j.at("figure_ref_index").is_number_integer())
        throw ValidationError("missing field: figure_ref_index");
    pair.figure_ref_index = j.at("figure_ref_index").get<int>();
    std::string reason = validate_pair(pair, grid);
    if (!reason.empty()) throw ValidationError(reason);
    return pair;
}

std::string to_json_line(const DocumentChartPair& pair) {
    Json j;
    j["id"] = pair.chart.id;
    j["chart_type"] = pair.chart.type.name();
    j["caption"] = pair.chart.caption;
    j["axis_titles"] = pair.chart.axis_titles;
    j["series_names"] = pair.chart.series_names;
    j["categorical_labels"] = pair.chart.categorical_labels;
    j["data"] = tensor_to_json(pair.chart.data, pair.chart.type);
    j["sentences"] = pair.sentences;
    j["figure_ref_index"] = pair.figure_ref_index;
    return j.dump();
}

LoadResult load_corpus(const std::string& path, const GridLimits& grid) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open dataset: " + path);
    LoadResult out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        try {
            out.pairs.push_back(from_json_line(line, grid));
        } catch (const ValidationError& e) {
            std::string id = "record " + std::to_string(line_no);
            try {
                Json j = Json::parse(line);
                if (j.contains("id") && j.at("id").is_string()) id = j.at("id");
            } catch (...) {
            }
            out.rejections.push_back({id, e.what()});
        } catch (const Json::exception& e) {
            throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (in.bad()) throw IoError("read failure: " + path);
    return out;
}

void write_corpus(const std::string& path, const std::vector<DocumentChartPair>& pairs) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    for (const auto& p : pairs) out << to_json_line(p) << '\n';
    if (!out) throw IoError("write failure: " + path);
}

std::pair<std::vector<DocumentChartPair>, std::vector<DocumentChartPair>> split_corpus(
    const std::vector<DocumentChartPair>& pairs, double ratio, uint64_t seed) {
    if (pairs.empty()) throw ValidationError("empty input");
    if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must lie in (0,1)");
    std::vector<size_t> idx(pairs.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(seed);
    rng.shuffle(idx);
    auto n_train = static_cast<size_t>(
        std::llround(ratio * static_cast<double>(pairs.size())));
    n_train = std::min(n_train, pairs.size());
    std::pair<std::vector<DocumentChartPair>, std::vector<DocumentChartPair>> out;
    for (size_t i = 0; i < idx.size(); ++i)
        (i < n_train ? out.first : out.second).push_back(pairs[idx[i]]);
    return out;
}

std::string extract_snippet(const DocumentChartPair& pair, const SnippetConfig& cfg,
                            uint64_t seed) {
    if (cfg.n < 1) throw ConfigError("snippet: n must be >= 1");
    if (cfg.p < 0.0 || cfg.p > 1.0) throw ConfigError("snippet: p must lie in [0,1]");
    Rng rng(seed);
    auto side = [&](int base) {
        double gate = rng.next_double();
        if (gate < cfg.p) base += rng.next_double() < 0.5 ? 1 : -1;
        return std::max(0, base);
    };
    const int left = side(cfg.n);
    const int right = side(cfg.n);
    const int n = static_cast<int>(pair.sentences.size());
    const int lo = std::max(0, pair.figure_ref_index - left);
    const int hi = std::min(n - 1, pair.figure_ref_index + right);
    std::string out;
    for (int i = lo; i <= hi; ++i) {
        if (!out.empty()) out += ' ';
        out += pair.sentences[static_cast<size_t>(i)];
    }
    return out;
}

std::vector<std::string> split_sentences(const std::string& text) {
    std::vector<std::string> out;
    size_t start = 0;
    const size_t n = text.size();
    auto flush = [&](size_t end) {
        while (start < end && std::isspace(static_cast<unsigned char>(text[start]))) ++start;
        size_t stop = end;
        while (stop > start && std::isspace(static_cast<unsigned char>(text[stop - 1])))
            --stop;
        if (stop > start) out.push_back(text.substr(start, stop - start));
        start = end;
    };
    for (size_t i = 0; i < n; ++i) {
        char c = text[i];
        if (c != '.' && c != '!' && c != '?') continue;
        size_t j = i + 1;
        if (j >= n || !std::isspace(static_cast<unsigned char>(text[j]))) continue;
        while (j < n && std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        if (j < n && std::isupper(static_cast<unsigned char>(text[j]))) flush(i + 1);
    }
    flush(n);
    return out;
}

// ---------------------------------------------------------------------------
// baseline (Plotly-style) responses

namespace {

bool numeric_array(const Json& a, std::vector<double>& out) {
    if (!a.is_array()) return false;
    out.clear();
    for (const auto& v : a) {
        if (!v.is_number()) return false;
        double d = v.get<double>();
        if (!std::isfinite(d)) return false;
        out.push_back(d);
    }
    return true;
}

bool label_array(const Json& a, std::vector<std::string>& out) {
    if (!a.is_array()) return false;
    out.clear();
    for (const auto& v : a) {
        if (v.is_string())
            out.push_back(v.get<std::string>());
        else if (v.is_number())
            out.push_back(Json(v).dump());
        else
            return false;
    }
    return true;
}

ChartType baseline_chart_type(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    std::replace(s.begin(), s.end(), '_', ' ');
    ChartType t;
    if (ChartType::parse(s, t)) return t;
    if (s == "bar" || s == "vertical bar") return ChartType(ChartKind::VerticalBar);
    if (s == "horizontal bar") return ChartType(ChartKind::HorizontalBar);
    if (s == "box plot" || s == "boxplot") return ChartType(ChartKind::Box);
    throw ValidationError("unknown chart type");
}

ChartRecord record_from_response(const Json& r, int index, const GridLimits& grid) {
    ChartRecord rec;
    rec.id = "baseline-" + std::to_string(index);
    if (!r.is_object()) throw ValidationError("bad response");
    if (!r.contains("chart_type") || !r.at("chart_type").is_string())
        throw ValidationError("missing chart type");
    rec.type = baseline_chart_type(r.at("chart_type").get<std::string>());
    if (r.contains("caption") && r.at("caption").is_string())
        rec.caption = r.at("caption").get<std::string>();
    if (r.contains("axis_names") && r.at("axis_names").is_array())
        for (const auto& a : r.at("axis_names"))
            if (a.is_string()) rec.axis_titles.push_back(a.get<std::string>());
    if (r.contains("series_name")) {
        const Json& sn = r.at("series_name");
        if (sn.is_string())
            rec.series_names.push_back(sn.get<std::string>());
        else if (sn.is_array())
            for (const auto& s : sn)
                if (s.is_string()) rec.series_names.push_back(s.get<std::string>());
    }
    if (!r.contains("data")) throw ValidationError("missing data");
    const Json& data = r.at("data");
    std::vector<Json> traces;
    if (data.is_object())
        traces.push_back(data);
    else if (data.is_array())
        for (const auto& t : data) traces.push_back(t);
    if (traces.empty()) throw ValidationError("missing data");

    const int h = static_cast<int>(traces.size());
    int w = -1;
    std::vector<std::vector<double>> rows;  // per trace, flattened features
    std::vector<std::string> categories;

    for (int ti = 0; ti < h; ++ti) {
        const Json& t = traces[static_cast<size_t>(ti)];
        if (!t.is_object()) throw ValidationError("missing data");
        if (rec.type.kind == ChartKind::Box) {
            static const char* kBoxKeys[5] = {"lowerfence", "q1", "median", "q3",
                                              "upperfence"};
            std::vector<double> cols[5];
            for (int k = 0; k < 5; ++k) {
                if (!t.contains(kBoxKeys[k]) || !numeric_array(t.at(kBoxKeys[k]), cols[k]))
                    throw ValidationError("missing data");
            }
            for (int k = 1; k < 5; ++k)
                if (cols[k].size() != cols[0].size()) throw ValidationError("ragged series");
            if (cols[0].empty()) throw ValidationError("missing data");
            if (w < 0) w = static_cast<int>(cols[0].size());
            if (w != static_cast<int>(cols[0].size())) throw ValidationError("ragged series");
            std::vector<double> flat;
            for (size_t j = 0; j < cols[0].size(); ++j)
                for (int k = 0; k < 5; ++k) flat.push_back(cols[k][j]);
            rows.push_back(std::move(flat));
        } else {
            if (!t.contains("x") || !t.contains("y")) throw ValidationError("missing data");
            const bool horizontal = rec.type.kind == ChartKind::HorizontalBar;
            const Json& value_axis = horizontal ? t.at("x") : t.at("y");
            const Json& other_axis = horizontal ? t.at("y") : t.at("x");
            std::vector<double> values;
            if (!numeric_array(value_axis, values)) throw ValidationError("non-numeric data");
            if (values.empty()) throw ValidationError("missing data");
            if (rec.type.is_bar()) {
                std::vector<std::string> labels;
                if (!label_array(other_axis, labels)) throw ValidationError("missing data");
                if (labels.size() != values.size()) throw ValidationError("ragged series");
                if (ti == 0)
                    categories = labels;
                else if (labels.size() != categories.size())
                    throw ValidationError("ragged series");
                if (w < 0) w = static_cast<int>(values.size());
                if (w != static_cast<int>(values.size()))
                    throw ValidationError("ragged series");
                rows.push_back(values);
            } else {
                std::vector<double> xs;
                if (!numeric_array(other_axis, xs)) throw ValidationError("non-numeric data");
                if (xs.size() != values.size()) throw ValidationError("ragged series");
                if (w < 0) w = static_cast<int>(xs.size());
                if (w != static_cast<int>(xs.size())) throw ValidationError("ragged series");
                std::vector<double> flat;
                for (size_t j = 0; j < xs.size(); ++j) {
                    flat.push_back(xs[j]);
                    flat.push_back(values[j]);
                }
                rows.push_back(std::move(flat));
            }
        }
    }

    if (h > grid.h_max || w > grid.w_max) throw ValidationError("chart exceeds grid");
    const int d = rec.type.feature_count();
    rec.data = ChartTensor(grid, rec.type, h, w);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            for (int k = 0; k < d; ++k)
                rec.data.at(i, j, k) = rows[static_cast<size_t>(i)][static_cast<size_t>(j) * d + k];
    rec.categorical_labels = categories;

    // same semantic gate as the canonical loader
    DocumentChartPair probe;
    probe.chart = rec;
    probe.sentences = {rec.caption.empty() ? std::string("-") : rec.caption};
    probe.figure_ref_index = 0;
    std::string reason = validate_pair(probe, grid);
    if (!reason.empty()) throw ValidationError(reason);
    return rec;
}

}  // namespace

BaselineImport parse_plotly_response(const std::string& path, const GridLimits& grid) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open baseline responses: " + path);
    Json j;
    try {
        j = Json::parse(in);
    } catch (const Json::exception& e) {
        throw ParseError(std::string("baseline responses: ") + e.what());
    }
    if (!j.is_array()) throw ParseError("baseline responses: top-level array expected");
    BaselineImport out;
    int index = 0;
    for (const auto& r : j) {
        try {
            out.records.push_back(record_from_response(r, index, grid));
        } catch (const ValidationError& e) {
            out.rejections.push_back({"baseline-" + std::to_string(index), e.what()});
        }
        ++index;
    }
    return out;
}

}  // namespace hpn::corpus
