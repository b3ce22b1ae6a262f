#include <filesystem>
#include <fstream>
#include <set>

#include "corpus.hpp"
#include "doctest.h"
#include "support/synthetic.hpp"

using namespace hpn;
using namespace hpn::corpus;

namespace {

std::filesystem::path write_temp(const std::string& name, const std::string& content) {
    auto p = std::filesystem::temp_directory_path() / name;
    std::ofstream out(p, std::ios::binary);
    out << content;
    return p;
}

const char* kValidLine =
    R"({"id":"r1","chart_type":"line","caption":"a line","axis_titles":["x","y"],)"
    R"("series_names":["s1"],"categorical_labels":[],"data":[[[0,1],[1,2],[2,4]]],)"
    R"("sentences":["One.","Two.","Three."],"figure_ref_index":1})";
const char* kValidBar =
    R"({"id":"r2","chart_type":"vbar","caption":"a bar","axis_titles":["c","v"],)"
    R"("series_names":[],"categorical_labels":["a","b"],"data":[[[3],[4]]],)"
    R"("sentences":["Only one."],"figure_ref_index":0})";
const char* kValidBox =
    R"({"id":"r3","chart_type":"box","caption":"a box","axis_titles":[],)"
    R"("series_names":[],"categorical_labels":[],"data":[[[1,2,3,4,5]]],)"
    R"("sentences":["S."],"figure_ref_index":0})";

}  // namespace

TEST_CASE("load_corpus accepts well-formed records") {
    auto p = write_temp("hpn_corpus_ok.jsonl", std::string(kValidLine) + "\n" + kValidBar +
                                                   "\n" + kValidBox + "\n");
    LoadResult r = load_corpus(p.string());
    CHECK(r.pairs.size() == 3);
    CHECK(r.rejections.empty());
    CHECK(r.pairs[0].chart.type.kind == ChartKind::Line);
    CHECK(r.pairs[1].chart.data.w == 2);
    std::filesystem::remove(p);
}

TEST_CASE("box order violation is rejected with reason") {
    std::string bad =
        R"({"id":"bad-box","chart_type":"box","caption":"","axis_titles":[],)"
        R"("series_names":[],"categorical_labels":[],"data":[[[3,2,4,5,6]]],)"
        R"("sentences":["S."],"figure_ref_index":0})";
    auto p = write_temp("hpn_corpus_box.jsonl", std::string(kValidLine) + "\n" + bad + "\n");
    LoadResult r = load_corpus(p.string());
    CHECK(r.pairs.size() == 1);
    REQUIRE(r.rejections.size() == 1);
    CHECK(r.rejections[0].id == "bad-box");
    CHECK(r.rejections[0].reason == "box order violation");
    std::filesystem::remove(p);
}

TEST_CASE("scale domain violation is rejected with reason") {
    std::string bad =
        R"({"id":"bad-scale","chart_type":"line","caption":"","axis_titles":[],)"
        R"("series_names":[],"categorical_labels":[],"data":[[[-1.5,0],[0,1]]],)"
        R"("sentences":["S."],"figure_ref_index":0})";
    auto p = write_temp("hpn_corpus_scale.jsonl", bad + "\n");
    LoadResult r = load_corpus(p.string());
    CHECK(r.pairs.empty());
    REQUIRE(r.rejections.size() == 1);
    CHECK(r.rejections[0].reason == "scale domain violation");
    std::filesystem::remove(p);
}

TEST_CASE("malformed syntax raises ParseError with position") {
    auto p = write_temp("hpn_corpus_syntax.jsonl",
                        std::string(kValidLine) + "\n{not json}\n");
    CHECK_THROWS_WITH_AS((void)load_corpus(p.string()),
                         doctest::Contains("line 2"), ParseError);
    std::filesystem::remove(p);
}

TEST_CASE("unreadable file raises IoError") {
    CHECK_THROWS_AS((void)load_corpus("/nonexistent/nowhere.jsonl"), IoError);
}

TEST_CASE("serialize round trip is bit exact") {
    Rng rng(77);
    for (int it = 0; it < 40; ++it) {
        ChartType type(kChartKinds[static_cast<size_t>(it) % 5]);
        DocumentChartPair pair;
        pair.chart.id = "rt-" + std::to_string(it);
        pair.chart.type = type;
        pair.chart.caption = "caption with \"quotes\" and unicode \xC3\xA9";
        pair.chart.data = testsupport::random_valid_chart(type, rng);
        pair.sentences = {"First.", "Second."};
        pair.figure_ref_index = 1;
        std::string line = to_json_line(pair);
        DocumentChartPair back = from_json_line(line);
        CHECK(back.chart.data.h == pair.chart.data.h);
        CHECK(back.chart.data.w == pair.chart.data.w);
        for (int64_t i = 0; i < pair.chart.data.values.numel(); ++i)
            CHECK(back.chart.data.values[i] == pair.chart.data.values[i]);
        CHECK(to_json_line(back) == line);
    }
}

TEST_CASE("validation is idempotent on accepted records") {
    Rng rng(3);
    DocumentChartPair pair;
    pair.chart.id = "v";
    pair.chart.type = ChartType(ChartKind::Scatter);
    pair.chart.data = testsupport::random_valid_chart(pair.chart.type, rng);
    pair.sentences = {"A."};
    pair.figure_ref_index = 0;
    CHECK(validate_pair(pair) == "");
    CHECK(validate_pair(pair) == "");
}

TEST_CASE("split_corpus sizes and determinism") {
    auto mk = [](int n) {
        std::vector<DocumentChartPair> pairs(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) pairs[static_cast<size_t>(i)].chart.id = std::to_string(i);
        return pairs;
    };

    SUBCASE("10 pairs at 0.8") {
        auto pairs = mk(10);
        auto [train, test] = split_corpus(pairs, 0.8, 7);
        CHECK(train.size() == 8);
        CHECK(test.size() == 2);
        auto [train2, test2] = split_corpus(pairs, 0.8, 7);
        for (size_t i = 0; i < train.size(); ++i)
            CHECK(train[i].chart.id == train2[i].chart.id);
        for (size_t i = 0; i < test.size(); ++i)
            CHECK(test[i].chart.id == test2[i].chart.id);
    }
    SUBCASE("paper-sized corpus") {
        auto pairs = mk(5418);
        auto [train, test] = split_corpus(pairs, 0.8, 1);
        CHECK(train.size() == 4334);
        CHECK(test.size() == 1084);
    }
    SUBCASE("partition property over seeds") {
        auto pairs = mk(37);
        for (uint64_t seed = 0; seed < 8; ++seed) {
            auto [train, test] = split_corpus(pairs, 0.4, seed);
            std::set<std::string> seen;
            for (const auto& p : train) seen.insert(p.chart.id);
            for (const auto& p : test) seen.insert(p.chart.id);
            CHECK(train.size() + test.size() == 37);
            CHECK(seen.size() == 37);
        }
    }
    SUBCASE("empty input") {
        CHECK_THROWS_AS((void)split_corpus({}, 0.8, 0), ValidationError);
    }
}

TEST_CASE("extract_snippet windows") {
    DocumentChartPair pair;
    for (int i = 0; i < 40; ++i) pair.sentences.push_back("s" + std::to_string(i));
    pair.figure_ref_index = 20;

    SUBCASE("centered window, no perturbation") {
        std::string snip = extract_snippet(pair, {.n = 16, .p = 0.0}, 1);
        std::string expect;
        for (int i = 4; i <= 36; ++i) {
            if (!expect.empty()) expect += ' ';
            expect += "s" + std::to_string(i);
        }
        CHECK(snip == expect);
    }
    SUBCASE("left boundary clamps") {
        pair.figure_ref_index = 0;
        std::string snip = extract_snippet(pair, {.n = 16, .p = 0.0}, 1);
        std::string expect;
        for (int i = 0; i <= 16; ++i) {
            if (!expect.empty()) expect += ' ';
            expect += "s" + std::to_string(i);
        }
        CHECK(snip == expect);
    }
    SUBCASE("p=1 perturbs each side by exactly one, matching a replayed stream") {
        for (uint64_t seed = 1; seed <= 20; ++seed) {
            // reference stream: gate + direction per side, left first
            Rng ref(seed);
            ref.next_double();
            int left = 2 + (ref.next_double() < 0.5 ? 1 : -1);
            ref.next_double();
            int right = 2 + (ref.next_double() < 0.5 ? 1 : -1);
            std::string expect;
            for (int i = 20 - left; i <= 20 + right; ++i) {
                if (!expect.empty()) expect += ' ';
                expect += "s" + std::to_string(i);
            }
            CHECK(extract_snippet(pair, {.n = 2, .p = 1.0}, seed) == expect);
        }
    }
    SUBCASE("sentence count bounded by [1, 2N+3]") {
        Rng rng(5);
        for (int it = 0; it < 200; ++it) {
            DocumentChartPair p2;
            int len = rng.range_int(1, 30);
            for (int i = 0; i < len; ++i) p2.sentences.push_back("x");
            p2.figure_ref_index = rng.range_int(0, len - 1);
            int n = rng.range_int(1, 6);
            std::string snip =
                extract_snippet(p2, {.n = n, .p = rng.next_double()}, rng.next_u64());
            int count = snip.empty() ? 0 : 1;
            for (char c : snip)
                if (c == ' ') ++count;
            CHECK(count >= 1);
            CHECK(count <= 2 * n + 3);
        }
    }
}

TEST_CASE("sentence segmentation rule") {
    auto s = split_sentences("First part. Second one! Is it third? Yes. no split here. But here.");
    REQUIRE(s.size() == 5);
    CHECK(s[0] == "First part.");
    CHECK(s[1] == "Second one!");
    CHECK(s[2] == "Is it third?");
    // "Yes. no" does not split: lowercase continuation
    CHECK(s[3] == "Yes. no split here.");
    CHECK(s[4] == "But here.");
}

TEST_CASE("baseline plotly responses") {
    SUBCASE("bar response with four categories") {
        auto p = write_temp("hpn_baseline_ok.json", R"([{
            "caption":"Sales by region","series_name":"sales",
            "axis_names":["region","total"],"chart_type":"bar",
            "data":{"x":["n","s","e","w"],"y":[1,2,3,4]}}])");
        BaselineImport r = parse_plotly_response(p.string());
        REQUIRE(r.records.size() == 1);
        CHECK(r.rejections.empty());
        CHECK(r.records[0].type.kind == ChartKind::VerticalBar);
        CHECK(r.records[0].data.h == 1);
        CHECK(r.records[0].data.w == 4);
        CHECK(r.records[0].categorical_labels.size() == 4);
        CHECK(r.records[0].data.at(0, 2, 0) == 3.0);
        std::filesystem::remove(p);
    }
    SUBCASE("missing data key") {
        auto p = write_temp("hpn_baseline_missing.json",
                            R"([{"caption":"x","chart_type":"line"}])");
        BaselineImport r = parse_plotly_response(p.string());
        CHECK(r.records.empty());
        REQUIRE(r.rejections.size() == 1);
        CHECK(r.rejections[0].reason == "missing data");
        std::filesystem::remove(p);
    }
    SUBCASE("ragged series") {
        auto p = write_temp("hpn_baseline_ragged.json", R"([{
            "caption":"x","chart_type":"line",
            "data":[{"x":[1,2,3],"y":[1,2,3]},{"x":[1,2],"y":[1,2]}]}])");
        BaselineImport r = parse_plotly_response(p.string());
        CHECK(r.records.empty());
        REQUIRE(r.rejections.size() == 1);
        CHECK(r.rejections[0].reason == "ragged series");
        std::filesystem::remove(p);
    }
    SUBCASE("unknown chart type is a rejection, not a failure") {
        auto p = write_temp("hpn_baseline_unknown.json", R"([
            {"caption":"x","chart_type":"sunburst","data":{"x":[1],"y":[1]}},
            {"caption":"y","chart_type":"scatter","data":{"x":[1,2],"y":[3,4]}}])");
        BaselineImport r = parse_plotly_response(p.string());
        CHECK(r.records.size() == 1);
        REQUIRE(r.rejections.size() == 1);
        CHECK(r.rejections[0].reason == "unknown chart type");
        std::filesystem::remove(p);
    }
    SUBCASE("box responses use plotly box trace fields") {
        auto p = write_temp("hpn_baseline_box.json", R"([{
            "caption":"spread","chart_type":"box",
            "data":{"lowerfence":[1,2],"q1":[2,3],"median":[3,4],"q3":[4,5],"upperfence":[5,6]}}])");
        BaselineImport r = parse_plotly_response(p.string());
        REQUIRE(r.records.size() == 1);
        CHECK(r.records[0].data.w == 2);
        CHECK(r.records[0].data.at(0, 1, 4) == 6.0);
        std::filesystem::remove(p);
    }
}

TEST_CASE("synthetic corpus passes validation") {
    auto corpus = testsupport::synthetic_corpus(60, 9);
    for (const auto& pair : corpus) CHECK(validate_pair(pair) == "");
}
