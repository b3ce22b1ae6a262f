#pragma once

#include <string>
#include <utility>
#include <vector>

#include "chart.hpp"

namespace hpn::corpus {

struct Rejection {
    std::string id;  // record id, or "record <k>" when the id itself is missing
    std::string reason;
};

struct LoadResult {
    std::vector<DocumentChartPair> pairs;
    std::vector<Rejection> rejections;
};

// Canonical dataset: UTF-8, one JSON object per line (see README for the
// field list). Validation failures become rejections; syntactically broken
// lines raise ParseError with the line number.
LoadResult load_corpus(const std::string& path, const GridLimits& grid = {});

// Re-validates an in-memory pair; returns empty string when valid.
std::string validate_pair(const DocumentChartPair& pair, const GridLimits& grid = {});

// Serializes one pair as a canonical JSON line (bit-exact number round trip).
std::string to_json_line(const DocumentChartPair& pair);
DocumentChartPair from_json_line(const std::string& line, const GridLimits& grid = {});

void write_corpus(const std::string& path, const std::vector<DocumentChartPair>& pairs);

// Deterministic shuffle split; |train| = round(ratio * n).
std::pair<std::vector<DocumentChartPair>, std::vector<DocumentChartPair>> split_corpus(
    const std::vector<DocumentChartPair>& pairs, double ratio, uint64_t seed);

// Joins up to n±1 sentences on each side of the figure reference (inclusive).
// Each side is independently grown or shrunk by one sentence with probability
// cfg.p; window edges clamp to the document bounds.
std::string extract_snippet(const DocumentChartPair& pair, const SnippetConfig& cfg,
                            uint64_t seed);

// Splits document text into sentences: '.', '!' or '?' followed by whitespace
// and an uppercase letter ends a sentence.
std::vector<std::string> split_sentences(const std::string& text);

struct BaselineImport {
    std::vector<ChartRecord> records;
    std::vector<Rejection> rejections;
};

// Ingests saved baseline chart responses (Plotly-style JSON array).
BaselineImport parse_plotly_response(const std::string& path, const GridLimits& grid = {});

}  // namespace hpn::corpus
