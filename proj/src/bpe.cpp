#include "bpe.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

namespace hpn::mmt {

namespace {

const char* special_name(int id) {
    switch (id) {
        case Vocabulary::kPad: return "<PAD>";
        case Vocabulary::kBos: return "<BOS>";
        case Vocabulary::kEos: return "<EOS>";
        case Vocabulary::kSep: return "<SEP>";
        case Vocabulary::kTagCaption: return "[CAPTION]";
        case Vocabulary::kTagAxis: return "[AXIS]";
        case Vocabulary::kTagSeries: return "[SERIES]";
        case Vocabulary::kTagCategorical: return "[CAT]";
        case Vocabulary::kTagData: return "[DATA]";
        default: return nullptr;
    }
}

// whitespace runs attach to the following word so merges never cross words
std::vector<std::string> chunk_text(const std::string& text) {
    std::vector<std::string> out;
    size_t i = 0;
    const size_t n = text.size();
    while (i < n) {
        size_t start = i;
        while (i < n && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        while (i < n && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        out.push_back(text.substr(start, i - start));
    }
    return out;
}

std::string escape_token(const std::string& t) {
    std::string out;
    for (unsigned char c : t) {
        if (c == '\\' || c < 0x21 || c > 0x7e) {
            static const char* hex = "0123456789abcdef";
            out += "\\x";
            out += hex[c >> 4];
            out += hex[c & 0xf];
        } else {
            out += static_cast<char>(c);
        }
    }
    return out;
}

std::string unescape_token(const std::string& t, int line_no) {
    std::string out;
    for (size_t i = 0; i < t.size();) {
        if (t[i] == '\\') {
            if (i + 3 >= t.size() || t[i + 1] != 'x')
                throw ParseError("vocabulary: bad escape at line " + std::to_string(line_no));
            int hi = std::tolower(static_cast<unsigned char>(t[i + 2]));
            int lo = std::tolower(static_cast<unsigned char>(t[i + 3]));
            auto val = [line_no](int c) {
                if (c >= '0' && c <= '9') return c - '0';
                if (c >= 'a' && c <= 'f') return c - 'a' + 10;
                throw ParseError("vocabulary: bad escape at line " + std::to_string(line_no));
            };
            out += static_cast<char>(val(hi) * 16 + val(lo));
            i += 4;
        } else {
            out += t[i];
            ++i;
        }
    }
    return out;
}

}  // namespace

Vocabulary::Vocabulary() {
    tokens_.reserve(kByteBase + 256);
    for (int i = 0; i < kSpecialCount; ++i) {
        const char* name = special_name(i);
        tokens_.push_back(name ? name : "<RESERVED" + std::to_string(i) + ">");
    }
    for (int b = 0; b < 256; ++b) tokens_.push_back(std::string(1, static_cast<char>(b)));
    rebuild_match_index();
}

void Vocabulary::rebuild_match_index() {
    match_ids_.clear();
    max_token_len_ = 1;
    for (int id = kByteBase; id < size(); ++id) {
        const std::string& t = tokens_[static_cast<size_t>(id)];
        match_ids_.emplace(t, id);  // first id wins for duplicate strings
        max_token_len_ = std::max(max_token_len_, t.size());
    }
}

Vocabulary Vocabulary::train(const std::vector<std::string>& corpus, int merges) {
    if (merges < 0) throw ConfigError("bpe: merges must be >= 0");
    Vocabulary v;
    // chunk frequencies; ordered map keeps every scan deterministic
    std::map<std::string, int64_t> chunk_freq;
    for (const std::string& text : corpus)
        for (const std::string& c : chunk_text(text)) ++chunk_freq[c];

    std::vector<std::pair<std::vector<int>, int64_t>> chunks;
    chunks.reserve(chunk_freq.size());
    for (const auto& [chunk, freq] : chunk_freq) {
        std::vector<int> ids;
        ids.reserve(chunk.size());
        for (unsigned char c : chunk) ids.push_back(kByteBase + c);
        chunks.emplace_back(std::move(ids), freq);
    }

    for (int m = 0; m < merges; ++m) {
        std::map<std::pair<int, int>, int64_t> pair_count;
        for (const auto& [ids, freq] : chunks)
            for (size_t i = 0; i + 1 < ids.size(); ++i)
                pair_count[{ids[i], ids[i + 1]}] += freq;
        if (pair_count.empty()) break;
        // highest count wins; map order breaks ties toward the smaller pair
        auto best = pair_count.begin();
        for (auto it = pair_count.begin(); it != pair_count.end(); ++it)
            if (it->second > best->second) best = it;
        if (best->second < 2) break;  // nothing left worth merging

        const auto [left, right] = best->first;
        const int new_id = static_cast<int>(v.tokens_.size());
        v.tokens_.push_back(v.tokens_[static_cast<size_t>(left)] +
                            v.tokens_[static_cast<size_t>(right)]);
        for (auto& [ids, freq] : chunks) {
            std::vector<int> next;
            next.reserve(ids.size());
            for (size_t i = 0; i < ids.size();) {
                if (i + 1 < ids.size() && ids[i] == left && ids[i + 1] == right) {
                    next.push_back(new_id);
                    i += 2;
                } else {
                    next.push_back(ids[i]);
                    ++i;
                }
            }
            ids = std::move(next);
        }
    }
    v.rebuild_match_index();
    return v;
}

std::vector<int> Vocabulary::encode_chunk(const std::string& chunk) const {
    std::vector<int> ids;
    size_t pos = 0;
    while (pos < chunk.size()) {
        size_t best = 1;
        int best_id = kByteBase + static_cast<unsigned char>(chunk[pos]);
        size_t cap = std::min(max_token_len_, chunk.size() - pos);
        for (size_t len = cap; len >= 2; --len) {
            auto it = match_ids_.find(chunk.substr(pos, len));
            if (it != match_ids_.end()) {
                best = len;
                best_id = it->second;
                break;
            }
        }
        ids.push_back(best_id);
        pos += best;
    }
    return ids;
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
    std::vector<int> out;
    size_t pos = 0;
    const std::string marker = kSepMarker;
    while (pos <= text.size()) {
        size_t hit = text.find(marker, pos);
        std::string segment = text.substr(pos, hit == std::string::npos ? std::string::npos
                                                                        : hit - pos);
        for (const std::string& chunk : chunk_text(segment)) {
            std::vector<int> ids = encode_chunk(chunk);
            out.insert(out.end(), ids.begin(), ids.end());
        }
        if (hit == std::string::npos) break;
        out.push_back(kSep);
        pos = hit + marker.size();
    }
    return out;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
        if (id < 0 || id >= size()) throw ValidationError("decode: id out of range");
        if (id == kPad || id == kBos || id == kEos) continue;
        out += tokens_[static_cast<size_t>(id)];
    }
    return out;
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write vocabulary: " + path);
    for (const std::string& t : tokens_) out << escape_token(t) << '\n';
    if (!out) throw IoError("vocabulary write failure: " + path);
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open vocabulary: " + path);
    std::vector<std::string> tokens;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        tokens.push_back(unescape_token(line, line_no));
    }
    if (static_cast<int>(tokens.size()) < kByteBase + 256)
        throw ParseError("vocabulary: too few tokens in " + path);
    Vocabulary v;
    v.tokens_ = std::move(tokens);
    v.rebuild_match_index();
    return v;
}

std::string serialize_list(const std::vector<std::string>& items) {
    std::string out;
    for (size_t i = 0; i < items.size(); ++i) {
        if (items[i].find(Vocabulary::kSepMarker) != std::string::npos)
            throw ValidationError("serialize_list: item contains the separator marker");
        if (i) out += Vocabulary::kSepMarker;
        out += items[i];
    }
    return out;
}

std::vector<std::string> deserialize_list(const std::string& text) {
    if (text.empty()) return {};
    std::vector<std::string> out;
    const std::string marker = Vocabulary::kSepMarker;
    size_t pos = 0;
    for (;;) {
        size_t hit = text.find(marker, pos);
        if (hit == std::string::npos) {
            out.push_back(text.substr(pos));
            break;
        }
        out.push_back(text.substr(pos, hit - pos));
        pos = hit + marker.size();
    }
    return out;
}

}  // namespace hpn::mmt
