#pragma once

#include <map>
#include <string>
#include <vector>

#include "common.hpp"

namespace hpn::mmt {

// Byte-level BPE vocabulary with reserved special ids below 16:
// pad/bos/eos/sep plus the five task tags. Byte tokens occupy [16, 272);
// learned merges follow. Encoding is lossless on arbitrary byte strings.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kSep = 3;
    static constexpr int kTagCaption = 4;
    static constexpr int kTagAxis = 5;
    static constexpr int kTagSeries = 6;
    static constexpr int kTagCategorical = 7;
    static constexpr int kTagData = 8;
    static constexpr int kSpecialCount = 16;
    static constexpr int kByteBase = kSpecialCount;
    static constexpr const char* kSepMarker = "<SEP>";

    Vocabulary();  // bytes + specials only

    static Vocabulary train(const std::vector<std::string>& corpus, int merges);

    // <SEP> markers in the text map to the SEP id; everything else is
    // greedy longest-match over the learned inventory (bytes as fallback)
    std::vector<int> encode(const std::string& text) const;
    // inverse of encode; pad/bos/eos vanish, SEP becomes its marker string
    std::string decode(const std::vector<int>& ids) const;

    int size() const { return static_cast<int>(tokens_.size()); }
    const std::string& token_string(int id) const {
        return tokens_[static_cast<size_t>(id)];
    }

    // one token per line, specials first, non-printable bytes \xNN-escaped
    void save(const std::string& path) const;
    static Vocabulary load(const std::string& path);

private:
    std::vector<int> encode_chunk(const std::string& chunk) const;
    void rebuild_match_index();

    std::vector<std::string> tokens_;  // id -> byte string
    // greedy longest-match index over non-special tokens; encoding depends
    // only on the token inventory, so a saved vocabulary reloads exactly
    std::map<std::string, int> match_ids_;
    size_t max_token_len_ = 1;
};

// Join/split phrase lists with the <SEP> marker. Items containing the marker
// are rejected. The empty string decodes to the empty list, so a list holding
// one empty item is not representable.
std::string serialize_list(const std::vector<std::string>& items);
std::vector<std::string> deserialize_list(const std::string& text);

}  // namespace hpn::mmt
