#pragma once

#include <map>
#include <string>
#include <vector>

#include "autodiff.hpp"

namespace hpn::nn {

// Flat binary container of named float64 arrays, little-endian:
//   magic "HPNCKPT1",
//   then per record: u32 name length, name bytes, u32 rank, u32 dims..., f64 data.
void save_checkpoint(const std::string& path,
                     const std::vector<const Param*>& params);
std::map<std::string, Tensor> load_checkpoint(const std::string& path);

// Loads by name into existing params; throws on missing names or shape drift.
void load_params(const std::map<std::string, Tensor>& store, std::vector<Param*> params);

// FNV-1a over a tensor's raw bytes; used for freeze checks.
uint64_t tensor_hash(const Tensor& t);
// Combined hash over a named subset (sorted by name for stability).
uint64_t params_hash(const std::vector<const Param*>& params);

}  // namespace hpn::nn
