#pragma once

#include <map>
#include <string>

#include "sanas/tensor.hpp"

namespace sanas {

// Binary weight container. Layout, all integers little-endian:
//   magic "SANAS1" (6 bytes)
//   u64 tensor count
//   per tensor: u64 name length, name bytes,
//               u64 rank, u64 dims[rank],
//               f64 data[numel] (IEEE-754)
// Round trips are bit-exact.
void save_checkpoint(const std::string& path, const std::map<std::string, Tensor>& tensors);
std::map<std::string, Tensor> load_checkpoint(const std::string& path);

}  // namespace sanas
