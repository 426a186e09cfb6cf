#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "capdet/tensor.hpp"

namespace capdet {

// CAPDET-TENSORS v1: header line "CAPDET-TENSORS v1\n", then per tensor:
//   name length (u64 LE), name bytes (UTF-8),
//   rank (u64 LE), dims (u64 LE each),
//   data (float32 LE, row-major).
// Round-trips byte-exactly.
void write_tensors(std::ostream& os,
                   const std::vector<std::pair<std::string, Tensor>>& tensors);
std::vector<std::pair<std::string, Tensor>> read_tensors(std::istream& is);

void save_tensors(const std::string& path,
                  const std::vector<std::pair<std::string, Tensor>>& tensors);
std::vector<std::pair<std::string, Tensor>> load_tensors(const std::string& path);

}  // namespace capdet
