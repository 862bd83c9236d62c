#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "kdlab/model.hpp"

namespace kdlab {

// Checkpoint layout (all integers and floats little-endian):
//
//   offset 0   8 bytes   magic "KDLABCK1"
//   offset 8   u64       manifest length M in bytes
//   offset 16  M bytes   manifest, one ASCII line per entry:
//                          <name> <rank> <d0> ... <d{rank-1}>\n
//   16 + M     f64 data  every entry's values in manifest order, row-major
//
// Files end exactly after the last value; trailing bytes are rejected.

std::string encode_checkpoint(const std::vector<NamedArray>& entries);
std::vector<NamedArray> decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedArray>& entries);
std::vector<NamedArray> load_checkpoint(const std::filesystem::path& path);

}  // namespace kdlab
