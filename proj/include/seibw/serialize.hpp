#pragma once

#include <string>
#include <utility>
#include <vector>

#include "seibw/tensor.hpp"

namespace seibw {

// "SEIB" tensor container: magic "SEIB", u32 version=1, u32 record count;
// per record u32 name length, UTF-8 name, u32 rank, u32 dims[rank], raw
// little-endian IEEE-754 f32 payload. Integer fields are little-endian too.
// Shared by checkpoints, teacher-probability files and temporal datasets.

struct NamedTensor {
  std::string name;
  Tensor tensor;  // payload is f32 by format definition
};

constexpr std::uint32_t kContainerVersion = 1;

// Writes atomically (temp file in the same directory, then rename).
void write_container(const std::string& path, const std::vector<NamedTensor>& records);

// Throws FormatError on bad magic, bad version, or truncation. Never returns
// a partially parsed set.
std::vector<NamedTensor> read_container(const std::string& path);

// nullptr when absent.
const Tensor* find_record(const std::vector<NamedTensor>& records, const std::string& name);

}  // namespace seibw
