#pragma once

#include <string>
#include <utility>
#include <vector>

#include "fundus/tensor.hpp"

namespace fundus {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Single-tensor format: <path>.bin holds the raw little-endian float32 data,
// <path>.json is a {"name":..., "shape":[...]} sidecar.
void save_tensor(const std::string& path_prefix, const NamedTensor& t);
NamedTensor load_tensor(const std::string& path_prefix);

// Multi-tensor blob used by checkpoints: tensors concatenated into one .bin,
// offsets live in the caller's manifest.
struct BlobEntry {
  std::string name;
  Shape shape;
  std::int64_t offset_bytes = 0;
  std::int64_t size_bytes = 0;
};

std::vector<BlobEntry> write_blob(const std::string& bin_path,
                                  const std::vector<NamedTensor>& tensors);
// Reads entries into same-shaped tensors; throws on missing name or shape drift.
void read_blob(const std::string& bin_path, const std::vector<BlobEntry>& entries,
               std::vector<NamedTensor>& into);

}  // namespace fundus
