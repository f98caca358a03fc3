#include "fundus/serialize.hpp"

#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

namespace fundus {

namespace {

// Buffers are written as raw float32. The build targets little-endian
// hosts; a big-endian port would need byte swaps here and nowhere else.
void write_floats(std::ofstream& out, const float* data, std::int64_t count) {
  out.write(reinterpret_cast<const char*>(data),
            static_cast<std::streamsize>(count * static_cast<std::int64_t>(sizeof(float))));
}

void read_floats(std::ifstream& in, float* data, std::int64_t count) {
  in.read(reinterpret_cast<char*>(data),
          static_cast<std::streamsize>(count * static_cast<std::int64_t>(sizeof(float))));
  if (!in) throw std::runtime_error("tensor blob: short read");
}

}  // namespace

void save_tensor(const std::string& path_prefix, const NamedTensor& t) {
  std::ofstream bin(path_prefix + ".bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw std::runtime_error("cannot open " + path_prefix + ".bin for writing");
  write_floats(bin, t.tensor.data(), t.tensor.numel());
  nlohmann::json j;
  j["name"] = t.name;
  j["shape"] = t.tensor.shape();
  std::ofstream side(path_prefix + ".json", std::ios::trunc);
  side << j.dump(2) << "\n";
}

NamedTensor load_tensor(const std::string& path_prefix) {
  std::ifstream side(path_prefix + ".json");
  if (!side) throw std::runtime_error("cannot open " + path_prefix + ".json");
  nlohmann::json j;
  side >> j;
  NamedTensor t;
  t.name = j.at("name").get<std::string>();
  Shape shape = j.at("shape").get<Shape>();
  t.tensor = Tensor::zeros(shape);
  std::ifstream bin(path_prefix + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open " + path_prefix + ".bin");
  read_floats(bin, t.tensor.data(), t.tensor.numel());
  return t;
}

std::vector<BlobEntry> write_blob(const std::string& bin_path,
                                  const std::vector<NamedTensor>& tensors) {
  std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
  if (!bin) throw std::runtime_error("cannot open " + bin_path + " for writing");
  std::vector<BlobEntry> entries;
  entries.reserve(tensors.size());
  std::int64_t offset = 0;
  for (const auto& t : tensors) {
    BlobEntry e;
    e.name = t.name;
    e.shape = t.tensor.shape();
    e.offset_bytes = offset;
    e.size_bytes = t.tensor.numel() * static_cast<std::int64_t>(sizeof(float));
    write_floats(bin, t.tensor.data(), t.tensor.numel());
    offset += e.size_bytes;
    entries.push_back(std::move(e));
  }
  return entries;
}

void read_blob(const std::string& bin_path, const std::vector<BlobEntry>& entries,
               std::vector<NamedTensor>& into) {
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open " + bin_path);
  for (auto& target : into) {
    const BlobEntry* found = nullptr;
    for (const auto& e : entries) {
      if (e.name == target.name) {
        found = &e;
        break;
      }
    }
    if (!found) throw std::runtime_error("checkpoint missing tensor '" + target.name + "'");
    if (found->shape != target.tensor.shape()) {
      throw std::runtime_error("checkpoint tensor '" + target.name + "' has shape " +
                               shape_str(found->shape) + ", model expects " +
                               shape_str(target.tensor.shape()));
    }
    bin.seekg(found->offset_bytes);
    read_floats(bin, target.tensor.data(), target.tensor.numel());
  }
}

}  // namespace fundus
