#pragma once

#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fundus/image.hpp"
#include "fundus/tensor.hpp"

namespace fundus {

enum class Source { kAcrima, kDrishti, kSynthetic };
enum class SplitRole { kTrain, kTest };

const char* source_name(Source s);
Source source_from_name(const std::string& name);

struct LabeledExample {
  Tensor image;  // [3,224,224], values in [0,1]
  int label = 0;  // 1 = glaucoma, 0 = normal
  Source source = Source::kSynthetic;
  std::string id;
};

struct ClassCounts {
  int normal = 0;
  int glaucoma = 0;
  int total() const { return normal + glaucoma; }
};

struct DatasetSplit {
  std::vector<LabeledExample> examples;
  SplitRole role = SplitRole::kTrain;
  ClassCounts counts;
  int skipped = 0;  // undecodable files
};

inline constexpr int kImageSize = 224;

// bilinear resize to 224x224, divide by 255; non-RGB inputs were already
// normalized to RGB by the decoder
Tensor preprocess(const ImageU8& raw);

// Layout: root/{train,test}/{normal,glaucoma}/*.{png,jpg,jpeg}.
// Undecodable files are skipped with a warning; an empty or missing class
// folder is a hard error.
std::pair<DatasetSplit, DatasetSplit> load_dataset(const std::string& root, Source layout);

// Concatenates several loaded datasets (ACRIMA + Drishti style), keeping
// per-split roles and re-checking id uniqueness.
std::pair<DatasetSplit, DatasetSplit> load_combined(
    const std::vector<std::pair<std::string, Source>>& roots);

struct Batch {
  Tensor images;  // [B,3,224,224]
  Tensor labels;  // [B]
  std::vector<int> indices;  // positions in the split's example list
};

// Every example exactly once; TRAIN order is a seeded permutation, TEST is
// file order. The last batch may be short.
std::vector<Batch> make_batches(const DatasetSplit& split, int batch_size,
                                std::uint64_t shuffle_seed);

// Index plan only (the training loop materializes with augmentation).
std::vector<std::vector<int>> batch_plan(const DatasetSplit& split, int batch_size,
                                         std::uint64_t shuffle_seed);

nlohmann::json dataset_summary(const DatasetSplit& train, const DatasetSplit& test);

}  // namespace fundus
