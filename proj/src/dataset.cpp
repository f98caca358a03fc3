#include "fundus/dataset.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <set>

#include "fundus/ops.hpp"
#include "fundus/rng.hpp"

namespace fundus {

namespace fs = std::filesystem;

const char* source_name(Source s) {
  switch (s) {
    case Source::kAcrima: return "ACRIMA";
    case Source::kDrishti: return "DRISHTI";
    case Source::kSynthetic: return "SYNTHETIC";
  }
  return "?";
}

Source source_from_name(const std::string& name) {
  if (name == "ACRIMA") return Source::kAcrima;
  if (name == "DRISHTI") return Source::kDrishti;
  if (name == "SYNTHETIC") return Source::kSynthetic;
  throw ConfigError("unknown dataset layout '" + name + "' (ACRIMA, DRISHTI or SYNTHETIC)");
}

Tensor preprocess(const ImageU8& raw) {
  if (raw.width < 1 || raw.height < 1) throw ContractError("preprocess: empty image");
  Tensor chw = image_to_chw(raw);
  if (raw.width != kImageSize || raw.height != kImageSize) {
    chw = ops::upsample_bilinear(chw, kImageSize, kImageSize);
  }
  return ops::scale(chw, 1.f / 255.f);
}

namespace {

bool has_image_extension(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

DatasetSplit load_split(const fs::path& root, Source layout, SplitRole role) {
  const char* split_dir = role == SplitRole::kTrain ? "train" : "test";
  DatasetSplit split;
  split.role = role;
  for (const char* cls : {"normal", "glaucoma"}) {
    const fs::path dir = root / split_dir / cls;
    if (!fs::is_directory(dir)) {
      throw ConfigError("dataset: missing class folder " + dir.string() +
                        " (expected layout root/{train,test}/{normal,glaucoma}/)");
    }
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file() && has_image_extension(entry.path())) {
        files.push_back(entry.path());
      }
    }
    if (files.empty()) throw ConfigError("dataset: empty class folder " + dir.string());
    std::sort(files.begin(), files.end());
    const int label = std::strcmp(cls, "glaucoma") == 0 ? 1 : 0;
    for (const auto& file : files) {
      LabeledExample ex;
      ex.label = label;
      ex.source = layout;
      ex.id = std::string(source_name(layout)) + "/" + cls + "/" + file.filename().string();
      try {
        ex.image = preprocess(decode_image(file.string()));
      } catch (const std::exception& e) {
        std::cerr << "warning: skipping " << file.string() << ": " << e.what() << "\n";
        ++split.skipped;
        continue;
      }
      (label == 1 ? split.counts.glaucoma : split.counts.normal)++;
      split.examples.push_back(std::move(ex));
    }
  }
  return split;
}

void check_disjoint_ids(const DatasetSplit& train, const DatasetSplit& test) {
  std::set<std::string> train_ids;
  for (const auto& ex : train.examples) train_ids.insert(ex.id);
  for (const auto& ex : test.examples) {
    if (train_ids.count(ex.id)) {
      throw ContractError("dataset: id '" + ex.id + "' appears in both train and test");
    }
  }
}

}  // namespace

std::pair<DatasetSplit, DatasetSplit> load_dataset(const std::string& root, Source layout) {
  if (!fs::is_directory(root)) throw ConfigError("dataset root does not exist: " + root);
  auto train = load_split(root, layout, SplitRole::kTrain);
  auto test = load_split(root, layout, SplitRole::kTest);
  check_disjoint_ids(train, test);
  return {std::move(train), std::move(test)};
}

std::pair<DatasetSplit, DatasetSplit> load_combined(
    const std::vector<std::pair<std::string, Source>>& roots) {
  if (roots.empty()) throw ConfigError("load_combined: no dataset roots given");
  DatasetSplit train, test;
  train.role = SplitRole::kTrain;
  test.role = SplitRole::kTest;
  for (const auto& [root, layout] : roots) {
    auto [tr, te] = load_dataset(root, layout);
    for (auto& ex : tr.examples) train.examples.push_back(std::move(ex));
    for (auto& ex : te.examples) test.examples.push_back(std::move(ex));
    train.counts.normal += tr.counts.normal;
    train.counts.glaucoma += tr.counts.glaucoma;
    train.skipped += tr.skipped;
    test.counts.normal += te.counts.normal;
    test.counts.glaucoma += te.counts.glaucoma;
    test.skipped += te.skipped;
  }
  check_disjoint_ids(train, test);
  return {std::move(train), std::move(test)};
}

std::vector<std::vector<int>> batch_plan(const DatasetSplit& split, int batch_size,
                                         std::uint64_t shuffle_seed) {
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (split.examples.empty()) throw ContractError("make_batches: empty split");
  std::vector<int> order(split.examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  if (split.role == SplitRole::kTrain) {
    Rng rng(mix_seed(shuffle_seed, "batch_shuffle"));
    rng.shuffle(order);
  }
  std::vector<std::vector<int>> plan;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
    plan.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                      order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return plan;
}

std::vector<Batch> make_batches(const DatasetSplit& split, int batch_size,
                                std::uint64_t shuffle_seed) {
  std::vector<Batch> batches;
  for (auto& idx : batch_plan(split, batch_size, shuffle_seed)) {
    Batch b;
    const int n = static_cast<int>(idx.size());
    const auto& probe = split.examples[static_cast<std::size_t>(idx[0])].image;
    const std::int64_t stride = probe.numel();
    Shape bs = probe.shape();
    bs.insert(bs.begin(), n);
    b.images = Tensor::zeros(bs);
    b.labels = Tensor::zeros({n});
    for (int i = 0; i < n; ++i) {
      const auto& ex = split.examples[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
      if (ex.image.numel() != stride) throw ShapeError("make_batches: inconsistent image shapes");
      std::memcpy(b.images.data() + i * stride, ex.image.data(),
                  static_cast<std::size_t>(stride) * sizeof(float));
      b.labels.data()[i] = static_cast<float>(ex.label);
    }
    b.indices = std::move(idx);
    batches.push_back(std::move(b));
  }
  return batches;
}

nlohmann::json dataset_summary(const DatasetSplit& train, const DatasetSplit& test) {
  nlohmann::json j;
  j["train"] = {{"normal", train.counts.normal}, {"glaucoma", train.counts.glaucoma},
                {"total", train.counts.total()}};
  j["test"] = {{"normal", test.counts.normal}, {"glaucoma", test.counts.glaucoma},
               {"total", test.counts.total()}};
  j["overall"] = train.counts.total() + test.counts.total();
  if (train.skipped + test.skipped > 0) j["skipped"] = train.skipped + test.skipped;
  return j;
}

}  // namespace fundus
