#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fundus/augment.hpp"
#include "fundus/model.hpp"
#include "fundus/train.hpp"

namespace fundus {

struct DataRoot {
  std::string path;
  Source layout = Source::kSynthetic;
};

// One experiment = one JSON document. Every field has a default, and the
// training defaults are the published protocol constants, so an empty
// config trains the proposed variant with the stock recipe.
struct ExperimentConfig {
  std::uint64_t seed = 42;
  std::string out_dir = "runs/exp";
  int threads = 1;
  ModelVariant variant = ModelVariant::kCrossAttention;
  std::string cnn_preset = "desk";
  std::string vit_preset = "desk";
  CnnConfig cnn = CnnConfig::desk();
  ViTConfig vit = ViTConfig::desk();
  FusionConfig fusion;
  TrainConfig train;
  AugmentationConfig augment;
  std::vector<DataRoot> data_roots;

  ModelConfig model_config() const;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load_file(const std::string& path);
  void save_file(const std::string& path) const;
};

CnnConfig cnn_preset_by_name(const std::string& name);
ViTConfig vit_preset_by_name(const std::string& name);

}  // namespace fundus
