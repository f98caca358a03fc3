#pragma once

#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fundus/augment.hpp"
#include "fundus/dataset.hpp"
#include "fundus/metrics.hpp"
#include "fundus/model.hpp"
#include "fundus/serialize.hpp"

namespace fundus {

struct TrainConfig {
  float lr = 5e-4f;
  float weight_decay = 1e-4f;
  int epochs = 50;
  int batch_size = 16;
  float clip_maxnorm = 1.f;
  std::uint64_t seed = 42;
  float eta_min = 0.f;
  bool per_step_schedule = false;     // default: per-epoch, T_max = epochs
  bool decoupled_weight_decay = true;
  float threshold = 0.5f;
  bool augment_enabled = true;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Adam moments per trainable parameter, in ParamStore entry order.
struct AdamState {
  static constexpr float kBeta1 = 0.9f;
  static constexpr float kBeta2 = 0.999f;
  static constexpr float kEps = 1e-8f;

  std::vector<std::vector<float>> m, v;
  std::int64_t t = 0;

  void init(const ParamStore& store);
};

// lr(t) = eta_min + (base - eta_min) * (1 + cos(pi t / t_max)) / 2,
// with the endpoints pinned exactly; t > t_max clamps to eta_min.
double cosine_lr(std::int64_t t, double base_lr, double eta_min, std::int64_t t_max);

// Global L2 norm over all trainable gradients; rescales in place when the
// norm exceeds maxnorm and returns the applied scale.
double clip_grad_norm(const ParamStore& store, double maxnorm);
double global_grad_norm(const ParamStore& store);

// Decoupled decay multiplies parameters by (1 - lr*wd) before the Adam
// delta; the coupled variant folds wd*p into the gradient instead.
void adam_step(const ParamStore& store, AdamState& state, double lr_t, double weight_decay,
               bool decoupled = true);

struct EpochRecord {
  int epoch = 0;  // 1-based
  double lr = 0.0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double test_loss = 0.0;
  double test_accuracy = 0.0;
};

struct TrainingLog {
  std::vector<EpochRecord> records;
  std::string to_csv() const;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  ConfusionMatrix cm;
};

EvalResult evaluate(HybridModel& model, const DatasetSplit& split, int batch_size,
                    float threshold);

// checkpoint = <prefix>.json manifest + <prefix>.bin tensor blob
inline constexpr const char* kCheckpointFormatVersion = "1";

void save_checkpoint(const std::string& prefix, HybridModel& model,
                     const nlohmann::json& config_snapshot, int epoch, double test_accuracy);

struct CheckpointManifest {
  std::string format_version;
  std::string variant;
  int epoch = 0;
  double test_accuracy = 0.0;
  nlohmann::json config;  // full experiment snapshot
  std::vector<BlobEntry> tensors;
  std::string bin_path;
};

CheckpointManifest read_checkpoint_manifest(const std::string& manifest_path);
void load_checkpoint_into(const CheckpointManifest& manifest, HybridModel& model);

struct StepInfo {
  int epoch = 0;
  std::int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double clip_scale = 1.0;
  double post_clip_norm = 0.0;
};
using StepHook = std::function<void(const StepInfo&)>;

struct TrainResult {
  TrainingLog log;
  std::int64_t total_steps = 0;
  int best_epoch = 0;           // 0 = no epoch finished
  double best_test_accuracy = -1.0;
};

// Full protocol: shuffled augmented batches, BCE, clipping, Adam with the
// cosine schedule, per-epoch evaluation, best-accuracy checkpointing
// (strict improvement only). checkpoint_prefix empty = keep everything in
// memory. Aborts with NumericsError on a non-finite loss or gradient norm,
// naming epoch and step.
TrainResult train(HybridModel& model, const DatasetSplit& train_split,
                  const DatasetSplit& test_split, const TrainConfig& config,
                  const AugmentationConfig& aug, const std::string& checkpoint_prefix = "",
                  const nlohmann::json& config_snapshot = nlohmann::json::object(),
                  const StepHook& hook = nullptr);

}  // namespace fundus
