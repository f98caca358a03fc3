#pragma once

#include <string>
#include <vector>

#include "fundus/experiment.hpp"
#include "fundus/gradcam.hpp"
#include "fundus/metrics.hpp"

namespace fundus {
namespace cmd {

struct FixtureOptions {
  std::string out_dir;
  int per_class = 8;
  std::uint64_t seed = 0;
  bool force = false;
};

// Writes the synthetic dataset plus fixture_meta.json; refuses a non-empty
// directory unless force is set.
void run_fixture(const FixtureOptions& opts);

struct TrainOutcome {
  std::string out_dir;
  std::string checkpoint_manifest;
  double best_test_accuracy = 0.0;
  int best_epoch = 0;
  std::int64_t total_steps = 0;
  TrainingLog log;
  ClassificationReport final_report;
};

TrainOutcome run_train(const ExperimentConfig& config);

struct EvalOptions {
  std::string checkpoint_manifest;
  std::vector<DataRoot> data_override;  // empty = dataset from the snapshot
  std::string out_dir;                  // empty = alongside the checkpoint
};

struct EvalOutcome {
  ClassificationReport report;
  double accuracy = 0.0;
  double manifest_accuracy = 0.0;
};

EvalOutcome run_eval(const EvalOptions& opts);

struct GradcamOptions {
  std::string checkpoint_manifest;
  std::vector<std::string> images;
  std::string layer;  // empty = model default
  float alpha = 0.5f;
  std::string out_dir;
};

struct GradcamOutcome {
  std::vector<std::string> written_files;
};

GradcamOutcome run_gradcam(const GradcamOptions& opts);

struct AblationRow {
  ModelVariant variant = ModelVariant::kCrossAttention;
  bool failed = false;
  std::string failure;
  double best_test_accuracy_pct = 0.0;
  std::int64_t param_count = 0;
  int epochs_to_best = 0;
  double reference_accuracy_pct = 0.0;
};

struct AblateOutcome {
  std::vector<AblationRow> rows;  // sorted: accuracy desc, label asc
  std::string csv;
  std::string table;
};

// Same seed, data and protocol for every requested variant.
AblateOutcome run_ablate(const ExperimentConfig& base, std::vector<ModelVariant> variants);

}  // namespace cmd
}  // namespace fundus
