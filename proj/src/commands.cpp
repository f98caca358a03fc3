#include "fundus/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "fundus/fixture.hpp"
#include "fundus/thread_pool.hpp"

namespace fundus {
namespace cmd {

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::pair<DatasetSplit, DatasetSplit> load_from_config(const ExperimentConfig& config) {
  if (config.data_roots.empty()) {
    throw ConfigError(
        "no dataset configured; point \"data\" at one or more roots laid out as "
        "root/{train,test}/{normal,glaucoma}/*.{png,jpg,jpeg} (the fixture command "
        "generates one)");
  }
  std::vector<std::pair<std::string, Source>> roots;
  for (const auto& r : config.data_roots) roots.emplace_back(r.path, r.layout);
  return load_combined(roots);
}

}  // namespace

void run_fixture(const FixtureOptions& opts) {
  if (opts.out_dir.empty()) throw ConfigError("fixture: --out is required");
  if (fs::exists(opts.out_dir) && !fs::is_empty(opts.out_dir) && !opts.force) {
    throw ConfigError("fixture: " + opts.out_dir + " is not empty (use --force to overwrite)");
  }
  fs::create_directories(opts.out_dir);
  auto metas = write_fixture_dataset(opts.out_dir, opts.per_class, opts.seed);
  std::cout << "wrote " << metas.size() << " images under " << opts.out_dir << "\n";
}

TrainOutcome run_train(const ExperimentConfig& config) {
  set_num_threads(config.threads);
  fs::create_directories(config.out_dir);
  const nlohmann::json snapshot = config.to_json();
  write_text(fs::path(config.out_dir) / "config.json", snapshot.dump(2) + "\n");

  auto [train_split, test_split] = load_from_config(config);
  write_text(fs::path(config.out_dir) / "dataset_summary.json",
             dataset_summary(train_split, test_split).dump(2) + "\n");

  HybridModel model(config.model_config(), config.seed);
  std::cout << variant_name(config.variant) << ": " << model.param_count()
            << " trainable parameters, train " << train_split.counts.total() << " / test "
            << test_split.counts.total() << " examples\n";

  const std::string ckpt_prefix = (fs::path(config.out_dir) / "checkpoint").string();
  TrainConfig tc = config.train;
  tc.seed = config.seed;
  TrainResult tr = train(model, train_split, test_split, tc, config.augment, ckpt_prefix,
                         snapshot);

  write_text(fs::path(config.out_dir) / "training_log.csv", tr.log.to_csv());

  // final report comes from the best checkpoint, not the last epoch
  TrainOutcome outcome;
  outcome.out_dir = config.out_dir;
  outcome.checkpoint_manifest = ckpt_prefix + ".json";
  outcome.best_test_accuracy = tr.best_test_accuracy;
  outcome.best_epoch = tr.best_epoch;
  outcome.total_steps = tr.total_steps;
  outcome.log = tr.log;

  CheckpointManifest manifest = read_checkpoint_manifest(outcome.checkpoint_manifest);
  load_checkpoint_into(manifest, model);
  EvalResult ev = evaluate(model, test_split, tc.batch_size, tc.threshold);
  outcome.final_report = report(ev.cm);
  write_text(fs::path(config.out_dir) / "report.json",
             report_to_json(outcome.final_report).dump(2) + "\n");
  write_text(fs::path(config.out_dir) / "report.txt", report_to_text(outcome.final_report));

  std::printf("best test accuracy %.4f at epoch %d (%lld steps)\n", tr.best_test_accuracy,
              tr.best_epoch, static_cast<long long>(tr.total_steps));
  return outcome;
}

EvalOutcome run_eval(const EvalOptions& opts) {
  CheckpointManifest manifest = read_checkpoint_manifest(opts.checkpoint_manifest);
  ExperimentConfig config = ExperimentConfig::from_json(manifest.config);
  set_num_threads(config.threads);
  if (!opts.data_override.empty()) config.data_roots = opts.data_override;
  auto [train_split, test_split] = load_from_config(config);
  (void)train_split;

  HybridModel model(config.model_config(), config.seed);
  load_checkpoint_into(manifest, model);
  EvalResult ev = evaluate(model, test_split, config.train.batch_size, config.train.threshold);

  EvalOutcome outcome;
  outcome.report = report(ev.cm);
  outcome.accuracy = ev.accuracy;
  outcome.manifest_accuracy = manifest.test_accuracy;

  const fs::path out_dir = opts.out_dir.empty()
                               ? fs::path(opts.checkpoint_manifest).parent_path()
                               : fs::path(opts.out_dir);
  fs::create_directories(out_dir);
  write_text(out_dir / "report.json", report_to_json(outcome.report).dump(2) + "\n");
  write_text(out_dir / "report.txt", report_to_text(outcome.report));
  std::cout << report_to_text(outcome.report);
  std::printf("accuracy %.6f (checkpoint manifest: %.6f, epoch %d)\n", ev.accuracy,
              manifest.test_accuracy, manifest.epoch);
  return outcome;
}

GradcamOutcome run_gradcam(const GradcamOptions& opts) {
  if (opts.images.empty()) throw ConfigError("gradcam: at least one --image is required");
  CheckpointManifest manifest = read_checkpoint_manifest(opts.checkpoint_manifest);
  ExperimentConfig config = ExperimentConfig::from_json(manifest.config);
  set_num_threads(config.threads);
  HybridModel model(config.model_config(), config.seed);
  load_checkpoint_into(manifest, model);

  const fs::path out_dir = opts.out_dir.empty()
                               ? fs::path(opts.checkpoint_manifest).parent_path() / "gradcam"
                               : fs::path(opts.out_dir);
  fs::create_directories(out_dir);

  GradcamOutcome outcome;
  for (const auto& img_path : opts.images) {
    Tensor image = preprocess(decode_image(img_path));
    HeatMap hm = gradcam(model, image, opts.layer);

    const std::string stem = fs::path(img_path).stem().string();
    Tensor heat_rgb = overlay(hm, image, 1.f);
    Tensor blended = overlay(hm, image, opts.alpha);
    const std::string heat_file = (out_dir / (stem + "_heatmap.png")).string();
    const std::string over_file = (out_dir / (stem + "_overlay.png")).string();
    write_png(heat_file, unit_tensor_to_image(heat_rgb));
    write_png(over_file, unit_tensor_to_image(blended));

    nlohmann::json side;
    side["source"] = img_path;
    side["target_layer"] = hm.target_layer;
    side["probability"] = hm.prob;
    side["predicted_class"] = hm.predicted;
    side["predicted_label"] = hm.predicted == 1 ? "glaucoma" : "normal";
    side["all_zero"] = hm.all_zero;
    const std::string side_file = (out_dir / (stem + "_gradcam.json")).string();
    write_text(side_file, side.dump(2) + "\n");

    outcome.written_files.push_back(heat_file);
    outcome.written_files.push_back(over_file);
    outcome.written_files.push_back(side_file);
  }
  return outcome;
}

AblateOutcome run_ablate(const ExperimentConfig& base, std::vector<ModelVariant> variants) {
  if (variants.size() < 2) throw ConfigError("ablate: at least two variants required");
  set_num_threads(base.threads);
  fs::create_directories(base.out_dir);
  auto [train_split, test_split] = load_from_config(base);

  AblateOutcome outcome;
  for (ModelVariant v : variants) {
    AblationRow row;
    row.variant = v;
    row.reference_accuracy_pct = variant_reference_accuracy(v);
    try {
      ExperimentConfig config = base;
      config.variant = v;
      config.out_dir = (fs::path(base.out_dir) / variant_name(v)).string();
      fs::create_directories(config.out_dir);
      config.save_file((fs::path(config.out_dir) / "config.json").string());

      HybridModel model(config.model_config(), config.seed);
      row.param_count = model.param_count();
      TrainConfig tc = config.train;
      tc.seed = config.seed;
      const std::string prefix = (fs::path(config.out_dir) / "checkpoint").string();
      TrainResult tr = train(model, train_split, test_split, tc, config.augment, prefix,
                             config.to_json());
      write_text(fs::path(config.out_dir) / "training_log.csv", tr.log.to_csv());
      row.best_test_accuracy_pct = 100.0 * tr.best_test_accuracy;
      row.epochs_to_best = tr.best_epoch;
    } catch (const std::exception& e) {
      row.failed = true;
      row.failure = e.what();
    }
    outcome.rows.push_back(std::move(row));
  }

  std::sort(outcome.rows.begin(), outcome.rows.end(), [](const AblationRow& a, const AblationRow& b) {
    if (a.failed != b.failed) return !a.failed;  // failures sink to the bottom
    if (a.best_test_accuracy_pct != b.best_test_accuracy_pct) {
      return a.best_test_accuracy_pct > b.best_test_accuracy_pct;
    }
    return std::string(variant_label(a.variant)) < variant_label(b.variant);
  });

  std::string csv = "model_variant,accuracy_pct,param_count,epochs_to_best,reference_accuracy_pct,status\n";
  std::string table;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-55s %12s %10s %6s %10s\n", "Model Variant", "Accuracy (%)",
                "Params", "Best@", "Ref (%)");
  table += buf;
  for (const auto& r : outcome.rows) {
    if (r.failed) {
      std::snprintf(buf, sizeof(buf), "\"%s\",,,,%.2f,FAILED: %s\n", variant_label(r.variant),
                    r.reference_accuracy_pct, r.failure.c_str());
      csv += buf;
      std::snprintf(buf, sizeof(buf), "%-55s %12s %10s %6s %10.2f  FAILED\n",
                    variant_label(r.variant), "-", "-", "-", r.reference_accuracy_pct);
      table += buf;
      continue;
    }
    std::snprintf(buf, sizeof(buf), "\"%s\",%.2f,%lld,%d,%.2f,ok\n", variant_label(r.variant),
                  r.best_test_accuracy_pct, static_cast<long long>(r.param_count),
                  r.epochs_to_best, r.reference_accuracy_pct);
    csv += buf;
    std::snprintf(buf, sizeof(buf), "%-55s %12.2f %10lld %6d %10.2f\n", variant_label(r.variant),
                  r.best_test_accuracy_pct, static_cast<long long>(r.param_count),
                  r.epochs_to_best, r.reference_accuracy_pct);
    table += buf;
  }
  table += "reference column: accuracies reported at full scale, annotation only\n";
  outcome.csv = csv;
  outcome.table = table;
  write_text(fs::path(base.out_dir) / "ablation.csv", csv);
  std::cout << table;
  return outcome;
}

}  // namespace cmd
}  // namespace fundus
