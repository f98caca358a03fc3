#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include "fundus/commands.hpp"

namespace {

// "path" or "path:LAYOUT"
fundus::DataRoot parse_data_root(const std::string& spec) {
  fundus::DataRoot root;
  const auto colon = spec.find_last_of(':');
  if (colon != std::string::npos && colon > 1) {  // skip windows-style drive letters
    root.path = spec.substr(0, colon);
    root.layout = fundus::source_from_name(spec.substr(colon + 1));
  } else {
    root.path = spec;
    root.layout = fundus::Source::kSynthetic;
  }
  return root;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hybrid CNN/ViT glaucoma screening toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::int64_t seed = -1;
  int threads = 0;
  bool force = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config JSON");
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--seed", seed, "seed override");
    sub->add_option("--threads", threads, "kernel threads (0 = all cores)");
  };

  // fixture
  auto* fixture = app.add_subcommand("fixture", "generate a synthetic fundus dataset");
  int per_class = 8;
  fixture->add_option("--per-class", per_class, "images per class per split")
      ->check(CLI::PositiveNumber);
  fixture->add_flag("--force", force, "overwrite a non-empty directory");
  add_common(fixture);

  // train
  auto* train_cmd = app.add_subcommand("train", "train one variant, logging and checkpointing");
  std::vector<std::string> data_specs;
  std::string variant_override;
  int epochs_override = 0;
  train_cmd->add_option("--data", data_specs, "dataset root, optionally root:LAYOUT");
  train_cmd->add_option("--variant", variant_override,
                        "CROSS_ATTENTION, CONCAT, SELF_ATTENTION, VIT_ONLY or CNN_ONLY");
  train_cmd->add_option("--epochs", epochs_override, "epoch override");
  add_common(train_cmd);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string checkpoint;
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint manifest (.json)")->required();
  eval_cmd->add_option("--data", data_specs, "dataset override, root[:LAYOUT]");
  add_common(eval_cmd);

  // gradcam
  auto* gc_cmd = app.add_subcommand("gradcam", "export heat maps for images");
  std::vector<std::string> images;
  std::string layer;
  float alpha = 0.5f;
  gc_cmd->add_option("--checkpoint", checkpoint, "checkpoint manifest (.json)")->required();
  gc_cmd->add_option("--image", images, "input image(s)")->required();
  gc_cmd->add_option("--layer", layer, "target layer name");
  gc_cmd->add_option("--alpha", alpha, "overlay blend factor")->check(CLI::Range(0.f, 1.f));
  add_common(gc_cmd);

  // ablate
  auto* ablate_cmd = app.add_subcommand("ablate", "train and compare model variants");
  std::vector<std::string> variant_names;
  ablate_cmd->add_option("--data", data_specs, "dataset root, optionally root:LAYOUT");
  ablate_cmd->add_option("--variants", variant_names, "subset of variants (default: all five)");
  ablate_cmd->add_option("--epochs", epochs_override, "epoch override");
  add_common(ablate_cmd);

  CLI11_PARSE(app, argc, argv);

  try {
    auto load_config = [&]() {
      fundus::ExperimentConfig cfg = config_path.empty()
                                         ? fundus::ExperimentConfig{}
                                         : fundus::ExperimentConfig::load_file(config_path);
      if (!out_dir.empty()) cfg.out_dir = out_dir;
      if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
      if (threads > 0) cfg.threads = threads;
      if (threads < 0) cfg.threads = 0;
      if (!data_specs.empty()) {
        cfg.data_roots.clear();
        for (const auto& s : data_specs) cfg.data_roots.push_back(parse_data_root(s));
      }
      if (!variant_override.empty()) cfg.variant = fundus::variant_from_name(variant_override);
      if (epochs_override > 0) cfg.train.epochs = epochs_override;
      return cfg;
    };

    if (fixture->parsed()) {
      fundus::cmd::FixtureOptions opts;
      opts.out_dir = out_dir;
      opts.per_class = per_class;
      opts.seed = seed >= 0 ? static_cast<std::uint64_t>(seed) : 0;
      opts.force = force;
      fundus::cmd::run_fixture(opts);
    } else if (train_cmd->parsed()) {
      fundus::cmd::run_train(load_config());
    } else if (eval_cmd->parsed()) {
      fundus::cmd::EvalOptions opts;
      opts.checkpoint_manifest = checkpoint;
      opts.out_dir = out_dir;
      for (const auto& s : data_specs) opts.data_override.push_back(parse_data_root(s));
      fundus::cmd::run_eval(opts);
    } else if (gc_cmd->parsed()) {
      fundus::cmd::GradcamOptions opts;
      opts.checkpoint_manifest = checkpoint;
      opts.images = images;
      opts.layer = layer;
      opts.alpha = alpha;
      opts.out_dir = out_dir;
      fundus::cmd::GradcamOutcome res = fundus::cmd::run_gradcam(opts);
      std::cout << "wrote " << res.written_files.size() << " files\n";
    } else if (ablate_cmd->parsed()) {
      std::vector<fundus::ModelVariant> variants;
      if (variant_names.empty()) {
        variants = fundus::all_variants();
      } else {
        for (const auto& n : variant_names) variants.push_back(fundus::variant_from_name(n));
      }
      fundus::cmd::run_ablate(load_config(), variants);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
