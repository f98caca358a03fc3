#pragma once

#include <nlohmann/json.hpp>

#include "fundus/dataset.hpp"
#include "fundus/rng.hpp"

namespace fundus {

// Transform magnitudes. Zero deltas / unit ranges mean "skip the transform",
// so the all-identity config is bit-exact passthrough.
struct AugmentationConfig {
  float brightness = 0.2f;
  float contrast = 0.2f;
  float saturation = 0.2f;
  float hflip_prob = 0.5f;
  float rotation_deg = 15.f;
  float translate_frac = 0.05f;
  float scale_min = 0.9f;
  float scale_max = 1.1f;
  int blur_kernel = 3;
  float blur_sigma_min = 0.1f;
  float blur_sigma_max = 1.5f;
  float crop_scale_min = 0.8f;
  float crop_scale_max = 1.0f;
  std::uint64_t seed = 0;

  static AugmentationConfig identity();
  void validate() const;
};

void to_json(nlohmann::json& j, const AugmentationConfig& c);
void from_json(const nlohmann::json& j, AugmentationConfig& c);

// Deterministic given the rng state; preserves shape and label, output
// clamped to [0,1].
LabeledExample augment(const LabeledExample& example, Rng& rng, const AugmentationConfig& config);

}  // namespace fundus
