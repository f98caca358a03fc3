#pragma once

#include <array>
#include <string>

#include "fundus/model.hpp"

namespace fundus {

struct HeatMap {
  Tensor values;     // [Hf,Wf], max-normalized to peak 1 (all zeros when flagged)
  Tensor upsampled;  // bilinear, image resolution
  std::string target_layer;
  bool all_zero = false;  // gradients vanished at the layer; left unnormalized
  float logit = 0.f;
  float prob = 0.f;
  int predicted = 0;
};

// Channel-weighted activation map: weights are spatial means of
// d(logit)/d(activation), the combined map is ReLU'd then max-normalized.
// Exposed separately so the arithmetic can be checked against hand-set
// activations/gradients.
Tensor gradcam_combine(const Tensor& activations, const Tensor& grads, bool* all_zero);

// One private backward pass from the pre-sigmoid glaucoma logit. image is
// [3,S,S]; the default layer is the last conv stage (or the patch-token
// grid for the ViT-only variant). Unknown names raise an error listing the
// valid layers.
HeatMap gradcam(HybridModel& model, const Tensor& image, const std::string& target_layer = "");

// alpha * colormap(heat) + (1-alpha) * original, as [3,S,S] in [0,1]
Tensor overlay(const HeatMap& map, const Tensor& original, float alpha);

// fixed 256-entry blue-to-red table (values in [0,1])
std::array<float, 3> colormap_entry(int index);

}  // namespace fundus
