#include "fundus/gradcam.hpp"

#include <algorithm>
#include <cmath>

#include "fundus/tape.hpp"

namespace fundus {

Tensor gradcam_combine(const Tensor& activations, const Tensor& grads, bool* all_zero) {
  if (activations.ndim() != 3 || grads.shape() != activations.shape()) {
    throw ShapeError("gradcam_combine: expected matching [K,H,W] tensors");
  }
  const int k = activations.dim(0), h = activations.dim(1), w = activations.dim(2);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  Tensor out = Tensor::zeros({h, w});
  float* po = out.data();
  for (int c = 0; c < k; ++c) {
    const float* a = activations.data() + c * plane;
    const float* g = grads.data() + c * plane;
    double alpha = 0.0;
    for (std::int64_t i = 0; i < plane; ++i) alpha += g[i];
    const float af = static_cast<float>(alpha / static_cast<double>(plane));
    for (std::int64_t i = 0; i < plane; ++i) po[i] += af * a[i];
  }
  float peak = 0.f;
  for (std::int64_t i = 0; i < plane; ++i) {
    po[i] = std::max(0.f, po[i]);  // ReLU
    peak = std::max(peak, po[i]);
  }
  if (peak > 0.f) {
    for (std::int64_t i = 0; i < plane; ++i) po[i] /= peak;
    if (all_zero) *all_zero = false;
  } else {
    if (all_zero) *all_zero = true;
  }
  return out;
}

HeatMap gradcam(HybridModel& model, const Tensor& image, const std::string& target_layer) {
  if (image.ndim() != 3 || image.dim(0) != 3) {
    throw ShapeError("gradcam: image must be [3,S,S]");
  }
  std::string layer = target_layer.empty() ? model.default_gradcam_layer() : target_layer;
  const auto valid = model.gradcam_layers();
  if (std::find(valid.begin(), valid.end(), layer) == valid.end()) {
    std::string msg = "gradcam: unknown layer '" + layer + "'; valid layers:";
    for (const auto& v : valid) msg += " " + v;
    throw ConfigError(msg);
  }

  const int s = image.dim(1);
  Tensor batch = image.reshaped({1, 3, s, image.dim(2)});
  Tape tape;
  ForwardResult fwd;
  {
    TapeScope scope(tape);
    fwd = model.forward(batch, /*training=*/false);
    tape.backward(fwd.logit);  // pre-sigmoid score for the glaucoma class
  }

  auto it = fwd.taps.find(layer);
  if (it == fwd.taps.end()) throw ConfigError("gradcam: layer '" + layer + "' was not recorded");
  Tensor act = it->second;
  Tensor acts3, grads3;
  if (act.ndim() == 4) {
    // [1,K,Hf,Wf]
    acts3 = act.reshaped({act.dim(1), act.dim(2), act.dim(3)}).clone();
    grads3 = Tensor::from_data(acts3.shape(), act.grad_vec());
  } else if (act.ndim() == 3) {
    // token grid [1,T,D] -> [D,g,g]
    const int t = act.dim(1), d = act.dim(2);
    const int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(t))));
    if (g * g != t) throw ShapeError("gradcam: token count is not a square grid");
    acts3 = Tensor::zeros({d, g, g});
    grads3 = Tensor::zeros({d, g, g});
    const std::vector<float> gv = act.grad_vec();
    for (int ti = 0; ti < t; ++ti) {
      for (int di = 0; di < d; ++di) {
        const std::int64_t src = static_cast<std::int64_t>(ti) * d + di;
        const std::int64_t dst = static_cast<std::int64_t>(di) * t + ti;
        acts3.data()[dst] = act.data()[src];
        grads3.data()[dst] = gv[static_cast<std::size_t>(src)];
      }
    }
  } else {
    throw ShapeError("gradcam: unsupported activation rank for layer '" + layer + "'");
  }

  HeatMap hm;
  hm.target_layer = layer;
  hm.values = gradcam_combine(acts3, grads3, &hm.all_zero);
  const int hf = hm.values.dim(0), wf = hm.values.dim(1);
  Tensor up = ops::upsample_bilinear(hm.values.reshaped({1, hf, wf}), s, s);
  hm.upsampled = up.reshaped({s, s});
  hm.logit = fwd.logit.item();
  hm.prob = fwd.prob.item();
  hm.predicted = hm.prob >= 0.5f ? 1 : 0;
  return hm;
}

std::array<float, 3> colormap_entry(int index) {
  index = std::min(255, std::max(0, index));
  const float v = 4.f * static_cast<float>(index) / 255.f;
  auto clamp01 = [](float x) { return std::min(1.f, std::max(0.f, x)); };
  return {clamp01(std::min(v - 1.5f, -v + 4.5f)),
          clamp01(std::min(v - 0.5f, -v + 3.5f)),
          clamp01(std::min(v + 0.5f, -v + 2.5f))};
}

Tensor overlay(const HeatMap& map, const Tensor& original, float alpha) {
  if (original.ndim() != 3 || original.dim(0) != 3) {
    throw ShapeError("overlay: original must be [3,S,S]");
  }
  if (alpha < 0.f || alpha > 1.f) throw ConfigError("overlay: alpha outside [0,1]");
  const int h = original.dim(1), w = original.dim(2);
  if (map.upsampled.dim(0) != h || map.upsampled.dim(1) != w) {
    throw ShapeError("overlay: heat map resolution does not match the image");
  }
  Tensor out = Tensor::zeros(original.shape());
  const float* heat = map.upsampled.data();
  const float* src = original.data();
  float* dst = out.data();
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  for (std::int64_t i = 0; i < plane; ++i) {
    const auto rgb = colormap_entry(static_cast<int>(std::lround(
        std::min(1.f, std::max(0.f, heat[i])) * 255.f)));
    for (int c = 0; c < 3; ++c) {
      dst[c * plane + i] = alpha * rgb[static_cast<std::size_t>(c)] + (1.f - alpha) * src[c * plane + i];
    }
  }
  return out;
}

}  // namespace fundus
