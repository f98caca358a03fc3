#include "fundus/augment.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "fundus/ops.hpp"

namespace fundus {

AugmentationConfig AugmentationConfig::identity() {
  AugmentationConfig c;
  c.brightness = c.contrast = c.saturation = 0.f;
  c.hflip_prob = 0.f;
  c.rotation_deg = 0.f;
  c.translate_frac = 0.f;
  c.scale_min = c.scale_max = 1.f;
  c.blur_kernel = 0;
  c.blur_sigma_min = c.blur_sigma_max = 0.f;
  c.crop_scale_min = c.crop_scale_max = 1.f;
  return c;
}

void AugmentationConfig::validate() const {
  if (hflip_prob < 0.f || hflip_prob > 1.f) throw ConfigError("augment: hflip_prob outside [0,1]");
  if (brightness < 0.f || contrast < 0.f || saturation < 0.f) {
    throw ConfigError("augment: jitter strengths must be non-negative");
  }
  if (brightness >= 1.f) throw ConfigError("augment: brightness delta must stay below 1");
  if (scale_min <= 0.f || scale_max < scale_min) throw ConfigError("augment: bad scale range");
  if (crop_scale_min <= 0.f || crop_scale_max < crop_scale_min || crop_scale_max > 4.f) {
    throw ConfigError("augment: bad crop scale range");
  }
  if (blur_kernel > 1 && blur_kernel % 2 == 0) throw ConfigError("augment: blur kernel must be odd");
  if (blur_sigma_min < 0.f || blur_sigma_max < blur_sigma_min) {
    throw ConfigError("augment: bad blur sigma range");
  }
}

void to_json(nlohmann::json& j, const AugmentationConfig& c) {
  j = nlohmann::json{{"brightness", c.brightness},
                     {"contrast", c.contrast},
                     {"saturation", c.saturation},
                     {"hflip_prob", c.hflip_prob},
                     {"rotation_deg", c.rotation_deg},
                     {"translate_frac", c.translate_frac},
                     {"scale_min", c.scale_min},
                     {"scale_max", c.scale_max},
                     {"blur_kernel", c.blur_kernel},
                     {"blur_sigma_min", c.blur_sigma_min},
                     {"blur_sigma_max", c.blur_sigma_max},
                     {"crop_scale_min", c.crop_scale_min},
                     {"crop_scale_max", c.crop_scale_max}};
}

void from_json(const nlohmann::json& j, AugmentationConfig& c) {
  c = AugmentationConfig{};
  c.brightness = j.value("brightness", c.brightness);
  c.contrast = j.value("contrast", c.contrast);
  c.saturation = j.value("saturation", c.saturation);
  c.hflip_prob = j.value("hflip_prob", c.hflip_prob);
  c.rotation_deg = j.value("rotation_deg", c.rotation_deg);
  c.translate_frac = j.value("translate_frac", c.translate_frac);
  c.scale_min = j.value("scale_min", c.scale_min);
  c.scale_max = j.value("scale_max", c.scale_max);
  c.blur_kernel = j.value("blur_kernel", c.blur_kernel);
  c.blur_sigma_min = j.value("blur_sigma_min", c.blur_sigma_min);
  c.blur_sigma_max = j.value("blur_sigma_max", c.blur_sigma_max);
  c.crop_scale_min = j.value("crop_scale_min", c.crop_scale_min);
  c.crop_scale_max = j.value("crop_scale_max", c.crop_scale_max);
}

namespace {

constexpr float kPi = 3.14159265358979323846f;

void clamp01(Tensor& t) {
  float* p = t.data();
  for (std::int64_t i = 0; i < t.numel(); ++i) p[i] = std::min(1.f, std::max(0.f, p[i]));
}

void color_jitter(Tensor& img, Rng& rng, const AugmentationConfig& c) {
  const std::int64_t plane = static_cast<std::int64_t>(img.dim(1)) * img.dim(2);
  float* p = img.data();
  if (c.brightness > 0.f) {
    const float f = static_cast<float>(rng.uniform(1.0 - c.brightness, 1.0 + c.brightness));
    for (std::int64_t i = 0; i < img.numel(); ++i) p[i] *= f;
  }
  if (c.contrast > 0.f) {
    const float f = static_cast<float>(rng.uniform(1.0 - c.contrast, 1.0 + c.contrast));
    double gray = 0.0;
    for (std::int64_t i = 0; i < plane; ++i) {
      gray += 0.299 * p[i] + 0.587 * p[plane + i] + 0.114 * p[2 * plane + i];
    }
    const float m = static_cast<float>(gray / static_cast<double>(plane));
    for (std::int64_t i = 0; i < img.numel(); ++i) p[i] = f * p[i] + (1.f - f) * m;
  }
  if (c.saturation > 0.f) {
    const float f = static_cast<float>(rng.uniform(1.0 - c.saturation, 1.0 + c.saturation));
    for (std::int64_t i = 0; i < plane; ++i) {
      const float g =
          0.299f * p[i] + 0.587f * p[plane + i] + 0.114f * p[2 * plane + i];
      p[i] = f * p[i] + (1.f - f) * g;
      p[plane + i] = f * p[plane + i] + (1.f - f) * g;
      p[2 * plane + i] = f * p[2 * plane + i] + (1.f - f) * g;
    }
  }
  if (c.brightness > 0.f || c.contrast > 0.f || c.saturation > 0.f) clamp01(img);
}

void hflip(Tensor& img) {
  const int h = img.dim(1), w = img.dim(2);
  float* p = img.data();
  for (int ch = 0; ch < 3; ++ch) {
    float* pl = p + static_cast<std::int64_t>(ch) * h * w;
    for (int y = 0; y < h; ++y) {
      float* row = pl + static_cast<std::int64_t>(y) * w;
      for (int x = 0; x < w / 2; ++x) std::swap(row[x], row[w - 1 - x]);
    }
  }
}

float sample_bilinear(const float* plane, int h, int w, float sy, float sx) {
  if (sy < -0.5f || sy > static_cast<float>(h) - 0.5f || sx < -0.5f ||
      sx > static_cast<float>(w) - 0.5f) {
    return 0.f;  // outside: zero fill
  }
  sy = std::min(std::max(sy, 0.f), static_cast<float>(h - 1));
  sx = std::min(std::max(sx, 0.f), static_cast<float>(w - 1));
  const int y0 = static_cast<int>(sy);
  const int x0 = static_cast<int>(sx);
  const int y1 = std::min(y0 + 1, h - 1);
  const int x1 = std::min(x0 + 1, w - 1);
  const float wy = sy - static_cast<float>(y0);
  const float wx = sx - static_cast<float>(x0);
  const float top = plane[y0 * w + x0] + (plane[y0 * w + x1] - plane[y0 * w + x0]) * wx;
  const float bot = plane[y1 * w + x0] + (plane[y1 * w + x1] - plane[y1 * w + x0]) * wx;
  return top + (bot - top) * wy;
}

void affine(Tensor& img, Rng& rng, const AugmentationConfig& c) {
  const bool rotate = c.rotation_deg > 0.f;
  const bool translate = c.translate_frac > 0.f;
  const bool rescale = !(c.scale_min == 1.f && c.scale_max == 1.f);
  if (!rotate && !translate && !rescale) return;
  const int h = img.dim(1), w = img.dim(2);
  const float theta =
      rotate ? static_cast<float>(rng.uniform(-c.rotation_deg, c.rotation_deg)) * kPi / 180.f : 0.f;
  const float tx = translate
                       ? static_cast<float>(rng.uniform(-c.translate_frac, c.translate_frac)) * w
                       : 0.f;
  const float ty = translate
                       ? static_cast<float>(rng.uniform(-c.translate_frac, c.translate_frac)) * h
                       : 0.f;
  const float s = rescale ? static_cast<float>(rng.uniform(c.scale_min, c.scale_max)) : 1.f;
  const float cy = (static_cast<float>(h) - 1.f) / 2.f;
  const float cx = (static_cast<float>(w) - 1.f) / 2.f;
  const float cos_t = std::cos(theta), sin_t = std::sin(theta);
  Tensor src = img.clone();
  float* dst = img.data();
  for (int ch = 0; ch < 3; ++ch) {
    const float* pl = src.data() + static_cast<std::int64_t>(ch) * h * w;
    float* ol = dst + static_cast<std::int64_t>(ch) * h * w;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        // invert: un-translate, un-scale, un-rotate around the center
        const float px = (static_cast<float>(x) - cx - tx) / s;
        const float py = (static_cast<float>(y) - cy - ty) / s;
        const float sx = cos_t * px + sin_t * py + cx;
        const float sy = -sin_t * px + cos_t * py + cy;
        ol[y * w + x] = sample_bilinear(pl, h, w, sy, sx);
      }
    }
  }
}

void gaussian_blur(Tensor& img, Rng& rng, const AugmentationConfig& c) {
  if (c.blur_kernel < 3 || c.blur_sigma_max <= 0.f) return;
  const float sigma = c.blur_sigma_min == c.blur_sigma_max
                          ? c.blur_sigma_min
                          : static_cast<float>(rng.uniform(c.blur_sigma_min, c.blur_sigma_max));
  if (sigma <= 0.f) return;
  const int radius = c.blur_kernel / 2;
  std::vector<float> k(static_cast<std::size_t>(c.blur_kernel));
  double norm = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = static_cast<float>(v);
    norm += v;
  }
  for (auto& v : k) v = static_cast<float>(v / norm);
  const int h = img.dim(1), w = img.dim(2);
  Tensor tmp = Tensor::zeros(img.shape());
  // horizontal then vertical, edge clamped
  for (int ch = 0; ch < 3; ++ch) {
    const float* pl = img.data() + static_cast<std::int64_t>(ch) * h * w;
    float* tl = tmp.data() + static_cast<std::int64_t>(ch) * h * w;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        float acc = 0.f;
        for (int i = -radius; i <= radius; ++i) {
          const int xi = std::min(w - 1, std::max(0, x + i));
          acc += pl[y * w + xi] * k[static_cast<std::size_t>(i + radius)];
        }
        tl[y * w + x] = acc;
      }
    }
  }
  for (int ch = 0; ch < 3; ++ch) {
    const float* tl = tmp.data() + static_cast<std::int64_t>(ch) * h * w;
    float* pl = img.data() + static_cast<std::int64_t>(ch) * h * w;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        float acc = 0.f;
        for (int i = -radius; i <= radius; ++i) {
          const int yi = std::min(h - 1, std::max(0, y + i));
          acc += tl[yi * w + x] * k[static_cast<std::size_t>(i + radius)];
        }
        pl[y * w + x] = acc;
      }
    }
  }
}

void random_resized_crop(Tensor& img, Rng& rng, const AugmentationConfig& c) {
  if (c.crop_scale_min == 1.f && c.crop_scale_max == 1.f) return;
  const int h = img.dim(1), w = img.dim(2);
  int side = 0, top = 0, left = 0;
  bool ok = false;
  for (int attempt = 0; attempt < 10 && !ok; ++attempt) {
    const double area = rng.uniform(c.crop_scale_min, c.crop_scale_max);
    side = static_cast<int>(std::lround(std::sqrt(area) * h));
    if (side < 1 || side > h || side > w) continue;
    top = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(h - side + 1)));
    left = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(w - side + 1)));
    ok = true;
  }
  if (!ok) return;  // fall back to identity
  if (side == h && side == w) return;
  Tensor crop = Tensor::zeros({3, side, side});
  for (int ch = 0; ch < 3; ++ch) {
    const float* pl = img.data() + static_cast<std::int64_t>(ch) * h * w;
    float* cl = crop.data() + static_cast<std::int64_t>(ch) * side * side;
    for (int y = 0; y < side; ++y) {
      std::memcpy(cl + static_cast<std::int64_t>(y) * side,
                  pl + static_cast<std::int64_t>(top + y) * w + left,
                  static_cast<std::size_t>(side) * sizeof(float));
    }
  }
  Tensor resized = ops::upsample_bilinear(crop, h, w);
  std::memcpy(img.data(), resized.data(), static_cast<std::size_t>(img.numel()) * sizeof(float));
}

}  // namespace

LabeledExample augment(const LabeledExample& example, Rng& rng, const AugmentationConfig& config) {
  config.validate();
  LabeledExample out = example;
  out.image = example.image.clone();

  color_jitter(out.image, rng, config);
  if (config.hflip_prob >= 1.f) {
    hflip(out.image);
  } else if (config.hflip_prob > 0.f && rng.uniform() < config.hflip_prob) {
    hflip(out.image);
  }
  affine(out.image, rng, config);
  gaussian_blur(out.image, rng, config);
  random_resized_crop(out.image, rng, config);
  clamp01(out.image);
  return out;
}

}  // namespace fundus
