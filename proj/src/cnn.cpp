#include "fundus/cnn.hpp"

#include <cmath>

namespace fundus {

CnnConfig CnnConfig::desk() {
  CnnConfig c;
  c.stem_channels = 16;
  c.stages = {
      {2, 24, 3, 2, 1, 0.25f},
      {4, 40, 3, 2, 2, 0.25f},
      {4, 80, 3, 2, 2, 0.25f},
      {4, 128, 3, 2, 1, 0.25f},
  };
  c.feature_channels = 256;
  return c;
}

CnnConfig CnnConfig::tiny() {
  CnnConfig c;
  c.stem_channels = 8;
  c.stages = {
      {1, 16, 3, 2, 1, 0.25f},
      {2, 32, 3, 2, 1, 0.25f},
      {2, 64, 3, 2, 1, 0.25f},
      {2, 96, 3, 2, 1, 0.25f},
  };
  c.feature_channels = 128;
  return c;
}

CnnConfig CnnConfig::b0() {
  CnnConfig c;
  c.stem_channels = 32;
  c.stages = {
      {1, 16, 3, 1, 1, 0.25f},
      {6, 24, 3, 2, 2, 0.25f},
      {6, 40, 5, 2, 2, 0.25f},
      {6, 80, 3, 2, 3, 0.25f},
      {6, 112, 5, 1, 3, 0.25f},
      {6, 192, 5, 2, 4, 0.25f},
      {6, 320, 3, 1, 1, 0.25f},
  };
  c.feature_channels = 1280;
  return c;
}

int CnnConfig::output_stride() const {
  int s = 2;  // stem
  for (const auto& st : stages) s *= st.stride;
  return s;
}

void CnnConfig::validate() const {
  if (stem_channels < 1 || feature_channels < 1) throw ConfigError("cnn: channels must be positive");
  if (stages.empty()) throw ConfigError("cnn: at least one stage required");
  for (const auto& st : stages) {
    if (st.out_channels < 1 || st.expansion < 1 || st.repeats < 1) {
      throw ConfigError("cnn: bad stage arithmetic");
    }
    if (st.kernel % 2 != 1) throw ConfigError("cnn: stage kernels must be odd");
    if (st.stride != 1 && st.stride != 2) throw ConfigError("cnn: stage stride must be 1 or 2");
    if (st.se_ratio < 0.f || st.se_ratio > 1.f) throw ConfigError("cnn: SE ratio outside (0,1]");
  }
}

CnnBackbone::CnnBackbone(const CnnConfig& cfg, ParamStore& store, const std::string& prefix)
    : cfg_(cfg), prefix_(prefix) {
  cfg.validate();
  stem_ = Conv2dLayer(store, prefix + ".stem.conv", 3, cfg.stem_channels, 3, 2, 1);
  stem_bn_ = BatchNorm2d(store, prefix + ".stem.bn", cfg.stem_channels);

  int in_ch = cfg.stem_channels;
  for (std::size_t si = 0; si < cfg.stages.size(); ++si) {
    const StageSpec& st = cfg.stages[si];
    for (int r = 0; r < st.repeats; ++r) {
      MbConvBlock b;
      b.stage = static_cast<int>(si) + 1;
      b.name = prefix + ".s" + std::to_string(si + 1) + ".b" + std::to_string(r);
      const int stride = r == 0 ? st.stride : 1;
      const int mid = in_ch * st.expansion;
      b.has_expand = st.expansion > 1;
      if (b.has_expand) {
        b.expand = Conv2dLayer(store, b.name + ".expand.conv", in_ch, mid, 1, 1, 0);
        b.expand_bn = BatchNorm2d(store, b.name + ".expand.bn", mid);
      }
      b.dw = Conv2dLayer(store, b.name + ".dw.conv", mid, mid, st.kernel, stride, st.kernel / 2,
                         mid);
      b.dw_bn = BatchNorm2d(store, b.name + ".dw.bn", mid);
      const int se_hidden = static_cast<int>(std::lround(in_ch * st.se_ratio));
      b.has_se = se_hidden >= 1;
      if (b.has_se) b.se = SqueezeExcite(store, b.name + ".se", mid, se_hidden);
      b.project = Conv2dLayer(store, b.name + ".project.conv", mid, st.out_channels, 1, 1, 0);
      b.project_bn = BatchNorm2d(store, b.name + ".project.bn", st.out_channels);
      b.residual = stride == 1 && in_ch == st.out_channels;
      blocks_.push_back(std::move(b));
      in_ch = st.out_channels;
    }
  }
  head_ = Conv2dLayer(store, prefix + ".head.conv", in_ch, cfg.feature_channels, 1, 1, 0);
  head_bn_ = BatchNorm2d(store, prefix + ".head.bn", cfg.feature_channels);
}

Tensor CnnBackbone::forward(const Tensor& images, bool training,
                            std::map<std::string, Tensor>* taps) {
  if (images.ndim() != 4 || images.dim(1) != 3) {
    throw ShapeError("backbone expects [B,3,H,W] images, got " + shape_str(images.shape()));
  }
  Tensor x = ops::silu(stem_bn_.forward(stem_.forward(images), training));
  if (!x.all_finite()) throw NumericsError("non-finite activation after " + prefix_ + ".stem");
  for (auto& b : blocks_) {
    Tensor h = x;
    if (b.has_expand) h = ops::silu(b.expand_bn.forward(b.expand.forward(h), training));
    h = ops::silu(b.dw_bn.forward(b.dw.forward(h), training));
    if (b.has_se) h = b.se.forward(h);
    h = b.project_bn.forward(b.project.forward(h), training);
    if (b.residual) h = ops::add(h, x);
    if (!h.all_finite()) throw NumericsError("non-finite activation after " + b.name);
    x = h;
    // later blocks of the same stage overwrite, leaving the stage output
    if (taps) (*taps)[prefix_ + ".s" + std::to_string(b.stage)] = x;
  }
  x = ops::silu(head_bn_.forward(head_.forward(x), training));
  if (!x.all_finite()) throw NumericsError("non-finite activation after " + prefix_ + ".head");
  if (taps) (*taps)[prefix_ + ".features"] = x;
  return x;
}

}  // namespace fundus
