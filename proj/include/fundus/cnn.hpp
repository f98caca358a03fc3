#pragma once

#include <map>
#include <string>
#include <vector>

#include "fundus/layers.hpp"

namespace fundus {

struct StageSpec {
  int expansion = 1;      // MBConv expansion factor
  int out_channels = 16;
  int kernel = 3;
  int stride = 1;
  int repeats = 1;
  float se_ratio = 0.25f;  // squeeze hidden = se_ratio * block input channels
};

struct CnnConfig {
  int stem_channels = 16;
  std::vector<StageSpec> stages;
  int feature_channels = 256;  // channels after the 1x1 head conv

  // reduced 4-stage net, output stride 32 (~0.3M params)
  static CnnConfig desk();
  // fixture-scale variant
  static CnnConfig tiny();
  // the full EfficientNet-B0 stage table
  static CnnConfig b0();

  int output_stride() const;
  void validate() const;
};

// MBConv feature extractor: stem conv, inverted-bottleneck stages with
// depthwise convolutions and squeeze-excitation, then a 1x1 head conv.
class CnnBackbone {
 public:
  CnnBackbone(const CnnConfig& cfg, ParamStore& store, const std::string& prefix = "cnn");

  // images [B,3,S,S] -> feature map [B,feature_channels,S/stride,S/stride].
  // Stage outputs land in taps as "<prefix>.s<i>", the head as
  // "<prefix>.features".
  Tensor forward(const Tensor& images, bool training,
                 std::map<std::string, Tensor>* taps = nullptr);

  int feature_channels() const { return cfg_.feature_channels; }
  int output_stride() const { return cfg_.output_stride(); }

 private:
  struct MbConvBlock {
    std::string name;
    bool has_expand = false;
    Conv2dLayer expand;
    BatchNorm2d expand_bn;
    Conv2dLayer dw;
    BatchNorm2d dw_bn;
    bool has_se = false;
    SqueezeExcite se;
    Conv2dLayer project;
    BatchNorm2d project_bn;
    bool residual = false;
    int stage = 0;
  };

  CnnConfig cfg_;
  Conv2dLayer stem_;
  BatchNorm2d stem_bn_;
  std::vector<MbConvBlock> blocks_;
  Conv2dLayer head_;
  BatchNorm2d head_bn_;
  std::string prefix_;
};

}  // namespace fundus
