#pragma once

#include <map>
#include <string>
#include <vector>

#include "fundus/layers.hpp"

namespace fundus {

struct ViTConfig {
  int image_size = 224;
  int patch = 16;
  int dim = 128;
  int heads = 4;
  int depth = 4;
  int mlp_ratio = 4;
  bool use_cls_token = false;

  static ViTConfig desk();
  static ViTConfig tiny();
  static ViTConfig b16();

  int grid() const { return image_size / patch; }
  int tokens() const { return grid() * grid() + (use_cls_token ? 1 : 0); }
  void validate() const;
};

// Patch embedding + learned position embeddings + pre-norm transformer
// blocks. With depth 0 (or zeroed block output projections) the encoder is
// exactly the patch embedding.
class ViTEncoder {
 public:
  ViTEncoder(const ViTConfig& cfg, ParamStore& store, const std::string& prefix = "vit");

  // images [B,3,S,S] -> tokens [B,T,dim]. Per-block attention weights land
  // in attention as "<prefix>.block<i>"; the embedded (pre-block) tokens in
  // taps as "<prefix>.patch_tokens".
  Tensor forward(const Tensor& images, std::map<std::string, Tensor>* taps = nullptr,
                 std::map<std::string, Tensor>* attention = nullptr);

  // patch embedding + position embeddings only
  Tensor patchify(const Tensor& images) const;

  const ViTConfig& config() const { return cfg_; }

 private:
  struct Block {
    LayerNorm ln1;
    MultiHeadAttention attn;
    LayerNorm ln2;
    Linear mlp_fc1, mlp_fc2;
  };

  ViTConfig cfg_;
  Linear patch_embed_;
  Tensor pos_embed_;  // [T,dim]
  Tensor cls_token_;  // [1,1,dim] when enabled
  std::vector<Block> blocks_;
  std::string prefix_;
};

}  // namespace fundus
