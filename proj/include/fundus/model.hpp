#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fundus/cnn.hpp"
#include "fundus/vit.hpp"

namespace fundus {

// The five ablation rows.
enum class ModelVariant { kCrossAttention, kConcat, kSelfAttention, kVitOnly, kCnnOnly };

const char* variant_name(ModelVariant v);
ModelVariant variant_from_name(const std::string& name);
// Row label used in the ablation report.
const char* variant_label(ModelVariant v);
// Reported full-scale accuracy for the matching row, printed as a
// reference annotation only.
double variant_reference_accuracy(ModelVariant v);
std::vector<ModelVariant> all_variants();

struct FusionConfig {
  int dim = 64;  // common token width the two streams are projected to
  int heads = 2;
  int head_hidden = 64;
  float dropout = 0.3f;
  bool query_from_vit = false;  // default: CNN tokens query, ViT provides keys/values
  bool max_pool = false;        // mean pooling unless set
};

struct ModelConfig {
  int image_size = 224;
  ModelVariant variant = ModelVariant::kCrossAttention;
  CnnConfig cnn = CnnConfig::desk();
  ViTConfig vit = ViTConfig::desk();
  FusionConfig fusion;

  void validate() const;
};

// --- fusion building blocks, exposed for direct verification ---

// [B,C,Hf,Wf] -> [B,Hf*Wf,C]; token t = row-major cell (i,j), t = i*Wf + j
Tensor flatten_feature_map(const Tensor& fmap);

// attention from q_tokens into kv_tokens, residual onto the queries, pooled
// over tokens; weights_out receives the [B,heads,Tq,Tk] attention rows
Tensor cross_attention_fuse(const Tensor& q_tokens, const Tensor& kv_tokens,
                            const MultiHeadAttention& attn, bool max_pool = false,
                            Tensor* weights_out = nullptr);

// channel concatenation (CNN first) then linear projection
Tensor concat_fuse(const Tensor& cnn_pooled, const Tensor& vit_pooled, const Linear& proj);

// joint token sequence (CNN tokens first), one self-attention block, pooled
Tensor self_attention_fuse(const Tensor& cnn_tokens, const Tensor& vit_tokens,
                           const MultiHeadAttention& attn, bool max_pool = false,
                           Tensor* weights_out = nullptr);

// dense -> relu -> dropout(train) -> dense(1); returns the pre-sigmoid logit
Tensor classify_head(const Tensor& fused, const Linear& fc1, const Linear& fc2, float dropout_rate,
                     bool training, Rng* dropout_rng);

struct ForwardResult {
  Tensor logit;  // [B]
  Tensor prob;   // [B], sigmoid(logit)
  std::map<std::string, Tensor> taps;       // conv-grid activations (Grad-CAM targets)
  std::map<std::string, Tensor> attention;  // attention weight tensors
};

class HybridModel {
 public:
  HybridModel(ModelConfig cfg, std::uint64_t seed);

  ForwardResult forward(const Tensor& images, bool training, Rng* dropout_rng = nullptr);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  std::int64_t param_count() const { return store_.trainable_count(); }

  // layers a Grad-CAM pass may target, in forward order
  std::vector<std::string> gradcam_layers() const;
  std::string default_gradcam_layer() const;

 private:
  ModelConfig cfg_;
  ParamStore store_;
  std::optional<CnnBackbone> cnn_;
  std::optional<ViTEncoder> vit_;
  Linear cnn_token_proj_;   // C_cnn -> Df
  Linear vit_token_proj_;   // D_vit -> Df
  std::optional<MultiHeadAttention> fusion_attn_;
  Linear concat_proj_;      // C_cnn + D_vit -> Df
  Linear head_fc1_, head_fc2_;
};

}  // namespace fundus
