#include "fundus/model.hpp"

namespace fundus {

const char* variant_name(ModelVariant v) {
  switch (v) {
    case ModelVariant::kCrossAttention: return "CROSS_ATTENTION";
    case ModelVariant::kConcat: return "CONCAT";
    case ModelVariant::kSelfAttention: return "SELF_ATTENTION";
    case ModelVariant::kVitOnly: return "VIT_ONLY";
    case ModelVariant::kCnnOnly: return "CNN_ONLY";
  }
  return "?";
}

ModelVariant variant_from_name(const std::string& name) {
  for (ModelVariant v : all_variants()) {
    if (name == variant_name(v)) return v;
  }
  throw ConfigError("unknown model variant '" + name +
                    "' (CROSS_ATTENTION, CONCAT, SELF_ATTENTION, VIT_ONLY, CNN_ONLY)");
}

const char* variant_label(ModelVariant v) {
  switch (v) {
    case ModelVariant::kCrossAttention:
      return "EfficientNet-B0 + ViT + Cross-Attention (Proposed)";
    case ModelVariant::kConcat: return "EfficientNet-B0 + ViT (Concatenation, No Attention)";
    case ModelVariant::kSelfAttention: return "EfficientNet-B0 + ViT + Self-Attention";
    case ModelVariant::kVitOnly: return "Vision Transformer (ViT) Only";
    case ModelVariant::kCnnOnly: return "EfficientNet-B0 (CNN) Only";
  }
  return "?";
}

double variant_reference_accuracy(ModelVariant v) {
  switch (v) {
    case ModelVariant::kCrossAttention: return 94.79;
    case ModelVariant::kConcat: return 91.67;
    case ModelVariant::kSelfAttention: return 87.62;
    case ModelVariant::kVitOnly: return 86.72;
    case ModelVariant::kCnnOnly: return 85.98;
  }
  return 0.0;
}

std::vector<ModelVariant> all_variants() {
  return {ModelVariant::kCrossAttention, ModelVariant::kConcat, ModelVariant::kSelfAttention,
          ModelVariant::kVitOnly, ModelVariant::kCnnOnly};
}

void ModelConfig::validate() const {
  cnn.validate();
  ViTConfig v = vit;
  v.image_size = image_size;
  v.validate();
  if (image_size % cnn.output_stride() != 0) {
    throw ConfigError("image size " + std::to_string(image_size) +
                      " not divisible by CNN output stride " +
                      std::to_string(cnn.output_stride()));
  }
  if (fusion.dim < 1 || fusion.heads < 1 || fusion.dim % fusion.heads != 0) {
    throw ConfigError("fusion dim not divisible by fusion heads");
  }
  if (fusion.head_hidden < 1) throw ConfigError("fusion head_hidden must be positive");
  if (fusion.dropout < 0.f || fusion.dropout >= 1.f) {
    throw ConfigError("fusion dropout outside [0,1)");
  }
}

Tensor flatten_feature_map(const Tensor& fmap) {
  if (fmap.ndim() != 4) throw ShapeError("flatten_feature_map: expected [B,C,H,W]");
  const int b = fmap.dim(0), c = fmap.dim(1), h = fmap.dim(2), w = fmap.dim(3);
  return ops::reshape(ops::permute(fmap, {0, 2, 3, 1}), {b, h * w, c});
}

namespace {

Tensor pool_tokens(const Tensor& t, bool max_pool) {
  return max_pool ? ops::max_tokens(t) : ops::mean_tokens(t);
}

}  // namespace

Tensor cross_attention_fuse(const Tensor& q_tokens, const Tensor& kv_tokens,
                            const MultiHeadAttention& attn, bool max_pool, Tensor* weights_out) {
  if (q_tokens.dim(2) != kv_tokens.dim(2)) {
    throw ShapeError("cross_attention_fuse: token dims differ (" + shape_str(q_tokens.shape()) +
                     " vs " + shape_str(kv_tokens.shape()) + ")");
  }
  auto att = attn.forward(q_tokens, kv_tokens);
  if (weights_out) *weights_out = att.weights;
  return pool_tokens(ops::add(q_tokens, att.output), max_pool);
}

Tensor concat_fuse(const Tensor& cnn_pooled, const Tensor& vit_pooled, const Linear& proj) {
  return proj.forward(ops::concat(cnn_pooled, vit_pooled, 1));
}

Tensor self_attention_fuse(const Tensor& cnn_tokens, const Tensor& vit_tokens,
                           const MultiHeadAttention& attn, bool max_pool, Tensor* weights_out) {
  Tensor joint = ops::concat(cnn_tokens, vit_tokens, 1);
  auto att = attn.forward(joint, joint);
  if (weights_out) *weights_out = att.weights;
  return pool_tokens(att.output, max_pool);
}

Tensor classify_head(const Tensor& fused, const Linear& fc1, const Linear& fc2, float dropout_rate,
                     bool training, Rng* dropout_rng) {
  Tensor h = ops::silu(fc1.forward(fused));
  if (training && dropout_rate > 0.f) {
    if (!dropout_rng) throw ContractError("classify_head: training with dropout needs an rng");
    h = ops::dropout(h, dropout_rate, *dropout_rng, true);
  }
  Tensor logit = fc2.forward(h);  // [B,1]
  return ops::reshape(logit, {fused.dim(0)});
}

HybridModel::HybridModel(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg), store_(seed) {
  cfg_.vit.image_size = cfg_.image_size;
  cfg_.validate();
  const bool uses_cnn = cfg_.variant != ModelVariant::kVitOnly;
  const bool uses_vit = cfg_.variant != ModelVariant::kCnnOnly;
  if (uses_cnn) cnn_.emplace(cfg_.cnn, store_, "cnn");
  if (uses_vit) vit_.emplace(cfg_.vit, store_, "vit");

  const int c_cnn = cfg_.cnn.feature_channels;
  const int d_vit = cfg_.vit.dim;
  const int df = cfg_.fusion.dim;
  switch (cfg_.variant) {
    case ModelVariant::kCrossAttention:
    case ModelVariant::kSelfAttention:
      cnn_token_proj_ = Linear(store_, "fusion.cnn_proj", c_cnn, df);
      vit_token_proj_ = Linear(store_, "fusion.vit_proj", d_vit, df);
      fusion_attn_.emplace(store_, "fusion.attn", df, cfg_.fusion.heads);
      break;
    case ModelVariant::kConcat:
      concat_proj_ = Linear(store_, "fusion.concat_proj", c_cnn + d_vit, df);
      break;
    case ModelVariant::kVitOnly:
    case ModelVariant::kCnnOnly:
      break;
  }
  int head_in = df;
  if (cfg_.variant == ModelVariant::kVitOnly) head_in = d_vit;
  if (cfg_.variant == ModelVariant::kCnnOnly) head_in = c_cnn;
  head_fc1_ = Linear(store_, "head.fc1", head_in, cfg_.fusion.head_hidden);
  // small final-layer init keeps initial logits near zero, so the
  // sigmoid/BCE pair starts in its smooth regime
  head_fc2_ = Linear(store_, "head.fc2", cfg_.fusion.head_hidden, 1, true,
                     ParamStore::Init::kTruncNormal02);
}

ForwardResult HybridModel::forward(const Tensor& images, bool training, Rng* dropout_rng) {
  ForwardResult r;
  Tensor fused;
  const bool max_pool = cfg_.fusion.max_pool;

  Tensor fmap;
  Tensor vit_tokens;
  if (cnn_) fmap = cnn_->forward(images, training, &r.taps);
  if (vit_) vit_tokens = vit_->forward(images, &r.taps, &r.attention);

  switch (cfg_.variant) {
    case ModelVariant::kCrossAttention: {
      Tensor cnn_t = cnn_token_proj_.forward(flatten_feature_map(fmap));
      Tensor vit_t = vit_token_proj_.forward(vit_tokens);
      Tensor weights;
      fused = cfg_.fusion.query_from_vit
                  ? cross_attention_fuse(vit_t, cnn_t, *fusion_attn_, max_pool, &weights)
                  : cross_attention_fuse(cnn_t, vit_t, *fusion_attn_, max_pool, &weights);
      r.attention["fusion.cross"] = weights;
      break;
    }
    case ModelVariant::kSelfAttention: {
      Tensor cnn_t = cnn_token_proj_.forward(flatten_feature_map(fmap));
      Tensor vit_t = vit_token_proj_.forward(vit_tokens);
      Tensor weights;
      fused = self_attention_fuse(cnn_t, vit_t, *fusion_attn_, max_pool, &weights);
      r.attention["fusion.self"] = weights;
      break;
    }
    case ModelVariant::kConcat: {
      Tensor cnn_pooled = ops::global_avg_pool(fmap);
      Tensor vit_pooled = pool_tokens(vit_tokens, max_pool);
      fused = concat_fuse(cnn_pooled, vit_pooled, concat_proj_);
      break;
    }
    case ModelVariant::kVitOnly: {
      Tensor tokens = vit_tokens;
      if (cfg_.vit.use_cls_token) tokens = ops::slice_tokens(tokens, 0, 1);
      fused = pool_tokens(tokens, max_pool);
      break;
    }
    case ModelVariant::kCnnOnly:
      fused = ops::global_avg_pool(fmap);
      break;
  }

  r.logit = classify_head(fused, head_fc1_, head_fc2_, cfg_.fusion.dropout, training, dropout_rng);
  r.prob = ops::sigmoid(r.logit);
  return r;
}

std::vector<std::string> HybridModel::gradcam_layers() const {
  std::vector<std::string> names;
  if (cnn_) {
    for (std::size_t i = 1; i <= cfg_.cnn.stages.size(); ++i) {
      names.push_back("cnn.s" + std::to_string(i));
    }
    names.push_back("cnn.features");
  }
  if (vit_) names.push_back("vit.patch_tokens");
  return names;
}

std::string HybridModel::default_gradcam_layer() const {
  return cnn_ ? "cnn.features" : "vit.patch_tokens";
}

}  // namespace fundus
