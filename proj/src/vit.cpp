#include "fundus/vit.hpp"

namespace fundus {

ViTConfig ViTConfig::desk() { return ViTConfig{}; }

ViTConfig ViTConfig::tiny() {
  ViTConfig c;
  c.patch = 32;
  c.dim = 32;
  c.heads = 2;
  c.depth = 2;
  c.mlp_ratio = 4;
  return c;
}

ViTConfig ViTConfig::b16() {
  ViTConfig c;
  c.patch = 16;
  c.dim = 768;
  c.heads = 12;
  c.depth = 12;
  c.mlp_ratio = 4;
  return c;
}

void ViTConfig::validate() const {
  if (image_size < 1 || patch < 1 || image_size % patch != 0) {
    throw ConfigError("vit: image size " + std::to_string(image_size) +
                      " not divisible by patch size " + std::to_string(patch));
  }
  if (dim < 1 || heads < 1 || dim % heads != 0) {
    throw ConfigError("vit: dim " + std::to_string(dim) + " not divisible by heads " +
                      std::to_string(heads));
  }
  if (depth < 0 || mlp_ratio < 1) throw ConfigError("vit: bad depth or mlp ratio");
}

ViTEncoder::ViTEncoder(const ViTConfig& cfg, ParamStore& store, const std::string& prefix)
    : cfg_(cfg), prefix_(prefix) {
  cfg.validate();
  const int pdim = 3 * cfg.patch * cfg.patch;
  patch_embed_ = Linear(store, prefix + ".patch_embed", pdim, cfg.dim);
  pos_embed_ = store.param(prefix + ".pos_embed", {cfg.tokens(), cfg.dim},
                           ParamStore::Init::kTruncNormal02);
  if (cfg.use_cls_token) {
    cls_token_ = store.param(prefix + ".cls_token", {1, 1, cfg.dim},
                             ParamStore::Init::kTruncNormal02);
  }
  for (int i = 0; i < cfg.depth; ++i) {
    Block b;
    const std::string bp = prefix + ".block" + std::to_string(i);
    b.ln1 = LayerNorm(store, bp + ".ln1", cfg.dim);
    b.attn = MultiHeadAttention(store, bp + ".attn", cfg.dim, cfg.heads);
    b.ln2 = LayerNorm(store, bp + ".ln2", cfg.dim);
    b.mlp_fc1 = Linear(store, bp + ".mlp.fc1", cfg.dim, cfg.dim * cfg.mlp_ratio);
    b.mlp_fc2 = Linear(store, bp + ".mlp.fc2", cfg.dim * cfg.mlp_ratio, cfg.dim);
    blocks_.push_back(std::move(b));
  }
}

Tensor ViTEncoder::patchify(const Tensor& images) const {
  if (images.ndim() != 4 || images.dim(1) != 3 || images.dim(2) != cfg_.image_size ||
      images.dim(3) != cfg_.image_size) {
    throw ShapeError("vit expects [B,3," + std::to_string(cfg_.image_size) + "," +
                     std::to_string(cfg_.image_size) + "] images, got " +
                     shape_str(images.shape()));
  }
  const int b = images.dim(0);
  Tensor tokens = patch_embed_.forward(ops::space_to_patches(images, cfg_.patch));
  if (cfg_.use_cls_token) {
    tokens = ops::concat(ops::broadcast_batch(cls_token_, b), tokens, 1);
  }
  return ops::add(tokens, pos_embed_);
}

Tensor ViTEncoder::forward(const Tensor& images, std::map<std::string, Tensor>* taps,
                           std::map<std::string, Tensor>* attention) {
  Tensor x = patchify(images);
  if (taps) (*taps)[prefix_ + ".patch_tokens"] = x;
  int i = 0;
  for (auto& blk : blocks_) {
    Tensor normed = blk.ln1.forward(x);
    auto att = blk.attn.forward(normed, normed);
    x = ops::add(x, att.output);
    Tensor h = ops::gelu(blk.mlp_fc1.forward(blk.ln2.forward(x)));
    x = ops::add(x, blk.mlp_fc2.forward(h));
    if (!x.all_finite()) {
      throw NumericsError("non-finite activation after " + prefix_ + ".block" +
                          std::to_string(i));
    }
    if (attention) (*attention)[prefix_ + ".block" + std::to_string(i)] = att.weights;
    ++i;
  }
  return x;
}

}  // namespace fundus
