#include "fundus/layers.hpp"

#include <cmath>

namespace fundus {

Tensor ParamStore::param(const std::string& name, Shape shape, Init init, int fan_in,
                         int fan_out) {
  Rng rng(mix_seed(seed_, name));
  Tensor t;
  switch (init) {
    case Init::kZeros:
      t = Tensor::zeros(shape);
      break;
    case Init::kOnes:
      t = Tensor::full(shape, 1.f);
      break;
    case Init::kHeNormal: {
      const float std = std::sqrt(2.f / static_cast<float>(std::max(1, fan_in)));
      t = Tensor::randn(shape, rng, 0.f, std);
      break;
    }
    case Init::kXavierUniform: {
      const float a = std::sqrt(6.f / static_cast<float>(std::max(1, fan_in + fan_out)));
      t = Tensor::rand_uniform(shape, rng, -a, a);
      break;
    }
    case Init::kTruncNormal02: {
      t = Tensor::zeros(shape);
      for (std::int64_t i = 0; i < t.numel(); ++i) {
        double v;
        do {
          v = rng.normal(0.0, 0.02);
        } while (std::fabs(v) > 0.04);
        t.data()[i] = static_cast<float>(v);
      }
      break;
    }
  }
  t.set_requires_grad(true);
  entries_.push_back(Entry{name, t, true});
  return t;
}

Tensor ParamStore::buffer(const std::string& name, Shape shape, float fill) {
  Tensor t = Tensor::full(std::move(shape), fill);
  entries_.push_back(Entry{name, t, false});
  return t;
}

Tensor ParamStore::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.tensor;
  }
  throw ConfigError("no parameter named '" + name + "'");
}

std::int64_t ParamStore::trainable_count() const {
  std::int64_t n = 0;
  for (const auto& e : entries_) {
    if (e.trainable) n += e.tensor.numel();
  }
  return n;
}

void ParamStore::zero_grads() const {
  for (const auto& e : entries_) e.tensor.zero_grad();
}

void ParamStore::set_requires_grad(bool v) const {
  for (const auto& e : entries_) {
    if (e.trainable) e.tensor.set_requires_grad(v);
  }
}

Linear::Linear(ParamStore& store, const std::string& prefix, int in, int out, bool with_bias,
               ParamStore::Init weight_init) {
  weight = store.param(prefix + ".weight", {out, in}, weight_init, in, out);
  if (with_bias) bias = store.param(prefix + ".bias", {out}, ParamStore::Init::kZeros);
}

Conv2dLayer::Conv2dLayer(ParamStore& store, const std::string& prefix, int in_ch, int out_ch,
                         int kernel, int stride_, int padding_, int groups_)
    : stride(stride_), padding(padding_), groups(groups_) {
  const int cg = in_ch / groups_;
  weight = store.param(prefix + ".weight", {out_ch, cg, kernel, kernel},
                       ParamStore::Init::kHeNormal, cg * kernel * kernel, 0);
}

BatchNorm2d::BatchNorm2d(ParamStore& store, const std::string& prefix, int channels) {
  gain = store.param(prefix + ".gain", {channels}, ParamStore::Init::kOnes);
  bias = store.param(prefix + ".bias", {channels}, ParamStore::Init::kZeros);
  state.running_mean = store.buffer(prefix + ".running_mean", {channels}, 0.f);
  state.running_var = store.buffer(prefix + ".running_var", {channels}, 1.f);
}

LayerNorm::LayerNorm(ParamStore& store, const std::string& prefix, int dim) {
  gain = store.param(prefix + ".gain", {dim}, ParamStore::Init::kOnes);
  bias = store.param(prefix + ".bias", {dim}, ParamStore::Init::kZeros);
}

MultiHeadAttention::MultiHeadAttention(ParamStore& store, const std::string& prefix, int dim_,
                                       int heads_)
    : heads(heads_), dim(dim_) {
  if (dim_ % heads_ != 0) {
    throw ConfigError("attention dim " + std::to_string(dim_) + " not divisible by " +
                      std::to_string(heads_) + " heads");
  }
  wq = Linear(store, prefix + ".wq", dim_, dim_);
  wk = Linear(store, prefix + ".wk", dim_, dim_);
  wv = Linear(store, prefix + ".wv", dim_, dim_);
  wo = Linear(store, prefix + ".wo", dim_, dim_);
}

MultiHeadAttention::Result MultiHeadAttention::forward(const Tensor& q_src,
                                                       const Tensor& kv_src) const {
  if (q_src.ndim() != 3 || kv_src.ndim() != 3) {
    throw ShapeError("attention expects [B,T,D] inputs");
  }
  if (q_src.dim(2) != dim || kv_src.dim(2) != dim) {
    throw ShapeError("attention dim mismatch: q " + shape_str(q_src.shape()) + ", kv " +
                     shape_str(kv_src.shape()) + ", module dim " + std::to_string(dim));
  }
  const int b = q_src.dim(0), tq = q_src.dim(1), tk = kv_src.dim(1);
  const int dk = dim / heads;

  auto split = [&](const Tensor& t, int tokens) {
    // [B,T,D] -> [B,heads,T,dk]
    return ops::permute(ops::reshape(t, {b, tokens, heads, dk}), {0, 2, 1, 3});
  };
  Tensor q = split(wq.forward(q_src), tq);
  Tensor k = split(wk.forward(kv_src), tk);
  Tensor v = split(wv.forward(kv_src), tk);

  Tensor logits = ops::scale(ops::bmm_nt(q, k), 1.f / std::sqrt(static_cast<float>(dk)));
  Tensor weights = ops::softmax(logits, 3);
  Tensor ctx = ops::bmm(weights, v);  // [B,heads,Tq,dk]
  Tensor merged = ops::reshape(ops::permute(ctx, {0, 2, 1, 3}), {b, tq, dim});
  Result r;
  r.output = wo.forward(merged);
  r.weights = weights;
  return r;
}

SqueezeExcite::SqueezeExcite(ParamStore& store, const std::string& prefix, int channels,
                             int hidden) {
  reduce = Linear(store, prefix + ".reduce", channels, hidden);
  expand = Linear(store, prefix + ".expand", hidden, channels);
}

Tensor SqueezeExcite::forward(const Tensor& x) const {
  Tensor pooled = ops::global_avg_pool(x);            // [N,C]
  Tensor gate = ops::silu(reduce.forward(pooled));
  gate = ops::sigmoid(expand.forward(gate));          // [N,C] in (0,1)
  return ops::scale_channels(x, gate);
}

}  // namespace fundus
