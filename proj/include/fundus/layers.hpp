#pragma once

#include <string>
#include <vector>

#include "fundus/ops.hpp"
#include "fundus/tensor.hpp"

namespace fundus {

// Registry of named parameters and buffers. Initialization is seeded per
// tensor name, so two models built from the same seed share bit-identical
// values for every submodule they have in common.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed) : seed_(seed) {}

  struct Entry {
    std::string name;
    Tensor tensor;
    bool trainable = true;
  };

  enum class Init { kZeros, kOnes, kHeNormal, kXavierUniform, kTruncNormal02 };

  Tensor param(const std::string& name, Shape shape, Init init, int fan_in = 0, int fan_out = 0);
  Tensor buffer(const std::string& name, Shape shape, float fill);

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  Tensor find(const std::string& name) const;

  std::int64_t trainable_count() const;
  void zero_grads() const;
  void set_requires_grad(bool v) const;

 private:
  std::uint64_t seed_;
  std::vector<Entry> entries_;
};

struct Linear {
  Tensor weight;  // [out,in]
  Tensor bias;    // [out] (undefined when bias-free)

  Linear() = default;
  Linear(ParamStore& store, const std::string& prefix, int in, int out, bool with_bias = true,
         ParamStore::Init weight_init = ParamStore::Init::kXavierUniform);
  Tensor forward(const Tensor& x) const { return ops::linear(x, weight, bias); }
};

struct Conv2dLayer {
  Tensor weight;  // [O,C/groups,K,K]
  int stride = 1, padding = 0, groups = 1;

  Conv2dLayer() = default;
  Conv2dLayer(ParamStore& store, const std::string& prefix, int in_ch, int out_ch, int kernel,
              int stride, int padding, int groups = 1);
  Tensor forward(const Tensor& x) const {
    return ops::conv2d(x, weight, {}, stride, padding, groups);
  }
};

struct BatchNorm2d {
  Tensor gain, bias;
  ops::BatchNormState state;
  float momentum = 0.9f;
  float eps = 1e-5f;

  BatchNorm2d() = default;
  BatchNorm2d(ParamStore& store, const std::string& prefix, int channels);
  Tensor forward(const Tensor& x, bool training) {
    return ops::batch_norm2d(x, gain, bias, state, momentum, eps, training);
  }
};

struct LayerNorm {
  Tensor gain, bias;
  float eps = 1e-5f;

  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& prefix, int dim);
  Tensor forward(const Tensor& x) const { return ops::layer_norm(x, gain, bias, eps); }
};

// Shared by ViT self-attention and the fusion module's cross-attention:
// queries from q_src, keys/values from kv_src, both [B,T,D] with a common D.
struct MultiHeadAttention {
  Linear wq, wk, wv, wo;
  int heads = 1;
  int dim = 0;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& store, const std::string& prefix, int dim, int heads);

  struct Result {
    Tensor output;   // [B,Tq,D]
    Tensor weights;  // [B,heads,Tq,Tk], rows sum to 1
  };
  Result forward(const Tensor& q_src, const Tensor& kv_src) const;
};

struct SqueezeExcite {
  Linear reduce, expand;

  SqueezeExcite() = default;
  SqueezeExcite(ParamStore& store, const std::string& prefix, int channels, int hidden);
  Tensor forward(const Tensor& x) const;
};

}  // namespace fundus
