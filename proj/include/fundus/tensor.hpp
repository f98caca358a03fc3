#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "fundus/rng.hpp"

namespace fundus {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// NaN/Inf detected where the numeric policy forbids it
struct NumericsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major float32 tensor. Handle semantics: copies share storage,
// ops always allocate fresh outputs, so op results are effectively
// immutable. The gradient buffer lives on the storage, which makes
// reshaped views gradient-transparent for free.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, float value);
  static Tensor scalar(float value);
  static Tensor from_data(Shape shape, std::vector<float> data);
  static Tensor randn(Shape shape, Rng& rng, float mean = 0.f, float stddev = 1.f);
  static Tensor rand_uniform(Shape shape, Rng& rng, float lo, float hi);

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const;
  std::int64_t numel() const;

  // Handle semantics: const applies to the handle, not the shared storage,
  // so accessors are shallow-const like any shared-buffer tensor type.
  float* data() const;
  std::vector<float>& vec() const;
  float item() const;  // numel() == 1 only

  bool requires_grad() const;
  const Tensor& set_requires_grad(bool v) const;

  bool has_grad() const;
  float* grad() const;               // allocates zeros on first use
  const float* grad_data() const;    // nullptr when absent
  std::vector<float> grad_vec() const;
  void zero_grad() const;

  // same storage, new shape (numel must match)
  Tensor reshaped(Shape shape) const;
  // deep copy of the data; no grad, requires_grad = false
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return st_ == other.st_; }
  const void* storage_id() const { return st_.get(); }
  bool all_finite() const;

 private:
  struct Storage {
    std::vector<float> data;
    std::vector<float> grad;  // empty until first accumulation
    bool requires_grad = false;
  };

  Shape shape_;
  std::shared_ptr<Storage> st_;
};

}  // namespace fundus
