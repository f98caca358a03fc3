#include "fundus/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace fundus {

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(Shape shape) {
  Tensor t;
  std::int64_t n = shape_numel(shape);
  t.shape_ = std::move(shape);
  t.st_ = std::make_shared<Storage>();
  t.st_->data.assign(static_cast<std::size_t>(n), 0.f);
  return t;
}

Tensor Tensor::full(Shape shape, float value) {
  Tensor t = zeros(std::move(shape));
  for (auto& v : t.st_->data) v = value;
  return t;
}

Tensor Tensor::scalar(float value) { return full({1}, value); }

Tensor Tensor::from_data(Shape shape, std::vector<float> data) {
  std::int64_t n = shape_numel(shape);
  if (n != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.st_ = std::make_shared<Storage>();
  t.st_->data = std::move(data);
  return t;
}

Tensor Tensor::randn(Shape shape, Rng& rng, float mean, float stddev) {
  Tensor t = zeros(std::move(shape));
  for (auto& v : t.st_->data) v = static_cast<float>(rng.normal(mean, stddev));
  return t;
}

Tensor Tensor::rand_uniform(Shape shape, Rng& rng, float lo, float hi) {
  Tensor t = zeros(std::move(shape));
  for (auto& v : t.st_->data) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

int Tensor::dim(int i) const {
  if (i < 0) i += ndim();
  if (i < 0 || i >= ndim()) throw ShapeError("dim index out of range");
  return shape_[static_cast<std::size_t>(i)];
}

std::int64_t Tensor::numel() const {
  if (!st_) return 0;
  return static_cast<std::int64_t>(st_->data.size());
}

float* Tensor::data() const { return st_->data.data(); }
std::vector<float>& Tensor::vec() const { return st_->data; }

float Tensor::item() const {
  if (numel() != 1) throw ContractError("item() requires a scalar tensor, got " + shape_str(shape_));
  return st_->data[0];
}

bool Tensor::requires_grad() const { return st_ && st_->requires_grad; }

const Tensor& Tensor::set_requires_grad(bool v) const {
  st_->requires_grad = v;
  return *this;
}

bool Tensor::has_grad() const { return st_ && !st_->grad.empty(); }

float* Tensor::grad() const {
  if (st_->grad.empty()) st_->grad.assign(st_->data.size(), 0.f);
  return st_->grad.data();
}

const float* Tensor::grad_data() const {
  if (!st_ || st_->grad.empty()) return nullptr;
  return st_->grad.data();
}

std::vector<float> Tensor::grad_vec() const {
  if (!has_grad()) return std::vector<float>(st_ ? st_->data.size() : 0, 0.f);
  return st_->grad;
}

void Tensor::zero_grad() const {
  if (st_ && !st_->grad.empty()) std::fill(st_->grad.begin(), st_->grad.end(), 0.f);
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                     " changes element count");
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.st_ = st_;
  return t;
}

Tensor Tensor::clone() const {
  Tensor t;
  t.shape_ = shape_;
  t.st_ = std::make_shared<Storage>();
  t.st_->data = st_->data;
  return t;
}

bool Tensor::all_finite() const {
  for (float v : st_->data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace fundus
