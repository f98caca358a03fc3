#include "fundus/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "fundus/tape.hpp"

namespace fundus {

namespace {

std::vector<std::int64_t> pick_elements(std::int64_t n, std::int64_t max_elements,
                                        std::uint64_t seed) {
  std::vector<std::int64_t> idx;
  if (max_elements <= 0 || max_elements >= n) {
    idx.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    return idx;
  }
  Rng rng(mix_seed(seed, "grad_check_sample"));
  idx.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  rng.shuffle(idx);
  idx.resize(static_cast<std::size_t>(max_elements));
  std::sort(idx.begin(), idx.end());
  return idx;
}

double scalar_of(const Tensor& t) {
  if (t.numel() != 1) throw ContractError("grad_check: function must return a scalar");
  return static_cast<double>(t.item());
}

double error_metric(double analytic, double numeric) {
  const double denom = std::max({1.0, std::fabs(analytic), std::fabs(numeric)});
  return std::fabs(analytic - numeric) / denom;
}

}  // namespace

namespace {
void check_step(float h) {
  if (!(h >= 1e-4f && h <= 1e-2f)) {
    throw ContractError("grad_check: step " + std::to_string(h) +
                        " outside the float32 range [1e-4, 1e-2]");
  }
}
}  // namespace

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, float h,
                  std::int64_t max_elements, std::uint64_t sample_seed) {
  check_step(h);
  Tensor xr = x.clone();
  xr.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = f(xr);
    if (loss.numel() != 1) throw ContractError("grad_check: function must return a scalar");
    tape.backward(loss);
  }
  const std::vector<float> analytic = xr.grad_vec();

  Tensor xp = x.clone();
  float* pd = xp.data();
  double max_err = 0.0;
  for (std::int64_t i : pick_elements(x.numel(), max_elements, sample_seed)) {
    const float orig = pd[i];
    pd[i] = orig + h;
    const double fp = scalar_of(f(xp));
    pd[i] = orig - h;
    const double fm = scalar_of(f(xp));
    pd[i] = orig;
    const double numeric = (fp - fm) / (2.0 * static_cast<double>(h));
    max_err = std::max(max_err, error_metric(analytic[static_cast<std::size_t>(i)], numeric));
  }
  return max_err;
}

double grad_check_param(const std::function<Tensor()>& loss_fn, Tensor param, float h,
                        std::int64_t max_elements, std::uint64_t sample_seed) {
  check_step(h);
  param.zero_grad();
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = loss_fn();
    if (loss.numel() != 1) throw ContractError("grad_check_param: loss must be scalar");
    tape.backward(loss);
  }
  const std::vector<float> analytic = param.grad_vec();

  float* pd = param.data();
  double max_err = 0.0;
  for (std::int64_t i : pick_elements(param.numel(), max_elements, sample_seed)) {
    const float orig = pd[i];
    pd[i] = orig + h;
    const double fp = scalar_of(loss_fn());
    pd[i] = orig - h;
    const double fm = scalar_of(loss_fn());
    pd[i] = orig;
    const double numeric = (fp - fm) / (2.0 * static_cast<double>(h));
    max_err = std::max(max_err, error_metric(analytic[static_cast<std::size_t>(i)], numeric));
  }
  param.zero_grad();
  return max_err;
}

}  // namespace fundus
