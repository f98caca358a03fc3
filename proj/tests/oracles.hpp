#pragma once

// Brute-force reference implementations, independent of the library's
// kernel paths; shared by the unit and acceptance suites.

#include <cmath>
#include <vector>

#include "fundus/layers.hpp"
#include "fundus/tensor.hpp"

namespace oracle {

inline fundus::Tensor conv2d(const fundus::Tensor& x, const fundus::Tensor& w,
                             const fundus::Tensor& bias, int stride, int pad, int groups) {
  using fundus::Tensor;
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wi = x.dim(3);
  const int o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int cg = c / groups, og = o / groups;
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wi + 2 * pad - kw) / stride + 1;
  Tensor out = Tensor::zeros({n, o, ho, wo});
  for (int ni = 0; ni < n; ++ni)
    for (int oi = 0; oi < o; ++oi)
      for (int yo = 0; yo < ho; ++yo)
        for (int xo = 0; xo < wo; ++xo) {
          double acc = bias.defined() ? bias.data()[oi] : 0.0;
          for (int ci = 0; ci < cg; ++ci)
            for (int ki = 0; ki < kh; ++ki)
              for (int kj = 0; kj < kw; ++kj) {
                const int ii = yo * stride - pad + ki;
                const int jj = xo * stride - pad + kj;
                if (ii < 0 || ii >= h || jj < 0 || jj >= wi) continue;
                const int cin = (oi / og) * cg + ci;
                acc += static_cast<double>(
                           x.data()[((static_cast<std::int64_t>(ni) * c + cin) * h + ii) * wi + jj]) *
                       w.data()[((static_cast<std::int64_t>(oi) * cg + ci) * kh + ki) * kw + kj];
              }
          out.data()[((static_cast<std::int64_t>(ni) * o + oi) * ho + yo) * wo + xo] =
              static_cast<float>(acc);
        }
  return out;
}

// y = x W^T + b on a [T,in] slice
inline std::vector<double> linear_rows(const float* x, int rows, int in, const fundus::Tensor& w,
                                       const fundus::Tensor& b) {
  const int out = w.dim(0);
  std::vector<double> y(static_cast<std::size_t>(rows) * out, 0.0);
  for (int r = 0; r < rows; ++r)
    for (int j = 0; j < out; ++j) {
      double acc = b.defined() ? b.data()[j] : 0.0;
      for (int k = 0; k < in; ++k) {
        acc += static_cast<double>(x[r * in + k]) * w.data()[j * in + k];
      }
      y[static_cast<std::size_t>(r) * out + j] = acc;
    }
  return y;
}

// per-head attention with explicit loops; returns [B,Tq,D] outputs and
// fills weights [B,H,Tq,Tk] when requested
inline fundus::Tensor multi_head_attention(const fundus::Tensor& q_src,
                                           const fundus::Tensor& kv_src,
                                           const fundus::MultiHeadAttention& mha,
                                           fundus::Tensor* weights_out = nullptr) {
  using fundus::Tensor;
  const int b = q_src.dim(0), tq = q_src.dim(1), tk = kv_src.dim(1), d = q_src.dim(2);
  const int heads = mha.heads, dk = d / heads;
  Tensor out = Tensor::zeros({b, tq, d});
  Tensor weights = Tensor::zeros({b, heads, tq, tk});
  for (int bi = 0; bi < b; ++bi) {
    const float* qp = q_src.data() + static_cast<std::int64_t>(bi) * tq * d;
    const float* kp = kv_src.data() + static_cast<std::int64_t>(bi) * tk * d;
    auto q = linear_rows(qp, tq, d, mha.wq.weight, mha.wq.bias);
    auto k = linear_rows(kp, tk, d, mha.wk.weight, mha.wk.bias);
    auto v = linear_rows(kp, tk, d, mha.wv.weight, mha.wv.bias);
    std::vector<double> merged(static_cast<std::size_t>(tq) * d, 0.0);
    for (int hh = 0; hh < heads; ++hh) {
      for (int qi = 0; qi < tq; ++qi) {
        std::vector<double> logits(static_cast<std::size_t>(tk));
        double mx = -1e300;
        for (int ki = 0; ki < tk; ++ki) {
          double dot = 0.0;
          for (int e = 0; e < dk; ++e) {
            dot += q[static_cast<std::size_t>(qi) * d + hh * dk + e] *
                   k[static_cast<std::size_t>(ki) * d + hh * dk + e];
          }
          logits[static_cast<std::size_t>(ki)] = dot / std::sqrt(static_cast<double>(dk));
          mx = std::max(mx, logits[static_cast<std::size_t>(ki)]);
        }
        double denom = 0.0;
        for (double& l : logits) {
          l = std::exp(l - mx);
          denom += l;
        }
        for (int ki = 0; ki < tk; ++ki) {
          const double wgt = logits[static_cast<std::size_t>(ki)] / denom;
          weights.data()[((static_cast<std::int64_t>(bi) * heads + hh) * tq + qi) * tk + ki] =
              static_cast<float>(wgt);
          for (int e = 0; e < dk; ++e) {
            merged[static_cast<std::size_t>(qi) * d + hh * dk + e] +=
                wgt * v[static_cast<std::size_t>(ki) * d + hh * dk + e];
          }
        }
      }
    }
    std::vector<float> mf(merged.begin(), merged.end());
    auto proj = linear_rows(mf.data(), tq, d, mha.wo.weight, mha.wo.bias);
    for (int qi = 0; qi < tq; ++qi)
      for (int e = 0; e < d; ++e) {
        out.data()[(static_cast<std::int64_t>(bi) * tq + qi) * d + e] =
            static_cast<float>(proj[static_cast<std::size_t>(qi) * d + e]);
      }
  }
  if (weights_out) *weights_out = weights;
  return out;
}

inline double max_abs_diff(const fundus::Tensor& a, const fundus::Tensor& b) {
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::fabs(static_cast<double>(a.data()[i]) - b.data()[i]));
  }
  return m;
}

}  // namespace oracle
