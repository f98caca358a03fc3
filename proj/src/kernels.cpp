#include "kernels.hpp"

#include <cstring>

#include "fundus/thread_pool.hpp"

namespace fundus {
namespace kern {

void matmul(const float* a, const float* b, float* c, std::int64_t m, std::int64_t k,
            std::int64_t n, bool accumulate) {
  parallel_for(m, 16, [=](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t i = i0; i < i1; ++i) {
      float* crow = c + i * n;
      if (!accumulate) std::memset(crow, 0, static_cast<std::size_t>(n) * sizeof(float));
      const float* arow = a + i * k;
      for (std::int64_t p = 0; p < k; ++p) {
        const float av = arow[p];
        if (av == 0.f) continue;
        const float* brow = b + p * n;
        for (std::int64_t j = 0; j < n; ++j) {
          crow[j] += av * brow[j];
        }
      }
    }
  });
}

void matmul_ta(const float* a, const float* b, float* c, std::int64_t m, std::int64_t k,
               std::int64_t n, bool accumulate) {
  // A is [K,M]; transpose into [M,K] scratch, then plain matmul
  std::vector<float> at(static_cast<std::size_t>(m) * static_cast<std::size_t>(k));
  for (std::int64_t p = 0; p < k; ++p) {
    const float* arow = a + p * m;
    for (std::int64_t i = 0; i < m; ++i) {
      at[static_cast<std::size_t>(i * k + p)] = arow[i];
    }
  }
  matmul(at.data(), b, c, m, k, n, accumulate);
}

void matmul_tb(const float* a, const float* b, float* c, std::int64_t m, std::int64_t k,
               std::int64_t n, bool accumulate) {
  // B is [N,K]; transpose into [K,N] scratch, then plain matmul
  std::vector<float> bt(static_cast<std::size_t>(k) * static_cast<std::size_t>(n));
  for (std::int64_t j = 0; j < n; ++j) {
    const float* brow = b + j * k;
    for (std::int64_t p = 0; p < k; ++p) {
      bt[static_cast<std::size_t>(p * n + j)] = brow[p];
    }
  }
  matmul(a, bt.data(), c, m, k, n, accumulate);
}

void im2col(const float* img, int channels, int h, int w, int kh, int kw, int pad, int stride,
            int ho, int wo, float* col) {
  const std::int64_t plane = static_cast<std::int64_t>(ho) * wo;
  for (int c = 0; c < channels; ++c) {
    const float* src = img + static_cast<std::int64_t>(c) * h * w;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        float* dst = col + ((static_cast<std::int64_t>(c) * kh + ki) * kw + kj) * plane;
        for (int oi = 0; oi < ho; ++oi) {
          const int ii = oi * stride - pad + ki;
          if (ii < 0 || ii >= h) {
            std::memset(dst + static_cast<std::int64_t>(oi) * wo, 0,
                        static_cast<std::size_t>(wo) * sizeof(float));
            continue;
          }
          const float* srow = src + static_cast<std::int64_t>(ii) * w;
          float* drow = dst + static_cast<std::int64_t>(oi) * wo;
          for (int oj = 0; oj < wo; ++oj) {
            const int jj = oj * stride - pad + kj;
            drow[oj] = (jj >= 0 && jj < w) ? srow[jj] : 0.f;
          }
        }
      }
    }
  }
}

void col2im_add(const float* col, int channels, int h, int w, int kh, int kw, int pad, int stride,
                int ho, int wo, float* img) {
  const std::int64_t plane = static_cast<std::int64_t>(ho) * wo;
  for (int c = 0; c < channels; ++c) {
    float* dst = img + static_cast<std::int64_t>(c) * h * w;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const float* src = col + ((static_cast<std::int64_t>(c) * kh + ki) * kw + kj) * plane;
        for (int oi = 0; oi < ho; ++oi) {
          const int ii = oi * stride - pad + ki;
          if (ii < 0 || ii >= h) continue;
          float* drow = dst + static_cast<std::int64_t>(ii) * w;
          const float* srow = src + static_cast<std::int64_t>(oi) * wo;
          for (int oj = 0; oj < wo; ++oj) {
            const int jj = oj * stride - pad + kj;
            if (jj >= 0 && jj < w) drow[jj] += srow[oj];
          }
        }
      }
    }
  }
}

}  // namespace kern
}  // namespace fundus
