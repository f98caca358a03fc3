#pragma once

#include <cstdint>
#include <vector>

namespace fundus {
namespace kern {

// C[M,N] (+)= A[M,K] * B[K,N]; row-major. ikj loop order so the inner loop
// streams both C and B rows and autovectorizes without reassociation.
void matmul(const float* a, const float* b, float* c, std::int64_t m, std::int64_t k,
            std::int64_t n, bool accumulate);

// C[M,N] (+)= A[K,M]^T * B[K,N]
void matmul_ta(const float* a, const float* b, float* c, std::int64_t m, std::int64_t k,
               std::int64_t n, bool accumulate);

// C[M,N] (+)= A[M,K] * B[N,K]^T
void matmul_tb(const float* a, const float* b, float* c, std::int64_t m, std::int64_t k,
               std::int64_t n, bool accumulate);

// NCHW single image plane group -> column matrix [C*Kh*Kw, Ho*Wo]
void im2col(const float* img, int channels, int h, int w, int kh, int kw, int pad, int stride,
            int ho, int wo, float* col);

// transpose of im2col: scatter-add columns back into the image gradient
void col2im_add(const float* col, int channels, int h, int w, int kh, int kw, int pad, int stride,
                int ho, int wo, float* img);

}  // namespace kern
}  // namespace fundus
