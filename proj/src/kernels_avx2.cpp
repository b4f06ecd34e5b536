// SPDX-License-Identifier: Apache-2.0
#include "smp/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)
#define SMP_HAVE_X86 1
#include <immintrin.h>
#else
#define SMP_HAVE_X86 0
#endif

namespace smp::kernels::avx2 {

#if SMP_HAVE_X86

#define SMP_AVX2 __attribute__((target("avx2")))

SMP_AVX2 void gemm_acc(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
                       std::size_t n) noexcept {
  for (std::size_t i = 0; i < m; ++i) {
    float* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const float s = a[i * k + p];
      const __m256 vs = _mm256_set1_ps(s);
      const float* brow = b + p * n;
      std::size_t j = 0;
      for (; j + 8 <= n; j += 8) {
        const __m256 prod = _mm256_mul_ps(vs, _mm256_loadu_ps(brow + j));
        _mm256_storeu_ps(crow + j, _mm256_add_ps(_mm256_loadu_ps(crow + j), prod));
      }
      for (; j < n; ++j) crow[j] = crow[j] + s * brow[j];
    }
  }
}

SMP_AVX2 void axpy(float alpha, const float* x, float* y, std::size_t n) noexcept {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 prod = _mm256_mul_ps(va, _mm256_loadu_ps(x + i));
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(y + i), prod));
  }
  for (; i < n; ++i) y[i] = y[i] + alpha * x[i];
}

SMP_AVX2 void add(const float* a, const float* b, float* out, std::size_t n) noexcept {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

SMP_AVX2 void mul(const float* a, const float* b, float* out, std::size_t n) noexcept {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

SMP_AVX2 void mul_acc(const float* a, const float* b, float* out, std::size_t n) noexcept {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 prod = _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i));
    _mm256_storeu_ps(out + i, _mm256_add_ps(_mm256_loadu_ps(out + i), prod));
  }
  for (; i < n; ++i) out[i] = out[i] + a[i] * b[i];
}

SMP_AVX2 void adam_update(float* param, const float* grad, float* m, float* v, std::size_t n,
                          const AdamCoefficients& c) noexcept {
  const __m256 b1 = _mm256_set1_ps(c.beta1);
  const __m256 b2 = _mm256_set1_ps(c.beta2);
  const __m256 omb1 = _mm256_set1_ps(1.0f - c.beta1);
  const __m256 omb2 = _mm256_set1_ps(1.0f - c.beta2);
  const __m256 bc1 = _mm256_set1_ps(c.bias_correction1);
  const __m256 bc2 = _mm256_set1_ps(c.bias_correction2);
  const __m256 lr = _mm256_set1_ps(c.lr);
  const __m256 eps = _mm256_set1_ps(c.eps);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 g = _mm256_loadu_ps(grad + i);
    const __m256 mi = _mm256_add_ps(_mm256_mul_ps(b1, _mm256_loadu_ps(m + i)), _mm256_mul_ps(omb1, g));
    const __m256 vi = _mm256_add_ps(_mm256_mul_ps(b2, _mm256_loadu_ps(v + i)),
                                    _mm256_mul_ps(omb2, _mm256_mul_ps(g, g)));
    _mm256_storeu_ps(m + i, mi);
    _mm256_storeu_ps(v + i, vi);
    const __m256 m_hat = _mm256_div_ps(mi, bc1);
    const __m256 v_hat = _mm256_div_ps(vi, bc2);
    const __m256 step = _mm256_div_ps(_mm256_mul_ps(lr, m_hat), _mm256_add_ps(_mm256_sqrt_ps(v_hat), eps));
    _mm256_storeu_ps(param + i, _mm256_sub_ps(_mm256_loadu_ps(param + i), step));
  }
  if (i < n) scalar::adam_update(param + i, grad + i, m + i, v + i, n - i, c);
}

#undef SMP_AVX2

#else  // no x86: forward to the reference path

void gemm_acc(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
              std::size_t n) noexcept {
  scalar::gemm_acc(a, b, c, m, k, n);
}
void axpy(float alpha, const float* x, float* y, std::size_t n) noexcept { scalar::axpy(alpha, x, y, n); }
void add(const float* a, const float* b, float* out, std::size_t n) noexcept { scalar::add(a, b, out, n); }
void mul(const float* a, const float* b, float* out, std::size_t n) noexcept { scalar::mul(a, b, out, n); }
void mul_acc(const float* a, const float* b, float* out, std::size_t n) noexcept {
  scalar::mul_acc(a, b, out, n);
}
void adam_update(float* param, const float* grad, float* m, float* v, std::size_t n,
                 const AdamCoefficients& c) noexcept {
  scalar::adam_update(param, grad, m, v, n, c);
}

#endif

}  // namespace smp::kernels::avx2
