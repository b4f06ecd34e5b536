// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense float32 inner loops with a scalar reference path and an AVX2 path
// chosen at runtime. Every kernel here performs the same sequence of IEEE
// operations per output element on both paths (no reassociation, no FMA), so
// the two paths are bit-identical. Reductions stay scalar for that reason.

#include <cstddef>
#include <span>

namespace smp::kernels {

enum class Isa { scalar, avx2 };

/// ISA used by the dispatching entry points. Detected once; the environment
/// variable SMP_KERNELS=scalar forces the reference path.
Isa active_isa() noexcept;
/// Overrides the dispatch target (tests use this to compare paths).
void set_isa(Isa isa) noexcept;
bool isa_available(Isa isa) noexcept;
const char* isa_name(Isa isa) noexcept;

struct AdamCoefficients {
  float lr;
  float beta1;
  float beta2;
  float eps;
  float bias_correction1;  // 1 - beta1^t
  float bias_correction2;  // 1 - beta2^t
};

// Signatures shared by both implementations.
#define SMP_KERNEL_DECLS                                                                   \
  /* c[m x n] += a[m x k] * b[k x n], row-major, accumulated over k in order. */           \
  void gemm_acc(const float* a, const float* b, float* c, std::size_t m, std::size_t k,    \
                std::size_t n) noexcept;                                                   \
  void axpy(float alpha, const float* x, float* y, std::size_t n) noexcept;                \
  void add(const float* a, const float* b, float* out, std::size_t n) noexcept;            \
  void mul(const float* a, const float* b, float* out, std::size_t n) noexcept;            \
  void mul_acc(const float* a, const float* b, float* out, std::size_t n) noexcept;        \
  void adam_update(float* param, const float* grad, float* m, float* v, std::size_t n,     \
                   const AdamCoefficients& c) noexcept;

namespace scalar {
SMP_KERNEL_DECLS
}
namespace avx2 {
SMP_KERNEL_DECLS
}
#undef SMP_KERNEL_DECLS

// Dispatching entry points.
void gemm_acc(std::span<const float> a, std::span<const float> b, std::span<float> c,
              std::size_t m, std::size_t k, std::size_t n);
void axpy(float alpha, std::span<const float> x, std::span<float> y);
void add(std::span<const float> a, std::span<const float> b, std::span<float> out);
void mul(std::span<const float> a, std::span<const float> b, std::span<float> out);
void mul_acc(std::span<const float> a, std::span<const float> b, std::span<float> out);
void adam_update(std::span<float> param, std::span<const float> grad, std::span<float> m,
                 std::span<float> v, const AdamCoefficients& c);

/// out[cols x rows] = transpose(a[rows x cols]).
void transpose(std::span<const float> a, std::span<float> out, std::size_t rows,
               std::size_t cols);

}  // namespace smp::kernels
