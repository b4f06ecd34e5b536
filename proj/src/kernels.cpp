// SPDX-License-Identifier: Apache-2.0
#include "smp/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <cstring>

#include "smp/errors.hpp"

namespace smp::kernels {
namespace {

bool cpu_has_avx2() noexcept {
#if defined(__x86_64__) || defined(_M_X64)
  return __builtin_cpu_supports("avx2");
#else
  return false;
#endif
}

Isa detect() noexcept {
  if (const char* env = std::getenv("SMP_KERNELS"); env && std::strcmp(env, "scalar") == 0)
    return Isa::scalar;
  return cpu_has_avx2() ? Isa::avx2 : Isa::scalar;
}

std::atomic<Isa>& current() noexcept {
  static std::atomic<Isa> isa{detect()};
  return isa;
}

void require_size(bool ok, const char* what) {
  if (!ok) throw DimensionError(std::string("kernel size mismatch: ") + what);
}

}  // namespace

Isa active_isa() noexcept { return current().load(std::memory_order_relaxed); }

void set_isa(Isa isa) noexcept {
  current().store(isa_available(isa) ? isa : Isa::scalar, std::memory_order_relaxed);
}

bool isa_available(Isa isa) noexcept { return isa == Isa::scalar || cpu_has_avx2(); }

const char* isa_name(Isa isa) noexcept { return isa == Isa::avx2 ? "avx2" : "scalar"; }

void gemm_acc(std::span<const float> a, std::span<const float> b, std::span<float> c,
              std::size_t m, std::size_t k, std::size_t n) {
  require_size(a.size() == m * k && b.size() == k * n && c.size() == m * n, "gemm");
  if (active_isa() == Isa::avx2)
    avx2::gemm_acc(a.data(), b.data(), c.data(), m, k, n);
  else
    scalar::gemm_acc(a.data(), b.data(), c.data(), m, k, n);
}

void axpy(float alpha, std::span<const float> x, std::span<float> y) {
  require_size(x.size() == y.size(), "axpy");
  if (active_isa() == Isa::avx2)
    avx2::axpy(alpha, x.data(), y.data(), x.size());
  else
    scalar::axpy(alpha, x.data(), y.data(), x.size());
}

void add(std::span<const float> a, std::span<const float> b, std::span<float> out) {
  require_size(a.size() == b.size() && a.size() == out.size(), "add");
  if (active_isa() == Isa::avx2)
    avx2::add(a.data(), b.data(), out.data(), a.size());
  else
    scalar::add(a.data(), b.data(), out.data(), a.size());
}

void mul(std::span<const float> a, std::span<const float> b, std::span<float> out) {
  require_size(a.size() == b.size() && a.size() == out.size(), "mul");
  if (active_isa() == Isa::avx2)
    avx2::mul(a.data(), b.data(), out.data(), a.size());
  else
    scalar::mul(a.data(), b.data(), out.data(), a.size());
}

void mul_acc(std::span<const float> a, std::span<const float> b, std::span<float> out) {
  require_size(a.size() == b.size() && a.size() == out.size(), "mul_acc");
  if (active_isa() == Isa::avx2)
    avx2::mul_acc(a.data(), b.data(), out.data(), a.size());
  else
    scalar::mul_acc(a.data(), b.data(), out.data(), a.size());
}

void adam_update(std::span<float> param, std::span<const float> grad, std::span<float> m,
                 std::span<float> v, const AdamCoefficients& c) {
  require_size(param.size() == grad.size() && m.size() == param.size() && v.size() == param.size(),
               "adam");
  if (active_isa() == Isa::avx2)
    avx2::adam_update(param.data(), grad.data(), m.data(), v.data(), param.size(), c);
  else
    scalar::adam_update(param.data(), grad.data(), m.data(), v.data(), param.size(), c);
}

void transpose(std::span<const float> a, std::span<float> out, std::size_t rows, std::size_t cols) {
  require_size(a.size() == rows * cols && out.size() == a.size(), "transpose");
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
}

}  // namespace smp::kernels
