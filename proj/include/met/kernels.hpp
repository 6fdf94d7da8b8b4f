#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>

namespace met::kernels {

enum class Backend { scalar, avx2 };

// Function table for the hot inner loops. Every backend variant of an entry
// must produce bit-identical output: per-element accumulation runs in a fixed
// order (ascending k for the gemm) and no backend fuses multiply-add.
// Reductions to a single scalar (dot, sum) stay out of this table on purpose;
// they keep one canonical scalar ordering.
struct Ops {
  // c[m,n] += a[m,k] * b[k,n], all row-major.
  void (*gemm_nn_acc)(double* c, const double* a, const double* b,
                      int64_t m, int64_t n, int64_t k);
  void (*add)(double* z, const double* x, const double* y, size_t n);
  void (*sub)(double* z, const double* x, const double* y, size_t n);
  void (*mul)(double* z, const double* x, const double* y, size_t n);
  void (*acc)(double* y, const double* x, size_t n);  // y += x
  void (*axpy)(double* y, double a, const double* x, size_t n);
  void (*scale)(double* z, const double* x, double a, size_t n);
};

bool avx2_supported();
const Ops& table(Backend b);

// Active backend: AVX2 when the CPU has it, unless overridden by
// force_backend() or the MET_KERNELS env var ("scalar" / "avx2").
Backend active_backend();
const Ops& active();
void force_backend(std::optional<Backend> b);
std::string backend_name(Backend b);

// c[m,n] += op(a) * op(b) where op transposes when requested. Transposed
// operands are materialized into scratch and fed to the NN kernel, so every
// backend agrees bitwise regardless of layout.
void gemm_acc(double* c, const double* a, const double* b,
              int64_t m, int64_t n, int64_t k, bool trans_a, bool trans_b);

}  // namespace met::kernels
