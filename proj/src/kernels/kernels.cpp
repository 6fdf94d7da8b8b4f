#include "met/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <cstring>
#include <stdexcept>
#include <vector>

namespace met::kernels {

namespace {

void gemm_nn_acc_scalar(double* c, const double* a, const double* b,
                        int64_t m, int64_t n, int64_t k) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (int64_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const double* brow = b + kk * n;
      for (int64_t j = 0; j < n; ++j) {
        crow[j] += av * brow[j];
      }
    }
  }
}

void add_scalar(double* z, const double* x, const double* y, size_t n) {
  for (size_t i = 0; i < n; ++i) z[i] = x[i] + y[i];
}

void sub_scalar(double* z, const double* x, const double* y, size_t n) {
  for (size_t i = 0; i < n; ++i) z[i] = x[i] - y[i];
}

void mul_scalar(double* z, const double* x, const double* y, size_t n) {
  for (size_t i = 0; i < n; ++i) z[i] = x[i] * y[i];
}

void acc_scalar(double* y, const double* x, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] += x[i];
}

void axpy_scalar(double* y, double a, const double* x, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void scale_scalar(double* z, const double* x, double a, size_t n) {
  for (size_t i = 0; i < n; ++i) z[i] = a * x[i];
}

constexpr Ops kScalarOps{gemm_nn_acc_scalar, add_scalar, sub_scalar,
                         mul_scalar, acc_scalar, axpy_scalar, scale_scalar};

std::atomic<int> g_forced{-1};  // -1 = auto

Backend detect() {
  if (const char* env = std::getenv("MET_KERNELS")) {
    if (std::strcmp(env, "scalar") == 0) return Backend::scalar;
    if (std::strcmp(env, "avx2") == 0 && avx2_supported()) return Backend::avx2;
    if (std::strcmp(env, "avx2") == 0) {
      throw std::runtime_error("MET_KERNELS=avx2 requested but CPU lacks AVX2");
    }
  }
  return avx2_supported() ? Backend::avx2 : Backend::scalar;
}

}  // namespace

// Defined in kernels_avx2.cpp; null on targets without an AVX2 build.
const Ops* avx2_ops_or_null();

bool avx2_supported() {
#if defined(__x86_64__) || defined(__i386__)
  return avx2_ops_or_null() != nullptr && __builtin_cpu_supports("avx2");
#else
  return false;
#endif
}

const Ops& table(Backend b) {
  if (b == Backend::avx2) {
    const Ops* ops = avx2_ops_or_null();
    if (ops == nullptr) throw std::runtime_error("AVX2 kernels not built on this target");
    return *ops;
  }
  return kScalarOps;
}

Backend active_backend() {
  const int forced = g_forced.load(std::memory_order_relaxed);
  if (forced >= 0) return static_cast<Backend>(forced);
  static const Backend detected = detect();
  return detected;
}

const Ops& active() { return table(active_backend()); }

void force_backend(std::optional<Backend> b) {
  if (b && *b == Backend::avx2 && !avx2_supported()) {
    throw std::runtime_error("cannot force AVX2 kernels: unsupported CPU");
  }
  g_forced.store(b ? static_cast<int>(*b) : -1, std::memory_order_relaxed);
}

std::string backend_name(Backend b) {
  return b == Backend::avx2 ? "avx2" : "scalar";
}

void gemm_acc(double* c, const double* a, const double* b,
              int64_t m, int64_t n, int64_t k, bool trans_a, bool trans_b) {
  thread_local std::vector<double> scratch_a;
  thread_local std::vector<double> scratch_b;
  if (trans_a) {
    // a is stored [k, m]; materialize [m, k].
    scratch_a.resize(static_cast<size_t>(m) * k);
    for (int64_t kk = 0; kk < k; ++kk) {
      for (int64_t i = 0; i < m; ++i) scratch_a[i * k + kk] = a[kk * m + i];
    }
    a = scratch_a.data();
  }
  if (trans_b) {
    // b is stored [n, k]; materialize [k, n].
    scratch_b.resize(static_cast<size_t>(k) * n);
    for (int64_t j = 0; j < n; ++j) {
      for (int64_t kk = 0; kk < k; ++kk) scratch_b[kk * n + j] = b[j * k + kk];
    }
    b = scratch_b.data();
  }
  active().gemm_nn_acc(c, a, b, m, n, k);
}

}  // namespace met::kernels
