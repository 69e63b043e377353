#include "aggsum/kernels.hpp"

#include <atomic>
#include <cmath>
#include <limits>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "aggsum/error.hpp"

namespace aggsum::kernels {

namespace {

std::atomic<std::size_t> g_threshold{1u << 15};

bool in_parallel() {
#ifdef _OPENMP
  return omp_in_parallel() != 0;
#else
  return true;
#endif
}

// One output row of the product. The p-loop order is shared by every
// variant so that the transposed and plain layouts round identically.
template <typename T>
inline void gemm_row(const GemmArgs<T>& g, std::size_t i) {
  T* crow = g.c + i * g.n;
  if (!g.accumulate) {
    for (std::size_t j = 0; j < g.n; ++j) crow[j] = T(0);
  }
  if (!g.trans_b) {
    for (std::size_t p = 0; p < g.k; ++p) {
      const T av = g.trans_a ? g.a[p * g.m + i] : g.a[i * g.k + p];
      const T* brow = g.b + p * g.n;
      for (std::size_t j = 0; j < g.n; ++j) crow[j] += av * brow[j];
    }
  } else {
    for (std::size_t j = 0; j < g.n; ++j) {
      const T* brow = g.b + j * g.k;
      T acc = crow[j];
      for (std::size_t p = 0; p < g.k; ++p) {
        const T av = g.trans_a ? g.a[p * g.m + i] : g.a[i * g.k + p];
        acc += av * brow[p];
      }
      crow[j] = acc;
    }
  }
}

template <typename T>
inline void softmax_row(const SoftmaxArgs<T>& s, std::size_t r) {
  const T* x = s.x + r * s.cols;
  const std::uint8_t* m = s.mask ? s.mask + r * s.cols : nullptr;
  T* y = s.out + r * s.cols;
  T mx = -std::numeric_limits<T>::infinity();
  bool any = false;
  for (std::size_t j = 0; j < s.cols; ++j) {
    if (m && m[j]) continue;
    any = true;
    if (x[j] > mx) mx = x[j];
  }
  if (!any) throw ContractError("softmax: every position of row " + std::to_string(r) + " is masked");
  T sum = T(0);
  for (std::size_t j = 0; j < s.cols; ++j) {
    if (m && m[j]) continue;
    sum += std::exp(x[j] - mx);
  }
  if (s.log_space) {
    const T lse = std::log(sum);
    for (std::size_t j = 0; j < s.cols; ++j) {
      y[j] = (m && m[j]) ? -std::numeric_limits<T>::infinity() : x[j] - mx - lse;
    }
  } else {
    for (std::size_t j = 0; j < s.cols; ++j) {
      y[j] = (m && m[j]) ? T(0) : std::exp(x[j] - mx) / sum;
    }
  }
}

template <typename T>
inline void layer_norm_row(const LayerNormArgs<T>& a, std::size_t r) {
  const T* x = a.x + r * a.cols;
  T* y = a.out + r * a.cols;
  T mean = T(0);
  for (std::size_t j = 0; j < a.cols; ++j) mean += x[j];
  mean /= static_cast<T>(a.cols);
  T var = T(0);
  for (std::size_t j = 0; j < a.cols; ++j) {
    const T d = x[j] - mean;
    var += d * d;
  }
  var /= static_cast<T>(a.cols);
  const T rstd = T(1) / std::sqrt(var + a.eps);
  for (std::size_t j = 0; j < a.cols; ++j) {
    y[j] = (x[j] - mean) * rstd * a.gain[j] + a.bias[j];
  }
  if (a.mean) a.mean[r] = mean;
  if (a.rstd) a.rstd[r] = rstd;
}

}  // namespace

namespace serial {

template <typename T>
void gemm(const GemmArgs<T>& args) {
  for (std::size_t i = 0; i < args.m; ++i) gemm_row(args, i);
}

template <typename T>
void softmax_rows(const SoftmaxArgs<T>& args) {
  for (std::size_t r = 0; r < args.rows; ++r) softmax_row(args, r);
}

template <typename T>
void layer_norm_rows(const LayerNormArgs<T>& args) {
  for (std::size_t r = 0; r < args.rows; ++r) layer_norm_row(args, r);
}

}  // namespace serial

namespace omp {

template <typename T>
void gemm(const GemmArgs<T>& args) {
  const auto m = static_cast<std::ptrdiff_t>(args.m);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < m; ++i) gemm_row(args, static_cast<std::size_t>(i));
}

template <typename T>
void softmax_rows(const SoftmaxArgs<T>& args) {
  // Masked-row errors must not escape an OpenMP region, so validate first.
  if (args.mask) {
    for (std::size_t r = 0; r < args.rows; ++r) {
      bool any = false;
      for (std::size_t j = 0; j < args.cols && !any; ++j) any = args.mask[r * args.cols + j] == 0;
      if (!any) throw ContractError("softmax: every position of row " + std::to_string(r) + " is masked");
    }
  }
  const auto rows = static_cast<std::ptrdiff_t>(args.rows);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < rows; ++r) softmax_row(args, static_cast<std::size_t>(r));
}

template <typename T>
void layer_norm_rows(const LayerNormArgs<T>& args) {
  const auto rows = static_cast<std::ptrdiff_t>(args.rows);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < rows; ++r) layer_norm_row(args, static_cast<std::size_t>(r));
}

}  // namespace omp

template <typename T>
void gemm(const GemmArgs<T>& args) {
  if (args.m > 1 && args.m * args.k * args.n >= g_threshold.load() && !in_parallel()) {
    omp::gemm(args);
  } else {
    serial::gemm(args);
  }
}

template <typename T>
void softmax_rows(const SoftmaxArgs<T>& args) {
  if (args.rows > 1 && args.rows * args.cols * 8 >= g_threshold.load() && !in_parallel()) {
    omp::softmax_rows(args);
  } else {
    serial::softmax_rows(args);
  }
}

template <typename T>
void layer_norm_rows(const LayerNormArgs<T>& args) {
  if (args.rows > 1 && args.rows * args.cols * 8 >= g_threshold.load() && !in_parallel()) {
    omp::layer_norm_rows(args);
  } else {
    serial::layer_norm_rows(args);
  }
}

void set_parallel_threshold(std::size_t flops) { g_threshold.store(flops); }
std::size_t parallel_threshold() { return g_threshold.load(); }

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

#define AGGSUM_INSTANTIATE(T)                                        \
  template void serial::gemm<T>(const GemmArgs<T>&);                 \
  template void serial::softmax_rows<T>(const SoftmaxArgs<T>&);      \
  template void serial::layer_norm_rows<T>(const LayerNormArgs<T>&); \
  template void omp::gemm<T>(const GemmArgs<T>&);                    \
  template void omp::softmax_rows<T>(const SoftmaxArgs<T>&);         \
  template void omp::layer_norm_rows<T>(const LayerNormArgs<T>&);    \
  template void gemm<T>(const GemmArgs<T>&);                         \
  template void softmax_rows<T>(const SoftmaxArgs<T>&);              \
  template void layer_norm_rows<T>(const LayerNormArgs<T>&);

AGGSUM_INSTANTIATE(float)
AGGSUM_INSTANTIATE(double)
AGGSUM_INSTANTIATE(long double)

#undef AGGSUM_INSTANTIATE

}  // namespace aggsum::kernels
