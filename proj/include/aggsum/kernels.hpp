#pragma once

#include <cstddef>
#include <cstdint>

namespace aggsum::kernels {

// Row-major dense kernels. Every kernel exists twice: a serial reference
// in `serial` and an OpenMP version in `omp` that splits work by output
// row. Both accumulate each output element in the same order, so their
// results are bitwise identical for any thread count.
//
// The unqualified entry points dispatch to the OpenMP version for large
// problems when not already inside a parallel region.

// c[m,n] = op(a)[m,k] * op(b)[k,n]  (or += when accumulate is set).
// With trans_a, a is stored as [k,m]; with trans_b, b is stored as [n,k].
template <typename T>
struct GemmArgs {
  std::size_t m = 0, k = 0, n = 0;
  const T* a = nullptr;
  bool trans_a = false;
  const T* b = nullptr;
  bool trans_b = false;
  T* c = nullptr;
  bool accumulate = false;
};

// Softmax over each row of x[rows, cols]. When mask is non-null, entries
// with mask != 0 are excluded and receive exactly 0. Throws ContractError
// when a row is entirely masked.
template <typename T>
struct SoftmaxArgs {
  std::size_t rows = 0, cols = 0;
  const T* x = nullptr;
  const std::uint8_t* mask = nullptr;
  T* out = nullptr;
  bool log_space = false;  // write log-softmax instead
};

// Per-row layer normalization y = gain * (x - mean) / sqrt(var + eps) + bias.
// mean and rstd (1/sqrt(var+eps)) are written per row when non-null.
template <typename T>
struct LayerNormArgs {
  std::size_t rows = 0, cols = 0;
  const T* x = nullptr;
  const T* gain = nullptr;
  const T* bias = nullptr;
  T eps = T(1e-6);
  T* out = nullptr;
  T* mean = nullptr;
  T* rstd = nullptr;
};

namespace serial {
template <typename T> void gemm(const GemmArgs<T>& args);
template <typename T> void softmax_rows(const SoftmaxArgs<T>& args);
template <typename T> void layer_norm_rows(const LayerNormArgs<T>& args);
}  // namespace serial

namespace omp {
template <typename T> void gemm(const GemmArgs<T>& args);
template <typename T> void softmax_rows(const SoftmaxArgs<T>& args);
template <typename T> void layer_norm_rows(const LayerNormArgs<T>& args);
}  // namespace omp

template <typename T> void gemm(const GemmArgs<T>& args);
template <typename T> void softmax_rows(const SoftmaxArgs<T>& args);
template <typename T> void layer_norm_rows(const LayerNormArgs<T>& args);

// Work size (multiply-adds) above which the dispatching entry points use
// the OpenMP kernels. Zero forces OpenMP for every call.
void set_parallel_threshold(std::size_t flops);
std::size_t parallel_threshold();

// Number of OpenMP threads available (1 when built without OpenMP).
int max_threads();

}  // namespace aggsum::kernels
