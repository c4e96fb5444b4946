#pragma once

// Dense inner loops of the transformer and optimizer.
//
// Every kernel has a scalar reference implementation and an AVX2+FMA
// variant. The variant is chosen once at startup from CPUID and can be
// overridden with set_backend(). Scalar and AVX2 results agree to rounding
// (reduction order differs), except adamw which is bitwise identical: it is
// elementwise and uses no fused operations.

#include <cstddef>

namespace stepdpo::kernels {

enum class Backend { scalar, avx2 };

const char* to_string(Backend b);

template <class T>
struct AdamWArgs {
  T lr;
  T beta1;
  T beta2;
  T eps;
  T weight_decay;
  T bias_correction1;  // 1 - beta1^t
  T bias_correction2;  // 1 - beta2^t
};

template <class T>
struct Table {
  Backend backend;

  T (*dot)(const T* a, const T* b, std::size_t n);
  // y += a * x
  void (*axpy)(T a, const T* x, T* y, std::size_t n);
  // y[r, o] = b[o] + sum_i w[o, i] x[r, i]; w is [out x in] row-major, b may be null.
  void (*linear_forward)(const T* x, std::size_t rows, std::size_t in, const T* w, const T* b,
                         std::size_t out, T* y);
  // dx[r, i] += sum_o dy[r, o] w[o, i]
  void (*linear_backward_input)(const T* dy, std::size_t rows, std::size_t out, const T* w,
                                std::size_t in, T* dx);
  // dw[o, i] += sum_r dy[r, o] x[r, i]; db[o] += sum_r dy[r, o] (db may be null)
  void (*linear_backward_params)(const T* dy, const T* x, std::size_t rows, std::size_t in,
                                 std::size_t out, T* dw, T* db);
  // Causal softmax attention. qkv is [L x 3d] (q | k | v, heads contiguous
  // within each), att receives [heads x L x L] probabilities, out is [L x d].
  void (*attention_forward)(const T* qkv, std::size_t L, std::size_t d, std::size_t heads, T* att,
                            T* out);
  // Accumulates into dqkv given dout; scratch holds L elements.
  void (*attention_backward)(const T* qkv, const T* att, const T* dout, std::size_t L, std::size_t d,
                             std::size_t heads, T* dqkv, T* scratch);
  // y = gelu(x), tanh approximation.
  void (*gelu_forward)(const T* x, T* y, std::size_t n);
  // dx = dy * gelu'(x)
  void (*gelu_backward)(const T* x, const T* dy, T* dx, std::size_t n);
  // Decoupled weight decay followed by the bias-corrected Adam step.
  void (*adamw)(T* p, const T* g, T* m, T* v, std::size_t n, const AdamWArgs<T>& args);
};

bool avx2_available();

/// Backend in use by table<T>().
Backend active_backend();
/// Throws Error(argument) if the backend is unavailable on this CPU/build.
void set_backend(Backend b);

template <class T>
const Table<T>& table();
template <class T>
const Table<T>& table(Backend b);

// Backend tables, defined in their own translation units.
template <class T>
const Table<T>& scalar_table();
template <class T>
const Table<T>* avx2_table();  // null when not compiled in

}  // namespace stepdpo::kernels
