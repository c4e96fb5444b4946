#pragma once

// Causal multi-head attention over a packed [L x 3d] q|k|v buffer, written
// once against a primitive set `P` (P::dot, P::axpy) and instantiated by
// each kernel backend.

#include <cmath>
#include <cstddef>
#include <limits>

namespace stepdpo::kernels::detail {

// att is [heads x L x L] (only s <= t is written); out is [L x d].
template <class T, class P>
void attention_forward(const T* qkv, std::size_t L, std::size_t d, std::size_t heads, T* att, T* out) {
  const std::size_t dh = d / heads;
  const std::size_t stride = 3 * d;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  for (std::size_t t = 0; t < L; ++t) {
    for (std::size_t i = 0; i < d; ++i) out[t * d + i] = T(0);
  }
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t t = 0; t < L; ++t) {
      const T* q = qkv + t * stride + h * dh;
      T* row = att + (h * L + t) * L;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t s = 0; s <= t; ++s) {
        row[s] = P::dot(q, qkv + s * stride + d + h * dh, dh) * scale;
        if (row[s] > mx) mx = row[s];
      }
      T sum = 0;
      for (std::size_t s = 0; s <= t; ++s) {
        row[s] = std::exp(row[s] - mx);
        sum += row[s];
      }
      const T inv = T(1) / sum;
      T* o = out + t * d + h * dh;
      for (std::size_t s = 0; s <= t; ++s) {
        row[s] *= inv;
        P::axpy(row[s], qkv + s * stride + 2 * d + h * dh, o, dh);
      }
    }
  }
}

// Accumulates into dqkv. scratch needs L elements.
template <class T, class P>
void attention_backward(const T* qkv, const T* att, const T* dout, std::size_t L, std::size_t d,
                        std::size_t heads, T* dqkv, T* scratch) {
  const std::size_t dh = d / heads;
  const std::size_t stride = 3 * d;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t t = 0; t < L; ++t) {
      const T* row = att + (h * L + t) * L;
      const T* g = dout + t * d + h * dh;
      const T* q = qkv + t * stride + h * dh;
      T* dq = dqkv + t * stride + h * dh;
      T weighted = 0;
      for (std::size_t s = 0; s <= t; ++s) {
        const std::size_t v_off = s * stride + 2 * d + h * dh;
        scratch[s] = P::dot(g, qkv + v_off, dh);
        weighted += row[s] * scratch[s];
        P::axpy(row[s], g, dqkv + v_off, dh);
      }
      for (std::size_t s = 0; s <= t; ++s) {
        const T ds = row[s] * (scratch[s] - weighted) * scale;
        const std::size_t k_off = s * stride + d + h * dh;
        P::axpy(ds, qkv + k_off, dq, dh);
        P::axpy(ds, q, dqkv + k_off, dh);
      }
    }
  }
}

}  // namespace stepdpo::kernels::detail
