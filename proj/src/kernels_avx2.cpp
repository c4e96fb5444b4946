// AVX2 + FMA kernels. This translation unit is compiled with -mavx2 -mfma
// and is only entered after a CPUID check in kernels.cpp.

#include <cmath>
#include <type_traits>

#include "stepdpo/kernels.hpp"
#include "attention_impl.hpp"

#if defined(STEPDPO_HAVE_AVX2)

#include <immintrin.h>

namespace stepdpo::kernels {

namespace {

template <class T>
struct Vec;

template <>
struct Vec<float> {
  using V = __m256;
  static constexpr std::size_t width = 8;
  static V zero() { return _mm256_setzero_ps(); }
  static V set1(float x) { return _mm256_set1_ps(x); }
  static V load(const float* p) { return _mm256_loadu_ps(p); }
  static void store(float* p, V v) { _mm256_storeu_ps(p, v); }
  static V fmadd(V a, V b, V c) { return _mm256_fmadd_ps(a, b, c); }
  static V add(V a, V b) { return _mm256_add_ps(a, b); }
  static V sub(V a, V b) { return _mm256_sub_ps(a, b); }
  static V mul(V a, V b) { return _mm256_mul_ps(a, b); }
  static V div(V a, V b) { return _mm256_div_ps(a, b); }
  static V sqrt(V a) { return _mm256_sqrt_ps(a); }
  static float hsum(V v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    __m128 sh = _mm_movehdup_ps(lo);
    __m128 s = _mm_add_ps(lo, sh);
    sh = _mm_movehl_ps(sh, s);
    s = _mm_add_ss(s, sh);
    return _mm_cvtss_f32(s);
  }
};

template <>
struct Vec<double> {
  using V = __m256d;
  static constexpr std::size_t width = 4;
  static V zero() { return _mm256_setzero_pd(); }
  static V set1(double x) { return _mm256_set1_pd(x); }
  static V load(const double* p) { return _mm256_loadu_pd(p); }
  static void store(double* p, V v) { _mm256_storeu_pd(p, v); }
  static V fmadd(V a, V b, V c) { return _mm256_fmadd_pd(a, b, c); }
  static V add(V a, V b) { return _mm256_add_pd(a, b); }
  static V sub(V a, V b) { return _mm256_sub_pd(a, b); }
  static V mul(V a, V b) { return _mm256_mul_pd(a, b); }
  static V div(V a, V b) { return _mm256_div_pd(a, b); }
  static V sqrt(V a) { return _mm256_sqrt_pd(a); }
  static double hsum(V v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d h = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, h));
  }
};

template <class T>
T dot(const T* a, const T* b, std::size_t n) {
  using S = Vec<T>;
  constexpr std::size_t W = S::width;
  auto acc0 = S::zero(), acc1 = S::zero();
  std::size_t i = 0;
  for (; i + 2 * W <= n; i += 2 * W) {
    acc0 = S::fmadd(S::load(a + i), S::load(b + i), acc0);
    acc1 = S::fmadd(S::load(a + i + W), S::load(b + i + W), acc1);
  }
  for (; i + W <= n; i += W) acc0 = S::fmadd(S::load(a + i), S::load(b + i), acc0);
  T s = S::hsum(S::add(acc0, acc1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <class T>
void axpy(T a, const T* x, T* y, std::size_t n) {
  using S = Vec<T>;
  constexpr std::size_t W = S::width;
  const auto av = S::set1(a);
  std::size_t i = 0;
  for (; i + W <= n; i += W) S::store(y + i, S::fmadd(av, S::load(x + i), S::load(y + i)));
  for (; i < n; ++i) y[i] += a * x[i];
}

// Two rows by four outputs per tile: eight accumulators share the weight loads.
template <class T>
void linear_forward(const T* x, std::size_t rows, std::size_t in, const T* w, const T* b,
                    std::size_t out, T* y) {
  using S = Vec<T>;
  constexpr std::size_t W = S::width;
  const std::size_t in_vec = in - in % W;
  std::size_t r = 0;
  for (; r + 2 <= rows; r += 2) {
    const T* x0 = x + r * in;
    const T* x1 = x0 + in;
    T* y0 = y + r * out;
    T* y1 = y0 + out;
    std::size_t o = 0;
    for (; o + 4 <= out; o += 4) {
      const T* w0 = w + o * in;
      const T* w1 = w0 + in;
      const T* w2 = w1 + in;
      const T* w3 = w2 + in;
      auto a00 = S::zero(), a01 = S::zero(), a02 = S::zero(), a03 = S::zero();
      auto a10 = S::zero(), a11 = S::zero(), a12 = S::zero(), a13 = S::zero();
      for (std::size_t i = 0; i < in_vec; i += W) {
        const auto xv0 = S::load(x0 + i), xv1 = S::load(x1 + i);
        const auto wv0 = S::load(w0 + i), wv1 = S::load(w1 + i);
        const auto wv2 = S::load(w2 + i), wv3 = S::load(w3 + i);
        a00 = S::fmadd(wv0, xv0, a00);
        a01 = S::fmadd(wv1, xv0, a01);
        a02 = S::fmadd(wv2, xv0, a02);
        a03 = S::fmadd(wv3, xv0, a03);
        a10 = S::fmadd(wv0, xv1, a10);
        a11 = S::fmadd(wv1, xv1, a11);
        a12 = S::fmadd(wv2, xv1, a12);
        a13 = S::fmadd(wv3, xv1, a13);
      }
      T s[2][4] = {{S::hsum(a00), S::hsum(a01), S::hsum(a02), S::hsum(a03)},
                   {S::hsum(a10), S::hsum(a11), S::hsum(a12), S::hsum(a13)}};
      for (std::size_t i = in_vec; i < in; ++i) {
        for (int j = 0; j < 4; ++j) {
          s[0][j] += w[(o + j) * in + i] * x0[i];
          s[1][j] += w[(o + j) * in + i] * x1[i];
        }
      }
      for (int j = 0; j < 4; ++j) {
        const T bias = b ? b[o + j] : T(0);
        y0[o + j] = s[0][j] + bias;
        y1[o + j] = s[1][j] + bias;
      }
    }
    for (; o < out; ++o) {
      const T bias = b ? b[o] : T(0);
      y0[o] = dot(w + o * in, x0, in) + bias;
      y1[o] = dot(w + o * in, x1, in) + bias;
    }
  }
  for (; r < rows; ++r) {
    const T* xr = x + r * in;
    T* yr = y + r * out;
    for (std::size_t o = 0; o < out; ++o) yr[o] = dot(w + o * in, xr, in) + (b ? b[o] : T(0));
  }
}

template <class T>
void linear_backward_input(const T* dy, std::size_t rows, std::size_t out, const T* w,
                           std::size_t in, T* dx) {
  using S = Vec<T>;
  constexpr std::size_t W = S::width;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* g = dy + r * out;
    T* d = dx + r * in;
    std::size_t i = 0;
    for (; i + 4 * W <= in; i += 4 * W) {
      auto c0 = S::load(d + i), c1 = S::load(d + i + W);
      auto c2 = S::load(d + i + 2 * W), c3 = S::load(d + i + 3 * W);
      for (std::size_t o = 0; o < out; ++o) {
        const auto s = S::set1(g[o]);
        const T* wr = w + o * in + i;
        c0 = S::fmadd(s, S::load(wr), c0);
        c1 = S::fmadd(s, S::load(wr + W), c1);
        c2 = S::fmadd(s, S::load(wr + 2 * W), c2);
        c3 = S::fmadd(s, S::load(wr + 3 * W), c3);
      }
      S::store(d + i, c0);
      S::store(d + i + W, c1);
      S::store(d + i + 2 * W, c2);
      S::store(d + i + 3 * W, c3);
    }
    for (; i + W <= in; i += W) {
      auto c = S::load(d + i);
      for (std::size_t o = 0; o < out; ++o) c = S::fmadd(S::set1(g[o]), S::load(w + o * in + i), c);
      S::store(d + i, c);
    }
    for (; i < in; ++i) {
      T c = d[i];
      for (std::size_t o = 0; o < out; ++o) c += g[o] * w[o * in + i];
      d[i] = c;
    }
  }
}

template <class T>
void linear_backward_params(const T* dy, const T* x, std::size_t rows, std::size_t in,
                            std::size_t out, T* dw, T* db) {
  using S = Vec<T>;
  constexpr std::size_t W = S::width;
  for (std::size_t o = 0; o < out; ++o) {
    T* d = dw + o * in;
    std::size_t i = 0;
    for (; i + 4 * W <= in; i += 4 * W) {
      auto c0 = S::load(d + i), c1 = S::load(d + i + W);
      auto c2 = S::load(d + i + 2 * W), c3 = S::load(d + i + 3 * W);
      for (std::size_t r = 0; r < rows; ++r) {
        const auto s = S::set1(dy[r * out + o]);
        const T* xr = x + r * in + i;
        c0 = S::fmadd(s, S::load(xr), c0);
        c1 = S::fmadd(s, S::load(xr + W), c1);
        c2 = S::fmadd(s, S::load(xr + 2 * W), c2);
        c3 = S::fmadd(s, S::load(xr + 3 * W), c3);
      }
      S::store(d + i, c0);
      S::store(d + i + W, c1);
      S::store(d + i + 2 * W, c2);
      S::store(d + i + 3 * W, c3);
    }
    for (; i + W <= in; i += W) {
      auto c = S::load(d + i);
      for (std::size_t r = 0; r < rows; ++r) c = S::fmadd(S::set1(dy[r * out + o]), S::load(x + r * in + i), c);
      S::store(d + i, c);
    }
    for (; i < in; ++i) {
      T c = d[i];
      for (std::size_t r = 0; r < rows; ++r) c += dy[r * out + o] * x[r * in + i];
      d[i] = c;
    }
    if (db) {
      T bsum = 0;
      for (std::size_t r = 0; r < rows; ++r) bsum += dy[r * out + o];
      db[o] += bsum;
    }
  }
}

constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC = 0.044715;

// Cephes-style expf: x = n*ln2 + r, degree-6 polynomial for e^r. Relative
// error below 2e-7 on the clamped range.
inline __m256 exp_ps(__m256 x) {
  x = _mm256_min_ps(_mm256_max_ps(x, _mm256_set1_ps(-87.3f)), _mm256_set1_ps(88.3f));
  __m256 fx = _mm256_fmadd_ps(x, _mm256_set1_ps(1.44269504088896341f), _mm256_set1_ps(0.5f));
  fx = _mm256_floor_ps(fx);
  x = _mm256_fnmadd_ps(fx, _mm256_set1_ps(0.693359375f), x);
  x = _mm256_fnmadd_ps(fx, _mm256_set1_ps(-2.12194440e-4f), x);
  __m256 y = _mm256_set1_ps(1.9875691500e-4f);
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.3981999507e-3f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(8.3334519073e-3f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(4.1665795894e-2f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.6666665459e-1f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(5.0000001201e-1f));
  y = _mm256_fmadd_ps(y, _mm256_mul_ps(x, x), _mm256_add_ps(x, _mm256_set1_ps(1.0f)));
  const __m256i n = _mm256_slli_epi32(_mm256_add_epi32(_mm256_cvttps_epi32(fx), _mm256_set1_epi32(127)), 23);
  return _mm256_mul_ps(y, _mm256_castsi256_ps(n));
}

// tanh(u) = sign(u) (1 - e) / (1 + e), e = exp(-2|u|)
inline __m256 tanh_ps(__m256 u) {
  const __m256 sign_mask = _mm256_set1_ps(-0.0f);
  const __m256 sign = _mm256_and_ps(u, sign_mask);
  const __m256 a = _mm256_andnot_ps(sign_mask, u);
  const __m256 e = exp_ps(_mm256_mul_ps(a, _mm256_set1_ps(-2.0f)));
  const __m256 one = _mm256_set1_ps(1.0f);
  const __m256 t = _mm256_div_ps(_mm256_sub_ps(one, e), _mm256_add_ps(one, e));
  return _mm256_or_ps(t, sign);
}

template <class T>
void gelu_forward(const T* x, T* y, std::size_t n) {
  const T k = static_cast<T>(kGeluK), c = static_cast<T>(kGeluC);
  std::size_t i = 0;
  if constexpr (std::is_same_v<T, float>) {
    const __m256 kv = _mm256_set1_ps(k), cv = _mm256_set1_ps(c), half = _mm256_set1_ps(0.5f),
                 one = _mm256_set1_ps(1.0f);
    for (; i + 8 <= n; i += 8) {
      const __m256 xv = _mm256_loadu_ps(x + i);
      const __m256 x3 = _mm256_mul_ps(_mm256_mul_ps(xv, xv), xv);
      const __m256 u = _mm256_mul_ps(kv, _mm256_fmadd_ps(cv, x3, xv));
      _mm256_storeu_ps(y + i, _mm256_mul_ps(_mm256_mul_ps(half, xv), _mm256_add_ps(one, tanh_ps(u))));
    }
  }
  for (; i < n; ++i) {
    const T u = k * (x[i] + c * x[i] * x[i] * x[i]);
    y[i] = T(0.5) * x[i] * (T(1) + std::tanh(u));
  }
}

template <class T>
void gelu_backward(const T* x, const T* dy, T* dx, std::size_t n) {
  const T k = static_cast<T>(kGeluK), c = static_cast<T>(kGeluC);
  std::size_t i = 0;
  if constexpr (std::is_same_v<T, float>) {
    const __m256 kv = _mm256_set1_ps(k), cv = _mm256_set1_ps(c), c3 = _mm256_set1_ps(3.0f * c),
                 half = _mm256_set1_ps(0.5f), one = _mm256_set1_ps(1.0f);
    for (; i + 8 <= n; i += 8) {
      const __m256 xv = _mm256_loadu_ps(x + i);
      const __m256 x2 = _mm256_mul_ps(xv, xv);
      const __m256 u = _mm256_mul_ps(kv, _mm256_fmadd_ps(cv, _mm256_mul_ps(x2, xv), xv));
      const __m256 th = tanh_ps(u);
      const __m256 du = _mm256_mul_ps(kv, _mm256_fmadd_ps(c3, x2, one));
      const __m256 sech2 = _mm256_fnmadd_ps(th, th, one);
      const __m256 g = _mm256_fmadd_ps(_mm256_mul_ps(_mm256_mul_ps(half, xv), sech2), du,
                                       _mm256_mul_ps(half, _mm256_add_ps(one, th)));
      _mm256_storeu_ps(dx + i, _mm256_mul_ps(_mm256_loadu_ps(dy + i), g));
    }
  }
  for (; i < n; ++i) {
    const T u = k * (x[i] + c * x[i] * x[i] * x[i]);
    const T th = std::tanh(u);
    const T du = k * (T(1) + T(3) * c * x[i] * x[i]);
    dx[i] = dy[i] * (T(0.5) * (T(1) + th) + T(0.5) * x[i] * (T(1) - th * th) * du);
  }
}

// No FMA here: the elementwise sequence matches the scalar kernel exactly.
template <class T>
void adamw(T* p, const T* g, T* m, T* v, std::size_t n, const AdamWArgs<T>& a) {
  using S = Vec<T>;
  constexpr std::size_t W = S::width;
  const T decay = T(1) - a.lr * a.weight_decay;
  const T one_m_b1 = T(1) - a.beta1;
  const T one_m_b2 = T(1) - a.beta2;
  const auto b1 = S::set1(a.beta1), b2 = S::set1(a.beta2);
  const auto c1 = S::set1(one_m_b1), c2 = S::set1(one_m_b2);
  const auto bc1 = S::set1(a.bias_correction1), bc2 = S::set1(a.bias_correction2);
  const auto eps = S::set1(a.eps), lr = S::set1(a.lr), dec = S::set1(decay);
  std::size_t i = 0;
  for (; i + W <= n; i += W) {
    const auto gv = S::load(g + i);
    const auto mv = S::add(S::mul(b1, S::load(m + i)), S::mul(c1, gv));
    const auto vv = S::add(S::mul(b2, S::load(v + i)), S::mul(c2, S::mul(gv, gv)));
    S::store(m + i, mv);
    S::store(v + i, vv);
    const auto mhat = S::div(mv, bc1);
    const auto denom = S::add(S::sqrt(S::div(vv, bc2)), eps);
    S::store(p + i, S::sub(S::mul(S::load(p + i), dec), S::mul(lr, S::div(mhat, denom))));
  }
  for (; i < n; ++i) {
    m[i] = a.beta1 * m[i] + one_m_b1 * g[i];
    v[i] = a.beta2 * v[i] + one_m_b2 * (g[i] * g[i]);
    const T mhat = m[i] / a.bias_correction1;
    const T denom = std::sqrt(v[i] / a.bias_correction2) + a.eps;
    p[i] = p[i] * decay - a.lr * (mhat / denom);
  }
}

template <class T>
struct Primitives {
  static T dot(const T* a, const T* b, std::size_t n) { return kernels::dot<T>(a, b, n); }
  static void axpy(T a, const T* x, T* y, std::size_t n) { kernels::axpy<T>(a, x, y, n); }
};

template <class T>
const Table<T> kTable{Backend::avx2, &dot<T>, &axpy<T>, &linear_forward<T>,
                      &linear_backward_input<T>, &linear_backward_params<T>,
                      &detail::attention_forward<T, Primitives<T>>,
                      &detail::attention_backward<T, Primitives<T>>, &gelu_forward<T>,
                      &gelu_backward<T>, &adamw<T>};

}  // namespace

template <class T>
const Table<T>* avx2_table() {
  return &kTable<T>;
}

template const Table<float>* avx2_table<float>();
template const Table<double>* avx2_table<double>();

}  // namespace stepdpo::kernels

#endif  // STEPDPO_HAVE_AVX2
