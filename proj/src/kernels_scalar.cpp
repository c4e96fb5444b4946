#include <cmath>

#include "stepdpo/kernels.hpp"
#include "attention_impl.hpp"

namespace stepdpo::kernels {

namespace {

template <class T>
T dot(const T* a, const T* b, std::size_t n) {
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <class T>
void axpy(T a, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <class T>
void linear_forward(const T* x, std::size_t rows, std::size_t in, const T* w, const T* b,
                    std::size_t out, T* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * in;
    T* yr = y + r * out;
    for (std::size_t o = 0; o < out; ++o) {
      yr[o] = dot(w + o * in, xr, in) + (b ? b[o] : T(0));
    }
  }
}

template <class T>
void linear_backward_input(const T* dy, std::size_t rows, std::size_t out, const T* w,
                           std::size_t in, T* dx) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t o = 0; o < out; ++o) axpy(dy[r * out + o], w + o * in, dx + r * in, in);
  }
}

template <class T>
void linear_backward_params(const T* dy, const T* x, std::size_t rows, std::size_t in,
                            std::size_t out, T* dw, T* db) {
  for (std::size_t o = 0; o < out; ++o) {
    T bsum = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      const T g = dy[r * out + o];
      bsum += g;
      axpy(g, x + r * in, dw + o * in, in);
    }
    if (db) db[o] += bsum;
  }
}

constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC = 0.044715;

template <class T>
void gelu_forward(const T* x, T* y, std::size_t n) {
  const T k = static_cast<T>(kGeluK), c = static_cast<T>(kGeluC);
  for (std::size_t i = 0; i < n; ++i) {
    const T u = k * (x[i] + c * x[i] * x[i] * x[i]);
    y[i] = T(0.5) * x[i] * (T(1) + std::tanh(u));
  }
}

template <class T>
void gelu_backward(const T* x, const T* dy, T* dx, std::size_t n) {
  const T k = static_cast<T>(kGeluK), c = static_cast<T>(kGeluC);
  for (std::size_t i = 0; i < n; ++i) {
    const T u = k * (x[i] + c * x[i] * x[i] * x[i]);
    const T th = std::tanh(u);
    const T du = k * (T(1) + T(3) * c * x[i] * x[i]);
    dx[i] = dy[i] * (T(0.5) * (T(1) + th) + T(0.5) * x[i] * (T(1) - th * th) * du);
  }
}

template <class T>
void adamw(T* p, const T* g, T* m, T* v, std::size_t n, const AdamWArgs<T>& a) {
  const T decay = T(1) - a.lr * a.weight_decay;
  const T one_m_b1 = T(1) - a.beta1;
  const T one_m_b2 = T(1) - a.beta2;
  for (std::size_t i = 0; i < n; ++i) {
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
const Table<T> kTable{Backend::scalar, &dot<T>, &axpy<T>, &linear_forward<T>,
                      &linear_backward_input<T>, &linear_backward_params<T>,
                      &detail::attention_forward<T, Primitives<T>>,
                      &detail::attention_backward<T, Primitives<T>>, &gelu_forward<T>,
                      &gelu_backward<T>, &adamw<T>};

}  // namespace

template <class T>
const Table<T>& scalar_table() {
  return kTable<T>;
}

template const Table<float>& scalar_table<float>();
template const Table<double>& scalar_table<double>();

}  // namespace stepdpo::kernels
