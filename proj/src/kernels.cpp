#include "stepdpo/kernels.hpp"

#include <atomic>

#include "stepdpo/error.hpp"

namespace stepdpo::kernels {

namespace {

Backend detect() { return avx2_available() ? Backend::avx2 : Backend::scalar; }

std::atomic<Backend>& current() {
  static std::atomic<Backend> b{detect()};
  return b;
}

}  // namespace

const char* to_string(Backend b) { return b == Backend::avx2 ? "avx2" : "scalar"; }

bool avx2_available() {
#if defined(STEPDPO_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
  static const bool ok = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  return ok && avx2_table<float>() != nullptr;
#else
  return false;
#endif
}

Backend active_backend() { return current().load(std::memory_order_relaxed); }

void set_backend(Backend b) {
  if (b == Backend::avx2 && !avx2_available()) {
    throw Error(ErrorKind::argument, "AVX2 kernels are not available on this CPU or build");
  }
  current().store(b, std::memory_order_relaxed);
}

template <class T>
const Table<T>& table(Backend b) {
  if (b == Backend::avx2) {
    if (!avx2_available()) throw Error(ErrorKind::argument, "AVX2 kernels are not available");
    return *avx2_table<T>();
  }
  return scalar_table<T>();
}

template <class T>
const Table<T>& table() {
  return table<T>(active_backend());
}

template const Table<float>& table<float>();
template const Table<double>& table<double>();
template const Table<float>& table<float>(Backend);
template const Table<double>& table<double>(Backend);

#if !defined(STEPDPO_HAVE_AVX2)
template <class T>
const Table<T>* avx2_table() {
  return nullptr;
}
template const Table<float>* avx2_table<float>();
template const Table<double>* avx2_table<double>();
#endif

}  // namespace stepdpo::kernels
