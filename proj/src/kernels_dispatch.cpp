// SPDX-License-Identifier: Apache-2.0
#include "sftn/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <cstring>

namespace sftn::kern {

const FloatKernels& scalar_float_table();       // kernels_scalar.cpp
const FloatKernels* avx2_float_table_or_null(); // kernels_avx2.cpp

namespace {

std::atomic<const FloatKernels*> g_table{nullptr};
std::atomic<Backend> g_backend{Backend::scalar};

bool detect_avx2() {
#if defined(__x86_64__) || defined(_M_X64)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma") &&
         avx2_float_table_or_null() != nullptr;
#else
  return false;
#endif
}

// Resolution order: SFTN_KERNELS env override, then CPU detection.
void resolve_once() {
  if (g_table.load(std::memory_order_acquire)) return;
  Backend b = detect_avx2() ? Backend::avx2 : Backend::scalar;
  if (const char* env = std::getenv("SFTN_KERNELS")) {
    if (std::strcmp(env, "scalar") == 0) {
      b = Backend::scalar;
    } else if (std::strcmp(env, "avx2") == 0) {
      if (!detect_avx2()) throw ConfigError("SFTN_KERNELS=avx2: CPU lacks AVX2/FMA");
      b = Backend::avx2;
    } else if (std::strcmp(env, "auto") != 0) {
      throw ConfigError(std::string("SFTN_KERNELS: unknown backend '") + env +
                        "' (expected scalar|avx2|auto)");
    }
  }
  g_backend.store(b, std::memory_order_relaxed);
  g_table.store(b == Backend::avx2 ? avx2_float_table_or_null() : &scalar_float_table(),
                std::memory_order_release);
}

}  // namespace

bool cpu_supports_avx2() { return detect_avx2(); }

Backend active_backend() {
  resolve_once();
  return g_backend.load(std::memory_order_relaxed);
}

const char* backend_name() {
  return active_backend() == Backend::avx2 ? "avx2" : "scalar";
}

void set_backend(Backend b) {
  if (b == Backend::avx2 && !detect_avx2())
    throw ConfigError("set_backend(avx2): CPU lacks AVX2/FMA");
  g_backend.store(b, std::memory_order_relaxed);
  g_table.store(b == Backend::avx2 ? avx2_float_table_or_null() : &scalar_float_table(),
                std::memory_order_release);
}

const FloatKernels& float_table() {
  resolve_once();
  return *g_table.load(std::memory_order_acquire);
}

}  // namespace sftn::kern
