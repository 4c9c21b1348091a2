#include <cstdlib>
#include <cstring>

#include "gradfit/simd/simd_ops.hpp"

namespace gradfit::simd {

extern const Ops kScalarOps;          // ops_scalar.cpp
const Ops* avx2_ops_or_null();        // ops_avx2.cpp

namespace {

Backend detect_backend() {
  if (const char* env = std::getenv("GRADFIT_SIMD")) {
    if (std::strcmp(env, "scalar") == 0) return Backend::Scalar;
    if (std::strcmp(env, "avx2") == 0 && avx2_supported()) return Backend::Avx2;
  }
  return avx2_supported() ? Backend::Avx2 : Backend::Scalar;
}

Backend g_backend = detect_backend();

}  // namespace

bool avx2_supported() {
#if defined(__x86_64__) || defined(__i386__)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma") &&
         avx2_ops_or_null() != nullptr;
#else
  return false;
#endif
}

Backend active_backend() { return g_backend; }

void set_backend(Backend b) {
  if (b == Backend::Avx2 && !avx2_supported()) b = Backend::Scalar;
  g_backend = b;
}

const Ops& ops() {
  return g_backend == Backend::Avx2 ? *avx2_ops_or_null() : kScalarOps;
}

const Ops* ops_for(Backend b) {
  if (b == Backend::Scalar) return &kScalarOps;
  return avx2_supported() ? avx2_ops_or_null() : nullptr;
}

std::string_view backend_name(Backend b) {
  return b == Backend::Avx2 ? "avx2" : "scalar";
}

}  // namespace gradfit::simd
