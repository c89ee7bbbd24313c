#include <atomic>
#include <cstdlib>
#include <string_view>

#include "calib2stage/kernels.hpp"

namespace calib2stage::kernels {

#if defined(CALIB2STAGE_HAVE_AVX2)
const KernelTable* avx2_table_compiled();
#endif

const KernelTable* avx2_table() {
#if defined(CALIB2STAGE_HAVE_AVX2)
  static const bool supported = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  return supported ? avx2_table_compiled() : nullptr;
#else
  return nullptr;
#endif
}

namespace {

const KernelTable* best_available() {
  if (const auto* t = avx2_table()) return t;
  return &scalar_table();
}

const KernelTable* lookup(std::string_view name) {
  if (name == "scalar") return &scalar_table();
  if (name == "avx2") return avx2_table();
  if (name == "auto" || name.empty()) return best_available();
  return nullptr;
}

const KernelTable* initial_table() {
  if (const char* env = std::getenv("CALIB2STAGE_KERNELS")) {
    if (const auto* t = lookup(env)) return t;
  }
  return best_available();
}

std::atomic<const KernelTable*>& active_slot() {
  static std::atomic<const KernelTable*> slot{initial_table()};
  return slot;
}

}  // namespace

const KernelTable& active() { return *active_slot().load(std::memory_order_relaxed); }

bool select(std::string_view name) {
  const auto* t = lookup(name);
  if (!t) return false;
  active_slot().store(t, std::memory_order_relaxed);
  return true;
}

}  // namespace calib2stage::kernels
