#pragma once

// Data-parallel inner loops behind the tensor ops. Every kernel has a scalar
// reference implementation; SIMD variants are selected at runtime when the
// CPU supports them and are equivalence-tested against the scalar table.

#include <cstddef>
#include <string_view>

namespace calib2stage::kernels {

struct AdamCoefficients {
  double lr;
  double beta1;
  double beta2;
  double eps;
  double bias_correction1;  // 1 - beta1^t
  double bias_correction2;  // 1 - beta2^t
};

struct KernelTable {
  const char* name;

  // C[m x n] = (accumulate ? C : 0) + op(A) * op(B), all row-major.
  // op(A) is m x k (A is stored k x m when trans_a); op(B) is k x n.
  void (*gemm)(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
               const double* a, const double* b, double* c, bool accumulate);

  // y += alpha * x
  void (*axpy)(std::size_t n, double alpha, const double* x, double* y);

  // y[r, :] += bias for every row r
  void (*add_row_bias)(std::size_t rows, std::size_t cols, const double* bias, double* y);

  // y = max(x, 0)
  void (*relu_forward)(std::size_t n, const double* x, double* y);

  // gx += gy where x > 0 (subgradient 0 at x == 0)
  void (*relu_backward)(std::size_t n, const double* x, const double* gy, double* gx);

  // out += a * b elementwise
  void (*mul_accumulate)(std::size_t n, const double* a, const double* b, double* out);

  // One bias-corrected Adam update over n parameters.
  void (*adam_update)(std::size_t n, double* param, const double* grad, double* m, double* v,
                      const AdamCoefficients& coef);
};

const KernelTable& scalar_table();

// nullptr when the variant was not compiled in or the CPU lacks the ISA.
const KernelTable* avx2_table();

// The table used by tensor ops. Defaults to the best supported variant; the
// CALIB2STAGE_KERNELS environment variable ("scalar" | "avx2") overrides.
const KernelTable& active();

// Force a variant by name ("scalar", "avx2", "auto"). Returns false when the
// requested variant is unavailable; the active table is then unchanged.
bool select(std::string_view name);

}  // namespace calib2stage::kernels
