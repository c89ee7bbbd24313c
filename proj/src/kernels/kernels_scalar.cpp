#include <cmath>

#include "calib2stage/kernels.hpp"

namespace calib2stage::kernels {
namespace {

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = 0; i < m * n; ++i) c[i] = 0.0;
  }
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = trans_a ? a[p * m + i] : a[i * k + p];
      if (trans_b) {
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * b[j * k + p];
      } else {
        const double* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  }
}

void axpy(std::size_t n, double alpha, const double* x, double* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void add_row_bias(std::size_t rows, std::size_t cols, const double* bias, double* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = y + r * cols;
    for (std::size_t j = 0; j < cols; ++j) row[j] += bias[j];
  }
}

void relu_forward(std::size_t n, const double* x, double* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward(std::size_t n, const double* x, const double* gy, double* gx) {
  for (std::size_t i = 0; i < n; ++i) {
    if (x[i] > 0.0) gx[i] += gy[i];
  }
}

void mul_accumulate(std::size_t n, const double* a, const double* b, double* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] += a[i] * b[i];
}

void adam_update(std::size_t n, double* param, const double* grad, double* m, double* v,
                 const AdamCoefficients& coef) {
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grad[i];
    m[i] = coef.beta1 * m[i] + (1.0 - coef.beta1) * g;
    v[i] = coef.beta2 * v[i] + (1.0 - coef.beta2) * (g * g);
    const double m_hat = m[i] / coef.bias_correction1;
    const double v_hat = v[i] / coef.bias_correction2;
    param[i] -= coef.lr * m_hat / (std::sqrt(v_hat) + coef.eps);
  }
}

constexpr KernelTable kScalar{
    "scalar", gemm, axpy, add_row_bias, relu_forward, relu_backward, mul_accumulate, adam_update,
};

}  // namespace

const KernelTable& scalar_table() { return kScalar; }

}  // namespace calib2stage::kernels
