// Built with -mavx2 -mfma -ffp-contract=off. Only gemm uses fused multiply-add;
// every other kernel performs the same IEEE operations in the same order as
// the scalar table and is bit-identical to it.

#include <immintrin.h>

#include <cmath>
#include <vector>

#include "calib2stage/kernels.hpp"

namespace calib2stage::kernels {
namespace {

// C[m x n] += A[m x k] * B[k x n], all row-major and untransposed.
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c) {
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
      __m256d c00 = _mm256_loadu_pd(c + (i + 0) * n + j);
      __m256d c01 = _mm256_loadu_pd(c + (i + 0) * n + j + 4);
      __m256d c10 = _mm256_loadu_pd(c + (i + 1) * n + j);
      __m256d c11 = _mm256_loadu_pd(c + (i + 1) * n + j + 4);
      __m256d c20 = _mm256_loadu_pd(c + (i + 2) * n + j);
      __m256d c21 = _mm256_loadu_pd(c + (i + 2) * n + j + 4);
      __m256d c30 = _mm256_loadu_pd(c + (i + 3) * n + j);
      __m256d c31 = _mm256_loadu_pd(c + (i + 3) * n + j + 4);
      const double* a0 = a + (i + 0) * k;
      const double* a1 = a + (i + 1) * k;
      const double* a2 = a + (i + 2) * k;
      const double* a3 = a + (i + 3) * k;
      for (std::size_t p = 0; p < k; ++p) {
        const __m256d b0 = _mm256_loadu_pd(b + p * n + j);
        const __m256d b1 = _mm256_loadu_pd(b + p * n + j + 4);
        __m256d av = _mm256_broadcast_sd(a0 + p);
        c00 = _mm256_fmadd_pd(av, b0, c00);
        c01 = _mm256_fmadd_pd(av, b1, c01);
        av = _mm256_broadcast_sd(a1 + p);
        c10 = _mm256_fmadd_pd(av, b0, c10);
        c11 = _mm256_fmadd_pd(av, b1, c11);
        av = _mm256_broadcast_sd(a2 + p);
        c20 = _mm256_fmadd_pd(av, b0, c20);
        c21 = _mm256_fmadd_pd(av, b1, c21);
        av = _mm256_broadcast_sd(a3 + p);
        c30 = _mm256_fmadd_pd(av, b0, c30);
        c31 = _mm256_fmadd_pd(av, b1, c31);
      }
      _mm256_storeu_pd(c + (i + 0) * n + j, c00);
      _mm256_storeu_pd(c + (i + 0) * n + j + 4, c01);
      _mm256_storeu_pd(c + (i + 1) * n + j, c10);
      _mm256_storeu_pd(c + (i + 1) * n + j + 4, c11);
      _mm256_storeu_pd(c + (i + 2) * n + j, c20);
      _mm256_storeu_pd(c + (i + 2) * n + j + 4, c21);
      _mm256_storeu_pd(c + (i + 3) * n + j, c30);
      _mm256_storeu_pd(c + (i + 3) * n + j + 4, c31);
    }
    for (; i < m; ++i) {
      __m256d c0 = _mm256_loadu_pd(c + i * n + j);
      __m256d c1 = _mm256_loadu_pd(c + i * n + j + 4);
      for (std::size_t p = 0; p < k; ++p) {
        const __m256d av = _mm256_broadcast_sd(a + i * k + p);
        c0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b + p * n + j), c0);
        c1 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b + p * n + j + 4), c1);
      }
      _mm256_storeu_pd(c + i * n + j, c0);
      _mm256_storeu_pd(c + i * n + j + 4, c1);
    }
  }
  for (; j + 4 <= n; j += 4) {
    for (std::size_t i = 0; i < m; ++i) {
      __m256d c0 = _mm256_loadu_pd(c + i * n + j);
      for (std::size_t p = 0; p < k; ++p) {
        c0 = _mm256_fmadd_pd(_mm256_broadcast_sd(a + i * k + p), _mm256_loadu_pd(b + p * n + j),
                             c0);
      }
      _mm256_storeu_pd(c + i * n + j, c0);
    }
  }
  for (; j < n; ++j) {
    for (std::size_t i = 0; i < m; ++i) {
      double acc = c[i * n + j];
      for (std::size_t p = 0; p < k; ++p) acc = std::fma(a[i * k + p], b[p * n + j], acc);
      c[i * n + j] = acc;
    }
  }
}

void transpose(std::size_t rows, std::size_t cols, const double* src, std::vector<double>& dst) {
  dst.resize(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
  }
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate) {
  thread_local std::vector<double> a_packed;
  thread_local std::vector<double> b_packed;
  if (!accumulate) {
    for (std::size_t i = 0; i < m * n; ++i) c[i] = 0.0;
  }
  if (trans_a) {
    transpose(k, m, a, a_packed);
    a = a_packed.data();
  }
  if (trans_b) {
    transpose(n, k, b, b_packed);
    b = b_packed.data();
  }
  gemm_nn(m, n, k, a, b, c);
}

void axpy(std::size_t n, double alpha, const double* x, double* y) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d prod = _mm256_mul_pd(va, _mm256_loadu_pd(x + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), prod));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void add_row_bias(std::size_t rows, std::size_t cols, const double* bias, double* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = y + r * cols;
    std::size_t j = 0;
    for (; j + 4 <= cols; j += 4) {
      _mm256_storeu_pd(row + j, _mm256_add_pd(_mm256_loadu_pd(row + j), _mm256_loadu_pd(bias + j)));
    }
    for (; j < cols; ++j) row[j] += bias[j];
  }
}

void relu_forward(std::size_t n, const double* x, double* y) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d v = _mm256_loadu_pd(x + i);
    const __m256d positive = _mm256_cmp_pd(v, zero, _CMP_GT_OQ);
    _mm256_storeu_pd(y + i, _mm256_and_pd(positive, v));
  }
  for (; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward(std::size_t n, const double* x, const double* gy, double* gx) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d positive = _mm256_cmp_pd(_mm256_loadu_pd(x + i), zero, _CMP_GT_OQ);
    const __m256d old = _mm256_loadu_pd(gx + i);
    const __m256d summed = _mm256_add_pd(old, _mm256_loadu_pd(gy + i));
    _mm256_storeu_pd(gx + i, _mm256_blendv_pd(old, summed, positive));
  }
  for (; i < n; ++i) {
    if (x[i] > 0.0) gx[i] += gy[i];
  }
}

void mul_accumulate(std::size_t n, const double* a, const double* b, double* out) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d prod = _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i));
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(out + i), prod));
  }
  for (; i < n; ++i) out[i] += a[i] * b[i];
}

void adam_update(std::size_t n, double* param, const double* grad, double* m, double* v,
                 const AdamCoefficients& coef) {
  const __m256d b1 = _mm256_set1_pd(coef.beta1);
  const __m256d b2 = _mm256_set1_pd(coef.beta2);
  const __m256d one_minus_b1 = _mm256_set1_pd(1.0 - coef.beta1);
  const __m256d one_minus_b2 = _mm256_set1_pd(1.0 - coef.beta2);
  const __m256d bc1 = _mm256_set1_pd(coef.bias_correction1);
  const __m256d bc2 = _mm256_set1_pd(coef.bias_correction2);
  const __m256d lr = _mm256_set1_pd(coef.lr);
  const __m256d eps = _mm256_set1_pd(coef.eps);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d g = _mm256_loadu_pd(grad + i);
    const __m256d mi = _mm256_add_pd(_mm256_mul_pd(b1, _mm256_loadu_pd(m + i)),
                                     _mm256_mul_pd(one_minus_b1, g));
    const __m256d vi = _mm256_add_pd(_mm256_mul_pd(b2, _mm256_loadu_pd(v + i)),
                                     _mm256_mul_pd(one_minus_b2, _mm256_mul_pd(g, g)));
    _mm256_storeu_pd(m + i, mi);
    _mm256_storeu_pd(v + i, vi);
    const __m256d m_hat = _mm256_div_pd(mi, bc1);
    const __m256d v_hat = _mm256_div_pd(vi, bc2);
    const __m256d step =
        _mm256_div_pd(_mm256_mul_pd(lr, m_hat), _mm256_add_pd(_mm256_sqrt_pd(v_hat), eps));
    _mm256_storeu_pd(param + i, _mm256_sub_pd(_mm256_loadu_pd(param + i), step));
  }
  for (; i < n; ++i) {
    const double g = grad[i];
    m[i] = coef.beta1 * m[i] + (1.0 - coef.beta1) * g;
    v[i] = coef.beta2 * v[i] + (1.0 - coef.beta2) * (g * g);
    const double m_hat = m[i] / coef.bias_correction1;
    const double v_hat = v[i] / coef.bias_correction2;
    param[i] -= coef.lr * m_hat / (std::sqrt(v_hat) + coef.eps);
  }
}

constexpr KernelTable kAvx2{
    "avx2", gemm, axpy, add_row_bias, relu_forward, relu_backward, mul_accumulate, adam_update,
};

}  // namespace

const KernelTable* avx2_table_compiled() { return &kAvx2; }

}  // namespace calib2stage::kernels
