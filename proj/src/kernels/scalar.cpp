#include <cmath>
#include <cstring>

#include "dupl/kernels/kernels.hpp"

namespace dupl::kernels::scalar {

template <typename T>
void gemm(int m, int n, int k, MatrixView<T> a, MatrixView<T> b, T* c,
          std::ptrdiff_t ldc, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    T* c_row = c + i * ldc;
    if (!accumulate) std::memset(c_row, 0, sizeof(T) * n);
    for (int p = 0; p < k; ++p) {
      const T a_ip = a.data[i * a.row_stride + p * a.col_stride];
      const T* b_row = b.data + p * b.row_stride;
      for (int j = 0; j < n; ++j) c_row[j] += a_ip * b_row[j * b.col_stride];
    }
  }
}

template <typename T>
double dot(std::span<const T> x, std::span<const T> y) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    acc += static_cast<double>(x[i]) * static_cast<double>(y[i]);
  }
  return acc;
}

template <typename T>
void axpy(T alpha, std::span<const T> x, std::span<T> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

template <typename T>
void adamw_update(std::span<T> param, std::span<const T> grad,
                  std::span<T> exp_avg, std::span<T> exp_avg_sq,
                  const AdamWCoeffs& k) {
  const T decay = static_cast<T>(1.0 - k.lr * k.weight_decay);
  const T b1 = static_cast<T>(k.beta1);
  const T b2 = static_cast<T>(k.beta2);
  const T step = static_cast<T>(k.lr / k.bias_correction1);
  const T inv_bc2 = static_cast<T>(1.0 / k.bias_correction2);
  const T eps = static_cast<T>(k.eps);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i];
    exp_avg[i] = b1 * exp_avg[i] + (T(1) - b1) * g;
    exp_avg_sq[i] = b2 * exp_avg_sq[i] + (T(1) - b2) * g * g;
    const T denom = std::sqrt(exp_avg_sq[i] * inv_bc2) + eps;
    param[i] = param[i] * decay - step * exp_avg[i] / denom;
  }
}

#define DUPL_INSTANTIATE(T)                                                   \
  template void gemm<T>(int, int, int, MatrixView<T>, MatrixView<T>, T*,      \
                        std::ptrdiff_t, bool);                                \
  template double dot<T>(std::span<const T>, std::span<const T>);             \
  template void axpy<T>(T, std::span<const T>, std::span<T>);                 \
  template void adamw_update<T>(std::span<T>, std::span<const T>,             \
                                std::span<T>, std::span<T>,                   \
                                const AdamWCoeffs&);
DUPL_INSTANTIATE(float)
DUPL_INSTANTIATE(double)
#undef DUPL_INSTANTIATE

}  // namespace dupl::kernels::scalar
