// AVX2/FMA variants. Every function that touches 256-bit registers carries a
// target attribute so the rest of the binary stays baseline x86-64 and the
// dispatcher can pick these only on capable CPUs.

#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "dupl/kernels/kernels.hpp"

#define DUPL_AVX2 __attribute__((target("avx2,fma")))

namespace dupl::kernels::avx2 {
namespace {

constexpr int kMr = 6;
constexpr int kKc = 256;
constexpr int kMc = 96;

template <typename T>
constexpr int kNr = 16;
template <>
constexpr int kNr<double> = 8;

// A block [mc x kc] -> consecutive kMr-row panels, k-major inside a panel.
template <typename T>
void pack_a(MatrixView<T> a, int mc, int kc, T* out) {
  for (int i0 = 0; i0 < mc; i0 += kMr) {
    const int mr = std::min(kMr, mc - i0);
    for (int p = 0; p < kc; ++p) {
      const T* col = a.data + p * a.col_stride + i0 * a.row_stride;
      int i = 0;
      for (; i < mr; ++i) *out++ = col[i * a.row_stride];
      for (; i < kMr; ++i) *out++ = T(0);
    }
  }
}

// B block [kc x n] -> consecutive NR-column panels, k-major inside a panel.
template <typename T>
void pack_b(MatrixView<T> b, int kc, int n, T* out) {
  constexpr int nr_max = kNr<T>;
  for (int j0 = 0; j0 < n; j0 += nr_max) {
    const int nr = std::min(nr_max, n - j0);
    for (int p = 0; p < kc; ++p) {
      const T* row = b.data + p * b.row_stride + j0 * b.col_stride;
      int j = 0;
      if (b.col_stride == 1) {
        std::memcpy(out, row, sizeof(T) * nr);
        out += nr;
        j = nr;
      } else {
        for (; j < nr; ++j) *out++ = row[j * b.col_stride];
      }
      for (; j < nr_max; ++j) *out++ = T(0);
    }
  }
}

DUPL_AVX2 void micro_kernel(int kc, const float* ap, const float* bp,
                            float* c, std::ptrdiff_t ldc, int mr, int nr) {
  __m256 acc[kMr][2];
#pragma GCC unroll 6
  for (int i = 0; i < kMr; ++i) {
    acc[i][0] = _mm256_setzero_ps();
    acc[i][1] = _mm256_setzero_ps();
  }
  for (int p = 0; p < kc; ++p) {
    const __m256 b0 = _mm256_loadu_ps(bp);
    const __m256 b1 = _mm256_loadu_ps(bp + 8);
#pragma GCC unroll 6
    for (int i = 0; i < kMr; ++i) {
      const __m256 av = _mm256_broadcast_ss(ap + i);
      acc[i][0] = _mm256_fmadd_ps(av, b0, acc[i][0]);
      acc[i][1] = _mm256_fmadd_ps(av, b1, acc[i][1]);
    }
    ap += kMr;
    bp += 16;
  }
  if (mr == kMr && nr == 16) {
#pragma GCC unroll 6
    for (int i = 0; i < kMr; ++i) {
      float* row = c + i * ldc;
      _mm256_storeu_ps(row, _mm256_add_ps(_mm256_loadu_ps(row), acc[i][0]));
      _mm256_storeu_ps(row + 8,
                       _mm256_add_ps(_mm256_loadu_ps(row + 8), acc[i][1]));
    }
    return;
  }
  alignas(32) float tile[kMr][16];
  for (int i = 0; i < kMr; ++i) {
    _mm256_store_ps(tile[i], acc[i][0]);
    _mm256_store_ps(tile[i] + 8, acc[i][1]);
  }
  for (int i = 0; i < mr; ++i) {
    for (int j = 0; j < nr; ++j) c[i * ldc + j] += tile[i][j];
  }
}

DUPL_AVX2 void micro_kernel(int kc, const double* ap, const double* bp,
                            double* c, std::ptrdiff_t ldc, int mr, int nr) {
  __m256d acc[kMr][2];
#pragma GCC unroll 6
  for (int i = 0; i < kMr; ++i) {
    acc[i][0] = _mm256_setzero_pd();
    acc[i][1] = _mm256_setzero_pd();
  }
  for (int p = 0; p < kc; ++p) {
    const __m256d b0 = _mm256_loadu_pd(bp);
    const __m256d b1 = _mm256_loadu_pd(bp + 4);
#pragma GCC unroll 6
    for (int i = 0; i < kMr; ++i) {
      const __m256d av = _mm256_broadcast_sd(ap + i);
      acc[i][0] = _mm256_fmadd_pd(av, b0, acc[i][0]);
      acc[i][1] = _mm256_fmadd_pd(av, b1, acc[i][1]);
    }
    ap += kMr;
    bp += 8;
  }
  if (mr == kMr && nr == 8) {
#pragma GCC unroll 6
    for (int i = 0; i < kMr; ++i) {
      double* row = c + i * ldc;
      _mm256_storeu_pd(row, _mm256_add_pd(_mm256_loadu_pd(row), acc[i][0]));
      _mm256_storeu_pd(row + 4,
                       _mm256_add_pd(_mm256_loadu_pd(row + 4), acc[i][1]));
    }
    return;
  }
  alignas(32) double tile[kMr][8];
  for (int i = 0; i < kMr; ++i) {
    _mm256_store_pd(tile[i], acc[i][0]);
    _mm256_store_pd(tile[i] + 4, acc[i][1]);
  }
  for (int i = 0; i < mr; ++i) {
    for (int j = 0; j < nr; ++j) c[i * ldc + j] += tile[i][j];
  }
}

template <typename T>
struct PackBuffers {
  std::vector<T> a;
  std::vector<T> b;
};

template <typename T>
PackBuffers<T>& pack_buffers() {
  thread_local PackBuffers<T> buffers;
  return buffers;
}

DUPL_AVX2 inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

}  // namespace

template <typename T>
void gemm(int m, int n, int k, MatrixView<T> a, MatrixView<T> b, T* c,
          std::ptrdiff_t ldc, bool accumulate) {
  if (!accumulate) {
    for (int i = 0; i < m; ++i) std::memset(c + i * ldc, 0, sizeof(T) * n);
  }
  if (m == 0 || n == 0 || k == 0) return;
  constexpr int nr_max = kNr<T>;
  auto& buf = pack_buffers<T>();
  const int n_panels = (n + nr_max - 1) / nr_max;
  buf.b.resize(static_cast<std::size_t>(n_panels) * nr_max * kKc);
  buf.a.resize(static_cast<std::size_t>(kMc) * kKc);

  for (int pc = 0; pc < k; pc += kKc) {
    const int kc = std::min(kKc, k - pc);
    pack_b<T>({b.data + pc * b.row_stride, b.row_stride, b.col_stride}, kc, n,
              buf.b.data());
    for (int ic = 0; ic < m; ic += kMc) {
      const int mc = std::min(kMc, m - ic);
      pack_a<T>({a.data + ic * a.row_stride + pc * a.col_stride, a.row_stride,
                 a.col_stride},
                mc, kc, buf.a.data());
      for (int jr = 0; jr < n; jr += nr_max) {
        const T* bp = buf.b.data() + static_cast<std::size_t>(jr) * kc;
        const int nr = std::min(nr_max, n - jr);
        for (int ir = 0; ir < mc; ir += kMr) {
          micro_kernel(kc, buf.a.data() + static_cast<std::size_t>(ir) * kc,
                       bp, c + (ic + ir) * ldc + jr, ldc,
                       std::min(kMr, mc - ir), nr);
        }
      }
    }
  }
}

template <>
DUPL_AVX2 double dot<float>(std::span<const float> x,
                            std::span<const float> y) {
  const std::size_t n = x.size();
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 xv = _mm256_loadu_ps(x.data() + i);
    const __m256 yv = _mm256_loadu_ps(y.data() + i);
    acc0 = _mm256_fmadd_pd(_mm256_cvtps_pd(_mm256_castps256_ps128(xv)),
                           _mm256_cvtps_pd(_mm256_castps256_ps128(yv)), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_cvtps_pd(_mm256_extractf128_ps(xv, 1)),
                           _mm256_cvtps_pd(_mm256_extractf128_ps(yv, 1)), acc1);
  }
  double acc = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) acc += static_cast<double>(x[i]) * y[i];
  return acc;
}

template <>
DUPL_AVX2 double dot<double>(std::span<const double> x,
                             std::span<const double> y) {
  const std::size_t n = x.size();
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x.data() + i),
                           _mm256_loadu_pd(y.data() + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(x.data() + i + 4),
                           _mm256_loadu_pd(y.data() + i + 4), acc1);
  }
  double acc = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

template <>
DUPL_AVX2 void axpy<float>(float alpha, std::span<const float> x,
                           std::span<float> y) {
  const std::size_t n = x.size();
  const __m256 av = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(y.data() + i,
                     _mm256_fmadd_ps(av, _mm256_loadu_ps(x.data() + i),
                                     _mm256_loadu_ps(y.data() + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

template <>
DUPL_AVX2 void axpy<double>(double alpha, std::span<const double> x,
                            std::span<double> y) {
  const std::size_t n = x.size();
  const __m256d av = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y.data() + i,
                     _mm256_fmadd_pd(av, _mm256_loadu_pd(x.data() + i),
                                     _mm256_loadu_pd(y.data() + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

template <>
DUPL_AVX2 void adamw_update<float>(std::span<float> param,
                                   std::span<const float> grad,
                                   std::span<float> exp_avg,
                                   std::span<float> exp_avg_sq,
                                   const AdamWCoeffs& k) {
  const std::size_t n = param.size();
  const float decay = static_cast<float>(1.0 - k.lr * k.weight_decay);
  const float step = static_cast<float>(k.lr / k.bias_correction1);
  const float inv_bc2 = static_cast<float>(1.0 / k.bias_correction2);
  const __m256 v_decay = _mm256_set1_ps(decay);
  const __m256 v_b1 = _mm256_set1_ps(static_cast<float>(k.beta1));
  const __m256 v_1mb1 = _mm256_set1_ps(static_cast<float>(1.0 - k.beta1));
  const __m256 v_b2 = _mm256_set1_ps(static_cast<float>(k.beta2));
  const __m256 v_1mb2 = _mm256_set1_ps(static_cast<float>(1.0 - k.beta2));
  const __m256 v_step = _mm256_set1_ps(step);
  const __m256 v_inv_bc2 = _mm256_set1_ps(inv_bc2);
  const __m256 v_eps = _mm256_set1_ps(static_cast<float>(k.eps));
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 g = _mm256_loadu_ps(grad.data() + i);
    __m256 m = _mm256_loadu_ps(exp_avg.data() + i);
    __m256 v = _mm256_loadu_ps(exp_avg_sq.data() + i);
    m = _mm256_fmadd_ps(v_b1, m, _mm256_mul_ps(v_1mb1, g));
    v = _mm256_fmadd_ps(v_b2, v, _mm256_mul_ps(v_1mb2, _mm256_mul_ps(g, g)));
    const __m256 denom =
        _mm256_add_ps(_mm256_sqrt_ps(_mm256_mul_ps(v, v_inv_bc2)), v_eps);
    const __m256 p = _mm256_mul_ps(_mm256_loadu_ps(param.data() + i), v_decay);
    _mm256_storeu_ps(param.data() + i,
                     _mm256_sub_ps(p, _mm256_div_ps(_mm256_mul_ps(v_step, m),
                                                    denom)));
    _mm256_storeu_ps(exp_avg.data() + i, m);
    _mm256_storeu_ps(exp_avg_sq.data() + i, v);
  }
  if (i < n) {
    scalar::adamw_update<float>(param.subspan(i), grad.subspan(i),
                                exp_avg.subspan(i), exp_avg_sq.subspan(i), k);
  }
}

template <>
DUPL_AVX2 void adamw_update<double>(std::span<double> param,
                                    std::span<const double> grad,
                                    std::span<double> exp_avg,
                                    std::span<double> exp_avg_sq,
                                    const AdamWCoeffs& k) {
  const std::size_t n = param.size();
  const __m256d v_decay = _mm256_set1_pd(1.0 - k.lr * k.weight_decay);
  const __m256d v_b1 = _mm256_set1_pd(k.beta1);
  const __m256d v_1mb1 = _mm256_set1_pd(1.0 - k.beta1);
  const __m256d v_b2 = _mm256_set1_pd(k.beta2);
  const __m256d v_1mb2 = _mm256_set1_pd(1.0 - k.beta2);
  const __m256d v_step = _mm256_set1_pd(k.lr / k.bias_correction1);
  const __m256d v_inv_bc2 = _mm256_set1_pd(1.0 / k.bias_correction2);
  const __m256d v_eps = _mm256_set1_pd(k.eps);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d g = _mm256_loadu_pd(grad.data() + i);
    __m256d m = _mm256_loadu_pd(exp_avg.data() + i);
    __m256d v = _mm256_loadu_pd(exp_avg_sq.data() + i);
    m = _mm256_fmadd_pd(v_b1, m, _mm256_mul_pd(v_1mb1, g));
    v = _mm256_fmadd_pd(v_b2, v, _mm256_mul_pd(v_1mb2, _mm256_mul_pd(g, g)));
    const __m256d denom =
        _mm256_add_pd(_mm256_sqrt_pd(_mm256_mul_pd(v, v_inv_bc2)), v_eps);
    const __m256d p = _mm256_mul_pd(_mm256_loadu_pd(param.data() + i), v_decay);
    _mm256_storeu_pd(param.data() + i,
                     _mm256_sub_pd(p, _mm256_div_pd(_mm256_mul_pd(v_step, m),
                                                    denom)));
    _mm256_storeu_pd(exp_avg.data() + i, m);
    _mm256_storeu_pd(exp_avg_sq.data() + i, v);
  }
  if (i < n) {
    scalar::adamw_update<double>(param.subspan(i), grad.subspan(i),
                                 exp_avg.subspan(i), exp_avg_sq.subspan(i), k);
  }
}

template void gemm<float>(int, int, int, MatrixView<float>, MatrixView<float>,
                          float*, std::ptrdiff_t, bool);
template void gemm<double>(int, int, int, MatrixView<double>,
                           MatrixView<double>, double*, std::ptrdiff_t, bool);

}  // namespace dupl::kernels::avx2
