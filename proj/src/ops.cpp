#include "dupl/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "dupl/error.hpp"
#include "dupl/kernels/kernels.hpp"

namespace dupl {
namespace {

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
}

template <typename T>
bool tracks(const Graph<T>& g, const Tensor<T>& t) {
  return g.enabled() && t.defined() && t.requires_grad();
}

void require(bool cond, const std::string& what) {
  if (!cond) throw ConfigError(what);
}

struct ConvGeometry {
  int channels, height, width;
  int kernel, out_h, out_w;
  Conv2dParams p;
};

// col: [channels*k*k] x [out_h*out_w]
template <typename T>
void im2col(const T* x, const ConvGeometry& geo, T* col) {
  const int k = geo.kernel;
  const int plane = geo.out_h * geo.out_w;
  for (int c = 0; c < geo.channels; ++c) {
    const T* xc = x + static_cast<std::ptrdiff_t>(c) * geo.height * geo.width;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        T* row = col + static_cast<std::ptrdiff_t>((c * k + ki) * k + kj) * plane;
        for (int oy = 0; oy < geo.out_h; ++oy) {
          const int iy = oy * geo.p.stride - geo.p.padding + ki * geo.p.dilation;
          T* dst = row + oy * geo.out_w;
          if (iy < 0 || iy >= geo.height) {
            std::fill(dst, dst + geo.out_w, T(0));
            continue;
          }
          const T* src = xc + iy * geo.width;
          const int x0 = -geo.p.padding + kj * geo.p.dilation;
          if (geo.p.stride == 1) {
            for (int ox = 0; ox < geo.out_w; ++ox) {
              const int ix = x0 + ox;
              dst[ox] = (ix >= 0 && ix < geo.width) ? src[ix] : T(0);
            }
          } else {
            for (int ox = 0; ox < geo.out_w; ++ox) {
              const int ix = x0 + ox * geo.p.stride;
              dst[ox] = (ix >= 0 && ix < geo.width) ? src[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& geo, T* dx) {
  const int k = geo.kernel;
  const int plane = geo.out_h * geo.out_w;
  for (int c = 0; c < geo.channels; ++c) {
    T* dxc = dx + static_cast<std::ptrdiff_t>(c) * geo.height * geo.width;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const T* row =
            col + static_cast<std::ptrdiff_t>((c * k + ki) * k + kj) * plane;
        for (int oy = 0; oy < geo.out_h; ++oy) {
          const int iy = oy * geo.p.stride - geo.p.padding + ki * geo.p.dilation;
          if (iy < 0 || iy >= geo.height) continue;
          T* dst = dxc + iy * geo.width;
          const T* src = row + oy * geo.out_w;
          const int x0 = -geo.p.padding + kj * geo.p.dilation;
          for (int ox = 0; ox < geo.out_w; ++ox) {
            const int ix = x0 + ox * geo.p.stride;
            if (ix >= 0 && ix < geo.width) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

struct AxisSample {
  int i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<AxisSample> bilinear_axis(int in, int out) {
  std::vector<AxisSample> s(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(src);
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    s[static_cast<std::size_t>(o)] = {i0, i1, src - i0};
  }
  return s;
}

}  // namespace

int conv_output_extent(int in, int kernel, const Conv2dParams& p) {
  if (p.stride < 1) return 0;
  const int span = in + 2 * p.padding - p.dilation * (kernel - 1) - 1;
  if (span < 0) return 0;
  return span / p.stride + 1;
}

template <typename T>
Tensor<T> conv2d(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias, const Conv2dParams& params) {
  require(x.shape().rank() == 4, "conv2d: input must be N x C x H x W");
  require(weight.shape().rank() == 4, "conv2d: weight must be Cout x Cin x k x k");
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int cout = weight.dim(0), k = weight.dim(2);
  require(weight.dim(1) == cin, "conv2d: channel mismatch " +
                                    x.shape().to_string() + " vs " +
                                    weight.shape().to_string());
  require(weight.dim(3) == k && k % 2 == 1, "conv2d: kernel must be odd and square");
  require(bias.defined() && bias.shape() == Shape{cout}, "conv2d: bias must have Cout entries");
  require(params.dilation >= 1 && params.padding >= 0, "conv2d: bad dilation/padding");
  const int ho = conv_output_extent(h, k, params);
  const int wo = conv_output_extent(w, k, params);
  require(ho >= 1 && wo >= 1, "conv2d: kernel does not fit input " + x.shape().to_string());

  const ConvGeometry geo{cin, h, w, k, ho, wo, params};
  const int rows = cin * k * k;
  const int plane = ho * wo;
  const bool rg = tracks(g, x) || tracks(g, weight) || tracks(g, bias);
  Tensor<T> out = Tensor<T>::zeros(Shape{n, cout, ho, wo}, rg);

  std::vector<T> col(static_cast<std::size_t>(rows) * plane);
  const T* xd = x.data().data();
  T* od = out.data().data();
  const T* wd = weight.data().data();
  const T* bd = bias.data().data();
  for (int b = 0; b < n; ++b) {
    im2col(xd + static_cast<std::ptrdiff_t>(b) * cin * h * w, geo, col.data());
    T* ob = od + static_cast<std::ptrdiff_t>(b) * cout * plane;
    kernels::gemm<T>(cout, plane, rows, kernels::row_major(wd, rows),
                     kernels::row_major(col.data(), plane), ob, plane, false);
    for (int c = 0; c < cout; ++c) {
      T* oc = ob + static_cast<std::ptrdiff_t>(c) * plane;
      for (int i = 0; i < plane; ++i) oc[i] += bd[c];
    }
  }
  check_finite(out, "conv2d");

  if (rg) {
    g.record([x, weight, bias, out, geo, n, cout, rows, plane]() mutable {
      const bool dx_needed = x.requires_grad();
      const bool dw_needed = weight.requires_grad();
      const T* go = out.grad().data();
      std::vector<T> buf(static_cast<std::size_t>(rows) * plane);
      const std::ptrdiff_t in_size =
          static_cast<std::ptrdiff_t>(geo.channels) * geo.height * geo.width;
      for (int b = 0; b < n; ++b) {
        const T* gob = go + static_cast<std::ptrdiff_t>(b) * cout * plane;
        if (bias.requires_grad()) {
          T* gb = bias.grad().data();
          for (int c = 0; c < cout; ++c) {
            double acc = 0;
            const T* gc = gob + static_cast<std::ptrdiff_t>(c) * plane;
            for (int i = 0; i < plane; ++i) acc += gc[i];
            gb[c] += static_cast<T>(acc);
          }
        }
        if (dw_needed) {
          im2col(x.data().data() + b * in_size, geo, buf.data());
          // dW[cout x rows] += dOut[cout x plane] * col^T
          kernels::gemm<T>(cout, rows, plane, kernels::row_major(gob, plane),
                           kernels::transposed(buf.data(), plane),
                           weight.grad().data(), rows, true);
        }
        if (dx_needed) {
          // dcol[rows x plane] = W^T * dOut
          kernels::gemm<T>(rows, plane, cout,
                           kernels::transposed(weight.data().data(), rows),
                           kernels::row_major(gob, plane), buf.data(), plane,
                           false);
          col2im_add(buf.data(), geo, x.grad().data() + b * in_size);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(Graph<T>& g, const Tensor<T>& x) {
  const bool rg = tracks(g, x);
  Tensor<T> out = Tensor<T>::zeros(x.shape(), rg);
  auto xd = x.data();
  auto od = out.data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = xd[i] > T(0) ? xd[i] : T(0);
  check_finite(out, "relu");
  if (rg) {
    g.record([x, out]() mutable {
      auto xd = x.data();
      auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < xd.size(); ++i) {
        if (xd[i] > T(0)) gx[i] += go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> linear(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
  require(x.shape().rank() == 2 && weight.shape().rank() == 2,
          "linear: expects N x D input and C x D weight");
  const int n = x.dim(0), d = x.dim(1), c = weight.dim(0);
  require(weight.dim(1) == d, "linear: inner dimension mismatch " +
                                  x.shape().to_string() + " vs " +
                                  weight.shape().to_string());
  require(bias.defined() && bias.shape() == Shape{c}, "linear: bias must have C entries");
  const bool rg = tracks(g, x) || tracks(g, weight) || tracks(g, bias);
  Tensor<T> out = Tensor<T>::zeros(Shape{n, c}, rg);
  T* od = out.data().data();
  kernels::gemm<T>(n, c, d, kernels::row_major(x.data().data(), d),
                   kernels::transposed(weight.data().data(), d), od, c, false);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < c; ++j) od[i * c + j] += bias.data()[static_cast<std::size_t>(j)];
  }
  check_finite(out, "linear");
  if (rg) {
    g.record([x, weight, bias, out, n, d, c]() mutable {
      const T* go = out.grad().data();
      if (x.requires_grad()) {
        kernels::gemm<T>(n, d, c, kernels::row_major(go, c),
                         kernels::row_major(weight.data().data(), d),
                         x.grad().data(), d, true);
      }
      if (weight.requires_grad()) {
        kernels::gemm<T>(c, d, n, kernels::transposed(go, c),
                         kernels::row_major(x.data().data(), d),
                         weight.grad().data(), d, true);
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad();
        for (int j = 0; j < c; ++j) {
          double acc = 0;
          for (int i = 0; i < n; ++i) acc += go[i * c + j];
          gb[static_cast<std::size_t>(j)] += static_cast<T>(acc);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool(Graph<T>& g, const Tensor<T>& x) {
  require(x.shape().rank() == 4, "global_avg_pool: input must be N x C x H x W");
  const int n = x.dim(0), c = x.dim(1);
  const int plane = x.dim(2) * x.dim(3);
  require(plane >= 1, "global_avg_pool: empty spatial extent");
  const bool rg = tracks(g, x);
  Tensor<T> out = Tensor<T>::zeros(Shape{n, c}, rg);
  const T* xd = x.data().data();
  for (int i = 0; i < n * c; ++i) {
    double acc = 0;
    const T* p = xd + static_cast<std::ptrdiff_t>(i) * plane;
    for (int j = 0; j < plane; ++j) acc += p[j];
    out.data()[static_cast<std::size_t>(i)] = static_cast<T>(acc / plane);
  }
  check_finite(out, "global_avg_pool");
  if (rg) {
    g.record([x, out, n, c, plane]() mutable {
      T* gx = x.grad().data();
      auto go = out.grad();
      const T inv = T(1) / static_cast<T>(plane);
      for (int i = 0; i < n * c; ++i) {
        const T v = go[static_cast<std::size_t>(i)] * inv;
        T* p = gx + static_cast<std::ptrdiff_t>(i) * plane;
        for (int j = 0; j < plane; ++j) p[j] += v;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> bilinear_resize(Graph<T>& g, const Tensor<T>& x, int out_h,
                          int out_w) {
  require(x.shape().rank() == 4, "bilinear_resize: input must be N x C x H x W");
  require(out_h >= 1 && out_w >= 1, "bilinear_resize: output must be non-empty");
  const int nc = x.dim(0) * x.dim(1);
  const int h = x.dim(2), w = x.dim(3);
  const bool rg = tracks(g, x);
  Tensor<T> out = Tensor<T>::zeros(Shape{x.dim(0), x.dim(1), out_h, out_w}, rg);
  const auto ys = bilinear_axis(h, out_h);
  const auto xs = bilinear_axis(w, out_w);
  const T* xd = x.data().data();
  T* od = out.data().data();
  for (int p = 0; p < nc; ++p) {
    const T* src = xd + static_cast<std::ptrdiff_t>(p) * h * w;
    T* dst = od + static_cast<std::ptrdiff_t>(p) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const AxisSample& sy = ys[static_cast<std::size_t>(oy)];
      const T* r0 = src + sy.i0 * w;
      const T* r1 = src + sy.i1 * w;
      const T wy1 = static_cast<T>(sy.w1), wy0 = T(1) - wy1;
      for (int ox = 0; ox < out_w; ++ox) {
        const AxisSample& sx = xs[static_cast<std::size_t>(ox)];
        const T wx1 = static_cast<T>(sx.w1), wx0 = T(1) - wx1;
        dst[oy * out_w + ox] = wy0 * (wx0 * r0[sx.i0] + wx1 * r0[sx.i1]) +
                               wy1 * (wx0 * r1[sx.i0] + wx1 * r1[sx.i1]);
      }
    }
  }
  check_finite(out, "bilinear_resize");
  if (rg) {
    g.record([x, out, ys, xs, nc, h, w, out_h, out_w]() mutable {
      T* gx = x.grad().data();
      const T* go = out.grad().data();
      for (int p = 0; p < nc; ++p) {
        T* dst = gx + static_cast<std::ptrdiff_t>(p) * h * w;
        const T* src = go + static_cast<std::ptrdiff_t>(p) * out_h * out_w;
        for (int oy = 0; oy < out_h; ++oy) {
          const AxisSample& sy = ys[static_cast<std::size_t>(oy)];
          T* r0 = dst + sy.i0 * w;
          T* r1 = dst + sy.i1 * w;
          const T wy1 = static_cast<T>(sy.w1), wy0 = T(1) - wy1;
          for (int ox = 0; ox < out_w; ++ox) {
            const AxisSample& sx = xs[static_cast<std::size_t>(ox)];
            const T wx1 = static_cast<T>(sx.w1), wx0 = T(1) - wx1;
            const T v = src[oy * out_w + ox];
            r0[sx.i0] += wy0 * wx0 * v;
            r0[sx.i1] += wy0 * wx1 * v;
            r1[sx.i0] += wy1 * wx0 * v;
            r1[sx.i1] += wy1 * wx1 * v;
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
  return x.clone();
}

template <typename T>
Tensor<T> add(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "add: shape mismatch " + a.shape().to_string() +
                                      " vs " + b.shape().to_string());
  const bool rg = tracks(g, a) || tracks(g, b);
  Tensor<T> out = Tensor<T>::zeros(a.shape(), rg);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  check_finite(out, "add");
  if (rg) {
    g.record([a, b, out]() mutable {
      auto go = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch " + a.shape().to_string() +
                                      " vs " + b.shape().to_string());
  const bool rg = tracks(g, a) || tracks(g, b);
  Tensor<T> out = Tensor<T>::zeros(a.shape(), rg);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  check_finite(out, "mul");
  if (rg) {
    g.record([a, b, out]() mutable {
      auto go = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * b.data()[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * a.data()[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Graph<T>& g, const Tensor<T>& x, double factor) {
  const bool rg = tracks(g, x);
  Tensor<T> out = Tensor<T>::zeros(x.shape(), rg);
  const T f = static_cast<T>(factor);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = x.data()[i] * f;
  check_finite(out, "scale");
  if (rg) {
    g.record([x, out, f]() mutable {
      auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * f;
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(Graph<T>& g, const Tensor<T>& x) {
  const bool rg = tracks(g, x);
  double acc = 0;
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc), rg);
  check_finite(out, "sum");
  if (rg) {
    g.record([x, out]() mutable {
      const T go = out.grad()[0];
      for (T& v : x.grad()) v += go;
    });
  }
  return out;
}

template <typename T>
Tensor<T> multilabel_soft_margin(Graph<T>& g, const Tensor<T>& logits,
                                 std::span<const T> targets) {
  require(logits.shape().rank() == 2, "multilabel_soft_margin: logits must be N x C");
  require(targets.size() == logits.numel(), "multilabel_soft_margin: target count mismatch");
  const std::size_t count = logits.numel();
  double acc = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const double z = logits.data()[i];
    const double y = targets[i];
    // softplus(z) - y*z == -[y log s(z) + (1-y) log(1-s(z))]
    acc += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - y * z;
  }
  const bool rg = tracks(g, logits);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / count), rg);
  check_finite(out, "multilabel_soft_margin");
  if (rg) {
    std::vector<T> y(targets.begin(), targets.end());
    g.record([logits, out, y = std::move(y), count]() mutable {
      const double go = out.grad()[0] / static_cast<double>(count);
      auto gl = logits.grad();
      for (std::size_t i = 0; i < count; ++i) {
        const double z = logits.data()[i];
        const double s = z >= 0 ? 1.0 / (1.0 + std::exp(-z))
                                : std::exp(z) / (1.0 + std::exp(z));
        gl[i] += static_cast<T>(go * (s - y[i]));
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> cosine_discrepancy(Graph<T>& g, const Tensor<T>& a,
                             const Tensor<T>& b, double eps) {
  require(a.shape() == b.shape() && a.shape().rank() >= 1,
          "cosine_discrepancy: shape mismatch " + a.shape().to_string() +
              " vs " + b.shape().to_string());
  const int n = a.dim(0);
  const std::size_t len = a.numel() / static_cast<std::size_t>(n);
  struct PerImage {
    double norm_a, norm_b, sim;
    bool active;  // gradient flows (non-degenerate, not clamped)
  };
  std::vector<PerImage> stats(static_cast<std::size_t>(n));
  double total = 0;
  for (int i = 0; i < n; ++i) {
    std::span<const T> av = a.data().subspan(i * len, len);
    std::span<const T> bv = b.data().subspan(i * len, len);
    const double na = std::sqrt(kernels::dot<T>(av, av));
    const double nb = std::sqrt(kernels::dot<T>(bv, bv));
    PerImage s{na, nb, 0.0, false};
    if (na > 0 && nb > 0) {
      const double raw = kernels::dot<T>(av, bv) / (na * nb);
      s.sim = std::clamp(raw, -1.0, 1.0 - eps);
      s.active = raw < 1.0 - eps;
    }
    stats[static_cast<std::size_t>(i)] = s;
    total += -std::log(1.0 - s.sim);
  }
  const bool rg = tracks(g, a) || tracks(g, b);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / n), rg);
  check_finite(out, "cosine_discrepancy");
  if (rg) {
    g.record([a, b, out, stats = std::move(stats), n, len]() mutable {
      const double go = out.grad()[0] / n;
      for (int i = 0; i < n; ++i) {
        const PerImage& s = stats[static_cast<std::size_t>(i)];
        if (!s.active) continue;
        const double dsim = go / (1.0 - s.sim);
        const std::size_t off = static_cast<std::size_t>(i) * len;
        const T* av = a.data().data() + off;
        const T* bv = b.data().data() + off;
        const double inv_ab = 1.0 / (s.norm_a * s.norm_b);
        if (a.requires_grad()) {
          T* ga = a.grad().data() + off;
          const double self = s.sim / (s.norm_a * s.norm_a);
          for (std::size_t j = 0; j < len; ++j) {
            ga[j] += static_cast<T>(dsim * (bv[j] * inv_ab - av[j] * self));
          }
        }
        if (b.requires_grad()) {
          T* gb = b.grad().data() + off;
          const double self = s.sim / (s.norm_b * s.norm_b);
          for (std::size_t j = 0; j < len; ++j) {
            gb[j] += static_cast<T>(dsim * (av[j] * inv_ab - bv[j] * self));
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> pixel_cross_entropy(Graph<T>& g, const Tensor<T>& logits,
                              std::span<const std::uint8_t> targets) {
  require(logits.shape().rank() == 4, "pixel_cross_entropy: logits must be N x K x H x W");
  const int n = logits.dim(0), k = logits.dim(1);
  const int plane = logits.dim(2) * logits.dim(3);
  require(targets.size() == static_cast<std::size_t>(n) * plane,
          "pixel_cross_entropy: label map size mismatch with " +
              logits.shape().to_string());
  std::vector<int> valid(static_cast<std::size_t>(n), 0);
  double total = 0;
  const T* ld = logits.data().data();
  for (int b = 0; b < n; ++b) {
    const T* lb = ld + static_cast<std::ptrdiff_t>(b) * k * plane;
    double acc = 0;
    int count = 0;
    for (int p = 0; p < plane; ++p) {
      const std::uint8_t t = targets[static_cast<std::size_t>(b) * plane + p];
      if (t == kIgnoreLabel) continue;
      if (t >= k) throw DataError("pixel_cross_entropy: label out of range");
      double mx = lb[p];
      for (int c = 1; c < k; ++c) mx = std::max(mx, static_cast<double>(lb[c * plane + p]));
      double se = 0;
      for (int c = 0; c < k; ++c) se += std::exp(lb[c * plane + p] - mx);
      acc += mx + std::log(se) - lb[t * plane + p];
      ++count;
    }
    valid[static_cast<std::size_t>(b)] = count;
    if (count > 0) total += acc / count;
  }
  const bool rg = tracks(g, logits);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / n), rg);
  check_finite(out, "pixel_cross_entropy");
  if (rg) {
    std::vector<std::uint8_t> tgt(targets.begin(), targets.end());
    g.record([logits, out, tgt = std::move(tgt), valid = std::move(valid), n,
              k, plane]() mutable {
      const double go = out.grad()[0] / n;
      const T* ld = logits.data().data();
      T* gl = logits.grad().data();
      std::vector<double> prob(static_cast<std::size_t>(k));
      for (int b = 0; b < n; ++b) {
        const int count = valid[static_cast<std::size_t>(b)];
        if (count == 0) continue;
        const double scale_b = go / count;
        const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(b) * k * plane;
        for (int p = 0; p < plane; ++p) {
          const std::uint8_t t = tgt[static_cast<std::size_t>(b) * plane + p];
          if (t == kIgnoreLabel) continue;
          double mx = ld[off + p];
          for (int c = 1; c < k; ++c) mx = std::max(mx, static_cast<double>(ld[off + c * plane + p]));
          double se = 0;
          for (int c = 0; c < k; ++c) {
            prob[static_cast<std::size_t>(c)] = std::exp(ld[off + c * plane + p] - mx);
            se += prob[static_cast<std::size_t>(c)];
          }
          for (int c = 0; c < k; ++c) {
            const double grad = prob[static_cast<std::size_t>(c)] / se - (c == t ? 1.0 : 0.0);
            gl[off + c * plane + p] += static_cast<T>(scale_b * grad);
          }
        }
      }
    });
  }
  return out;
}

#define DUPL_INSTANTIATE(T)                                                          \
  template Tensor<T> conv2d<T>(Graph<T>&, const Tensor<T>&, const Tensor<T>&,        \
                               const Tensor<T>&, const Conv2dParams&);               \
  template Tensor<T> relu<T>(Graph<T>&, const Tensor<T>&);                           \
  template Tensor<T> linear<T>(Graph<T>&, const Tensor<T>&, const Tensor<T>&,        \
                               const Tensor<T>&);                                    \
  template Tensor<T> global_avg_pool<T>(Graph<T>&, const Tensor<T>&);                \
  template Tensor<T> bilinear_resize<T>(Graph<T>&, const Tensor<T>&, int, int);      \
  template Tensor<T> stop_gradient<T>(const Tensor<T>&);                             \
  template Tensor<T> add<T>(Graph<T>&, const Tensor<T>&, const Tensor<T>&);          \
  template Tensor<T> mul<T>(Graph<T>&, const Tensor<T>&, const Tensor<T>&);          \
  template Tensor<T> scale<T>(Graph<T>&, const Tensor<T>&, double);                  \
  template Tensor<T> sum<T>(Graph<T>&, const Tensor<T>&);                            \
  template Tensor<T> multilabel_soft_margin<T>(Graph<T>&, const Tensor<T>&,          \
                                               std::span<const T>);                  \
  template Tensor<T> cosine_discrepancy<T>(Graph<T>&, const Tensor<T>&,              \
                                           const Tensor<T>&, double);                \
  template Tensor<T> pixel_cross_entropy<T>(Graph<T>&, const Tensor<T>&,             \
                                            std::span<const std::uint8_t>);
DUPL_INSTANTIATE(float)
DUPL_INSTANTIATE(double)
#undef DUPL_INSTANTIATE

}  // namespace dupl
