#include "dupl/cam.hpp"

#include <algorithm>
#include <string>

#include "dupl/error.hpp"
#include "dupl/kernels/kernels.hpp"

namespace dupl {
namespace {

struct Peak {
  double value;
  int label;  // 0 when no class is present
};

Peak peak_at(const CamMap& cam, std::size_t pixel) {
  const std::size_t n = static_cast<std::size_t>(cam.height) * cam.width;
  Peak best{0.0, 0};
  bool first = true;
  for (int c : cam.present_classes) {  // sorted ascending
    const double v = cam.values[c * n + pixel];
    if (first || v > best.value) {
      best = {v, c + 1};
      first = false;
    }
  }
  return best;
}

void check_classes(const CamMap& cam) {
  for (int c : cam.present_classes) {
    if (c < 0 || c >= cam.num_classes) {
      throw DataError("CAM present class out of range: " + std::to_string(c));
    }
  }
}

}  // namespace

void normalize_minmax(std::span<double> plane) {
  if (plane.empty()) return;
  const auto [lo, hi] = std::minmax_element(plane.begin(), plane.end());
  const double mn = *lo, mx = *hi;
  if (!(mx > mn)) {
    std::fill(plane.begin(), plane.end(), 0.0);
    return;
  }
  const double inv = 1.0 / (mx - mn);
  for (double& v : plane) v = (v - mn) * inv;
}

template <typename T>
CamMap compute_cam(std::span<const T> features, int feature_dim, int feat_h,
                   int feat_w, std::span<const T> class_weights,
                   int num_classes, const std::vector<int>& present_classes,
                   int out_h, int out_w) {
  const std::size_t feat_plane = static_cast<std::size_t>(feat_h) * feat_w;
  if (features.size() != feature_dim * feat_plane ||
      class_weights.size() != static_cast<std::size_t>(num_classes) * feature_dim) {
    throw ConfigError("compute_cam: feature/weight size mismatch");
  }
  CamMap cam;
  cam.num_classes = num_classes;
  cam.height = out_h;
  cam.width = out_w;
  cam.present_classes = present_classes;
  std::sort(cam.present_classes.begin(), cam.present_classes.end());
  cam.present_classes.erase(
      std::unique(cam.present_classes.begin(), cam.present_classes.end()),
      cam.present_classes.end());
  check_classes(cam);
  const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
  cam.values.assign(num_classes * out_plane, 0.0);
  if (cam.present_classes.empty()) return cam;

  std::vector<T> raw(static_cast<std::size_t>(num_classes) * feat_plane);
  kernels::gemm<T>(num_classes, static_cast<int>(feat_plane), feature_dim,
                   kernels::row_major(class_weights.data(), feature_dim),
                   kernels::row_major(features.data(),
                                      static_cast<std::ptrdiff_t>(feat_plane)),
                   raw.data(), static_cast<std::ptrdiff_t>(feat_plane), false);

  // Half-pixel bilinear weights, matching bilinear_resize.
  auto axis = [](int in, int out) {
    std::vector<std::pair<int, double>> s(static_cast<std::size_t>(out));
    const double ratio = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
      double src = std::max((o + 0.5) * ratio - 0.5, 0.0);
      int i0 = std::min(static_cast<int>(src), in - 1);
      s[static_cast<std::size_t>(o)] = {i0, src - i0};
    }
    return s;
  };
  const auto ys = axis(feat_h, out_h);
  const auto xs = axis(feat_w, out_w);
  std::vector<double> act(feat_plane);
  for (int c : cam.present_classes) {
    for (std::size_t i = 0; i < feat_plane; ++i) {
      act[i] = std::max(0.0, static_cast<double>(raw[c * feat_plane + i]));
    }
    std::span<double> dst(cam.values.data() + c * out_plane, out_plane);
    for (int oy = 0; oy < out_h; ++oy) {
      const auto [y0, wy] = ys[static_cast<std::size_t>(oy)];
      const int y1 = std::min(y0 + 1, feat_h - 1);
      for (int ox = 0; ox < out_w; ++ox) {
        const auto [x0, wx] = xs[static_cast<std::size_t>(ox)];
        const int x1 = std::min(x0 + 1, feat_w - 1);
        const double top = (1 - wx) * act[y0 * feat_w + x0] + wx * act[y0 * feat_w + x1];
        const double bot = (1 - wx) * act[y1 * feat_w + x0] + wx * act[y1 * feat_w + x1];
        dst[static_cast<std::size_t>(oy) * out_w + ox] = (1 - wy) * top + wy * bot;
      }
    }
    normalize_minmax(dst);
  }
  return cam;
}

PseudoLabelMap cam_to_pseudolabel(const CamMap& cam, double tau_l, double tau_h) {
  if (!(tau_l >= 0 && tau_l < tau_h && tau_h <= 1)) {
    throw ConfigError("pseudo-label thresholds need 0 <= tau_l < tau_h <= 1");
  }
  check_classes(cam);
  PseudoLabelMap out{LabelMap(cam.height, cam.width), tau_l, tau_h};
  const std::size_t n = out.map.size();
  for (std::size_t p = 0; p < n; ++p) {
    const Peak peak = peak_at(cam, p);
    if (peak.label != 0 && peak.value >= tau_h) {
      out.map.labels[p] = static_cast<std::uint8_t>(peak.label);
    } else if (peak.value <= tau_l) {
      out.map.labels[p] = kBackgroundLabel;
    } else {
      out.map.labels[p] = kIgnoreLabel;
    }
  }
  return out;
}

PseudoLabelMap cam_to_relaxed_label(const CamMap& cam, double tau_l) {
  if (!(tau_l >= 0 && tau_l < 1)) {
    throw ConfigError("relaxed label threshold needs 0 <= tau_l < 1");
  }
  check_classes(cam);
  PseudoLabelMap out{LabelMap(cam.height, cam.width), tau_l, tau_l};
  const std::size_t n = out.map.size();
  for (std::size_t p = 0; p < n; ++p) {
    const Peak peak = peak_at(cam, p);
    out.map.labels[p] = (peak.label != 0 && peak.value > tau_l)
                            ? static_cast<std::uint8_t>(peak.label)
                            : kBackgroundLabel;
  }
  return out;
}

std::vector<int> present_from_bits(std::span<const std::uint8_t> bits) {
  std::vector<int> present;
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i]) present.push_back(static_cast<int>(i));
  }
  return present;
}

template CamMap compute_cam<float>(std::span<const float>, int, int, int,
                                   std::span<const float>, int,
                                   const std::vector<int>&, int, int);
template CamMap compute_cam<double>(std::span<const double>, int, int, int,
                                    std::span<const double>, int,
                                    const std::vector<int>&, int, int);

}  // namespace dupl
