#pragma once

#include <span>
#include <vector>

#include "dupl/maps.hpp"

namespace dupl {

// Class activation maps in [0, 1]. Class index c (0-based, classifier row)
// corresponds to label value c + 1.
struct CamMap {
  int num_classes = 0;
  int height = 0;
  int width = 0;
  std::vector<double> values;  // C x H x W
  std::vector<int> present_classes;

  double at(int c, int y, int x) const {
    return values[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  std::span<const double> plane(int c) const {
    const std::size_t n = static_cast<std::size_t>(height) * width;
    return std::span<const double>(values).subspan(c * n, n);
  }
};

// Rescales to [0, 1] in place. A constant plane (max == min) becomes all
// zeros.
void normalize_minmax(std::span<double> plane);

// features: D x h x w, class_weights: C x D. For each present class,
// relu(sum_i W[c,i] * F_i) at feature resolution, bilinearly resized to
// out_h x out_w, then max-min normalized. Absent classes stay zero.
template <typename T>
CamMap compute_cam(std::span<const T> features, int feature_dim, int feat_h,
                   int feat_w, std::span<const T> class_weights,
                   int num_classes, const std::vector<int>& present_classes,
                   int out_h, int out_w);

// Per pixel, m* = max over present classes (ties -> lowest id):
// m* >= tau_h -> class, m* <= tau_l -> background, else ignore.
PseudoLabelMap cam_to_pseudolabel(const CamMap& cam, double tau_l, double tau_h);

// As above without the uncertain band: class if m* > tau_l, else background.
PseudoLabelMap cam_to_relaxed_label(const CamMap& cam, double tau_l);

// Present classes from a 0/1 image-level label vector.
std::vector<int> present_from_bits(std::span<const std::uint8_t> bits);

}  // namespace dupl
