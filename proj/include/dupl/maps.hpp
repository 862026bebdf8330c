#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "dupl/ops.hpp"

namespace dupl {

inline constexpr std::uint8_t kBackgroundLabel = 0;

// H x W per-pixel labels: 0 background, 1..C foreground, 255 ignore.
struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> labels;

  LabelMap() = default;
  LabelMap(int h, int w, std::uint8_t fill = kIgnoreLabel)
      : height(h), width(w), labels(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t at(int y, int x) const {
    return labels[static_cast<std::size_t>(y) * width + x];
  }
  std::uint8_t& at(int y, int x) {
    return labels[static_cast<std::size_t>(y) * width + x];
  }
  std::size_t size() const { return labels.size(); }
  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

// CAM pseudo-labels plus the thresholds that produced them.
struct PseudoLabelMap {
  LabelMap map;
  double tau_l = 0;
  double tau_h = 0;
};

// H x W booleans; true marks a pixel removed from supervision.
struct NoiseMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> mask;

  NoiseMask() = default;
  NoiseMask(int h, int w)
      : height(h), width(w), mask(static_cast<std::size_t>(h) * w, 0) {}

  bool at(int y, int x) const {
    return mask[static_cast<std::size_t>(y) * width + x] != 0;
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : mask) n += v ? 1 : 0;
    return n;
  }
  std::size_t size() const { return mask.size(); }
  friend bool operator==(const NoiseMask&, const NoiseMask&) = default;
};

}  // namespace dupl
