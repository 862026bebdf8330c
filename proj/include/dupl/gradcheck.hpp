#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dupl/tensor.hpp"

namespace dupl {

struct GradcheckOptions {
  double step = 1e-4;
  // Coordinates per input checked; larger inputs are subsampled.
  int max_coords_per_input = 64;
  std::uint64_t seed = 7;
  // Denominator floor for the relative error of near-zero gradients.
  double abs_floor = 1e-6;
};

struct GradcheckReport {
  std::string name;
  int coords = 0;
  int within_1e3 = 0;
  double max_rel_error = 0;

  double fraction_within_1e3() const {
    return coords ? static_cast<double>(within_1e3) / coords : 1.0;
  }
  // Passes when >= 95% of coordinates have rel. error < 1e-3.
  bool passed() const { return fraction_within_1e3() >= 0.95; }
};

using LossFn = std::function<Tensor<double>(Graph<double>&)>;

// Compares backward() against central differences
// (f(x+h) - f(x-h)) / 2h on sampled coordinates of each input. `inputs`
// must be grad-tracking leaves used by `loss`.
GradcheckReport gradcheck(const std::string& name, const LossFn& loss,
                          std::vector<Tensor<double>> inputs,
                          const GradcheckOptions& options = {});

// The built-in suite covering every differentiable op plus the composite
// training objective on tiny shapes.
std::vector<GradcheckReport> run_gradcheck_suite(std::uint64_t seed = 1);

}  // namespace dupl
