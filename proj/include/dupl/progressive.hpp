#pragma once

#include <span>
#include <vector>

#include "dupl/maps.hpp"

namespace dupl {

// Cosine descent of the foreground threshold from tau_h_start to
// tau_h_end over total_iters iterations.
struct ThresholdSchedule {
  double tau_l = 0.25;
  double tau_h_start = 0.7;
  double tau_h_end = 0.55;
  int total_iters = 1;

  void validate() const;
};

// tau_h(t) = tau_h(0) - 0.5 (tau_h(0) - tau_h(T)) (1 - cos(t pi / T)).
// t outside [0, T] is clamped and a warning is printed.
double tau_h_at(const ThresholdSchedule& schedule, int t);

struct NoiseFilterConfig {
  double gamma = 0.9;  // posterior threshold
  double eta = 1.0;    // minimum mean separation in nats
  int min_valid_pixels = 64;
  int max_em_iters = 50;
  double em_tol = 1e-4;  // on the mean per-sample log-likelihood
  double variance_floor = 1e-8;

  void validate() const;
};

// Two-component 1-D Gaussian mixture; "noisy" is the larger-mean component.
struct GmmFit {
  double w_c = 0.5, w_n = 0.5;
  double mu_c = 0, mu_n = 0;
  double sigma_c = 0, sigma_n = 0;
  double log_likelihood = 0;  // mean per sample
  bool converged = false;
  int n_samples = 0;
  int iterations = 0;
  // Mean log-likelihood after initialisation and after each EM iteration.
  std::vector<double> log_likelihood_trace;

  double separation() const { return mu_n - mu_c; }
};

// EM with means initialised at the 25th/75th percentiles, both variances at
// the pooled (floored) variance and equal weights. Needs >= 2 samples.
GmmFit fit_gmm_1d(std::span<const double> losses, const NoiseFilterConfig& cfg);

// P(noisy | loss), evaluated in log space.
double noise_posterior(const GmmFit& fit, double loss);

// Per-pixel softmax cross-entropy (nats) of one image's seg logits against a
// label map; ignore pixels are marked invalid. No gradient is recorded.
struct LossMap {
  int height = 0;
  int width = 0;
  std::vector<double> loss;
  std::vector<std::uint8_t> valid;

  std::size_t valid_count() const;
};

template <typename T>
LossMap pixel_loss_map(std::span<const T> seg_logits, int num_channels,
                       const LabelMap& labels);

struct NoiseFilterResult {
  NoiseMask mask;
  GmmFit fit;
  bool fitted = false;  // false when too few valid pixels
  bool active = false;  // separation exceeded eta
};

// Marks valid pixels whose noise posterior exceeds gamma, but only when the
// fitted means are more than eta apart; otherwise every label is clean.
NoiseFilterResult adaptive_noise_filter(const LossMap& loss_map,
                                        const NoiseFilterConfig& cfg);

}  // namespace dupl
