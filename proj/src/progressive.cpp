#include "dupl/progressive.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numbers>
#include <string>

#include "dupl/error.hpp"

namespace dupl {

void ThresholdSchedule::validate() const {
  if (total_iters < 1) throw ConfigError("schedule: total_iters must be >= 1");
  if (!(tau_l >= 0 && tau_l < tau_h_end && tau_h_end <= tau_h_start &&
        tau_h_start <= 1)) {
    throw ConfigError("schedule: need 0 <= tau_l < tau_h_end <= tau_h_start <= 1");
  }
}

double tau_h_at(const ThresholdSchedule& s, int t) {
  if (t < 0 || t > s.total_iters) {
    std::cerr << "warning: tau_h_at: iteration " << t << " outside [0, "
              << s.total_iters << "], clamping\n";
    t = std::clamp(t, 0, s.total_iters);
  }
  if (t == 0) return s.tau_h_start;
  if (t == s.total_iters) return s.tau_h_end;
  const double phase = std::cos(static_cast<double>(t) * std::numbers::pi /
                                s.total_iters);
  return s.tau_h_start - 0.5 * (s.tau_h_start - s.tau_h_end) * (1.0 - phase);
}

void NoiseFilterConfig::validate() const {
  if (!(gamma > 0 && gamma < 1)) throw ConfigError("noise filter: gamma must lie in (0, 1)");
  if (!(eta >= 0)) throw ConfigError("noise filter: eta must be >= 0");
  if (min_valid_pixels < 2 || max_em_iters < 1 || em_tol <= 0 ||
      variance_floor <= 0) {
    throw ConfigError("noise filter: bad EM settings");
  }
}

namespace {

double log_normal(double x, double mu, double var) {
  const double d = x - mu;
  return -0.5 * (std::log(2.0 * std::numbers::pi * var) + d * d / var);
}

double log_sum_exp(double a, double b) {
  const double m = std::max(a, b);
  if (m == -INFINITY) return m;
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

double percentile(std::vector<double> sorted_copy, double q) {
  const double pos = q * static_cast<double>(sorted_copy.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted_copy.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted_copy[lo] * (1 - frac) + sorted_copy[hi] * frac;
}

struct Components {
  double w[2];
  double mu[2];
  double var[2];
};

double mean_log_likelihood(std::span<const double> x, const Components& c) {
  double ll = 0;
  const double lw0 = c.w[0] > 0 ? std::log(c.w[0]) : -INFINITY;
  const double lw1 = c.w[1] > 0 ? std::log(c.w[1]) : -INFINITY;
  for (double v : x) {
    ll += log_sum_exp(lw0 + log_normal(v, c.mu[0], c.var[0]),
                      lw1 + log_normal(v, c.mu[1], c.var[1]));
  }
  return ll / static_cast<double>(x.size());
}

}  // namespace

GmmFit fit_gmm_1d(std::span<const double> losses, const NoiseFilterConfig& cfg) {
  if (losses.size() < 2) throw ConfigError("fit_gmm_1d: need at least 2 samples");
  const std::size_t n = losses.size();
  GmmFit fit;
  fit.n_samples = static_cast<int>(n);

  double mean = 0;
  for (double v : losses) mean += v;
  mean /= static_cast<double>(n);
  double var = 0;
  for (double v : losses) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);

  std::vector<double> sorted(losses.begin(), losses.end());
  std::sort(sorted.begin(), sorted.end());
  if (sorted.front() == sorted.back()) {
    const double sd = std::sqrt(cfg.variance_floor);
    fit.mu_c = fit.mu_n = sorted.front();
    fit.sigma_c = fit.sigma_n = sd;
    Components c{{0.5, 0.5}, {fit.mu_c, fit.mu_n}, {cfg.variance_floor, cfg.variance_floor}};
    fit.log_likelihood = mean_log_likelihood(losses, c);
    fit.log_likelihood_trace = {fit.log_likelihood};
    fit.converged = true;
    return fit;
  }

  Components c{{0.5, 0.5},
               {percentile(sorted, 0.25), percentile(sorted, 0.75)},
               {std::max(var, cfg.variance_floor), std::max(var, cfg.variance_floor)}};
  double ll = mean_log_likelihood(losses, c);
  fit.log_likelihood_trace.push_back(ll);

  std::vector<double> resp(n);  // responsibility of component 1
  for (int it = 0; it < cfg.max_em_iters; ++it) {
    // E step
    const double lw0 = c.w[0] > 0 ? std::log(c.w[0]) : -INFINITY;
    const double lw1 = c.w[1] > 0 ? std::log(c.w[1]) : -INFINITY;
    for (std::size_t i = 0; i < n; ++i) {
      const double a = lw0 + log_normal(losses[i], c.mu[0], c.var[0]);
      const double b = lw1 + log_normal(losses[i], c.mu[1], c.var[1]);
      resp[i] = std::exp(b - log_sum_exp(a, b));
    }
    // M step
    double n1 = 0, s1 = 0, s0 = 0;
    for (std::size_t i = 0; i < n; ++i) {
      n1 += resp[i];
      s1 += resp[i] * losses[i];
      s0 += (1 - resp[i]) * losses[i];
    }
    const double n0 = static_cast<double>(n) - n1;
    Components next = c;
    if (n0 > 0) next.mu[0] = s0 / n0;
    if (n1 > 0) next.mu[1] = s1 / n1;
    double v0 = 0, v1 = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d0 = losses[i] - next.mu[0];
      const double d1 = losses[i] - next.mu[1];
      v0 += (1 - resp[i]) * d0 * d0;
      v1 += resp[i] * d1 * d1;
    }
    if (n0 > 0) next.var[0] = std::max(v0 / n0, cfg.variance_floor);
    if (n1 > 0) next.var[1] = std::max(v1 / n1, cfg.variance_floor);
    next.w[0] = n0 / static_cast<double>(n);
    next.w[1] = n1 / static_cast<double>(n);
    c = next;

    const double next_ll = mean_log_likelihood(losses, c);
    fit.log_likelihood_trace.push_back(next_ll);
    fit.iterations = it + 1;
    const double delta = std::abs(next_ll - ll);
    ll = next_ll;
    if (delta < cfg.em_tol) {
      fit.converged = true;
      break;
    }
  }

  const int clean = c.mu[0] <= c.mu[1] ? 0 : 1;
  const int noisy = 1 - clean;
  fit.w_c = c.w[clean];
  fit.w_n = c.w[noisy];
  fit.mu_c = c.mu[clean];
  fit.mu_n = c.mu[noisy];
  fit.sigma_c = std::sqrt(c.var[clean]);
  fit.sigma_n = std::sqrt(c.var[noisy]);
  fit.log_likelihood = ll;
  return fit;
}

double noise_posterior(const GmmFit& fit, double loss) {
  if (fit.w_n <= 0) return 0.0;
  if (fit.w_c <= 0) return 1.0;
  const double a = std::log(fit.w_c) + log_normal(loss, fit.mu_c, fit.sigma_c * fit.sigma_c);
  const double b = std::log(fit.w_n) + log_normal(loss, fit.mu_n, fit.sigma_n * fit.sigma_n);
  // 1 / (1 + exp(a - b)) without overflow
  const double d = a - b;
  if (d > 0) {
    const double e = std::exp(-d);
    return e / (1.0 + e);
  }
  return 1.0 / (1.0 + std::exp(d));
}

std::size_t LossMap::valid_count() const {
  std::size_t n = 0;
  for (auto v : valid) n += v ? 1 : 0;
  return n;
}

template <typename T>
LossMap pixel_loss_map(std::span<const T> seg_logits, int num_channels,
                       const LabelMap& labels) {
  const std::size_t plane = labels.size();
  if (seg_logits.size() != plane * static_cast<std::size_t>(num_channels)) {
    throw ConfigError("pixel_loss_map: logits do not match label map");
  }
  LossMap out{labels.height, labels.width, std::vector<double>(plane, 0.0),
              std::vector<std::uint8_t>(plane, 0)};
  for (std::size_t p = 0; p < plane; ++p) {
    const std::uint8_t t = labels.labels[p];
    if (t == kIgnoreLabel) continue;
    if (t >= num_channels) throw DataError("pixel_loss_map: label out of range");
    double mx = seg_logits[p];
    for (int c = 1; c < num_channels; ++c) {
      mx = std::max(mx, static_cast<double>(seg_logits[c * plane + p]));
    }
    double se = 0;
    for (int c = 0; c < num_channels; ++c) se += std::exp(seg_logits[c * plane + p] - mx);
    out.loss[p] = mx + std::log(se) - seg_logits[t * plane + p];
    out.valid[p] = 1;
  }
  return out;
}

NoiseFilterResult adaptive_noise_filter(const LossMap& loss_map,
                                        const NoiseFilterConfig& cfg) {
  cfg.validate();
  NoiseFilterResult result;
  result.mask = NoiseMask(loss_map.height, loss_map.width);
  std::vector<double> samples;
  samples.reserve(loss_map.loss.size());
  for (std::size_t p = 0; p < loss_map.loss.size(); ++p) {
    if (loss_map.valid[p]) samples.push_back(loss_map.loss[p]);
  }
  result.fit.n_samples = static_cast<int>(samples.size());
  if (samples.size() < static_cast<std::size_t>(cfg.min_valid_pixels)) return result;
  result.fit = fit_gmm_1d(samples, cfg);
  result.fitted = true;
  if (result.fit.separation() <= cfg.eta) return result;
  result.active = true;
  for (std::size_t p = 0; p < loss_map.loss.size(); ++p) {
    if (loss_map.valid[p] && noise_posterior(result.fit, loss_map.loss[p]) > cfg.gamma) {
      result.mask.mask[p] = 1;
    }
  }
  return result;
}

template LossMap pixel_loss_map<float>(std::span<const float>, int, const LabelMap&);
template LossMap pixel_loss_map<double>(std::span<const double>, int, const LabelMap&);

}  // namespace dupl
