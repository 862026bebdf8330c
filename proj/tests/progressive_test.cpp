#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <numbers>
#include <random>

#include "dupl/error.hpp"
#include "dupl/progressive.hpp"
#include "test_util.hpp"

using namespace dupl;

namespace {

double normal_pdf(double x, double mu, double sd) {
  const double z = (x - mu) / sd;
  return std::exp(-0.5 * z * z) / (sd * std::sqrt(2 * std::numbers::pi));
}

std::vector<double> mixture(std::mt19937_64& rng, int n, double w0, double m0, double s0,
                            double m1, double s1, std::vector<int>* member = nullptr) {
  std::bernoulli_distribution pick(1 - w0);
  std::normal_distribution<double> a(m0, s0), b(m1, s1);
  std::vector<double> x(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const bool second = pick(rng);
    x[static_cast<std::size_t>(i)] = second ? b(rng) : a(rng);
    if (member) member->push_back(second ? 1 : 0);
  }
  return x;
}

LossMap as_loss_map(int h, int w, std::vector<double> loss) {
  return {h, w, std::move(loss), std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w, 1)};
}

}  // namespace

TEST_CASE("cosine threshold schedule") {
  ThresholdSchedule s{0.25, 0.7, 0.55, 3000};
  CHECK(std::abs(tau_h_at(s, 0) - 0.7) <= 1e-12);
  CHECK(std::abs(tau_h_at(s, 3000) - 0.55) <= 1e-12);
  CHECK(std::abs(tau_h_at(s, 1500) - 0.625) <= 1e-12);
  double prev = tau_h_at(s, 0);
  for (int i = 1; i <= 1000; ++i) {
    const double cur = tau_h_at(s, static_cast<int>(std::lround(i * 3.0)));
    CHECK(cur <= prev);
    prev = cur;
  }
  CHECK(tau_h_at(s, -5) == tau_h_at(s, 0));
  CHECK(tau_h_at(s, 4000) == tau_h_at(s, 3000));

  s.tau_h_end = 0.8;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  ThresholdSchedule ok{0.25, 0.7, 0.55, 10};
  CHECK_NOTHROW(ok.validate());
}

TEST_CASE("pixel loss map") {
  LabelMap labels(2, 2, 0);
  labels.labels = {0, 4, 255, 2};
  std::vector<double> uniform(5 * 4, 0.3);
  auto lm = pixel_loss_map<double>(uniform, 5, labels);
  CHECK(lm.valid == std::vector<std::uint8_t>{1, 1, 0, 1});
  CHECK(lm.valid_count() == 3);
  for (int p : {0, 1, 3}) CHECK(lm.loss[static_cast<std::size_t>(p)] == doctest::Approx(std::log(5.0)).epsilon(1e-14));

  // Correct class with a large margin: loss -> 0.
  std::vector<double> confident(5 * 4, 0.0);
  confident[0 * 4 + 0] = 40;
  confident[4 * 4 + 1] = 40;
  confident[2 * 4 + 3] = 40;
  auto sure = pixel_loss_map<double>(confident, 5, labels);
  for (int p : {0, 1, 3}) CHECK(sure.loss[static_cast<std::size_t>(p)] < 1e-15);

  std::mt19937_64 rng(4);
  LabelMap rl(3, 5, 0);
  std::uniform_int_distribution<int> lab(0, 3);
  for (auto& v : rl.labels) v = static_cast<std::uint8_t>(lab(rng) == 3 ? 255 : lab(rng) % 3);
  auto logits = test::random_vector<double>(rng, 3 * 15, -4.0, 4.0);
  auto got = pixel_loss_map<double>(logits, 3, rl);
  for (std::size_t p = 0; p < 15; ++p) {
    if (rl.labels[p] == 255) {
      CHECK(got.valid[p] == 0);
      continue;
    }
    long double z = 0;
    for (int c = 0; c < 3; ++c) z += std::exp(static_cast<long double>(logits[c * 15 + p]));
    const double want = static_cast<double>(std::log(z) - logits[rl.labels[p] * 15 + p]);
    CHECK(got.loss[p] == doctest::Approx(want).epsilon(1e-12));
  }
  LabelMap bad(1, 1, 7);
  CHECK_THROWS_AS(pixel_loss_map<double>(std::vector<double>(3, 0.0), 3, bad), DataError);
}

TEST_CASE("EM recovers a known mixture with a monotone likelihood") {
  std::mt19937_64 rng(2024);
  auto x = mixture(rng, 10000, 0.5, 0.2, 0.1, 2.5, 0.4);
  NoiseFilterConfig cfg;
  const auto t0 = std::chrono::steady_clock::now();
  auto fit = fit_gmm_1d(x, cfg);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(secs < 5.0);
  CHECK(std::abs(fit.mu_c - 0.2) <= 0.05);
  CHECK(std::abs(fit.mu_n - 2.5) <= 0.05);
  CHECK(std::abs(fit.w_c - 0.5) <= 0.05);
  CHECK(std::abs(fit.w_n - 0.5) <= 0.05);
  CHECK(std::abs(fit.w_c + fit.w_n - 1.0) <= 1e-9);
  CHECK(fit.n_samples == 10000);
  CHECK(fit.converged);
  REQUIRE(fit.log_likelihood_trace.size() >= 2);
  for (std::size_t i = 1; i < fit.log_likelihood_trace.size(); ++i) {
    CHECK(fit.log_likelihood_trace[i] >= fit.log_likelihood_trace[i - 1] - 1e-10);
  }
}

TEST_CASE("EM likelihood is monotone on assorted inputs") {
  std::mt19937_64 rng(9);
  NoiseFilterConfig cfg;
  cfg.em_tol = 1e-12;
  for (int trial = 0; trial < 20; ++trial) {
    auto x = mixture(rng, 500, 0.3 + 0.02 * trial, 0.1, 0.3, 1.0 + 0.1 * trial, 0.5);
    auto fit = fit_gmm_1d(x, cfg);
    CHECK(fit.mu_c <= fit.mu_n);
    CHECK(fit.sigma_c >= std::sqrt(cfg.variance_floor));
    for (std::size_t i = 1; i < fit.log_likelihood_trace.size(); ++i) {
      CHECK(fit.log_likelihood_trace[i] >= fit.log_likelihood_trace[i - 1] - 1e-10);
    }
  }
}

TEST_CASE("degenerate inputs") {
  NoiseFilterConfig cfg;
  std::vector<double> same(100, 0.3);
  auto fit = fit_gmm_1d(same, cfg);
  CHECK(fit.mu_c == 0.3);
  CHECK(fit.mu_n == 0.3);
  CHECK(fit.separation() == 0.0);
  CHECK(fit.converged);
  auto res = adaptive_noise_filter(as_loss_map(10, 10, same), cfg);
  CHECK(res.mask.count() == 0);
  CHECK_FALSE(res.active);

  CHECK_THROWS_AS(fit_gmm_1d(std::vector<double>{1.0}, cfg), ConfigError);

  // Too few valid pixels: nothing is fitted.
  auto few = as_loss_map(4, 4, std::vector<double>(16, 1.0));
  few.loss[0] = 50;
  auto r2 = adaptive_noise_filter(few, cfg);
  CHECK_FALSE(r2.fitted);
  CHECK(r2.mask.count() == 0);

  NoiseFilterConfig bad;
  bad.gamma = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.eta = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("noise posterior") {
  GmmFit sym;
  sym.w_c = sym.w_n = 0.5;
  sym.mu_c = 0.5;
  sym.mu_n = 2.5;
  sym.sigma_c = sym.sigma_n = 0.3;
  CHECK(noise_posterior(sym, 1.5) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(noise_posterior(sym, 1e3) == 1.0);
  CHECK(noise_posterior(sym, 4.0) > 0.999999);

  GmmFit f;
  f.w_c = 0.7;
  f.w_n = 0.3;
  f.mu_c = 0.5;
  f.mu_n = 2.0;
  f.sigma_c = 0.2;
  f.sigma_n = 0.5;
  const double a = 0.7 * normal_pdf(1.8, 0.5, 0.2), b = 0.3 * normal_pdf(1.8, 2.0, 0.5);
  CHECK(std::abs(noise_posterior(f, 1.8) - b / (a + b)) <= 1e-9);
}

TEST_CASE("adaptive filter on a bimodal loss map") {
  std::mt19937_64 rng(31);
  std::vector<int> member;
  auto x = mixture(rng, 64 * 64, 0.9, 0.2, 0.1, 3.0, 0.3, &member);
  auto lm = as_loss_map(64, 64, x);
  NoiseFilterConfig cfg;  // gamma 0.9, eta 1.0
  auto res = adaptive_noise_filter(lm, cfg);
  REQUIRE(res.fitted);
  REQUIRE(res.active);
  int noisy = 0, agree = 0;
  for (std::size_t i = 0; i < member.size(); ++i) {
    noisy += member[i];
    agree += (member[i] == 1) == (res.mask.mask[i] != 0);
  }
  const double n = static_cast<double>(member.size());
  CHECK(std::abs(static_cast<double>(res.mask.count()) - noisy) / n <= 0.02);
  CHECK(agree / n >= 0.98);

  // Invalid pixels are never flagged.
  lm.valid[0] = 0;
  lm.loss[0] = 100;
  CHECK(adaptive_noise_filter(lm, cfg).mask.mask[0] == 0);

  // Raising gamma never grows the mask.
  NoiseMask prev = res.mask;
  for (double g : {0.95, 0.99, 0.999}) {
    cfg.gamma = g;
    auto cur = adaptive_noise_filter(as_loss_map(64, 64, x), cfg);
    for (std::size_t i = 0; i < cur.mask.size(); ++i) {
      if (cur.mask.mask[i]) CHECK(prev.mask[i]);
    }
    prev = cur.mask;
  }

  // Determinism.
  cfg = {};
  CHECK(adaptive_noise_filter(as_loss_map(64, 64, x), cfg).mask == res.mask);
}

TEST_CASE("unimodal loss map stays clean") {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> d(0.8, 0.2);
  std::vector<double> x(4096);
  for (double& v : x) v = d(rng);
  auto res = adaptive_noise_filter(as_loss_map(64, 64, x), NoiseFilterConfig{});
  CHECK(res.fitted);
  CHECK(res.fit.separation() <= 1.0);
  CHECK_FALSE(res.active);
  CHECK(res.mask.count() == 0);
}

TEST_CASE("separation exactly at eta stays clean") {
  // Two point masses exactly eta apart: the filter must not activate.
  std::vector<double> x(200, 0.0);
  for (std::size_t i = 100; i < 200; ++i) x[i] = 1.0;
  NoiseFilterConfig cfg;
  auto res = adaptive_noise_filter(as_loss_map(10, 20, x), cfg);
  REQUIRE(res.fitted);
  CHECK(res.fit.separation() == doctest::Approx(1.0).epsilon(1e-9));
  if (res.fit.separation() <= cfg.eta) CHECK(res.mask.count() == 0);
}
