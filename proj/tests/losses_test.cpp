#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "dupl/error.hpp"
#include "dupl/losses.hpp"
#include "dupl/ops.hpp"
#include "test_util.hpp"

using namespace dupl;
using test::random_tensor;

namespace {

constexpr int kN = 2, kK = 4, kH = 5, kW = 6;

std::vector<PseudoLabelMap> random_labels(std::mt19937_64& rng, int n = kN) {
  std::uniform_int_distribution<int> lab(0, kK);  // kK -> ignore
  std::vector<PseudoLabelMap> out;
  for (int i = 0; i < n; ++i) {
    PseudoLabelMap m{LabelMap(kH, kW, 0), 0.25, 0.7};
    for (auto& v : m.map.labels) {
      const int l = lab(rng);
      v = static_cast<std::uint8_t>(l == kK ? 255 : l);
    }
    out.push_back(m);
  }
  return out;
}

std::vector<NoiseMask> random_masks(std::mt19937_64& rng, double p, int n = kN) {
  std::bernoulli_distribution coin(p);
  std::vector<NoiseMask> out;
  for (int i = 0; i < n; ++i) {
    NoiseMask m(kH, kW);
    for (auto& v : m.mask) v = coin(rng) ? 1 : 0;
    out.push_back(m);
  }
  return out;
}

double ref_soft_margin(double z, double y) {
  const double s = 1.0 / (1.0 + std::exp(-z));
  return -(y * std::log(s) + (1 - y) * std::log(1 - s));
}

// Reference masked CE of one image, written directly from the definition.
double ref_image_ce(const Tensor<double>& logits, int n, const LabelMap& lab,
                    const NoiseMask* filter) {
  const std::size_t plane = lab.size();
  double total = 0;
  int count = 0;
  for (std::size_t p = 0; p < plane; ++p) {
    if (lab.labels[p] == 255 || (filter && filter->mask[p])) continue;
    double z = 0;
    for (int c = 0; c < kK; ++c) z += std::exp(logits.data()[(n * kK + c) * plane + p]);
    total += std::log(z) - logits.data()[(n * kK + lab.labels[p]) * plane + p];
    ++count;
  }
  return count ? total / count : 0.0;
}

}  // namespace

TEST_CASE("classification loss") {
  Graph<double> g;
  const std::vector<std::uint8_t> y{1, 0, 0, 1, 1, 0};
  CHECK(classification_loss(g, Tensor<double>::zeros({2, 3}), y).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-14));
  const std::vector<std::uint8_t> pos{1};
  CHECK(classification_loss(g, Tensor<double>::full({1, 1}, 50.0), pos).item() < 1e-20);

  std::mt19937_64 rng(1);
  auto z = random_tensor(rng, {3, 4}, false, -6, 6);
  std::vector<std::uint8_t> labels(12);
  std::bernoulli_distribution coin(0.5);
  for (auto& v : labels) v = coin(rng);
  double want = 0;
  for (int i = 0; i < 12; ++i) want += ref_soft_margin(z.data()[i], labels[i]);
  CHECK(std::abs(classification_loss(g, z, labels).item() - want / 12) <= 1e-9);
}

TEST_CASE("discrepancy loss examples") {
  Graph<double> g;
  auto a = Tensor<double>::from({1, 2, 1, 1}, {1, 0});
  auto b = Tensor<double>::from({1, 2, 1, 1}, {0, 3});
  CHECK(discrepancy_loss(g, a, b).item() == 0.0);
  CHECK(discrepancy_loss(g, a, a).item() == doctest::Approx(-2 * std::log(1e-4)).epsilon(1e-12));
  CHECK(discrepancy_loss(g, a, a).item() == doctest::Approx(18.42).epsilon(1e-3));
  auto neg = Tensor<double>::from({1, 2, 1, 1}, {-1, 0});
  CHECK(discrepancy_loss(g, a, neg).item() == doctest::Approx(-2 * std::log(2.0)).epsilon(1e-12));
  auto zero = Tensor<double>::zeros({1, 2, 1, 1});
  CHECK(discrepancy_loss(g, a, zero).item() == 0.0);
}

TEST_CASE("discrepancy loss is symmetric and equals the frozen form") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    auto f1 = random_tensor(rng, {3, 4, 3, 3}, true);
    auto f2 = random_tensor(rng, {3, 4, 3, 3}, true);
    Graph<double> g;
    auto l12 = discrepancy_loss(g, f1, f2);
    auto l21 = discrepancy_loss(g, f2, f1);
    CHECK(l12.item() == l21.item());

    // Value and gradients match D(f1, const f2) + D(f2, const f1).
    Graph<double> g1;
    auto live = discrepancy_loss(g1, f1, f2);
    g1.backward(live);
    const std::vector<double> g_f1(f1.grad().begin(), f1.grad().end());
    const std::vector<double> g_f2(f2.grad().begin(), f2.grad().end());
    f1.zero_grad();
    f2.zero_grad();
    Graph<double> g2;
    auto frozen = add(g2, cosine_discrepancy(g2, f1, f2.clone(), kDiscrepancyEps),
                      cosine_discrepancy(g2, f2, f1.clone(), kDiscrepancyEps));
    g2.backward(frozen);
    CHECK(live.item() == doctest::Approx(frozen.item()).epsilon(1e-15));
    for (std::size_t i = 0; i < g_f1.size(); ++i) {
      CHECK(g_f1[i] == doctest::Approx(f1.grad()[i]).epsilon(1e-13));
      CHECK(g_f2[i] == doctest::Approx(f2.grad()[i]).epsilon(1e-13));
    }
  }
}

TEST_CASE("stop-gradient ancestors receive exactly zero adjoints") {
  std::mt19937_64 rng(3);
  auto x1 = random_tensor(rng, {2, 3, 2, 2}, true);
  auto x2 = random_tensor(rng, {2, 3, 2, 2}, true);
  Graph<double> g;
  auto f1 = relu(g, scale(g, x1, 2.0));
  auto f2 = relu(g, scale(g, x2, 3.0));
  auto l = cosine_discrepancy(g, f1, stop_gradient(f2), kDiscrepancyEps);
  g.backward(l);
  for (double v : x2.grad()) CHECK(v == 0.0);
  double mag = 0;
  for (double v : x1.grad()) mag += std::abs(v);
  CHECK(mag > 0);
}

TEST_CASE("cross-supervision matches a direct evaluation") {
  std::mt19937_64 rng(4);
  auto s1 = random_tensor(rng, {kN, kK, kH, kW}, false, -3, 3);
  auto s2 = random_tensor(rng, {kN, kK, kH, kW}, false, -3, 3);
  auto y1 = random_labels(rng), y2 = random_labels(rng);
  auto m1 = random_masks(rng, 0.3), m2 = random_masks(rng, 0.3);
  Graph<double> g;
  const double got = cross_supervision_loss(g, s1, s2, y1, y2, m1, m2).item();
  double want = 0;
  for (int i = 0; i < kN; ++i) {
    want += ref_image_ce(s1, i, y2[i].map, &m1[i]) / kN;
    want += ref_image_ce(s2, i, y1[i].map, &m2[i]) / kN;
  }
  CHECK(got == doctest::Approx(want).epsilon(1e-12));

  const double unfiltered = cross_supervision_loss(g, s1, s2, y1, y2, {}, {}).item();
  double want_u = 0;
  for (int i = 0; i < kN; ++i) {
    want_u += ref_image_ce(s1, i, y2[i].map, nullptr) / kN;
    want_u += ref_image_ce(s2, i, y1[i].map, nullptr) / kN;
  }
  CHECK(unfiltered == doctest::Approx(want_u).epsilon(1e-12));
}

TEST_CASE("ignored and filtered pixels do not affect the segmentation loss") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> noise(0, 10);
  for (int trial = 0; trial < 20; ++trial) {
    auto s1 = random_tensor(rng, {kN, kK, kH, kW}, true, -3, 3);
    auto s2 = random_tensor(rng, {kN, kK, kH, kW}, true, -3, 3);
    auto y1 = random_labels(rng), y2 = random_labels(rng);
    auto m1 = random_masks(rng, 0.25), m2 = random_masks(rng, 0.25);
    Graph<double> g;
    auto base = cross_supervision_loss(g, s1, s2, y1, y2, m1, m2);
    g.backward(base);

    auto p1 = s1.clone(), p2 = s2.clone();
    const std::size_t plane = static_cast<std::size_t>(kH) * kW;
    for (int i = 0; i < kN; ++i) {
      for (std::size_t p = 0; p < plane; ++p) {
        const bool skip1 = y2[i].map.labels[p] == 255 || m1[i].mask[p];
        const bool skip2 = y1[i].map.labels[p] == 255 || m2[i].mask[p];
        for (int c = 0; c < kK; ++c) {
          const std::size_t idx = (static_cast<std::size_t>(i) * kK + c) * plane + p;
          if (skip1) {
            p1.data()[idx] += noise(rng);
            CHECK(s1.grad()[idx] == 0.0);
          }
          if (skip2) {
            p2.data()[idx] += noise(rng);
            CHECK(s2.grad()[idx] == 0.0);
          }
        }
      }
    }
    Graph<double> g2;
    CHECK(cross_supervision_loss(g2, p1, p2, y1, y2, m1, m2).item() == base.item());
  }
}

TEST_CASE("all-ignore labels give zero loss and zero gradients") {
  std::mt19937_64 rng(6);
  auto s1 = random_tensor(rng, {kN, kK, kH, kW}, true);
  auto s2 = random_tensor(rng, {kN, kK, kH, kW}, true);
  std::vector<PseudoLabelMap> none(kN, PseudoLabelMap{LabelMap(kH, kW, 255), 0.25, 0.7});
  Graph<double> g;
  auto l = cross_supervision_loss(g, s1, s2, none, none, {}, {});
  CHECK(l.item() == 0.0);
  g.backward(l);
  for (double v : s1.grad()) CHECK(v == 0.0);
  for (double v : s2.grad()) CHECK(v == 0.0);
}

TEST_CASE("confident correct logits drive the segmentation loss to zero") {
  std::mt19937_64 rng(7);
  auto y = random_labels(rng);
  auto s = Tensor<double>::zeros({kN, kK, kH, kW});
  const std::size_t plane = static_cast<std::size_t>(kH) * kW;
  for (int i = 0; i < kN; ++i) {
    for (std::size_t p = 0; p < plane; ++p) {
      const int l = y[static_cast<std::size_t>(i)].map.labels[p];
      if (l != 255) s.data()[(static_cast<std::size_t>(i) * kK + l) * plane + p] = 60;
    }
  }
  Graph<double> g;
  CHECK(cross_supervision_loss(g, s, s, y, y, {}, {}).item() < 1e-20);
}

TEST_CASE("cross-supervision is invariant under a sub-net swap") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    auto s1 = random_tensor(rng, {kN, kK, kH, kW}, false, -4, 4);
    auto s2 = random_tensor(rng, {kN, kK, kH, kW}, false, -4, 4);
    auto y1 = random_labels(rng), y2 = random_labels(rng);
    auto m1 = random_masks(rng, 0.2), m2 = random_masks(rng, 0.2);
    Graph<double> g;
    CHECK(cross_supervision_loss(g, s1, s2, y1, y2, m1, m2).item() ==
          cross_supervision_loss(g, s2, s1, y2, y1, m2, m1).item());
  }
}

TEST_CASE("shape mismatches are configuration errors") {
  std::mt19937_64 rng(9);
  auto s = random_tensor(rng, {kN, kK, kH, kW});
  auto y = random_labels(rng);
  Graph<double> g;
  auto small = random_tensor(rng, {kN, kK, kH, kW - 1});
  CHECK_THROWS_AS(cross_supervision_loss(g, s, small, y, y, {}, {}), ConfigError);
  auto one = random_labels(rng, 1);
  CHECK_THROWS_AS(cross_supervision_loss(g, s, s, one, y, {}, {}), ConfigError);
  std::vector<NoiseMask> wrong(kN, NoiseMask(kH + 1, kW));
  CHECK_THROWS_AS(segmentation_term(g, s, y, wrong), ConfigError);
  std::vector<AugmentRecord> recs(kN, AugmentRecord::identity(kH, kW));
  CHECK_THROWS_AS(consistency_loss(g, s, y, recs, wrong), ConfigError);
}

TEST_CASE("noise masks only shrink the supervised set") {
  std::mt19937_64 rng(10);
  auto y = random_labels(rng, 1)[0];
  NoiseMask m(kH, kW);
  auto prev = count_pixels(y, &m);
  CHECK(prev.supervised + prev.ignored + prev.filtered == y.map.size());
  for (std::size_t p = 0; p < m.size(); ++p) {
    m.mask[p] = 1;
    auto cur = count_pixels(y, &m);
    CHECK(cur.supervised <= prev.supervised);
    CHECK(cur.supervised + cur.ignored + cur.filtered == y.map.size());
    prev = cur;
  }
  CHECK(prev.supervised == 0);

  auto eff = effective_labels(y, &m);
  for (auto v : eff.labels) CHECK(v == 255);
  CHECK(effective_labels(y, nullptr) == y.map);
  auto um = unsupervised_mask(y, nullptr);
  for (std::size_t p = 0; p < um.size(); ++p) CHECK((um.mask[p] != 0) == (y.map.labels[p] == 255));
}

TEST_CASE("consistency loss") {
  std::mt19937_64 rng(11);
  auto s = random_tensor(rng, {kN, kK, kH, kW}, true, -3, 3);
  std::vector<PseudoLabelMap> relaxed = random_labels(rng);
  for (auto& r : relaxed) {
    for (auto& v : r.map.labels) v = v == 255 ? 0 : v;
  }
  std::vector<AugmentRecord> ident(kN, AugmentRecord::identity(kH, kW));
  Graph<double> g;

  std::vector<NoiseMask> empty(kN, NoiseMask(kH, kW));
  auto zero = consistency_loss(g, s, relaxed, ident, empty);
  CHECK(zero.item() == 0.0);

  std::vector<NoiseMask> full(kN, NoiseMask(kH, kW));
  for (auto& m : full) std::fill(m.mask.begin(), m.mask.end(), 1);
  std::vector<std::uint8_t> targets;
  for (const auto& r : relaxed) targets.insert(targets.end(), r.map.labels.begin(), r.map.labels.end());
  CHECK(consistency_loss(g, s, relaxed, ident, full).item() ==
        doctest::Approx(pixel_cross_entropy(g, s, targets).item()).epsilon(1e-15));

  // Partial mask: CE averaged over the mask only.
  auto part = random_masks(rng, 0.4);
  double want = 0;
  for (int i = 0; i < kN; ++i) {
    PseudoLabelMap masked = relaxed[static_cast<std::size_t>(i)];
    for (std::size_t p = 0; p < masked.map.size(); ++p) {
      if (!part[static_cast<std::size_t>(i)].mask[p]) masked.map.labels[p] = 255;
    }
    want += ref_image_ce(s, i, masked.map, nullptr) / kN;
  }
  CHECK(consistency_loss(g, s, relaxed, ident, part).item() == doctest::Approx(want).epsilon(1e-12));

  // Flip equivariance: flipped prediction against the flip-transported
  // target equals the unflipped pair.
  auto flipped = s.clone();
  const std::size_t plane = static_cast<std::size_t>(kH) * kW;
  for (std::size_t nc = 0; nc < static_cast<std::size_t>(kN) * kK; ++nc) {
    for (int y = 0; y < kH; ++y) {
      for (int x = 0; x < kW; ++x) {
        flipped.data()[nc * plane + y * kW + x] = s.data()[nc * plane + y * kW + (kW - 1 - x)];
      }
    }
  }
  std::vector<AugmentRecord> flips(kN, AugmentRecord::identity(kH, kW));
  for (auto& r : flips) r.hflip = true;
  CHECK(consistency_loss(g, flipped, relaxed, flips, part).item() ==
        doctest::Approx(consistency_loss(g, s, relaxed, ident, part).item()).epsilon(1e-13));
}

TEST_CASE("total loss and phase gating") {
  const LossWeights w;  // 0.1, 0.1, 0.05
  CHECK(w.lambda1 == 0.1);
  CHECK(w.lambda2 == 0.1);
  CHECK(w.lambda3 == 0.05);
  CHECK(combine_losses(1, 1, 1, 1, w, Phase::kC) == doctest::Approx(1.25).epsilon(1e-15));
  CHECK(combine_losses(1, 1, 1, 1, w, Phase::kB) == doctest::Approx(1.2).epsilon(1e-15));
  CHECK(combine_losses(1, 1, 1, 1, w, Phase::kA) == doctest::Approx(1.1).epsilon(1e-15));
  CHECK(combine_losses(0.7, 3, 4, 5, LossWeights{0, 0, 0}, Phase::kC) == 0.7);
  CHECK_THROWS_AS((LossWeights{-1, 0, 0}.validate()), ConfigError);

  Graph<double> g;
  auto one = [] { return Tensor<double>::scalar(1.0, true); };
  LossTerms<double> terms{one(), one(), one(), one()};
  LossReport report;
  auto t = total_loss(g, terms, w, Phase::kC, &report);
  CHECK(t.item() == doctest::Approx(1.25).epsilon(1e-15));
  CHECK(std::abs(report.total - (report.l_cls + 0.1 * report.l_dis + 0.1 * report.l_seg +
                                 0.05 * report.l_reg)) <= 1e-9);
  g.backward(t);
  CHECK(terms.reg.grad()[0] == doctest::Approx(0.05));
  CHECK(terms.seg.grad()[0] == doctest::Approx(0.1));

  Graph<double> ga;
  LossTerms<double> a{one(), one(), one(), one()};
  auto ta = total_loss(ga, a, w, Phase::kA);
  CHECK(ta.item() == doctest::Approx(1.1).epsilon(1e-15));
  ga.backward(ta);
  CHECK(a.seg.grad()[0] == 0.0);
  CHECK(a.reg.grad()[0] == 0.0);

  Graph<double> gb;
  LossTerms<double> partial{one(), {}, one(), {}};
  CHECK(total_loss(gb, partial, w, Phase::kB).item() == doctest::Approx(1.1).epsilon(1e-15));
  CHECK_THROWS_AS(total_loss(gb, LossTerms<double>{}, w, Phase::kC), ConfigError);

  CHECK(phase_at(0, 2, 5) == Phase::kA);
  CHECK(phase_at(2, 2, 5) == Phase::kB);
  CHECK(phase_at(5, 2, 5) == Phase::kC);
}
