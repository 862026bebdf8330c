#include "dupl/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "dupl/losses.hpp"
#include "dupl/model.hpp"
#include "dupl/ops.hpp"

namespace dupl {

GradcheckReport gradcheck(const std::string& name, const LossFn& loss,
                          std::vector<Tensor<double>> inputs,
                          const GradcheckOptions& options) {
  GradcheckReport report;
  report.name = name;
  for (auto& in : inputs) in.zero_grad();
  {
    Graph<double> g;
    Tensor<double> out = loss(g);
    g.backward(out);
  }
  std::mt19937_64 rng(options.seed);
  Graph<double> eval;
  eval.set_enabled(false);
  auto f = [&]() { return loss(eval).item(); };

  for (auto& in : inputs) {
    const std::vector<double> analytic(in.grad().begin(), in.grad().end());
    std::vector<std::size_t> coords(in.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (coords.size() > static_cast<std::size_t>(options.max_coords_per_input)) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(options.max_coords_per_input));
    }
    auto x = in.data();
    for (std::size_t i : coords) {
      const double saved = x[i];
      x[i] = saved + options.step;
      const double fp = f();
      x[i] = saved - options.step;
      const double fm = f();
      x[i] = saved;
      const double numeric = (fp - fm) / (2 * options.step);
      const double denom =
          std::max({std::abs(analytic[i]), std::abs(numeric), options.abs_floor});
      const double rel = std::abs(analytic[i] - numeric) / denom;
      ++report.coords;
      if (rel < 1e-3) ++report.within_1e3;
      report.max_rel_error = std::max(report.max_rel_error, rel);
    }
  }
  return report;
}

namespace {

struct Rand {
  std::mt19937_64 rng;
  explicit Rand(std::uint64_t seed) : rng(seed) {}

  // Values in [-1, 1] kept at least `gap` away from zero, so kinks such as
  // ReLU's are not straddled by the finite-difference step.
  Tensor<double> tensor(const Shape& shape, bool grad, double gap = 0.0) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> v(shape.numel());
    for (double& x : v) {
      do {
        x = u(rng);
      } while (std::abs(x) < gap);
    }
    return Tensor<double>::from(shape, std::move(v), grad);
  }
};

// Projects an op output onto fixed random weights so every output
// coordinate receives a distinct upstream adjoint.
Tensor<double> project(Graph<double>& g, const Tensor<double>& out,
                       const Tensor<double>& weights) {
  return sum(g, mul(g, out, weights));
}

// Pseudo-labels and masks for the composite objective, fixed up front.
PseudoLabelMap random_labels(std::mt19937_64& rng, int h, int w, int channels) {
  PseudoLabelMap m{LabelMap(h, w), 0.25, 0.7};
  std::uniform_int_distribution<int> u(0, channels);  // == channels -> ignore
  for (auto& v : m.map.labels) {
    const int l = u(rng);
    v = l == channels ? kIgnoreLabel : static_cast<std::uint8_t>(l);
  }
  return m;
}

NoiseMask random_mask(std::mt19937_64& rng, int h, int w, double p) {
  NoiseMask m(h, w);
  std::bernoulli_distribution b(p);
  for (auto& v : m.mask) v = b(rng) ? 1 : 0;
  return m;
}

}  // namespace

std::vector<GradcheckReport> run_gradcheck_suite(std::uint64_t seed) {
  std::vector<GradcheckReport> reports;
  Rand r(seed);
  GradcheckOptions opt;
  opt.seed = seed;

  {
    auto x = r.tensor({2, 2, 5, 5}, true), w = r.tensor({3, 2, 3, 3}, true),
         b = r.tensor({3}, true), proj = r.tensor({2, 3, 5, 5}, false);
    reports.push_back(gradcheck("conv2d", [=](Graph<double>& g) {
      return project(g, conv2d(g, x, w, b, {1, 1, 1}), proj);
    }, {x, w, b}, opt));
  }
  {
    auto x = r.tensor({1, 2, 7, 7}, true), w = r.tensor({2, 2, 3, 3}, true),
         b = r.tensor({2}, true), proj = r.tensor({1, 2, 4, 4}, false);
    reports.push_back(gradcheck("conv2d_strided_dilated", [=](Graph<double>& g) {
      return project(g, conv2d(g, x, w, b, {2, 2, 2}), proj);
    }, {x, w, b}, opt));
  }
  {
    auto x = r.tensor({2, 3, 4}, true, 0.05), proj = r.tensor({2, 3, 4}, false);
    reports.push_back(gradcheck("relu", [=](Graph<double>& g) {
      return project(g, relu(g, x), proj);
    }, {x}, opt));
  }
  {
    auto x = r.tensor({3, 4}, true), w = r.tensor({5, 4}, true), b = r.tensor({5}, true),
         proj = r.tensor({3, 5}, false);
    reports.push_back(gradcheck("linear", [=](Graph<double>& g) {
      return project(g, linear(g, x, w, b), proj);
    }, {x, w, b}, opt));
  }
  {
    auto x = r.tensor({2, 3, 4, 4}, true), proj = r.tensor({2, 3}, false);
    reports.push_back(gradcheck("global_avg_pool", [=](Graph<double>& g) {
      return project(g, global_avg_pool(g, x), proj);
    }, {x}, opt));
  }
  {
    auto x = r.tensor({2, 2, 4, 4}, true), up = r.tensor({2, 2, 7, 9}, false),
         down = r.tensor({2, 2, 3, 3}, false);
    reports.push_back(gradcheck("bilinear_resize", [=](Graph<double>& g) {
      return add(g, project(g, bilinear_resize(g, x, 7, 9), up),
                 project(g, bilinear_resize(g, x, 3, 3), down));
    }, {x}, opt));
  }
  {
    auto a = r.tensor({2, 3}, true), b = r.tensor({2, 3}, true), proj = r.tensor({2, 3}, false);
    reports.push_back(gradcheck("add_mul_scale_sum", [=](Graph<double>& g) {
      return project(g, scale(g, add(g, mul(g, a, b), a), -1.7), proj);
    }, {a, b}, opt));
  }
  {
    auto z = r.tensor({3, 4}, true);
    const std::vector<double> y{1, 0, 0, 1, 0, 1, 1, 0, 0, 0, 1, 1};
    reports.push_back(gradcheck("multilabel_soft_margin", [=](Graph<double>& g) {
      return multilabel_soft_margin(g, scale(g, z, 3.0), std::span<const double>(y));
    }, {z}, opt));
  }
  {
    auto a = r.tensor({2, 3, 2, 2}, true), b = r.tensor({2, 3, 2, 2}, true);
    reports.push_back(gradcheck("cosine_discrepancy", [=](Graph<double>& g) {
      return cosine_discrepancy(g, a, b, kDiscrepancyEps);
    }, {a, b}, opt));
  }
  {
    auto z = r.tensor({2, 3, 3, 4}, true);
    std::vector<std::uint8_t> t(2 * 3 * 4);
    for (std::size_t i = 0; i < t.size(); ++i) {
      t[i] = i % 5 == 4 ? kIgnoreLabel : static_cast<std::uint8_t>(i % 3);
    }
    reports.push_back(gradcheck("pixel_cross_entropy", [=](Graph<double>& g) {
      return pixel_cross_entropy(g, scale(g, z, 2.0), t);
    }, {z}, opt));
  }

  // Full objective through two tiny sub-nets: L_cls + l1 L_dis + l2 L_seg +
  // l3 L_reg with pseudo-labels, noise masks and a flipped strong view.
  {
    SubNetConfig cfg;
    cfg.num_classes = 2;
    cfg.backbone_channels = {4, 5};
    cfg.backbone_strides = {2, 1};
    cfg.head_channels = 4;
    cfg.head_dilation = 1;
    auto model = std::make_shared<DualStudent<double>>(cfg, true, seed);
    const int n = 2, h = 8, w = 8, k = cfg.num_classes + 1;
    auto images = r.tensor({n, 3, h, w}, false);
    auto strong = r.tensor({n, 3, h, w}, false);
    const std::vector<std::uint8_t> image_labels{1, 0, 1, 1};
    std::vector<PseudoLabelMap> y1, y2, relaxed;
    std::vector<NoiseMask> f1, f2, m1;
    std::vector<AugmentRecord> records;
    for (int i = 0; i < n; ++i) {
      y1.push_back(random_labels(r.rng, h, w, k));
      y2.push_back(random_labels(r.rng, h, w, k));
      f1.push_back(random_mask(r.rng, h, w, 0.2));
      f2.push_back(random_mask(r.rng, h, w, 0.2));
      PseudoLabelMap rl = random_labels(r.rng, h, w, k);
      for (auto& v : rl.map.labels) v = v == kIgnoreLabel ? 0 : v;
      relaxed.push_back(rl);
      m1.push_back(unsupervised_mask(y2.back(), &f1.back()));
      AugmentRecord rec = AugmentRecord::identity(h, w);
      rec.hflip = i == 1;
      records.push_back(rec);
    }
    // The detached operands of L_dis are constants of the objective, so the
    // finite differences must see them frozen at the base point.
    Tensor<double> frozen1, frozen2;
    {
      Graph<double> g;
      g.set_enabled(false);
      frozen1 = model->net(0).forward(g, images).features;
      frozen2 = model->net(1).forward(g, images).features;
    }
    std::vector<Tensor<double>> inputs;
    for (int s = 0; s < 2; ++s) {
      for (const auto& p : model->net(s).params()) inputs.push_back(p.tensor);
    }
    // ReLU kinks can make a few coordinates disagree; use a smaller step.
    GradcheckOptions copt = opt;
    copt.step = 1e-6;
    copt.max_coords_per_input = 16;
    reports.push_back(gradcheck("composite_objective", [=](Graph<double>& g) {
      auto o1 = model->net(0).forward(g, images);
      auto o2 = model->net(1).forward(g, images);
      auto s1 = model->net(0).forward(g, strong);
      auto s2 = model->net(1).forward(g, strong);
      LossTerms<double> t;
      t.cls = add(g, classification_loss(g, o1.class_logits, image_labels),
                  classification_loss(g, o2.class_logits, image_labels));
      t.dis = add(g, cosine_discrepancy(g, o1.features, frozen2, kDiscrepancyEps),
                  cosine_discrepancy(g, o2.features, frozen1, kDiscrepancyEps));
      t.seg = cross_supervision_loss(g, o1.seg_logits, o2.seg_logits, y1, y2,
                                     std::span<const NoiseMask>(f1),
                                     std::span<const NoiseMask>(f2));
      t.reg = add(g, consistency_loss(g, s1.seg_logits, relaxed, records, m1),
                  consistency_loss(g, s2.seg_logits, relaxed, records, m1));
      return total_loss(g, t, LossWeights{}, Phase::kC);
    }, inputs, copt));
  }
  return reports;
}

}  // namespace dupl
