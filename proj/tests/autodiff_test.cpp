#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "dupl/error.hpp"
#include "dupl/gradcheck.hpp"
#include "dupl/ops.hpp"
#include "dupl/optim.hpp"
#include "test_util.hpp"

using namespace dupl;
using dupl::test::random_tensor;

namespace {

Tensor<double> project(Graph<double>& g, const Tensor<double>& out, const Tensor<double>& w) {
  return sum(g, mul(g, out, w));
}

// Independent half-pixel bilinear sample of a single H x W plane.
double bilinear_ref(const std::vector<double>& plane, int h, int w, int oh, int ow, int oy, int ox) {
  auto coord = [](int o, int in, int out) {
    double s = (o + 0.5) * in / out - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(in - 1));
  };
  const double sy = coord(oy, h, oh), sx = coord(ox, w, ow);
  const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
  const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = sy - y0, fx = sx - x0;
  auto at = [&](int y, int x) { return plane[static_cast<std::size_t>(y) * w + x]; };
  return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
         fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
}

}  // namespace

TEST_CASE("conv2d: hand examples") {
  Graph<double> g;
  auto ones = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  auto w2 = Tensor<double>::from({1, 1, 1, 1}, {2.0});
  auto b0 = Tensor<double>::zeros({1});
  auto out = conv2d(g, ones, w2, b0, {1, 0, 1});
  CHECK(out.shape() == Shape{1, 1, 3, 3});
  for (double v : out.data()) CHECK(v == 2.0);

  auto box = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  auto sum9 = conv2d(g, ones, box, b0, {1, 1, 1});
  CHECK(sum9.data()[4] == 9.0);
  CHECK(sum9.data()[0] == 4.0);
}

TEST_CASE("conv2d: dilated head shape and gradients") {
  std::mt19937_64 rng(2);
  auto x = random_tensor(rng, {2, 3, 8, 8}, true);
  auto w = random_tensor(rng, {4, 3, 3, 3}, true);
  auto b = random_tensor(rng, {4}, true);
  auto proj = random_tensor(rng, {2, 4, 8, 8});
  Graph<double> g;
  CHECK(conv2d(g, x, w, b, {1, 5, 5}).shape() == Shape{2, 4, 8, 8});
  const auto r = gradcheck("conv2d_d5", [=](Graph<double>& gg) {
    return project(gg, conv2d(gg, x, w, b, {1, 5, 5}), proj);
  }, {x, w, b});
  CHECK(r.passed());
  CHECK(r.max_rel_error < 1e-2);
}

TEST_CASE("conv2d: bad shapes are configuration errors") {
  Graph<double> g;
  auto x = Tensor<double>::zeros({1, 2, 5, 5});
  CHECK_THROWS_AS(conv2d(g, x, Tensor<double>::zeros({1, 3, 3, 3}), Tensor<double>::zeros({1}), {}),
                  ConfigError);
  CHECK_THROWS_AS(conv2d(g, x, Tensor<double>::zeros({1, 2, 2, 2}), Tensor<double>::zeros({1}), {}),
                  ConfigError);
  CHECK_THROWS_AS(conv2d(g, x, Tensor<double>::zeros({1, 2, 7, 7}), Tensor<double>::zeros({1}), {}),
                  ConfigError);
}

TEST_CASE("relu") {
  Graph<double> g;
  auto x = Tensor<double>::from({3}, {-1, 0, 2}, true);
  auto y = relu(g, x);
  CHECK(std::vector<double>(y.data().begin(), y.data().end()) == std::vector<double>{0, 0, 2});
  auto loss = sum(g, y);
  g.backward(loss);
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{0, 0, 1});

  Graph<double> g2;
  auto neg = Tensor<double>::full({4}, -0.5, true);
  auto l2 = sum(g2, relu(g2, neg));
  CHECK(l2.item() == 0.0);
  g2.backward(l2);
  for (double v : neg.grad()) CHECK(v == 0.0);
}

TEST_CASE("linear") {
  Graph<double> g;
  auto x = Tensor<double>::from({1, 2}, {1, 0});
  auto w = Tensor<double>::from({2, 2}, {3, 5, 7, 11});
  auto y = linear(g, x, w, Tensor<double>::zeros({2}));
  CHECK(y.data()[0] == 3.0);
  CHECK(y.data()[1] == 7.0);

  std::mt19937_64 rng(4);
  auto xr = random_tensor(rng, {4, 3});
  auto id = Tensor<double>::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto same = linear(g, xr, id, Tensor<double>::zeros({3}));
  for (std::size_t i = 0; i < xr.numel(); ++i) CHECK(same.data()[i] == xr.data()[i]);

  auto xg = random_tensor(rng, {4, 8}, true), wg = random_tensor(rng, {5, 8}, true),
       bg = random_tensor(rng, {5}, true), proj = random_tensor(rng, {4, 5});
  CHECK(gradcheck("linear", [=](Graph<double>& gg) { return project(gg, linear(gg, xg, wg, bg), proj); },
                  {xg, wg, bg}).passed());
  CHECK_THROWS_AS(linear(g, xr, Tensor<double>::zeros({2, 4}), Tensor<double>::zeros({2})), ConfigError);
}

TEST_CASE("global_avg_pool") {
  Graph<double> g;
  auto c = Tensor<double>::full({1, 2, 3, 3}, 3.0);
  auto p = global_avg_pool(g, c);
  CHECK(p.data()[0] == 3.0);
  CHECK(p.data()[1] == 3.0);
  auto x = Tensor<double>::from({1, 1, 2, 2}, {1, 2, 3, 4}, true);
  auto m = global_avg_pool(g, x);
  CHECK(m.item() == 2.5);
  auto loss = sum(g, m);
  g.backward(loss);
  for (double v : x.grad()) CHECK(v == 0.25);
}

TEST_CASE("bilinear_resize") {
  Graph<double> g;
  auto c = Tensor<double>::full({1, 1, 3, 2}, 1.5);
  auto wide = bilinear_resize(g, c, 7, 5);
  for (double v : wide.data()) CHECK(v == doctest::Approx(1.5).epsilon(1e-15));

  auto x = Tensor<double>::from({1, 1, 2, 2}, {0, 1, 1, 2});
  auto same = bilinear_resize(g, x, 2, 2);
  for (std::size_t i = 0; i < 4; ++i) CHECK(same.data()[i] == x.data()[i]);

  auto up = bilinear_resize(g, x, 4, 4);
  const std::vector<double> plane{0, 1, 1, 2};
  for (int y = 0; y < 4; ++y) {
    for (int xx = 0; xx < 4; ++xx) {
      const double v = up.data()[static_cast<std::size_t>(y) * 4 + xx];
      CHECK(v == doctest::Approx(bilinear_ref(plane, 2, 2, 4, 4, y, xx)).epsilon(1e-14));
      CHECK(v >= 0.0);
      CHECK(v <= 2.0);
      if (xx > 0) CHECK(v >= up.data()[static_cast<std::size_t>(y) * 4 + xx - 1]);
      if (y > 0) CHECK(v >= up.data()[static_cast<std::size_t>(y - 1) * 4 + xx]);
    }
  }

  std::mt19937_64 rng(8);
  auto r = random_tensor(rng, {1, 1, 5, 3});
  auto down = bilinear_resize(g, r, 2, 7);
  const std::vector<double> rp(r.data().begin(), r.data().end());
  for (int y = 0; y < 2; ++y) {
    for (int xx = 0; xx < 7; ++xx) {
      CHECK(down.data()[static_cast<std::size_t>(y) * 7 + xx] ==
            doctest::Approx(bilinear_ref(rp, 5, 3, 2, 7, y, xx)).epsilon(1e-14));
    }
  }
}

TEST_CASE("backward: seeds, accumulation and misuse") {
  auto x = Tensor<double>::from({2, 2}, {1, 2, 3, 4}, true);
  {
    Graph<double> g;
    auto l = sum(g, x);
    g.backward(l);
    for (double v : x.grad()) CHECK(v == 1.0);
    CHECK_THROWS_AS(g.backward(l), UsageError);
  }
  {
    Graph<double> g;
    auto l = sum(g, x);
    g.backward(l);  // grads accumulate
    for (double v : x.grad()) CHECK(v == 2.0);
  }
  x.zero_grad();
  {
    Graph<double> g;
    auto l = sum(g, scale(g, x, 0.0));
    g.backward(l);
    for (double v : x.grad()) CHECK(v == 0.0);
  }
  {
    Graph<double> g;
    auto y = scale(g, x, 2.0);
    CHECK_THROWS_AS(g.backward(y), UsageError);
  }
}

TEST_CASE("stop_gradient") {
  auto x = Tensor<double>::from({3}, {0.5, -2, 3}, true);
  auto d = stop_gradient(x);
  for (std::size_t i = 0; i < 3; ++i) CHECK(d.data()[i] == x.data()[i]);
  CHECK_FALSE(d.requires_grad());
  CHECK(d.id() != x.id());
  {
    Graph<double> g;
    auto l = sum(g, mul(g, stop_gradient(x), x));
    g.backward(l);
    for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == x.data()[i]);
  }
  x.zero_grad();
  {
    Graph<double> g;
    auto l = add(g, sum(g, stop_gradient(x)), sum(g, scale(g, x, 0.0)));
    g.backward(l);
    for (double v : x.grad()) CHECK(v == 0.0);
  }
}

TEST_CASE("forward ops reject non-finite values") {
  Graph<double> g;
  auto big = Tensor<double>::full({2}, 1e308);
  CHECK_THROWS_AS(scale(g, big, 10.0), NumericError);
  auto nan = Tensor<double>::from({2}, {1.0, std::numeric_limits<double>::quiet_NaN()});
  CHECK_THROWS_AS(add(g, nan, Tensor<double>::zeros({2})), NumericError);
}

TEST_CASE("composite conv -> relu -> pool -> linear gradcheck") {
  std::mt19937_64 rng(9);
  auto x = random_tensor(rng, {2, 2, 6, 6}, true);
  auto w = random_tensor(rng, {3, 2, 3, 3}, true);
  auto b = random_tensor(rng, {3}, true);
  auto lw = random_tensor(rng, {4, 3}, true);
  auto lb = random_tensor(rng, {4}, true);
  auto proj = random_tensor(rng, {2, 4});
  const auto r = gradcheck("composite", [=](Graph<double>& g) {
    auto f = relu(g, conv2d(g, x, w, b, {2, 1, 1}));
    return project(g, linear(g, global_avg_pool(g, f), lw, lb), proj);
  }, {x, w, b, lw, lb});
  CHECK(r.passed());
}

TEST_CASE("built-in gradcheck suite") {
  for (const auto& r : run_gradcheck_suite(3)) {
    INFO(r.name << " " << r.within_1e3 << "/" << r.coords << " max " << r.max_rel_error);
    CHECK(r.passed());
    if (r.name != "composite_objective") CHECK(r.max_rel_error < 1e-2);
  }
}

TEST_CASE("adamw_step") {
  AdamWConfig cfg;
  cfg.weight_decay = 0;
  std::vector<double> p{1.5, -2.0}, gz{0, 0}, m{0, 0}, v{0, 0};
  adamw_step<double>(p, gz, m, v, cfg, 1);
  CHECK(p == std::vector<double>{1.5, -2.0});

  cfg.lr = 1.0;
  cfg.weight_decay = 0.01;
  adamw_step<double>(p, gz, m, v, cfg, 1);
  CHECK(p[0] == doctest::Approx(1.5 * 0.99).epsilon(1e-15));
  CHECK(p[1] == doctest::Approx(-2.0 * 0.99).epsilon(1e-15));

  // One step from p = 1, g = 1: both moments are exactly unbiased, so the
  // update is lr * 1 / (1 + eps).
  AdamWConfig one{0.1, 0.9, 0.999, 1e-8, 0.0};
  std::vector<double> q{1.0}, g1{1.0}, m1{0}, v1{0};
  adamw_step<double>(q, g1, m1, v1, one, 1);
  CHECK(std::abs(q[0] - 0.9000000009) < 1e-9);
  CHECK(std::abs(q[0] - (1.0 - 0.1 / (1.0 + 1e-8))) < 1e-15);

  one.lr = 0;
  CHECK_THROWS_AS(adamw_step<double>(q, g1, m1, v1, one, 1), ConfigError);
  one.lr = 0.1;
  CHECK_THROWS_AS(adamw_step<double>(q, g1, m1, v1, one, 0), ConfigError);
}

TEST_CASE("AdamW optimizer matches the stateless step") {
  std::mt19937_64 rng(12);
  auto t = random_tensor(rng, {7}, true);
  const std::vector<double> start(t.data().begin(), t.data().end());
  AdamWConfig cfg{1e-2, 0.9, 0.999, 1e-8, 0.01};
  AdamW<double> opt({t}, cfg);
  std::vector<double> p = start, m(7, 0), v(7, 0);
  for (int s = 1; s <= 3; ++s) {
    for (std::size_t i = 0; i < 7; ++i) t.grad()[i] = 0.1 * s + static_cast<double>(i);
    std::vector<double> gr(t.grad().begin(), t.grad().end());
    opt.step();
    opt.zero_grad();
    adamw_step<double>(p, gr, m, v, cfg, s);
  }
  CHECK(opt.steps_taken() == 3);
  for (std::size_t i = 0; i < 7; ++i) CHECK(t.data()[i] == doctest::Approx(p[i]).epsilon(1e-14));
}

TEST_CASE("tensor handles alias, clones do not") {
  auto a = Tensor<float>::full({2, 3}, 1.0f, true);
  auto b = a;
  b.data()[0] = 5.0f;
  CHECK(a.data()[0] == 5.0f);
  auto c = a.clone();
  c.data()[1] = 9.0f;
  CHECK(a.data()[1] == 1.0f);
  CHECK_FALSE(c.requires_grad());
  CHECK_THROWS_AS((void)c.grad(), UsageError);
  CHECK_THROWS_AS(Tensor<float>::from({2, 2}, {1.0f}), ConfigError);
}
