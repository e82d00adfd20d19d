#include <doctest.h>

#include "moenet/grad_check.hpp"
#include "moenet/layers.hpp"
#include "moenet/nn_ops.hpp"
#include "moenet/ops.hpp"
#include "moenet/rng.hpp"

using namespace moenet;

// Every primitive's analytic gradient against central finite differences in
// double precision, small tensors, multiple seeds.

namespace {

constexpr double kH = 1e-4;
constexpr double kTol = 1e-4;

Tensor<double> rnd(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<size_t>(s.numel()));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>::from_values(s, std::move(v), false);
}

// Keeps relu inputs away from the kink so central differences are valid.
Tensor<double> rnd_offzero(const Shape& s, Rng& rng) {
  std::vector<double> v(static_cast<size_t>(s.numel()));
  for (auto& x : v) {
    x = rng.uniform(0.05, 1.0);
    if (rng.bernoulli(0.5)) x = -x;
  }
  return Tensor<double>::from_values(s, std::move(v), false);
}

template <typename F>
void check_grad(F&& f, Tensor<double>& x, double tol = kTol) {
  auto report = finite_difference_check(f, x, kH, tol);
  CAPTURE(report.max_rel_err);
  CAPTURE(report.worst_index);
  CHECK(report.passed);
}

}  // namespace

TEST_CASE("finite_difference_check on closed-form cases") {
  // f(x) = sum(x^2): analytic gradient 2x, quadratics are exact under
  // central differences.
  auto x = Tensor<double>::from_values(Shape{1, 2, 1, 1}, {1.0, 2.0});
  auto report = finite_difference_check(
      [](const Tensor<double>& t) { return sum_all(mul(t, t)); }, x, 1e-4,
      1e-6);
  CHECK(report.passed);
  CHECK(report.max_rel_err < 1e-6);

  x.set_requires_grad(true);
  x.zero_grad();
  auto loss = sum_all(mul(x, x));
  loss.backward();
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(4.0));

  CHECK_THROWS_AS(finite_difference_check(
                      [](const Tensor<double>& t) {
                        auto bad = scale(t, std::numeric_limits<double>::infinity());
                        return sum_all(bad);
                      },
                      x, 1e-4, 1e-6),
                  NumericalError);
  CHECK_THROWS_AS(finite_difference_check(
                      [](const Tensor<double>& t) { return sum_all(t); }, x,
                      0.0, 1e-6),
                  std::invalid_argument);
}

TEST_CASE("cross-entropy gradient vs central differences") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    auto x = rnd(Shape{1, 3, 1, 1}, rng, -2.0, 2.0);
    std::vector<int> y = {static_cast<int>(rng.uniform_int(3))};
    auto report = finite_difference_check(
        [&](const Tensor<double>& t) {
          return cross_entropy_logits(t, y, Reduction::Mean);
        },
        x, kH, 1e-5);
    CHECK(report.passed);
  }
}

TEST_CASE("conv2d -> GAP gradient on a 1x1x4x4 input") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    auto x = rnd(Shape{1, 1, 4, 4}, rng);
    auto w = rnd(Shape{2, 1, 3, 3}, rng);
    auto b = rnd(Shape{1, 2, 1, 1}, rng);
    check_grad(
        [&](const Tensor<double>& t) {
          return sum_all(global_avg_pool(conv2d(t, w, &b, 1, 1)));
        },
        x);
  }
}

TEST_CASE("conv2d gradients w.r.t. input, weight, bias across geometries") {
  struct Geo {
    int stride, pad, k;
  };
  for (Geo g : {Geo{1, 1, 3}, Geo{2, 1, 3}, Geo{1, 0, 1}, Geo{2, 0, 1}}) {
    Rng rng(17 + g.stride + g.pad + g.k);
    auto x = rnd(Shape{2, 2, 4, 4}, rng);
    auto w = rnd(Shape{3, 2, g.k, g.k}, rng);
    auto b = rnd(Shape{1, 3, 1, 1}, rng);
    auto probe = rnd(Shape{1, 1, 1, 1}, rng);  // fixed random scalarizer seed
    (void)probe;
    check_grad(
        [&](const Tensor<double>& t) {
          return sum_all(conv2d(t, w, &b, g.stride, g.pad));
        },
        x);
    check_grad(
        [&](const Tensor<double>& t) {
          return sum_all(conv2d(x, t, &b, g.stride, g.pad));
        },
        w);
    check_grad(
        [&](const Tensor<double>& t) {
          return sum_all(conv2d(x, w, &t, g.stride, g.pad));
        },
        b);
  }
}

TEST_CASE("batch-norm train-mode gradients (x, gamma, beta)") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    auto x = rnd(Shape{3, 2, 2, 2}, rng);
    auto gamma = rnd(Shape{1, 2, 1, 1}, rng, 0.5, 1.5);
    auto beta = rnd(Shape{1, 2, 1, 1}, rng);
    auto weights = rnd(x.shape(), rng);  // non-uniform scalarizer
    auto scalarize = [&](const Tensor<double>& y) {
      return sum_all(mul(y, weights));
    };
    check_grad(
        [&](const Tensor<double>& t) {
          return scalarize(batchnorm_train(t, gamma, beta, 1e-5, nullptr, nullptr));
        },
        x);
    check_grad(
        [&](const Tensor<double>& t) {
          return scalarize(batchnorm_train(x, t, beta, 1e-5, nullptr, nullptr));
        },
        gamma);
    check_grad(
        [&](const Tensor<double>& t) {
          return scalarize(batchnorm_train(x, gamma, t, 1e-5, nullptr, nullptr));
        },
        beta);
  }
}

TEST_CASE("batch-norm eval-mode gradients") {
  Rng rng(23);
  auto x = rnd(Shape{2, 3, 2, 2}, rng);
  auto gamma = rnd(Shape{1, 3, 1, 1}, rng, 0.5, 1.5);
  auto beta = rnd(Shape{1, 3, 1, 1}, rng);
  std::vector<double> mean = {0.1, -0.2, 0.05};
  std::vector<double> var = {1.1, 0.9, 1.3};
  auto weights = rnd(x.shape(), rng);
  auto scalarize = [&](const Tensor<double>& y) {
    return sum_all(mul(y, weights));
  };
  check_grad(
      [&](const Tensor<double>& t) {
        return scalarize(batchnorm_eval(t, gamma, beta, mean, var, 1e-5));
      },
      x);
  check_grad(
      [&](const Tensor<double>& t) {
        return scalarize(batchnorm_eval(x, t, beta, mean, var, 1e-5));
      },
      gamma);
  check_grad(
      [&](const Tensor<double>& t) {
        return scalarize(batchnorm_eval(x, gamma, t, mean, var, 1e-5));
      },
      beta);
}

TEST_CASE("relu, pooling, linear, softmax, elementwise gradients") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(31 + seed);
    auto x = rnd_offzero(Shape{2, 3, 2, 2}, rng);
    check_grad([](const Tensor<double>& t) { return sum_all(relu(t)); }, x);
    check_grad(
        [](const Tensor<double>& t) { return sum_all(global_avg_pool(t)); }, x);

    auto v = rnd(Shape{2, 4, 1, 1}, rng);
    auto w = rnd(Shape{3, 4, 1, 1}, rng);
    auto b = rnd(Shape{1, 3, 1, 1}, rng);
    check_grad(
        [&](const Tensor<double>& t) { return sum_all(linear(t, w, &b)); }, v);
    check_grad(
        [&](const Tensor<double>& t) { return sum_all(linear(v, t, &b)); }, w);
    check_grad(
        [&](const Tensor<double>& t) { return sum_all(linear(v, w, &t)); }, b);

    auto probe = rnd(Shape{2, 4, 1, 1}, rng);
    check_grad(
        [&](const Tensor<double>& t) {
          return sum_all(mul(softmax_channels(t), probe));
        },
        v);

    auto other = rnd(x.shape(), rng);
    check_grad(
        [&](const Tensor<double>& t) {
          return sum_all(mul(add(t, other), scale(t, 0.7)));
        },
        x);
  }
}

TEST_CASE("routing-support op gradients") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(57 + seed);
    auto scores = rnd(Shape{3, 4, 1, 1}, rng, 0.1, 1.0);
    check_grad(
        [](const Tensor<double>& t) {
          return sum_all(div_rowscalar(t, sum_channels(t)));
        },
        scores);
    check_grad(
        [](const Tensor<double>& t) { return sum_all(sum_rows(t)); }, scores);

    auto x = rnd(Shape{3, 2, 2, 2}, rng);
    auto s = rnd(Shape{3, 1, 1, 1}, rng, 0.2, 1.0);
    check_grad(
        [&](const Tensor<double>& t) { return sum_all(scale_rows(t, s)); }, x);
    check_grad(
        [&](const Tensor<double>& t) { return sum_all(scale_rows(x, t)); }, s);

    std::vector<int> idx = {0, 2, 1, 3, 3, 0};  // per-row 2 of 4
    check_grad(
        [&](const Tensor<double>& t) {
          return sum_all(gather_channels(t, idx, 2));
        },
        scores);
    std::vector<std::pair<int, int>> entries = {{0, 1}, {2, 3}, {1, 0}};
    check_grad(
        [&](const Tensor<double>& t) {
          return sum_all(gather_scalars(t, entries));
        },
        scores);
    std::vector<int> rows = {2, 0};
    check_grad(
        [&](const Tensor<double>& t) {
          return sum_all(mul(gather_rows(t, rows), gather_rows(t, rows)));
        },
        x);
    auto sub = rnd(Shape{2, 2, 2, 2}, rng);
    check_grad(
        [&](const Tensor<double>& t) {
          return sum_all(mul(scatter_rows(t, rows, 3),
                             scatter_rows(t, rows, 3)));
        },
        sub);

    auto p = rnd(Shape{1, 4, 1, 1}, rng, 0.05, 1.0);
    check_grad(
        [](const Tensor<double>& t) { return xlogx_sum(t, 1.0); }, p, 1e-4);
    check_grad(
        [](const Tensor<double>& t) { return xlogx_sum(t, 4.0); }, p, 1e-4);
  }
}

TEST_CASE("topk values gradient vs finite differences") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(71 + seed);
    // Spread-out scores keep perturbations away from selection boundaries.
    std::vector<double> v = {0.0, 0.3, 0.6, 0.9, 1.2, 1.5};
    rng.shuffle(v);
    auto x = Tensor<double>::from_values(Shape{1, 6, 1, 1}, std::move(v));
    check_grad(
        [](const Tensor<double>& t) {
          return sum_all(topk_channels(t, 3).values);
        },
        x);
  }
}
