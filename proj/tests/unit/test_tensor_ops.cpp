#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "moenet/layers.hpp"
#include "moenet/nn_ops.hpp"
#include "moenet/ops.hpp"
#include "moenet/rng.hpp"

using namespace moenet;

namespace {
template <typename T>
Tensor<T> random_tensor(const Shape& s, Rng& rng, bool requires_grad = false,
                        double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(static_cast<size_t>(s.numel()));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>::from_values(s, std::move(v), requires_grad);
}
}  // namespace

TEST_CASE("shape bookkeeping") {
  Shape s{2, 3, 4, 5};
  CHECK(s.numel() == 120);
  CHECK(s.index(0, 0, 0, 0) == 0);
  CHECK(s.index(1, 2, 3, 4) == 119);
  CHECK_THROWS_AS(Tensor<float>::from_values(s, std::vector<float>(7)),
                  std::invalid_argument);
}

TEST_CASE("topk selects the k largest with lowest-index tie break") {
  auto t = Tensor<double>::from_values(Shape{1, 3, 1, 1}, {0.1, 0.7, 0.2});
  auto top = topk_channels(t, 1);
  CHECK(top.indices == std::vector<int>{1});
  CHECK(top.values.at(0, 0, 0, 0) == doctest::Approx(0.7));

  auto tie = Tensor<double>::from_values(Shape{1, 2, 1, 1}, {0.5, 0.5});
  CHECK(topk_channels(tie, 1).indices == std::vector<int>{0});

  auto t2 = Tensor<double>::from_values(Shape{1, 4, 1, 1}, {3, 1, 2, 2});
  auto top2 = topk_channels(t2, 2);
  CHECK(top2.indices == std::vector<int>{0, 2});
  CHECK(top2.values.values()[0] == 3);
  CHECK(top2.values.values()[1] == 2);
}

TEST_CASE("topk against a brute-force stable-sort oracle") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const int n = 2 + static_cast<int>(rng.uniform_int(14));
    const int k = 1 + static_cast<int>(rng.uniform_int(n));
    std::vector<double> scores(n);
    for (auto& s : scores)
      s = rng.uniform_int(5) * 0.25;  // coarse grid forces ties
    auto t = Tensor<double>::from_values(Shape{1, n, 1, 1},
                                         std::vector<double>(scores));
    auto top = topk_channels(t, k);

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int i, int j) {
      return scores[i] > scores[j];
    });
    order.resize(k);
    CHECK(top.indices == order);
  }
}

TEST_CASE("topk rejects bad k and non-finite scores") {
  auto t = Tensor<double>::from_values(Shape{1, 3, 1, 1}, {1, 2, 3});
  CHECK_THROWS_AS(topk_channels(t, 0), std::invalid_argument);
  CHECK_THROWS_AS(topk_channels(t, 4), std::invalid_argument);
  auto bad = Tensor<double>::from_values(
      Shape{1, 2, 1, 1}, {1.0, std::numeric_limits<double>::quiet_NaN()});
  CHECK_THROWS_AS(topk_channels(bad, 1), std::invalid_argument);
}

TEST_CASE("topk gradient only reaches selected entries") {
  auto t = Tensor<double>::from_values(Shape{2, 4, 1, 1},
                                       {5, 1, 3, 2, 0, 7, 6, 1}, true);
  auto top = topk_channels(t, 2);
  sum_all(top.values).backward();
  auto g = t.grad();
  const std::vector<double> expect = {1, 0, 1, 0, 0, 1, 1, 0};
  for (int i = 0; i < 8; ++i) CHECK(g[i] == expect[i]);

  // Perturbing a non-selected score below the selection gap changes nothing.
  auto t2 = t.detach_copy();
  t2.mutable_values()[1] += 0.5;  // gap to the 2nd-best (3) is 2
  auto top2 = topk_channels(t2, 2);
  for (int j = 0; j < 4; ++j)
    CHECK(top2.values.values()[j] == top.values.values()[j]);
}

TEST_CASE("softmax rows sum to one and stay strictly positive") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    auto x = random_tensor<double>(Shape{4, 7, 1, 1}, rng, false, -30.0, 30.0);
    auto s = softmax_channels(x);
    for (int b = 0; b < 4; ++b) {
      double total = 0.0;
      for (int c = 0; c < 7; ++c) {
        CHECK(s.at(b, c, 0, 0) > 0.0);
        total += s.at(b, c, 0, 0);
      }
      CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
}

TEST_CASE("elementwise ops match naive loops") {
  Rng rng(3);
  auto a = random_tensor<double>(Shape{2, 3, 2, 2}, rng);
  auto b = random_tensor<double>(Shape{2, 3, 2, 2}, rng);
  auto sum = add(a, b);
  auto prod = mul(a, b);
  auto scaled = scale(a, 2.5);
  for (long i = 0; i < a.numel(); ++i) {
    CHECK(sum.values()[i] == doctest::Approx(a.values()[i] + b.values()[i]));
    CHECK(prod.values()[i] == doctest::Approx(a.values()[i] * b.values()[i]));
    CHECK(scaled.values()[i] == doctest::Approx(a.values()[i] * 2.5));
  }
  CHECK_THROWS_AS(add(a, random_tensor<double>(Shape{1, 3, 2, 2}, rng)),
                  std::invalid_argument);
}

TEST_CASE("batch-norm eval mode is deterministic and affine") {
  Rng rng(11);
  BatchNorm2d<float> bn(5);
  // Push non-trivial running stats through a training step first.
  bn.set_training(true);
  auto x = random_tensor<float>(Shape{4, 5, 3, 3}, rng);
  bn.forward(x);
  bn.set_training(false);

  auto y1 = bn.forward(x);
  auto y2 = bn.forward(x);
  for (long i = 0; i < y1.numel(); ++i)
    CHECK(y1.values()[i] == y2.values()[i]);  // bitwise

  // Affine: f(2x) - f(x) == f(x) - f(0) per element.
  auto x2 = scale(x, 2.0f);
  auto x0 = Tensor<float>::zeros(x.shape());
  auto f2 = bn.forward(x2), f1 = bn.forward(x), f0 = bn.forward(x0);
  for (long i = 0; i < x.numel(); ++i)
    CHECK(f2.values()[i] - f1.values()[i] ==
          doctest::Approx(f1.values()[i] - f0.values()[i]).epsilon(1e-4));
}

TEST_CASE("finite forward results on finite inputs through a deep chain") {
  Rng rng(5);
  auto x = random_tensor<float>(Shape{2, 3, 8, 8}, rng);
  Conv2d<float> conv(3, 8, 3, 1, 1);
  BatchNorm2d<float> bn(8);
  conv.reset_parameters(rng);
  auto h = relu(bn.forward(conv.forward(x)));
  h = global_avg_pool(h);
  CHECK(h.all_finite());
}

TEST_CASE("conv2d matches a direct convolution oracle") {
  for (uint64_t seed = 0; seed < 4; ++seed) {
    Rng rng(100 + seed);
    const int stride = 1 + static_cast<int>(rng.uniform_int(2));
    const int pad = static_cast<int>(rng.uniform_int(2));
    const int kh = 1 + 2 * static_cast<int>(rng.uniform_int(2));  // 1 or 3
    auto x = random_tensor<double>(Shape{2, 3, 6, 5}, rng);
    auto w = random_tensor<double>(Shape{4, 3, kh, kh}, rng);
    auto b = random_tensor<double>(Shape{1, 4, 1, 1}, rng);
    auto y = conv2d(x, w, &b, stride, pad);

    const int ho = (6 + 2 * pad - kh) / stride + 1;
    const int wo = (5 + 2 * pad - kh) / stride + 1;
    REQUIRE(y.shape() == Shape{2, 4, ho, wo});
    for (int n = 0; n < 2; ++n)
      for (int co = 0; co < 4; ++co)
        for (int oh = 0; oh < ho; ++oh)
          for (int ow = 0; ow < wo; ++ow) {
            double acc = b.at(0, co, 0, 0);
            for (int ci = 0; ci < 3; ++ci)
              for (int ki = 0; ki < kh; ++ki)
                for (int kj = 0; kj < kh; ++kj) {
                  const int ih = oh * stride - pad + ki;
                  const int iw = ow * stride - pad + kj;
                  if (ih < 0 || ih >= 6 || iw < 0 || iw >= 5) continue;
                  acc += x.at(n, ci, ih, iw) * w.at(co, ci, ki, kj);
                }
            CHECK(y.at(n, co, oh, ow) == doctest::Approx(acc).epsilon(1e-10));
          }
  }
}

TEST_CASE("global average pool and linear shapes/errors") {
  Rng rng(2);
  auto x = random_tensor<double>(Shape{2, 3, 4, 4}, rng);
  auto pooled = global_avg_pool(x);
  CHECK(pooled.shape() == Shape{2, 3, 1, 1});
  double acc = 0.0;
  for (int h = 0; h < 4; ++h)
    for (int w = 0; w < 4; ++w) acc += x.at(1, 2, h, w);
  CHECK(pooled.at(1, 2, 0, 0) == doctest::Approx(acc / 16.0));

  auto w = random_tensor<double>(Shape{5, 3, 1, 1}, rng);
  CHECK(linear(pooled, w).shape() == Shape{2, 5, 1, 1});
  CHECK_THROWS_AS(linear(x, w), std::invalid_argument);  // h,w != 1
  auto wbad = random_tensor<double>(Shape{5, 4, 1, 1}, rng);
  CHECK_THROWS_AS(linear(pooled, wbad), std::invalid_argument);
}

TEST_CASE("cross entropy agrees with explicit log-softmax") {
  auto logits =
      Tensor<double>::from_values(Shape{2, 3, 1, 1}, {1, 2, 3, 0, 0, 0});
  std::vector<int> y = {2, 1};
  const double l0 = -std::log(std::exp(3.0) /
                              (std::exp(1.0) + std::exp(2.0) + std::exp(3.0)));
  const double l1 = -std::log(1.0 / 3.0);
  auto loss = cross_entropy_logits(logits, y, Reduction::Mean);
  CHECK(loss.item() == doctest::Approx((l0 + l1) / 2).epsilon(1e-12));
  CHECK_THROWS_AS(cross_entropy_logits(logits, std::vector<int>{0, 3}),
                  std::invalid_argument);

  auto per = per_example_ce(logits, y);
  CHECK(per[0] == doctest::Approx(l0));
  CHECK(per[1] == doctest::Approx(l1));
}

TEST_CASE("gather and scatter rows invert each other") {
  Rng rng(9);
  auto x = random_tensor<double>(Shape{4, 2, 2, 2}, rng, true);
  std::vector<int> rows = {2, 0};
  auto sub = gather_rows(x, rows);
  CHECK(sub.shape() == Shape{2, 2, 2, 2});
  for (long i = 0; i < 8; ++i) {
    CHECK(sub.values()[i] == x.values()[2 * 8 + i]);
    CHECK(sub.values()[8 + i] == x.values()[i]);
  }
  auto back = scatter_rows(sub, rows, 4);
  CHECK(back.shape() == x.shape());
  for (long i = 0; i < 8; ++i) {
    CHECK(back.values()[2 * 8 + i] == x.values()[2 * 8 + i]);
    CHECK(back.values()[1 * 8 + i] == 0.0);
  }
}

TEST_CASE("backward through shared subexpressions accumulates") {
  auto x = Tensor<double>::from_values(Shape{1, 2, 1, 1}, {3.0, 4.0}, true);
  auto y = add(x, x);            // dy/dx = 2
  auto loss = sum_all(mul(y, y));  // d/dx sum((2x)^2) = 8x
  loss.backward();
  CHECK(x.grad()[0] == doctest::Approx(24.0));
  CHECK(x.grad()[1] == doctest::Approx(32.0));
}

TEST_CASE("xlogx_sum handles exact zeros") {
  auto p = Tensor<double>::from_values(Shape{1, 3, 1, 1}, {0.5, 0.5, 0.0});
  CHECK(xlogx_sum(p, 1.0).item() == doctest::Approx(std::log(0.5)));
  auto neg = Tensor<double>::from_values(Shape{1, 2, 1, 1}, {0.5, -0.1});
  CHECK_THROWS_AS(xlogx_sum(neg, 1.0), std::invalid_argument);
}
