#pragma once

// l-infinity white-box attacks. Projection onto the epsilon ball intersected
// with [0,1] is a pair of clamps, so the ball constraint holds exactly.
// Attacks run the model in eval mode with parameters frozen and never mutate
// the input tensor or the model.

#include <cmath>
#include <optional>
#include <vector>

#include "moenet/data.hpp"
#include "moenet/module.hpp"
#include "moenet/nn_ops.hpp"

namespace moenet {

enum class AttackFamily { Pgd, AutoPgd };

inline std::string to_string(AttackFamily f) {
  return f == AttackFamily::Pgd ? "pgd" : "autopgd";
}

struct AttackConfig {
  AttackFamily family = AttackFamily::Pgd;
  double epsilon = 8.0 / 255.0;
  int steps = 20;
  double step_size = 2.0 / 255.0;  // pgd only
  bool random_start = true;

  void validate() const {
    if (epsilon < 0.0)
      throw std::invalid_argument("attack config: epsilon must be >= 0");
    if (steps < 0)
      throw std::invalid_argument("attack config: steps must be >= 0");
    if (family == AttackFamily::Pgd && steps > 0 && step_size <= 0.0)
      throw std::invalid_argument("attack config: step_size must be > 0");
  }
};

namespace detail {

template <typename T>
inline T clamp01(T v) {
  return std::min(T(1), std::max(T(0), v));
}

// Projection onto B_inf(x0, eps): clamp, then walk at most a few ulps back
// toward x0 so that |v - x0| <= eps holds exactly in T arithmetic (x0 + eps
// itself can round one ulp outside the ball).
template <typename T>
inline T clamp_ball(T v, T x0, T eps) {
  v = std::min(x0 + eps, std::max(x0 - eps, v));
  while (v - x0 > eps) v = std::nextafter(v, x0);
  while (x0 - v > eps) v = std::nextafter(v, x0);
  return v;
}

// Forward + input-gradient pass; returns per-example losses and writes the
// gradient of the summed loss into grad_out. Parameters are expected to be
// frozen by the caller, so the sweep only propagates input gradients.
template <typename T>
std::vector<double> loss_and_input_grad(Module<T>& model, const Shape& shape,
                                        const std::vector<T>& x_vals,
                                        const std::vector<int>& y,
                                        std::vector<T>* grad_out) {
  Tensor<T> x =
      Tensor<T>::from_values(shape, std::vector<T>(x_vals), grad_out != nullptr);
  Tensor<T> logits = model.forward(x);
  std::vector<double> losses = per_example_ce(logits, y);
  if (grad_out) {
    Tensor<T> loss = cross_entropy_logits(logits, y, Reduction::Mean);
    if (!loss.requires_grad())
      throw ConfigError("attack: model output does not depend on the input");
    loss.backward();
    grad_out->assign(x.grad().begin(), x.grad().end());
  }
  return losses;
}

}  // namespace detail

// Projected gradient descent with sign steps:
//   x <- clip_{[0,1]} clip_{B_inf(x0,eps)} (x + alpha * sign(grad)).
template <typename T>
Tensor<T> pgd(Module<T>& model, const Tensor<T>& x, const std::vector<int>& y,
              const AttackConfig& cfg, Rng& rng) {
  cfg.validate();
  EvalModeGuard<T> eval_guard(model);
  ParamFreezeGuard<T> freeze_guard(model);

  const T eps = static_cast<T>(cfg.epsilon);
  const T alpha = static_cast<T>(cfg.step_size);
  std::vector<T> x0(x.values().begin(), x.values().end());
  std::vector<T> xa = x0;
  if (cfg.random_start && eps > T(0))
    for (size_t i = 0; i < xa.size(); ++i)
      xa[i] = detail::clamp01(detail::clamp_ball(
          x0[i] + static_cast<T>(rng.uniform(-cfg.epsilon, cfg.epsilon)),
          x0[i], eps));

  std::vector<T> grad;
  for (int step = 0; step < cfg.steps; ++step) {
    detail::loss_and_input_grad(model, x.shape(), xa, y, &grad);
    for (size_t i = 0; i < xa.size(); ++i) {
      const T g = grad[i];
      const T s = (g > T(0)) ? T(1) : (g < T(0) ? T(-1) : T(0));
      xa[i] = detail::clamp01(detail::clamp_ball(xa[i] + alpha * s, x0[i], eps));
    }
  }
  return Tensor<T>::from_values(x.shape(), std::move(xa), false);
}

struct AutoPgdTrace {
  // Mean best-so-far loss recorded at every checkpoint, in order.
  std::vector<double> checkpoint_best_loss;
  std::vector<int> checkpoints;
};

// Checkpoint schedule of the adaptive attack: fractions start at 0.22 and
// the gap shrinks by 0.03 per segment with a floor of 0.06.
inline std::vector<int> autopgd_checkpoints(int steps) {
  std::vector<int> w;
  double p_prev = 0.0, p_cur = 0.22;
  while (true) {
    const int ck = static_cast<int>(std::ceil(p_cur * steps));
    if (ck >= steps) break;
    if (ck >= 1 && (w.empty() || ck > w.back())) w.push_back(ck);
    const double next = p_cur + std::max(p_cur - p_prev - 0.03, 0.06);
    p_prev = p_cur;
    p_cur = next;
  }
  return w;
}

// Momentum PGD with per-example adaptive step size: the step starts at
// 2*eps and halves at checkpoints where progress stalls, restarting from the
// best iterate. Returns the best-loss iterate per example.
template <typename T>
Tensor<T> autopgd(Module<T>& model, const Tensor<T>& x,
                  const std::vector<int>& y, const AttackConfig& cfg, Rng& rng,
                  AutoPgdTrace* trace = nullptr) {
  cfg.validate();
  EvalModeGuard<T> eval_guard(model);
  ParamFreezeGuard<T> freeze_guard(model);

  const int batch = x.shape().n;
  const long per = x.numel() / batch;
  const T eps = static_cast<T>(cfg.epsilon);
  constexpr double kMomentum = 0.75;
  constexpr double kRho = 0.75;

  std::vector<T> x0(x.values().begin(), x.values().end());
  std::vector<T> cur = x0;
  if (cfg.random_start && eps > T(0))
    for (size_t i = 0; i < cur.size(); ++i)
      cur[i] = detail::clamp01(detail::clamp_ball(
          x0[i] + static_cast<T>(rng.uniform(-cfg.epsilon, cfg.epsilon)),
          x0[i], eps));

  auto project = [&](long i, T v) {
    return detail::clamp01(detail::clamp_ball(v, x0[i], eps));
  };

  std::vector<T> best = cur;
  std::vector<T> grad;
  std::vector<double> best_loss =
      detail::loss_and_input_grad(model, x.shape(), cur, y,
                                  cfg.steps > 0 ? &grad : nullptr);
  if (cfg.steps == 0)
    return Tensor<T>::from_values(x.shape(), std::move(best), false);

  std::vector<double> eta(batch, 2.0 * cfg.epsilon);
  std::vector<double> prev_loss = best_loss;
  std::vector<int> succ(batch, 0);
  std::vector<double> eta_at_ck(eta);
  std::vector<double> best_at_ck(best_loss);
  const std::vector<int> checkpoints = autopgd_checkpoints(cfg.steps);
  size_t next_ck = 0;
  int last_ck = 0;

  // First iterate: plain sign step from the start point.
  std::vector<T> prev = cur;
  std::vector<T> next(cur.size());
  for (int b = 0; b < batch; ++b)
    for (long i = b * per; i < (b + 1) * per; ++i) {
      const T g = grad[i];
      const T s = (g > T(0)) ? T(1) : (g < T(0) ? T(-1) : T(0));
      next[i] = project(i, cur[i] + static_cast<T>(eta[b]) * s);
    }
  prev = cur;
  cur = next;

  for (int k = 1; k <= cfg.steps; ++k) {
    const bool last = (k == cfg.steps);
    std::vector<double> losses = detail::loss_and_input_grad(
        model, x.shape(), cur, y, last ? nullptr : &grad);
    for (int b = 0; b < batch; ++b) {
      if (losses[b] > best_loss[b]) {
        best_loss[b] = losses[b];
        std::copy(cur.begin() + b * per, cur.begin() + (b + 1) * per,
                  best.begin() + b * per);
      }
      if (losses[b] > prev_loss[b]) ++succ[b];
    }
    prev_loss = losses;

    if (next_ck < checkpoints.size() && k == checkpoints[next_ck]) {
      const int interval = k - last_ck;
      for (int b = 0; b < batch; ++b) {
        const bool stalled = succ[b] < kRho * interval;
        const bool frozen =
            eta[b] == eta_at_ck[b] && best_loss[b] == best_at_ck[b];
        if (stalled || frozen) {
          eta[b] *= 0.5;
          // Restart from the best iterate; zero the momentum term.
          std::copy(best.begin() + b * per, best.begin() + (b + 1) * per,
                    cur.begin() + b * per);
          std::copy(best.begin() + b * per, best.begin() + (b + 1) * per,
                    prev.begin() + b * per);
        }
        succ[b] = 0;
        eta_at_ck[b] = eta[b];
        best_at_ck[b] = best_loss[b];
      }
      if (trace) {
        double mean = 0.0;
        for (double v : best_loss) mean += v;
        trace->checkpoint_best_loss.push_back(mean / batch);
        trace->checkpoints.push_back(k);
      }
      last_ck = k;
      ++next_ck;
    }
    if (last) break;

    for (int b = 0; b < batch; ++b)
      for (long i = b * per; i < (b + 1) * per; ++i) {
        const T g = grad[i];
        const T s = (g > T(0)) ? T(1) : (g < T(0) ? T(-1) : T(0));
        const T z = project(i, cur[i] + static_cast<T>(eta[b]) * s);
        const T stepped = cur[i] +
                          static_cast<T>(kMomentum) * (z - cur[i]) +
                          static_cast<T>(1.0 - kMomentum) * (cur[i] - prev[i]);
        next[i] = project(i, stepped);
      }
    prev = cur;
    cur = next;
  }
  return Tensor<T>::from_values(x.shape(), std::move(best), false);
}

template <typename T>
Tensor<T> run_attack(Module<T>& model, const Tensor<T>& x,
                     const std::vector<int>& y, const AttackConfig& cfg,
                     Rng& rng) {
  return cfg.family == AttackFamily::Pgd ? pgd(model, x, y, cfg, rng)
                                         : autopgd(model, x, y, cfg, rng);
}

// Fraction of correctly classified (optionally attacked) inputs.
// Deterministic for a fixed seed; batches follow dataset order.
template <typename T>
double evaluate(Module<T>& model, const Dataset& ds,
                const std::optional<AttackConfig>& attack,
                int batch_size = 256, uint64_t seed = 0) {
  if (ds.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  EvalModeGuard<T> guard(model);
  Rng rng(seed);
  long correct = 0;
  std::vector<long> idx;
  for (long start = 0; start < ds.size(); start += batch_size) {
    const long end = std::min(ds.size(), start + batch_size);
    idx.resize(end - start);
    for (long i = start; i < end; ++i) idx[i - start] = i;
    auto [x, y] = make_batch<T>(ds, idx);
    Tensor<T> input = x;
    if (attack) {
      Rng arng = rng.fork(static_cast<uint64_t>(start));
      input = run_attack(model, x, y, *attack, arng);
    }
    Tensor<T> logits = model.forward(input);
    std::vector<int> pred = argmax_rows(logits);
    for (size_t i = 0; i < pred.size(); ++i)
      if (pred[i] == y[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

}  // namespace moenet
