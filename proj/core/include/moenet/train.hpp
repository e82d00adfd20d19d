#pragma once

// SGD training loop (normal or adversarial) with polynomial learning-rate
// decay and the composite task + balancing loss. Fully deterministic for a
// fixed (config, seed): data order, augmentation, attack random starts and
// initialization all derive from cfg.seed.

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "moenet/attacks.hpp"
#include "moenet/data.hpp"
#include "moenet/resnet.hpp"

namespace moenet {

struct TrainConfig {
  int epochs = 200;
  int batch_size = 128;
  double lr0 = 1e-2;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double lr_power = 1.0;
  bool adversarial = false;
  AttackConfig attack{AttackFamily::Pgd, 8.0 / 255.0, 7, 2.0 / 255.0, true};
  uint64_t seed = 1;
  bool augment = true;
  int checkpoint_every = 0;  // 0: only at the end (handled by the caller)
  std::optional<AttackConfig> eval_attack;  // per-epoch attacked eval

  void validate() const {
    if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
    if (batch_size < 1)
      throw ConfigError("train config: batch_size must be >= 1");
    if (lr0 < 0.0 || momentum < 0.0 || weight_decay < 0.0 || lr_power < 0.0)
      throw ConfigError("train config: rates must be non-negative");
    attack.validate();
    if (eval_attack) eval_attack->validate();
  }
};

// lr(t) = lr0 * (1 - t/T)^p, floored at zero.
inline double lr_schedule(long step, long total, double lr0, double p) {
  if (step < 0 || step > total || total <= 0)
    throw std::invalid_argument(
        strcat_msg("lr_schedule: step ", step, " outside [0,", total, "]"));
  const double frac = std::max(0.0, 1.0 - static_cast<double>(step) /
                                              static_cast<double>(total));
  return lr0 * std::pow(frac, p);
}

struct EpochRecord {
  int epoch = 0;  // 1-based
  double task_loss = 0.0;
  std::map<std::string, double> balance_losses;  // layer path -> mean
  double lr = 0.0;                               // at the epoch's first step
  double train_accuracy = 0.0;
  double eval_clean_accuracy = 0.0;
  std::optional<double> eval_adv_accuracy;
  // Per-layer routing snapshot over the eval set.
  std::map<std::string, std::vector<double>> importance;
  std::map<std::string, std::vector<long>> top1_counts;
  // Per-layer, per-expert L2 norm of the epoch's accumulated squared
  // parameter gradients. Zero means the expert received no signal.
  std::map<std::string, std::vector<double>> expert_grad_norms;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
};

// SGD with momentum and L2 weight decay folded into the gradient:
//   v <- mu*v + g + wd*theta;  theta <- theta - lr*v.
template <typename T>
class Sgd {
 public:
  Sgd(std::vector<Parameter<T>*> params, double momentum, double weight_decay)
      : momentum_(momentum), weight_decay_(weight_decay) {
    slots_.reserve(params.size());
    for (auto* p : params)
      slots_.push_back(
          {p, std::vector<T>(static_cast<size_t>(p->value.numel()), T(0))});
  }

  void step(double lr) {
    const T mu = static_cast<T>(momentum_);
    const T wd = static_cast<T>(weight_decay_);
    const T eta = static_cast<T>(lr);
    for (auto& slot : slots_) {
      auto theta = slot.param->value.mutable_values();
      auto grad = slot.param->value.grad();
      const bool has_grad = !grad.empty();
      for (size_t i = 0; i < theta.size(); ++i) {
        const T g = (has_grad ? grad[i] : T(0)) + wd * theta[i];
        slot.velocity[i] = mu * slot.velocity[i] + g;
        theta[i] -= eta * slot.velocity[i];
      }
    }
  }

 private:
  struct Slot {
    Parameter<T>* param;
    std::vector<T> velocity;
  };
  std::vector<Slot> slots_;
  double momentum_, weight_decay_;
};

namespace detail {
template <typename T>
double expert_sq_grad(Module<T>& expert) {
  double acc = 0.0;
  expert.visit_parameters([&](const std::string&, Parameter<T>& p) {
    if (!p.value.has_grad()) return;
    for (T g : p.value.grad()) acc += static_cast<double>(g) * g;
  });
  return acc;
}
}  // namespace detail

template <typename T>
TrainLog train(ResNetModel<T>& model, const Dataset& train_ds,
               const Dataset& eval_ds, const TrainConfig& cfg,
               const std::function<void(const EpochRecord&)>& on_epoch = {},
               const std::function<void(int)>& on_checkpoint = {}) {
  cfg.validate();
  if (train_ds.size() == 0 || eval_ds.size() == 0)
    throw std::invalid_argument("train: empty dataset");
  if (train_ds.channels != model.config().input_shape[0])
    throw std::invalid_argument("train: dataset/model channel mismatch");

  std::vector<Parameter<T>*> trainable;
  model.visit_parameters([&](const std::string&, Parameter<T>& p) {
    if (p.trainable) trainable.push_back(&p);
  });
  Sgd<T> opt(trainable, cfg.momentum, cfg.weight_decay);

  Rng root(cfg.seed);
  Rng order_rng = root.fork(1);
  Rng attack_rng = root.fork(2);
  Rng aug_rng = root.fork(3);

  const long n = train_ds.size();
  const long batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const long total_steps = static_cast<long>(cfg.epochs) * batches_per_epoch;
  long step = 0;

  std::vector<long> perm(n);
  for (long i = 0; i < n; ++i) perm[i] = i;

  TrainLog log;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    order_rng.shuffle(perm);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr_schedule(step, total_steps, cfg.lr0, cfg.lr_power);

    double task_sum = 0.0;
    long train_correct = 0;
    std::map<std::string, double> balance_sum;
    std::map<std::string, std::vector<double>> sq_grads;
    for (auto* layer : model.moe_layers())
      sq_grads[layer->layer_path()] =
          std::vector<double>(layer->config().n_experts, 0.0);

    model.set_training(true);
    for (long start = 0; start < n; start += cfg.batch_size) {
      const long end = std::min(n, start + cfg.batch_size);
      std::span<const long> idx(perm.data() + start, end - start);
      auto [x, y] = make_batch<T>(train_ds, idx, cfg.augment, &aug_rng);

      Tensor<T> input = x;
      if (cfg.adversarial) {
        Rng arng = attack_rng.fork(static_cast<uint64_t>(step));
        input = run_attack(model, x, y, cfg.attack, arng);
        model.set_training(true);
      }

      Tensor<T> logits = model.forward(input);
      Tensor<T> task = cross_entropy_logits(logits, y, Reduction::Mean);
      Tensor<T> total = task;
      for (auto* layer : model.moe_layers()) {
        Tensor<T> bl = layer->balance_loss_value();
        if (!bl.defined()) continue;
        balance_sum[layer->layer_path()] += static_cast<double>(bl.item());
        const T coeff = static_cast<T>(layer->config().balance_coeff);
        if (coeff != T(0)) total = add(total, scale(bl, coeff));
      }

      if (!std::isfinite(static_cast<double>(total.item()))) {
        std::string tag = total.first_nonfinite_tag();
        throw NumericalError(strcat_msg(
            "training diverged at epoch ", epoch, " step ", step,
            ": first non-finite tensor: ", tag.empty() ? "loss" : tag));
      }

      model.zero_grad();
      total.backward();

      for (auto* layer : model.moe_layers()) {
        auto& acc = sq_grads[layer->layer_path()];
        for (int e = 0; e < layer->config().n_experts; ++e)
          acc[e] += detail::expert_sq_grad(layer->expert(e));
      }

      opt.step(lr_schedule(step, total_steps, cfg.lr0, cfg.lr_power));
      ++step;

      task_sum += static_cast<double>(task.item());
      std::vector<int> pred = argmax_rows(logits);
      for (size_t i = 0; i < pred.size(); ++i)
        if (pred[i] == y[i]) ++train_correct;
    }

    rec.task_loss = task_sum / static_cast<double>(batches_per_epoch);
    for (auto& [path, sum] : balance_sum)
      rec.balance_losses[path] = sum / static_cast<double>(batches_per_epoch);
    rec.train_accuracy =
        static_cast<double>(train_correct) / static_cast<double>(n);
    for (auto& [path, acc] : sq_grads) {
      std::vector<double> norms(acc.size());
      for (size_t e = 0; e < acc.size(); ++e) norms[e] = std::sqrt(acc[e]);
      rec.expert_grad_norms[path] = std::move(norms);
    }

    // Eval pass: clean accuracy plus the per-layer routing snapshot.
    {
      EvalModeGuard<T> guard(model);
      long correct = 0;
      std::map<std::string, std::vector<double>> imp;
      std::map<std::string, std::vector<long>> counts;
      for (auto* layer : model.moe_layers()) {
        imp[layer->layer_path()] =
            std::vector<double>(layer->config().n_experts, 0.0);
        counts[layer->layer_path()] =
            std::vector<long>(layer->config().n_experts, 0);
      }
      std::vector<long> idx;
      for (long start = 0; start < eval_ds.size(); start += cfg.batch_size) {
        const long end = std::min(eval_ds.size(), start + cfg.batch_size);
        idx.resize(end - start);
        for (long i = start; i < end; ++i) idx[i - start] = i;
        auto [x, y] = make_batch<T>(eval_ds, idx);
        Tensor<T> logits = model.forward(x);
        std::vector<int> pred = argmax_rows(logits);
        for (size_t i = 0; i < pred.size(); ++i)
          if (pred[i] == y[i]) ++correct;
        for (auto* layer : model.moe_layers()) {
          const auto& d = layer->last_decision();
          auto scores = d.scores.values();
          const int ne = d.n_experts();
          for (int b = 0; b < d.batch(); ++b) {
            counts[layer->layer_path()][d.top1(b)] += 1;
            for (int e = 0; e < ne; ++e)
              imp[layer->layer_path()][e] +=
                  static_cast<double>(scores[b * ne + e]);
          }
        }
      }
      rec.eval_clean_accuracy =
          static_cast<double>(correct) / static_cast<double>(eval_ds.size());
      rec.importance = std::move(imp);
      rec.top1_counts = std::move(counts);
    }
    if (cfg.eval_attack)
      rec.eval_adv_accuracy =
          evaluate(model, eval_ds, cfg.eval_attack, cfg.batch_size,
                   cfg.seed + static_cast<uint64_t>(epoch));

    log.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (on_checkpoint && cfg.checkpoint_every > 0 &&
        epoch % cfg.checkpoint_every == 0 && epoch != cfg.epochs)
      on_checkpoint(epoch);
  }
  model.set_training(false);
  return log;
}

}  // namespace moenet
