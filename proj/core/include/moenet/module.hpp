#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "moenet/rng.hpp"
#include "moenet/tensor.hpp"

namespace moenet {

// Learnable tensor. Names are assigned by the enclosing module tree during
// enumeration, so a parameter's full path (e.g.
// "stage4.block1.moe.expert2.conv1.weight") is unique within a model.
template <typename T>
struct Parameter {
  Tensor<T> value;
  bool trainable = true;
};

// One row of a symbolic cost report: parameters owned by the unit and
// inference FLOPs per single input (multiply-accumulate counted as 2).
struct LayerCost {
  std::string name;
  long params = 0;
  long long flops = 0;
};

// Base of all network pieces. Children and parameters are registered in
// construction order, which fixes initialization and checkpoint order.
template <typename T>
class Module {
 public:
  virtual ~Module() = default;

  virtual Tensor<T> forward(const Tensor<T>& x) = 0;

  void set_training(bool training) {
    visit_modules([training](Module& m) { m.training_ = training; });
  }
  bool training() const { return training_; }

  void visit_modules(const std::function<void(Module&)>& fn) {
    fn(*this);
    for (auto& [name, child] : children_) child->visit_modules(fn);
  }

  void visit_parameters(
      const std::function<void(const std::string&, Parameter<T>&)>& fn,
      const std::string& prefix = "") {
    for (auto& [name, p] : params_)
      fn(prefix.empty() ? name : prefix + "." + name, *p);
    for (auto& [name, child] : children_)
      child->visit_parameters(fn, prefix.empty() ? name : prefix + "." + name);
  }

  // Named double-precision state that is not trained but must round-trip
  // through checkpoints (batch-norm running statistics).
  void visit_buffers(
      const std::function<void(const std::string&, std::vector<double>&)>& fn,
      const std::string& prefix = "") {
    for (auto& [name, b] : buffers_)
      fn(prefix.empty() ? name : prefix + "." + name, *b);
    for (auto& [name, child] : children_)
      child->visit_buffers(fn, prefix.empty() ? name : prefix + "." + name);
  }

  std::vector<std::pair<std::string, Parameter<T>*>> named_parameters() {
    std::vector<std::pair<std::string, Parameter<T>*>> out;
    visit_parameters([&](const std::string& n, Parameter<T>& p) {
      out.emplace_back(n, &p);
    });
    return out;
  }

  long parameter_count() {
    long total = 0;
    visit_parameters([&](const std::string&, Parameter<T>& p) {
      total += p.value.numel();
    });
    return total;
  }

  void zero_grad() {
    visit_parameters([](const std::string&, Parameter<T>& p) {
      p.value.zero_grad();
    });
  }

  // Deterministic re-initialization; walks children in registration order.
  virtual void reset_parameters(Rng& rng) {
    for (auto& [name, child] : children_) child->reset_parameters(rng);
  }

  // Symbolic cost on a single input of the given shape: appends this unit's
  // rows and returns its output shape. k_override > 0 pins the number of
  // active experts for every MoE layer underneath.
  virtual Shape append_cost(const Shape& in, const std::string& path,
                            int k_override, std::vector<LayerCost>& out) {
    (void)in;
    (void)k_override;
    (void)out;
    throw std::logic_error(strcat_msg("cost accounting not implemented for ",
                                      path));
  }

 protected:
  Parameter<T>& register_parameter(const std::string& name, const Shape& shape,
                                   bool trainable = true) {
    auto p = std::make_unique<Parameter<T>>();
    p->value = Tensor<T>::zeros(shape, trainable);
    p->trainable = trainable;
    params_.emplace_back(name, std::move(p));
    return *params_.back().second;
  }

  void register_module(const std::string& name, Module<T>* child) {
    children_.emplace_back(name, child);
  }

  void register_buffer(const std::string& name, std::vector<double>* buf) {
    buffers_.emplace_back(name, buf);
  }

  bool training_ = true;

 private:
  template <typename U>
  friend class EvalModeGuard;

  std::vector<std::pair<std::string, std::unique_ptr<Parameter<T>>>> params_;
  std::vector<std::pair<std::string, Module<T>*>> children_;
  std::vector<std::pair<std::string, std::vector<double>*>> buffers_;
};

// Flips every parameter to requires_grad=false for the guard's lifetime.
// Attack generation uses this so backward sweeps only propagate input grads.
template <typename T>
class ParamFreezeGuard {
 public:
  explicit ParamFreezeGuard(Module<T>& m) {
    m.visit_parameters([&](const std::string&, Parameter<T>& p) {
      saved_.emplace_back(&p, p.value.requires_grad());
      p.value.set_requires_grad(false);
    });
  }
  ~ParamFreezeGuard() {
    for (auto& [p, rg] : saved_) p->value.set_requires_grad(rg);
  }
  ParamFreezeGuard(const ParamFreezeGuard&) = delete;
  ParamFreezeGuard& operator=(const ParamFreezeGuard&) = delete;

 private:
  std::vector<std::pair<Parameter<T>*, bool>> saved_;
};

// Puts the whole tree into eval mode and restores each submodule's previous
// mode on exit.
template <typename T>
class EvalModeGuard {
 public:
  explicit EvalModeGuard(Module<T>& m) : root_(m) {
    m.visit_modules([&](Module<T>& sub) {
      saved_.emplace_back(&sub, sub.training());
    });
    m.set_training(false);
  }
  ~EvalModeGuard() {
    for (auto& [m, was_training] : saved_) m->training_ = was_training;
  }
  EvalModeGuard(const EvalModeGuard&) = delete;
  EvalModeGuard& operator=(const EvalModeGuard&) = delete;

 private:
  Module<T>& root_;
  std::vector<std::pair<Module<T>*, bool>> saved_;
};

}  // namespace moenet
