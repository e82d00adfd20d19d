#pragma once

// The three balancing losses. Entropy and KL act on the normalized
// importance distribution P = I / sum(I) and differ by exactly ln N; they
// are computed through independent formulas so that identity stays a real
// check. The switch loss follows the product form N * sum_i f_i * P_i with
// the dispatch fraction f treated as constant.

#include <cmath>
#include <span>
#include <string>

#include "moenet/routing.hpp"

namespace moenet {

enum class BalanceLossKind { None, Entropy, Kl, Switch };

inline std::string to_string(BalanceLossKind k) {
  switch (k) {
    case BalanceLossKind::None: return "none";
    case BalanceLossKind::Entropy: return "entropy";
    case BalanceLossKind::Kl: return "kl";
    case BalanceLossKind::Switch: return "switch";
  }
  return "?";
}

namespace detail {
template <typename T>
Tensor<T> normalized_importance(const ImportanceVector<T>& iv,
                                const char* op) {
  double total = 0.0;
  for (T v : iv.mass.values()) {
    if (v < T(0))
      throw std::invalid_argument(strcat_msg(op, ": negative importance mass"));
    total += static_cast<double>(v);
  }
  if (total <= 0.0)
    throw std::invalid_argument(strcat_msg(op, ": zero total importance mass"));
  return div_rowscalar(iv.mass, sum_channels(iv.mass));
}
}  // namespace detail

// -H(P) = sum_i P_i ln P_i; minimum -ln N at uniform P, maximum 0 at one-hot.
template <typename T>
Tensor<T> entropy_loss(const ImportanceVector<T>& iv) {
  Tensor<T> p = detail::normalized_importance(iv, "entropy_loss");
  return xlogx_sum(p, 1.0);
}

// D_KL(P || uniform) = sum_i P_i ln(N P_i) >= 0.
template <typename T>
Tensor<T> kl_loss(const ImportanceVector<T>& iv) {
  Tensor<T> p = detail::normalized_importance(iv, "kl_loss");
  return xlogx_sum(p, static_cast<double>(iv.n_experts()));
}

// N * sum_i f_i P_i where f_i is the fraction of inputs whose top-1 expert
// is i and P_i the batch-mean gate probability. Gradient flows through P
// only.
template <typename T>
Tensor<T> switch_loss(std::span<const GateDecision<T>> decisions) {
  if (decisions.empty())
    throw std::invalid_argument("switch_loss: empty decision batch");
  const int n = decisions[0].n_experts();
  long total_inputs = 0;
  std::vector<T> dispatch(n, T(0));
  for (const auto& d : decisions) {
    if (d.n_experts() != n)
      throw std::invalid_argument("switch_loss: expert count mismatch");
    for (int b = 0; b < d.batch(); ++b) dispatch[d.top1(b)] += T(1);
    total_inputs += d.batch();
  }
  for (auto& f : dispatch) f /= static_cast<T>(total_inputs);

  Tensor<T> score_sum = sum_rows(decisions[0].scores);
  for (size_t i = 1; i < decisions.size(); ++i)
    score_sum = add(score_sum, sum_rows(decisions[i].scores));
  Tensor<T> mean_scores = scale(score_sum, T(1) / static_cast<T>(total_inputs));

  Tensor<T> f_const =
      Tensor<T>::from_values(Shape{1, n, 1, 1}, std::move(dispatch), false);
  return scale(sum_all(mul(mean_scores, f_const)), static_cast<T>(n));
}

template <typename T>
Tensor<T> switch_loss(const GateDecision<T>& decision) {
  return switch_loss(std::span<const GateDecision<T>>(&decision, 1));
}

}  // namespace moenet
