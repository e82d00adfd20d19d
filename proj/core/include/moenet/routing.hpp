#pragma once

// Top-k routing: softmax over all expert logits first, then selection and
// renormalization of the selected scores. Keeping the full softmax means the
// importance vector stays defined over every expert, selected or not.

#include <span>
#include <vector>

#include "moenet/ops.hpp"

namespace moenet {

template <typename T>
struct GateDecision {
  Tensor<T> scores;           // (B,N,1,1) full softmax scores G(x)
  std::vector<int> selected;  // B*k expert indices, descending score order
  Tensor<T> weights;          // (B,k,1,1) selected scores renormalized to 1
  int k = 0;

  int batch() const { return scores.shape().n; }
  int n_experts() const { return scores.shape().c; }
  int selected_at(int row, int slot) const { return selected[row * k + slot]; }
  int top1(int row) const { return selected[row * k]; }
};

template <typename T>
GateDecision<T> route(const Tensor<T>& logits, int k) {
  GateDecision<T> d;
  d.scores = softmax_channels(logits);
  TopK<T> top = topk_channels(d.scores, k);
  d.selected = std::move(top.indices);
  d.k = k;
  Tensor<T> selected_sum = sum_channels(top.values);
  d.weights = div_rowscalar(top.values, selected_sum);
  return d;
}

// Per-expert sum of full gate scores over one or more batches:
// I_i = sum_x g_i(x).
template <typename T>
struct ImportanceVector {
  Tensor<T> mass;  // (1,N,1,1)
  long batch_size = 0;

  int n_experts() const { return mass.shape().c; }
};

template <typename T>
ImportanceVector<T> importance(std::span<const GateDecision<T>> decisions) {
  if (decisions.empty())
    throw std::invalid_argument("importance: empty decision batch");
  ImportanceVector<T> iv;
  iv.mass = sum_rows(decisions[0].scores);
  iv.batch_size = decisions[0].batch();
  for (size_t i = 1; i < decisions.size(); ++i) {
    if (decisions[i].n_experts() != iv.n_experts())
      throw std::invalid_argument("importance: expert count mismatch");
    iv.mass = add(iv.mass, sum_rows(decisions[i].scores));
    iv.batch_size += decisions[i].batch();
  }
  return iv;
}

template <typename T>
ImportanceVector<T> importance(const GateDecision<T>& decision) {
  return importance(std::span<const GateDecision<T>>(&decision, 1));
}

}  // namespace moenet
