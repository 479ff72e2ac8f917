#pragma once

#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "mtp/error.hpp"
#include "mtp/model.hpp"
#include "mtp/tasks.hpp"
#include "mtp/tensor.hpp"

namespace mtp {

inline constexpr double kQtTemperature = 0.1;
inline constexpr double kFsMinProbability = 1e-7;

template <typename T>
struct TaskLoss {
  Task task = Task::kMlm;
  Tensor<T> value;  // scalar
  std::size_t count = 0;

  double item() const { return double(value.item()); }
};

template <typename T>
TaskLoss<T> zero_loss(Task task) {
  return {task, Tensor<T>::scalar(T{0}), 0};
}

// Mean cross-entropy over rows of logits.
template <typename T>
TaskLoss<T> loss_token_ce(Task task, const Tensor<T>& logits, std::span<const int> targets) {
  if (targets.empty()) return zero_loss<T>(task);
  return {task, cross_entropy(logits, targets), targets.size()};
}

template <typename T>
TaskLoss<T> loss_sentence_ce(Task task, const Tensor<T>& logits, std::span<const int> labels) {
  return loss_token_ce(task, logits, labels);
}

// Mean squared error over contributing positions.
template <typename T>
TaskLoss<T> loss_regression(Task task, const Tensor<T>& preds, std::span<const T> targets) {
  if (targets.empty()) return zero_loss<T>(task);
  return {task, mse(preds, targets), targets.size()};
}

// Contrastive matching of first-half [CLS] vectors with second-half ones.
// Energy E(i,j) = -cos(first_i, second_j); each row classifies its true
// partner among all candidates with logits -E/tau, in both directions, and
// the two mean cross-entropies are averaged.
template <typename T>
TaskLoss<T> loss_qt(const Tensor<T>& cls_first, const Tensor<T>& cls_second,
                    double temperature = kQtTemperature) {
  if (cls_first.rows() != cls_second.rows()) {
    fail("loss_qt: halves differ in size (", cls_first.rows(), " vs ", cls_second.rows(), ")");
  }
  const std::size_t n = cls_first.rows();
  if (n == 0) return zero_loss<T>(Task::kQt);
  std::vector<int> diag(n);
  std::iota(diag.begin(), diag.end(), 0);
  auto logits = affine(cosine_matrix(cls_first, cls_second), static_cast<T>(1.0 / temperature));
  auto fwd = cross_entropy(logits, std::span<const int>(diag));
  auto bwd = cross_entropy(transpose(logits), std::span<const int>(diag));
  return {Task::kQt, affine(add(fwd, bwd), T{0.5}), n};
}

// Rejects odd batches before splitting into halves.
template <typename T>
TaskLoss<T> loss_qt_batch(const Tensor<T>& cls, double temperature = kQtTemperature) {
  const std::size_t b = cls.rows();
  if (b % 2 != 0) fail("loss_qt: batch of ", b, " rows is odd");
  std::vector<int> first(b / 2), second(b / 2);
  for (std::size_t i = 0; i < b / 2; ++i) {
    first[i] = static_cast<int>(i);
    second[i] = static_cast<int>(i + b / 2);
  }
  return loss_qt(gather_rows(cls, std::span<const int>(first)),
                 gather_rows(cls, std::span<const int>(second)), temperature);
}

// Binary cross-entropy against 1 with p = (1 + cos) / 2, clamped to
// [1e-7, 1], averaged over every ([CLS], partner token) pair.
template <typename T>
TaskLoss<T> loss_fs(const Tensor<T>& cls_rows, const Tensor<T>& token_rows) {
  if (cls_rows.rows() == 0) return zero_loss<T>(Task::kFs);
  auto p = affine(cosine_similarity(cls_rows, token_rows), T{0.5}, T{0.5});
  auto logp = log_clamped(p, static_cast<T>(kFsMinProbability), T{1});
  return {Task::kFs, affine(mean(logp), T{-1}), cls_rows.rows()};
}

template <typename T>
TaskLoss<T> compute_task_loss(const HeadOutput<T>& h) {
  const Task t = h.task;
  if (t == Task::kQt) return loss_qt(h.cls_first, h.cls_second);
  if (t == Task::kFs) return h.count == 0 ? zero_loss<T>(t) : loss_fs(h.fs_cls, h.fs_tokens);
  if (is_regression_task(t)) return loss_regression(t, h.predictions, std::span<const T>(h.value_targets));
  if (h.count == 0) return zero_loss<T>(t);
  return loss_token_ce(t, h.logits, std::span<const int>(h.class_targets));
}

// Unweighted sum of the task losses.
template <typename T>
Tensor<T> combine_losses(const std::vector<TaskLoss<T>>& losses) {
  if (losses.empty()) fail("combine_losses: empty task set");
  Tensor<T> total = losses.front().value;
  for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i].value);
  return total;
}

// Forward through every head of the batch's task set.
template <typename T>
std::vector<TaskLoss<T>> batch_losses(const Model<T>& model, const Tensor<T>& hidden,
                                      const TrainingBatch& batch) {
  std::vector<TaskLoss<T>> out;
  for (Task t : batch.tasks.tasks()) out.push_back(compute_task_loss(model.head_forward(t, hidden, batch)));
  return out;
}

}  // namespace mtp
