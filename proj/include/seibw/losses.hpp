#pragma once

#include <cstdint>
#include <vector>

#include "seibw/tensor.hpp"

namespace seibw {

enum class TeacherSource { file, stage1_model };

// Per-sample class distributions rho^A. probs is [n, C] (broadcast across
// time) or [T, n, C] for per-step teachers.
template <class T>
struct TeacherProbsT {
  TensorT<T> probs;
  TeacherSource source = TeacherSource::file;

  bool per_step() const { return probs.rank() == 3; }
  void validate() const;
};

enum class LossKind { kl_distill, tet_ce, combined };

struct LossConfig {
  LossKind kind = LossKind::combined;
  double lambda_reg = 0.0;   // regularizer mix in [0, 1]
  double v_threshold = 1.0;  // target of the membrane regularizer

  void validate() const;
};

template <class T>
struct LossResult {
  double loss = 0.0;
  TensorT<T> grad;  // d loss / d student logits, same shape as the logits
};

// KL distillation over all time steps, -(1/nT) sum_t,i,c rho^A log(rho^S/rho^A)
// with rho^S the per-step softmax of the student logits [T, n, C].
template <class T>
LossResult<T> kl_snn_loss(const TensorT<T>& student_logits, const TeacherProbsT<T>& teacher);

// Mean per-step cross entropy, (1/nT) sum_t,i CE(o_i[t], y_i).
template <class T>
LossResult<T> tet_ce_loss(const TensorT<T>& student_logits,
                          const std::vector<std::int32_t>& labels);

// (1/nT) sum_t,i ||O_i[t] - v_threshold||^2.
template <class T>
LossResult<T> membrane_regularizer(const TensorT<T>& outputs, double v_threshold);

// (1 - lambda) * kl + lambda * regularizer.
template <class T>
LossResult<T> combined_loss(const LossConfig& cfg, const TensorT<T>& student_logits,
                            const TeacherProbsT<T>& teacher,
                            const std::vector<std::int32_t>& labels);

using TeacherProbs = TeacherProbsT<float>;

}  // namespace seibw
