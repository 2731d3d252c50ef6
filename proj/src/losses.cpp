#include "seibw/losses.hpp"

#include <cmath>

namespace seibw {

namespace {
constexpr double kProbFloor = 1e-12;
}

template <class T>
void TeacherProbsT<T>::validate() const {
  SEIBW_CHECK_VALUE(probs.rank() == 2 || probs.rank() == 3,
                    "teacher probs: [n, C] or [T, n, C] required");
  const std::size_t C = probs.dim(probs.rank() - 1);
  const std::size_t rows = probs.numel() / C;
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double p = static_cast<double>(probs[r * C + c]);
      SEIBW_CHECK_VALUE(p >= 0.0, "teacher probs: negative entry");
      s += p;
    }
    SEIBW_CHECK_VALUE(std::abs(s - 1.0) <= 1e-5, "teacher probs: row does not sum to 1");
  }
}

void LossConfig::validate() const {
  SEIBW_CHECK_VALUE(lambda_reg >= 0.0 && lambda_reg <= 1.0,
                    "loss config: lambda_reg must be in [0, 1]");
}

template <class T>
LossResult<T> kl_snn_loss(const TensorT<T>& student_logits, const TeacherProbsT<T>& teacher) {
  SEIBW_CHECK_DIM(student_logits.rank() == 3, "kl_snn_loss: logits [T, n, C] required");
  teacher.validate();
  const std::size_t horizon = student_logits.dim(0);
  const std::size_t n = student_logits.dim(1);
  const std::size_t C = student_logits.dim(2);
  if (teacher.per_step()) {
    SEIBW_CHECK_DIM(teacher.probs.dim(0) == horizon && teacher.probs.dim(1) == n &&
                        teacher.probs.dim(2) == C,
                    "kl_snn_loss: per-step teacher shape mismatch");
  } else {
    SEIBW_CHECK_DIM(teacher.probs.dim(0) == n && teacher.probs.dim(1) == C,
                    "kl_snn_loss: teacher shape mismatch");
  }

  TensorT<T> student = softmax(student_logits);
  LossResult<T> res;
  res.grad = TensorT<T>(student_logits.shape());
  const double inv_nt = 1.0 / static_cast<double>(n * horizon);
  double loss = 0.0;
  for (std::size_t t = 0; t < horizon; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t row = t * n + i;
      const std::size_t trow = teacher.per_step() ? row : i;
      for (std::size_t c = 0; c < C; ++c) {
        const double pa = static_cast<double>(teacher.probs[trow * C + c]);
        const double ps =
            std::max(static_cast<double>(student[row * C + c]), kProbFloor);
        if (pa > 0.0) loss -= pa * std::log(ps / pa);
        res.grad[row * C + c] =
            static_cast<T>((static_cast<double>(student[row * C + c]) - pa) * inv_nt);
      }
    }
  }
  res.loss = loss * inv_nt;
  return res;
}

template <class T>
LossResult<T> tet_ce_loss(const TensorT<T>& student_logits,
                          const std::vector<std::int32_t>& labels) {
  SEIBW_CHECK_DIM(student_logits.rank() == 3, "tet_ce_loss: logits [T, n, C] required");
  const std::size_t horizon = student_logits.dim(0);
  const std::size_t n = student_logits.dim(1);
  const std::size_t C = student_logits.dim(2);
  SEIBW_CHECK_VALUE(labels.size() == n, "tet_ce_loss: label count mismatch");
  for (auto y : labels)
    SEIBW_CHECK_VALUE(y >= 0 && static_cast<std::size_t>(y) < C,
                      "tet_ce_loss: label out of range");

  TensorT<T> logp = log_softmax(student_logits);
  TensorT<T> probs = softmax(student_logits);
  LossResult<T> res;
  res.grad = TensorT<T>(student_logits.shape());
  const double inv_nt = 1.0 / static_cast<double>(n * horizon);
  double loss = 0.0;
  for (std::size_t t = 0; t < horizon; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t row = t * n + i;
      const std::size_t y = static_cast<std::size_t>(labels[i]);
      loss -= static_cast<double>(logp[row * C + y]);
      for (std::size_t c = 0; c < C; ++c) {
        const double onehot = c == y ? 1.0 : 0.0;
        res.grad[row * C + c] =
            static_cast<T>((static_cast<double>(probs[row * C + c]) - onehot) * inv_nt);
      }
    }
  }
  res.loss = loss * inv_nt;
  return res;
}

template <class T>
LossResult<T> membrane_regularizer(const TensorT<T>& outputs, double v_threshold) {
  SEIBW_CHECK_DIM(outputs.rank() == 3, "membrane_regularizer: outputs [T, n, C] required");
  const std::size_t horizon = outputs.dim(0);
  const std::size_t n = outputs.dim(1);
  LossResult<T> res;
  res.grad = TensorT<T>(outputs.shape());
  const double inv_nt = 1.0 / static_cast<double>(n * horizon);
  double loss = 0.0;
  for (std::size_t i = 0; i < outputs.numel(); ++i) {
    const double d = static_cast<double>(outputs[i]) - v_threshold;
    loss += d * d;
    res.grad[i] = static_cast<T>(2.0 * d * inv_nt);
  }
  res.loss = loss * inv_nt;
  return res;
}

template <class T>
LossResult<T> combined_loss(const LossConfig& cfg, const TensorT<T>& student_logits,
                            const TeacherProbsT<T>& teacher,
                            const std::vector<std::int32_t>& labels) {
  cfg.validate();
  (void)labels;
  const double lam = cfg.lambda_reg;
  LossResult<T> res;
  res.grad = TensorT<T>(student_logits.shape());
  res.loss = 0.0;
  if (lam < 1.0) {
    LossResult<T> kl = kl_snn_loss(student_logits, teacher);
    res.loss += (1.0 - lam) * kl.loss;
    res.grad.axpy_(static_cast<T>(1.0 - lam), kl.grad);
  }
  if (lam > 0.0) {
    LossResult<T> reg = membrane_regularizer(student_logits, cfg.v_threshold);
    res.loss += lam * reg.loss;
    res.grad.axpy_(static_cast<T>(lam), reg.grad);
  }
  return res;
}

#define SEIBW_INSTANTIATE(T)                                                            \
  template struct TeacherProbsT<T>;                                                     \
  template LossResult<T> kl_snn_loss<T>(const TensorT<T>&, const TeacherProbsT<T>&);    \
  template LossResult<T> tet_ce_loss<T>(const TensorT<T>&,                              \
                                        const std::vector<std::int32_t>&);              \
  template LossResult<T> membrane_regularizer<T>(const TensorT<T>&, double);            \
  template LossResult<T> combined_loss<T>(const LossConfig&, const TensorT<T>&,         \
                                          const TeacherProbsT<T>&,                      \
                                          const std::vector<std::int32_t>&);

SEIBW_INSTANTIATE(float)
SEIBW_INSTANTIATE(double)
#undef SEIBW_INSTANTIATE

}  // namespace seibw
