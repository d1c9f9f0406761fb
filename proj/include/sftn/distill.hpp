// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "sftn/sftn.hpp"

// Stage-2 distillation losses. The teacher is frozen: its logits/features
// enter these losses as constants and the feature methods run jointly with
// the KD term.

namespace sftn {

enum class DistillMethod { KD, FitNets, SP };

inline const char* distill_method_name(DistillMethod m) {
  switch (m) {
    case DistillMethod::KD: return "KD";
    case DistillMethod::FitNets: return "FitNets";
    case DistillMethod::SP: return "SP";
  }
  return "?";
}

inline DistillMethod parse_distill_method(const std::string& s) {
  if (s == "KD") return DistillMethod::KD;
  if (s == "FitNets") return DistillMethod::FitNets;
  if (s == "SP") return DistillMethod::SP;
  throw ConfigError("unknown distillation method '" + s + "' (expected KD|FitNets|SP)");
}

struct DistillConfig {
  DistillMethod method = DistillMethod::KD;
  double tau_kd = 4.0;
  double lambda_kd = 1.0;
  double lambda_hint = 1.0;      // feature-loss weight (FitNets / SP)
  std::vector<int> hint_blocks;  // 1-based; empty = all N-1 interior blocks

  void validate() const {
    if (tau_kd <= 0) throw ConfigError("distill: tau_kd must be positive");
    if (lambda_kd < 0 || lambda_hint < 0)
      throw ConfigError("distill: loss weights must be nonnegative");
  }

  std::vector<int> active_hints(int num_blocks) const {
    std::vector<int> out = hint_blocks;
    if (out.empty())
      for (int i = 1; i < num_blocks; ++i) out.push_back(i);
    for (int b : out)
      if (b < 1 || b > num_blocks)
        throw ConfigError("distill: hint block " + std::to_string(b) + " outside [1," +
                          std::to_string(num_blocks) + "]");
    return out;
  }
};

namespace detail {
template <class T>
inline void require_frozen(const Tensor<T>& t, const char* who) {
  if (t.requires_grad())
    throw ConfigError(std::string(who) + ": teacher-side tensor must be a constant "
                                         "(teacher is frozen in stage 2)");
}
}  // namespace detail

// CE(softmax(s), y) + lambda_kd * tau^2 * KL(softmax(t/tau) || softmax(s/tau)).
// The tau^2 factor keeps the soft-target gradient scale independent of tau.
template <class T>
Tensor<T> kd_loss(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits,
                  const std::vector<int>& labels, T tau_kd, T lambda_kd) {
  if (!(tau_kd > T(0))) throw ConfigError("kd_loss: tau_kd must be positive");
  detail::require_frozen(teacher_logits, "kd_loss");
  if (!(student_logits.shape() == teacher_logits.shape()))
    throw ShapeError("kd_loss: student logits " + shape_str(student_logits.shape()) +
                     " vs teacher logits " + shape_str(teacher_logits.shape()));
  auto ce = cross_entropy(student_logits, labels);
  if (lambda_kd == T(0)) return ce;
  auto kl = kl_tempered(teacher_logits, student_logits, tau_kd);
  return ops::add(ce, ops::scale(kl, lambda_kd * tau_kd * tau_kd));
}

// Mean over hinted blocks of MSE between 1x1-conv-regressed student features
// and the (constant) teacher features. Spatial sizes must already agree.
template <class T>
Tensor<T> fitnets_hint_loss(const std::vector<Tensor<T>>& student_feats,
                            const std::vector<Tensor<T>>& teacher_feats,
                            std::vector<Layer<T>>& regressors,
                            const std::vector<int>& hint_blocks, bool training) {
  Tensor<T> acc;
  for (size_t i = 0; i < hint_blocks.size(); ++i) {
    const int b = hint_blocks[i];
    const auto& fs = student_feats[b - 1];
    const auto& ft = teacher_feats[b - 1];
    detail::require_frozen(ft, "fitnets_hint_loss");
    if (fs.dim(2) != ft.dim(2) || fs.dim(3) != ft.dim(3))
      throw ConfigError("fitnets_hint_loss: spatial mismatch at block " + std::to_string(b) +
                        ": student " + shape_str(fs.shape()) + " vs teacher " +
                        shape_str(ft.shape()));
    auto regressed = regressors[i].forward(fs, training);
    auto diff = ops::sub(regressed, ft);
    auto mse = ops::mean(ops::mul(diff, diff));
    acc = acc.defined() ? ops::add(acc, mse) : mse;
  }
  return ops::scale(acc, T(1) / T(hint_blocks.size()));
}

// Similarity-preserving loss: per hinted block, G = row-normalized(A A^T)
// over per-sample flattened features; loss = ||G_S - G_T||_F^2 / b^2,
// averaged over hinted blocks.
template <class T>
Tensor<T> sp_loss(const std::vector<Tensor<T>>& student_feats,
                  const std::vector<Tensor<T>>& teacher_feats,
                  const std::vector<int>& hint_blocks) {
  auto gram = [](const Tensor<T>& f) {
    const int b = f.dim(0);
    const int64_t chw = int64_t(f.size()) / b;
    auto a = ops::reshape(f, {b, int(chw)});
    return ops::row_l2_normalize(ops::matmul(a, ops::transpose(a)));
  };
  Tensor<T> acc;
  for (int bi : hint_blocks) {
    const auto& fs = student_feats[bi - 1];
    const auto& ft = teacher_feats[bi - 1];
    detail::require_frozen(ft, "sp_loss");
    const int b = fs.dim(0);
    if (b < 2) throw ConfigError("sp_loss: batch size must be >= 2, got " + std::to_string(b));
    if (ft.dim(0) != b)
      throw ShapeError("sp_loss: batch mismatch student " + shape_str(fs.shape()) +
                       " vs teacher " + shape_str(ft.shape()));
    auto d = ops::sub(gram(fs), gram(ft));
    auto l = ops::scale(ops::sum(ops::mul(d, d)), T(1) / T(int64_t(b) * b));
    acc = acc.defined() ? ops::add(acc, l) : l;
  }
  return ops::scale(acc, T(1) / T(hint_blocks.size()));
}

}  // namespace sftn
