// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "sftn/nn.hpp"

// Student-friendly teacher training: the teacher net plus N-1 student
// branches, each fed by a transform layer from a teacher feature tap, and the
// three-term objective
//   L = lambda_T * CE(q_T, y)
//     + lambda_R^KL * (1/|A|) sum_i KL(q~_R^i || q~_T)     (temperature tau~)
//     + lambda_R^CE * (1/|A|) sum_i CE(q_R^i, y)           (temperature 1)
// with A the active branch set (all N-1 by default). No stop-gradients: all
// three terms drive the trunk. The KL argument order is branch first, and no
// tau^2 factor is applied to the KL term.

namespace sftn {

struct LossConfig {
  double lambda_t = 1.0;
  double lambda_r_kl = 3.0;
  double lambda_r_ce = 1.0;
  double tau_tilde = 1.0;      // stage-1 branch KL temperature
  double tau_kd = 4.0;         // stage-2 distillation temperature
  double lambda_kd = 1.0;      // stage-2 KL weight
  std::vector<int> branches;   // active branch ids (1-based); empty = all N-1

  void validate(int num_branches) const {
    if (lambda_t < 0 || lambda_r_kl < 0 || lambda_r_ce < 0 || lambda_kd < 0)
      throw ConfigError("loss: lambda weights must be nonnegative");
    if (tau_tilde <= 0) throw ConfigError("loss: tau_tilde must be positive");
    if (tau_kd <= 0) throw ConfigError("loss: tau_kd must be positive");
    for (int b : branches)
      if (b < 1 || b > num_branches)
        throw ConfigError("loss: branch id " + std::to_string(b) + " outside [1," +
                          std::to_string(num_branches) + "]");
  }

  std::vector<int> active_branches(int num_branches) const {
    if (!branches.empty()) return branches;
    std::vector<int> all(num_branches);
    for (int i = 0; i < num_branches; ++i) all[i] = i + 1;
    return all;
  }
};

// Transform layer kind is determined by the spatial ratio between the tapped
// teacher feature map and the target student block input:
//   half size   -> 3x3 conv, stride 2
//   double size -> 4x4 transposed conv, stride 2
//   same size   -> 1x1 conv
// followed by batchnorm + relu. Any other ratio is a configuration error.
inline std::vector<LayerDesc> make_transform(Shape3 teacher_shape, Shape3 student_shape) {
  const int th = teacher_shape.h, tw = teacher_shape.w;
  const int sh = student_shape.h, sw = student_shape.w;
  LayerDesc conv;
  if (sh * 2 == th && sw * 2 == tw) {
    conv = LayerDesc::conv(teacher_shape.c, student_shape.c, 3, 2, 1);
  } else if (sh == th * 2 && sw == tw * 2) {
    conv = LayerDesc::conv_transpose(teacher_shape.c, student_shape.c, 4, 2, 1);
  } else if (sh == th && sw == tw) {
    conv = LayerDesc::conv(teacher_shape.c, student_shape.c, 1, 1, 0);
  } else {
    throw ConfigError("make_transform: unsupported spatial ratio " + teacher_shape.str() +
                      " -> " + student_shape.str() + " (need x1/2, x1 or x2 on both axes)");
  }
  // sanity: the chosen conv must land exactly on the student shape
  const Shape3 out = conv.infer_out(teacher_shape);
  if (!(out == student_shape))
    throw ConfigError("make_transform: " + teacher_shape.str() + " maps to " + out.str() +
                      ", expected " + student_shape.str());
  return {conv, LayerDesc::batchnorm(student_shape.c), LayerDesc::relu()};
}

template <class T>
struct SftnOutputs {
  Tensor<T> teacher_logits;
  std::vector<Tensor<T>> teacher_features;  // all N taps
  std::vector<int> branch_ids;              // active branch ids, ascending
  std::vector<Tensor<T>> branch_logits;     // aligned with branch_ids
};

template <class T>
class SftnModel {
 public:
  struct Branch {
    int id;  // attaches after teacher block `id` (1-based); runs student blocks id+1..N
    std::vector<Layer<T>> transform;
    std::vector<std::vector<Layer<T>>> blocks;
    Tensor<T> head_w, head_b;
  };

  SftnModel(const ArchSpec& teacher_arch, const ArchSpec& student_arch)
      : teacher_(teacher_arch), student_arch_(student_arch) {
    finalize_arch(student_arch_);
    const int n = teacher_.num_blocks();
    if (int(student_arch_.blocks.size()) != n)
      throw ConfigError("sftn: teacher has " + std::to_string(n) + " blocks but student has " +
                        std::to_string(student_arch_.blocks.size()));
    if (student_arch_.classes != teacher_.classes())
      throw ConfigError("sftn: class count mismatch between teacher and student");
    if (!(student_arch_.input == teacher_.arch().input))
      throw ConfigError("sftn: input geometry mismatch between teacher and student");
    // The last teacher block has no branch: exactly N-1 of them.
    for (int i = 1; i < n; ++i) {
      Branch br;
      br.id = i;
      for (const auto& ld :
           make_transform(teacher_.arch().blocks[i - 1].out_shape,
                          student_arch_.blocks[i].in_shape))
        br.transform.emplace_back(ld);
      for (int b = i; b < n; ++b) {
        br.blocks.emplace_back();
        for (const auto& ld : student_arch_.blocks[b].layers)
          br.blocks.back().emplace_back(ld);
      }
      const int feat = student_arch_.blocks.back().out_shape.c;
      br.head_w = Tensor<T>::zeros({feat, student_arch_.classes}, true);
      br.head_b = Tensor<T>::zeros({student_arch_.classes}, true);
      branches_.push_back(std::move(br));
    }
  }

  BlockNet<T>& teacher() { return teacher_; }
  const ArchSpec& student_arch() const { return student_arch_; }
  std::vector<Branch>& branches() { return branches_; }
  int num_branches() const { return int(branches_.size()); }

  // Teacher trunk draws from `seed` exactly as a standalone net would;
  // transforms and branches draw from independent derived streams.
  void init_params(uint64_t seed) {
    teacher_.init_params(seed);
    for (size_t i = 0; i < branches_.size(); ++i)
      init_params_he(branch_params_of(int(i)), derive_seed(seed, 0xB5A0 + i));
  }

  SftnOutputs<T> forward(const Tensor<T>& x, bool training, bool with_branches,
                         const std::vector<int>& active) {
    SftnOutputs<T> out;
    auto taps = teacher_.forward_with_taps(x, training);
    out.teacher_logits = taps.logits;
    out.teacher_features = taps.features;
    if (!with_branches) return out;
    for (int id : active) {
      if (id < 1 || id > num_branches())
        throw ConfigError("sftn: branch id " + std::to_string(id) + " outside [1," +
                          std::to_string(num_branches()) + "] (the last block has no branch)");
      Branch& br = branches_[id - 1];
      Tensor<T> h = taps.features[br.id - 1];
      for (auto& l : br.transform) h = l.forward(h, training);
      for (auto& blk : br.blocks)
        for (auto& l : blk) h = l.forward(h, training);
      Tensor<T> pooled = ops::global_avgpool(h);
      out.branch_ids.push_back(id);
      out.branch_logits.push_back(ops::add_bias(ops::matmul(pooled, br.head_w), br.head_b));
    }
    return out;
  }

  std::vector<ParamRef<T>> trunk_params() { return teacher_.params(); }

  std::vector<ParamRef<T>> branch_params() {
    std::vector<ParamRef<T>> out;
    for (size_t i = 0; i < branches_.size(); ++i)
      for (auto& p : branch_params_of(int(i))) out.push_back(p);
    return out;
  }

  std::vector<ParamRef<T>> params() {
    auto out = trunk_params();
    for (auto& p : branch_params()) out.push_back(p);
    return out;
  }

  void set_branches_requires_grad(bool rg) {
    for (auto& p : branch_params()) p.tensor->set_requires_grad(rg);
  }

 private:
  std::vector<ParamRef<T>> branch_params_of(int i) {
    std::vector<ParamRef<T>> out;
    Branch& br = branches_[i];
    const std::string pre = "branch" + std::to_string(br.id);
    int li = 0;
    for (auto& l : br.transform) l.collect(out, pre + ".transform.layer" + std::to_string(li++));
    for (size_t b = 0; b < br.blocks.size(); ++b) {
      li = 0;
      for (auto& l : br.blocks[b])
        l.collect(out, pre + ".block" + std::to_string(br.id + 1 + b) + ".layer" +
                           std::to_string(li++));
    }
    out.push_back({&br.head_w, true, pre + ".head.weight"});
    out.push_back({&br.head_b, false, pre + ".head.bias"});
    return out;
  }

  BlockNet<T> teacher_;
  ArchSpec student_arch_;
  std::vector<Branch> branches_;
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// softmax(logits / tau) as probabilities, computed in log space.
template <class T>
Tensor<T> softmax_tempered(const Tensor<T>& logits, T tau) {
  if (!(tau > T(0))) throw ConfigError("softmax_tempered: tau must be positive");
  return ops::exp(ops::log_softmax(ops::scale(logits, T(1) / tau)));
}

// Batch-mean KL(softmax(p/tau) || softmax(q/tau)); both sides stay live in
// the graph.
template <class T>
Tensor<T> kl_tempered(const Tensor<T>& p_logits, const Tensor<T>& q_logits, T tau) {
  if (!(tau > T(0))) throw ConfigError("kl_tempered: tau must be positive");
  const int n = p_logits.dim(0);
  auto lp = ops::log_softmax(ops::scale(p_logits, T(1) / tau));
  auto lq = ops::log_softmax(ops::scale(q_logits, T(1) / tau));
  auto kl = ops::sum(ops::mul(ops::exp(lp), ops::sub(lp, lq)));
  return ops::scale(kl, T(1) / T(n));
}

// CE against integer labels at temperature 1, consuming log-probabilities.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  return ops::nll_loss(ops::log_softmax(logits), labels);
}

template <class T>
struct SftnLossParts {
  Tensor<T> total;
  double teacher_ce = 0, branch_kl = 0, branch_ce = 0;
};

// Assembles the three-term objective from live logits. Terms with zero
// weight are omitted from the graph entirely, so the zero-weight reduction
// is the standard CE objective, not an approximation of it.
template <class T>
SftnLossParts<T> sftn_loss(const Tensor<T>& teacher_logits,
                           const std::vector<Tensor<T>>& branch_logits,
                           const std::vector<int>& labels, const LossConfig& cfg) {
  if (labels.empty()) throw ConfigError("sftn_loss: empty batch");
  SftnLossParts<T> parts;
  auto l_t = cross_entropy(teacher_logits, labels);
  parts.teacher_ce = double(l_t.item());
  Tensor<T> total = cfg.lambda_t == 1.0 ? l_t : ops::scale(l_t, T(cfg.lambda_t));

  const bool want_kl = cfg.lambda_r_kl != 0 && !branch_logits.empty();
  const bool want_ce = cfg.lambda_r_ce != 0 && !branch_logits.empty();
  const T inv_b = branch_logits.empty() ? T(0) : T(1) / T(branch_logits.size());

  if (want_kl) {
    Tensor<T> acc;
    for (const auto& bl : branch_logits) {
      auto kl = kl_tempered(bl, teacher_logits, T(cfg.tau_tilde));  // branch first (Eq. 5)
      acc = acc.defined() ? ops::add(acc, kl) : kl;
    }
    acc = ops::scale(acc, inv_b);
    parts.branch_kl = double(acc.item());
    total = ops::add(total, ops::scale(acc, T(cfg.lambda_r_kl)));
  }
  if (want_ce) {
    Tensor<T> acc;
    for (const auto& bl : branch_logits) {
      auto ce = cross_entropy(bl, labels);
      acc = acc.defined() ? ops::add(acc, ce) : ce;
    }
    acc = ops::scale(acc, inv_b);
    parts.branch_ce = double(acc.item());
    total = ops::add(total, ops::scale(acc, T(cfg.lambda_r_ce)));
  }
  parts.total = total;
  return parts;
}

}  // namespace sftn
