// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "sftn/data.hpp"
#include "sftn/distill.hpp"
#include "sftn/metrics.hpp"
#include "sftn/sftn.hpp"
#include "sftn/trainer.hpp"

// Training pipelines (stage 1 teacher training in standard / student-aware /
// fine-tune flavors, stage 2 distillation). A non-finite loss aborts with the
// offending epoch/batch. The minibatch order, parameter init and update
// sequence are pure functions of (dataset, config, seed), so reruns reproduce
// checkpoints bitwise for a fixed kernel backend and thread count.

namespace sftn {

enum class TeacherMode { Standard, Sftn, SftnFt };

inline const char* teacher_mode_name(TeacherMode m) {
  switch (m) {
    case TeacherMode::Standard: return "standard";
    case TeacherMode::Sftn: return "sftn";
    case TeacherMode::SftnFt: return "sftn-ft";
  }
  return "?";
}

inline TeacherMode parse_teacher_mode(const std::string& s) {
  if (s == "standard") return TeacherMode::Standard;
  if (s == "sftn") return TeacherMode::Sftn;
  if (s == "sftn-ft") return TeacherMode::SftnFt;
  throw ConfigError("unknown teacher_mode '" + s + "' (expected standard|sftn|sftn-ft)");
}

struct EpochLog {
  int epoch = 0;
  double lr = 0;
  double loss = 0;        // mean total loss over batches
  double teacher_ce = 0;  // stage-1 components
  double branch_kl = 0;
  double branch_ce = 0;
  double hint = 0;        // stage-2 feature-loss component
  double test_acc = 0;
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  double wall_seconds = 0;
};

// Stage 1, standard objective (plain CE on the trunk).
TrainResult train_standard_teacher(BlockNet<float>& net, const Dataset& ds,
                                   const SgdConfig& sgd, uint64_t seed);

// Stage 1, student-aware objective. The trunk in `model` is the stage-2
// artifact; branches and transforms are discarded by saving the trunk alone.
// When both branch weights are zero (or no branches are active) the branch
// paths are skipped entirely and the run is the standard objective.
TrainResult train_sftn(SftnModel<float>& model, const Dataset& ds, const SgdConfig& sgd,
                       const LossConfig& loss, uint64_t seed);

// Stage 1 from a pretrained trunk: phase 1 trains branches only against a
// bitwise-frozen trunk (eval mode, running stats inert); phase 2 fine-tunes
// everything under the full objective.
TrainResult finetune_sftn(SftnModel<float>& model, const Dataset& ds, const SgdConfig& sgd,
                          const LossConfig& loss, int epochs_branch_only, int epochs_joint,
                          uint64_t seed);

// Stage 2: distills a frozen teacher into `student` with KD / FitNets / SP.
// Teacher outputs are precomputed in eval mode once (the teacher never
// changes) and enter the loss as constants.
TrainResult distill_train(BlockNet<float>& student, BlockNet<float>& teacher,
                          const Dataset& ds, const DistillConfig& dcfg, const SgdConfig& sgd,
                          uint64_t seed);

}  // namespace sftn
