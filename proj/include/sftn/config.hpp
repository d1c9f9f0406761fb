// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "sftn/data.hpp"
#include "sftn/distill.hpp"
#include "sftn/train.hpp"

// JSON experiment configs. Parsing is strict: unknown keys are errors with
// their field path, so a typo cannot silently skew a sweep.

namespace sftn {

struct DatasetSpec {
  std::string kind = "synth-vision";  // synth-vision | sfds | idx
  std::string task = "primary";       // synth-vision: primary | transfer
  int n = 1200;
  uint64_t seed = 7;
  std::string path;         // sfds file or idx images file
  std::string labels_path;  // idx labels file

  Dataset build() const;
  std::string describe() const;
};

struct FinetuneConfig {
  int epochs_branch_only = 30;
  int epochs_joint = 30;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::string teacher_arch = "teacher-s3";
  std::string student_arch = "student-s3";
  TeacherMode teacher_mode = TeacherMode::Sftn;
  DatasetSpec dataset;
  LossConfig loss;
  DistillConfig distill;
  SgdConfig sgd;
  SgdConfig distill_sgd;  // defaults to `sgd` unless given
  FinetuneConfig finetune;
  std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};
  std::string out_dir = "runs/experiment";
  std::string teacher_ckpt;  // optional: distill-only / sftn-ft input
  int threads = 1;
  uint64_t config_hash = 0;  // over the canonical parsed form

  void validate() const;
};

ExperimentConfig load_config(const std::string& path);
ExperimentConfig parse_config_text(const std::string& json_text, const std::string& origin);

// Relative out_dirs resolve under $SFTN_OUT_ROOT when it is set.
std::string resolve_out_dir(const std::string& out_dir);

}  // namespace sftn
