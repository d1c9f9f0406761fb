// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "sftn/config.hpp"
#include "sftn/report.hpp"

// Pipeline orchestration behind the CLI subcommands. Each command writes its
// artifacts under the (resolved) output directory and returns the report.
// Sweeps tolerate per-point aborts: completed rows are kept and the failure
// count is reported.

namespace sftn {

// Stage 1 for every configured seed. Writes trunk-only checkpoints, sidecar
// JSON and a report under <out>/teacher_<mode>/.
RunReport cmd_train_teacher(const ExperimentConfig& cfg);

// Stage 2 for every configured seed. Teachers come from cfg.teacher_ckpt (one
// file for all seeds) or from the per-seed stage-1 artifacts in out_dir.
RunReport cmd_distill(const ExperimentConfig& cfg);

struct SweepRow {
  std::string value;
  uint64_t seed = 0;
  double teacher_acc = 0;
  double student_acc = 0;
  bool ok = false;
  std::string error;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  int failures = 0;
  std::string csv_path;
};

// One full SFTN-teacher train + KD distill per (value, seed); rows are
// appended to sweep.csv as they complete.
SweepResult cmd_sweep(const ExperimentConfig& cfg, const std::string& axis,
                      const std::vector<std::string>& values);

struct ComparisonRow {
  std::string method, student_arch, dataset_id;
  bool has_standard = false, has_sftn = false;
  double standard_acc = 0, standard_std = 0;
  double sftn_acc = 0, sftn_std = 0;
  double delta = 0;  // SFTN - standard, valid when both arms exist
  std::optional<SimilarityReport> standard_sim, sftn_sim;
};

// Pairs standard/SFTN distill reports sharing (dataset, student arch,
// method); unpaired runs are listed with a blank delta, never failed.
std::vector<ComparisonRow> cmd_report(const std::vector<std::string>& run_dirs,
                                      const std::string& out_dir);

struct EvalResult {
  double accuracy = 0;
  double entropy = 0;
  uint64_t checkpoint_hash = 0;
};
EvalResult cmd_eval(const ExperimentConfig& cfg, const std::string& ckpt_path);

ProbeResult cmd_probe(const ExperimentConfig& cfg, const std::string& ckpt_path,
                      int probe_epochs);

}  // namespace sftn
