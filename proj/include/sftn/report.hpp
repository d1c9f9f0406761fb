// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sftn/metrics.hpp"
#include "sftn/train.hpp"

// Run reports: schema-versioned JSON plus flat CSVs with fixed columns.
// Every report embeds the config hash and dataset hash. The report hash is
// computed over the canonical JSON minus volatile provenance (wall times), so
// deterministic reruns produce identical report hashes.

namespace sftn {

inline constexpr int kReportSchemaVersion = 1;

struct SeedRecord {
  uint64_t seed = 0;
  double final_acc = 0;        // teacher acc (stage 1) or student acc (stage 2)
  double teacher_acc = 0;      // distill runs: the frozen teacher's accuracy
  uint64_t checkpoint_hash = 0;
  std::string checkpoint_path;
  uint64_t teacher_checkpoint_hash = 0;  // distill runs
  std::vector<EpochLog> epochs;
  std::optional<SimilarityReport> similarity;
  double wall_seconds = 0;
};

struct RunReport {
  int schema_version = kReportSchemaVersion;
  std::string kind;  // train-teacher | distill | sweep-point
  std::string experiment;
  std::string teacher_mode;
  std::string method;  // distillation method, when applicable
  std::string teacher_arch, student_arch;
  std::string dataset_id;
  uint64_t dataset_hash = 0;
  uint64_t config_hash = 0;
  std::string kernel_backend;
  int threads = 1;
  std::vector<SeedRecord> seeds;

  double mean_final_acc() const;
  double std_final_acc() const;
};

// Writes dir/report.json, dir/report.csv and per-seed epoch CSVs; returns the
// report hash.
uint64_t write_report(const RunReport& rep, const std::string& dir);
RunReport read_report(const std::string& dir);

uint64_t report_hash(const RunReport& rep);

// Doubles formatted for exact round-trip ("%.17g").
std::string fmt_double(double v);

void ensure_dir(const std::string& dir);

// Sidecar JSON next to a teacher checkpoint: loss config + provenance.
void write_teacher_sidecar(const std::string& path, const LossConfig& loss,
                           const std::string& teacher_mode, uint64_t seed, int epochs,
                           const std::string& dataset_id, uint64_t config_hash);

}  // namespace sftn
