// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "sftn/data.hpp"
#include "sftn/nn.hpp"

// Analysis toolkit: accuracy, teacher-student KL, linear CKA, top-1
// agreement, prediction entropy and linear-probe transfer. All metrics are
// computed in double from log-probabilities (natural log), read-only over
// the models, in eval mode.

namespace sftn {

struct SimilarityReport {
  double mean_kl = 0;        // mean per-sample KL(q_T || q_S), nats
  double cka = 0;            // linear CKA over pooled last-block features
  double top1_agreement = 0;
  double teacher_entropy = 0;  // nats
  double student_entropy = 0;
};

// [n,K] row-major log-probabilities at temperature 1.
std::vector<double> eval_log_probs(BlockNet<float>& net, const Dataset& ds,
                                   const std::vector<int>& idx);

// Pooled last-block features (the head input), n x C row-major.
std::vector<double> eval_pooled_features(BlockNet<float>& net, const Dataset& ds,
                                         const std::vector<int>& idx, int* feature_dim);

double accuracy(BlockNet<float>& net, const Dataset& ds, const std::vector<int>& idx);

// Core row-matrix forms (used by the oracles and the net wrappers alike).
double mean_kl_rows(const std::vector<double>& logp_p, const std::vector<double>& logp_q,
                    int n, int k);
double mean_entropy_rows(const std::vector<double>& logp, int n, int k);

// CKA = ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F * ||Yc^T Yc||_F) on column-centered
// matrices X (n x p) and Y (n x q). Throws on zero-variance input.
double cka_linear(const std::vector<double>& X, int n, int p, const std::vector<double>& Y,
                  int q);

double teacher_student_kl(BlockNet<float>& teacher, BlockNet<float>& student,
                          const Dataset& ds, const std::vector<int>& idx);
double top1_agreement(BlockNet<float>& a, BlockNet<float>& b, const Dataset& ds,
                      const std::vector<int>& idx);
double prediction_entropy(BlockNet<float>& net, const Dataset& ds,
                          const std::vector<int>& idx);

SimilarityReport similarity_report(BlockNet<float>& teacher, BlockNet<float>& student,
                                   const Dataset& ds, const std::vector<int>& idx);

// Trains a fresh linear classifier on frozen pooled features of `extractor`
// over target.train_idx and returns accuracy on target.test_idx. The
// extractor is bitwise untouched (verified cheaply by hash in the tests).
struct ProbeResult {
  double accuracy = 0;
  uint64_t extractor_hash = 0;  // state hash after probing
};
ProbeResult linear_probe_transfer(BlockNet<float>& extractor, const Dataset& target,
                                  int probe_epochs, uint64_t seed, double lr = 0.1,
                                  int batch_size = 64);

}  // namespace sftn
