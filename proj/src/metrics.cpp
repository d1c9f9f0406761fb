// SPDX-License-Identifier: Apache-2.0
#include "sftn/metrics.hpp"

#include <cmath>

#include "sftn/sftn.hpp"
#include "sftn/trainer.hpp"

namespace sftn {

namespace {

constexpr int kEvalBatch = 128;

void require_nonempty(const std::vector<int>& idx, const char* who) {
  if (idx.empty()) throw ConfigError(std::string(who) + ": empty dataset");
}

// log-softmax of a float logit row into double, max-subtracted
void row_log_softmax(const float* row, int k, double* out) {
  double mx = row[0];
  for (int j = 1; j < k; ++j) mx = std::max(mx, double(row[j]));
  double se = 0;
  for (int j = 0; j < k; ++j) se += std::exp(double(row[j]) - mx);
  const double lse = mx + std::log(se);
  for (int j = 0; j < k; ++j) out[j] = double(row[j]) - lse;
}

}  // namespace

std::vector<double> eval_log_probs(BlockNet<float>& net, const Dataset& ds,
                                   const std::vector<int>& idx) {
  require_nonempty(idx, "eval_log_probs");
  const int k = net.classes();
  std::vector<double> out(idx.size() * size_t(k));
  for (size_t at = 0; at < idx.size(); at += kEvalBatch) {
    const size_t end = std::min(idx.size(), at + kEvalBatch);
    std::vector<int> chunk(idx.begin() + at, idx.begin() + end);
    auto logits = net.logits(make_batch<float>(ds, chunk), /*training=*/false);
    for (size_t i = 0; i < chunk.size(); ++i)
      row_log_softmax(logits.data().data() + int64_t(i) * k, k,
                      out.data() + (at + i) * size_t(k));
  }
  return out;
}

std::vector<double> eval_pooled_features(BlockNet<float>& net, const Dataset& ds,
                                         const std::vector<int>& idx, int* feature_dim) {
  require_nonempty(idx, "eval_pooled_features");
  const int c = net.arch().blocks.back().out_shape.c;
  if (feature_dim) *feature_dim = c;
  std::vector<double> out(idx.size() * size_t(c));
  for (size_t at = 0; at < idx.size(); at += kEvalBatch) {
    const size_t end = std::min(idx.size(), at + kEvalBatch);
    std::vector<int> chunk(idx.begin() + at, idx.begin() + end);
    auto taps = net.forward_with_taps(make_batch<float>(ds, chunk), /*training=*/false,
                                      /*want_taps=*/false);
    for (size_t i = 0; i < chunk.size(); ++i)
      for (int j = 0; j < c; ++j)
        out[(at + i) * size_t(c) + j] = double(taps.pooled.data()[int64_t(i) * c + j]);
  }
  return out;
}

double accuracy(BlockNet<float>& net, const Dataset& ds, const std::vector<int>& idx) {
  require_nonempty(idx, "accuracy");
  int64_t hits = 0;
  for (size_t at = 0; at < idx.size(); at += kEvalBatch) {
    const size_t end = std::min(idx.size(), at + kEvalBatch);
    std::vector<int> chunk(idx.begin() + at, idx.begin() + end);
    auto logits = net.logits(make_batch<float>(ds, chunk), /*training=*/false);
    auto pred = ops::argmax_rows(logits);
    for (size_t i = 0; i < chunk.size(); ++i)
      if (pred[i] == ds.labels[chunk[i]]) ++hits;
  }
  return double(hits) / double(idx.size());
}

double mean_kl_rows(const std::vector<double>& logp_p, const std::vector<double>& logp_q,
                    int n, int k) {
  double total = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < k; ++j) {
      const double lp = logp_p[int64_t(i) * k + j];
      const double p = std::exp(lp);
      if (p > 0) total += p * (lp - logp_q[int64_t(i) * k + j]);
    }
  }
  return total / n;
}

double mean_entropy_rows(const std::vector<double>& logp, int n, int k) {
  double total = 0;
  for (int64_t i = 0; i < int64_t(n) * k; ++i) {
    const double p = std::exp(logp[i]);
    if (p > 0) total -= p * logp[i];
  }
  return total / n;
}

double cka_linear(const std::vector<double>& X, int n, int p, const std::vector<double>& Y,
                  int q) {
  if (n < 3) throw std::domain_error("cka_linear: need n >= 3 rows");
  if (int64_t(X.size()) != int64_t(n) * p || int64_t(Y.size()) != int64_t(n) * q)
    throw ShapeError("cka_linear: matrix sizes do not match n*p / n*q");
  auto center = [n](std::vector<double> m, int cols) {
    for (int j = 0; j < cols; ++j) {
      double mu = 0;
      for (int i = 0; i < n; ++i) mu += m[int64_t(i) * cols + j];
      mu /= n;
      for (int i = 0; i < n; ++i) m[int64_t(i) * cols + j] -= mu;
    }
    return m;
  };
  const auto Xc = center(X, p);
  const auto Yc = center(Y, q);

  // ||A^T B||_F^2 with A (n x a), B (n x b)
  auto cross_fro2 = [n](const std::vector<double>& A, int a, const std::vector<double>& B,
                        int b) {
    double total = 0;
    for (int i = 0; i < a; ++i) {
      for (int j = 0; j < b; ++j) {
        double s = 0;
        for (int r = 0; r < n; ++r) s += A[int64_t(r) * a + i] * B[int64_t(r) * b + j];
        total += s * s;
      }
    }
    return total;
  };
  const double xx = cross_fro2(Xc, p, Xc, p);
  const double yy = cross_fro2(Yc, q, Yc, q);
  if (xx <= 0 || yy <= 0) throw std::domain_error("cka_linear: zero-variance input");
  return cross_fro2(Yc, q, Xc, p) / (std::sqrt(xx) * std::sqrt(yy));
}

double teacher_student_kl(BlockNet<float>& teacher, BlockNet<float>& student,
                          const Dataset& ds, const std::vector<int>& idx) {
  const int k = teacher.classes();
  auto lp_t = eval_log_probs(teacher, ds, idx);
  auto lp_s = eval_log_probs(student, ds, idx);
  return mean_kl_rows(lp_t, lp_s, int(idx.size()), k);
}

double top1_agreement(BlockNet<float>& a, BlockNet<float>& b, const Dataset& ds,
                      const std::vector<int>& idx) {
  require_nonempty(idx, "top1_agreement");
  const int k = a.classes();
  auto lp_a = eval_log_probs(a, ds, idx);
  auto lp_b = eval_log_probs(b, ds, idx);
  int64_t same = 0;
  for (size_t i = 0; i < idx.size(); ++i) {
    int pa = 0, pb = 0;
    for (int j = 1; j < k; ++j) {
      if (lp_a[i * size_t(k) + j] > lp_a[i * size_t(k) + pa]) pa = j;
      if (lp_b[i * size_t(k) + j] > lp_b[i * size_t(k) + pb]) pb = j;
    }
    if (pa == pb) ++same;
  }
  return double(same) / double(idx.size());
}

double prediction_entropy(BlockNet<float>& net, const Dataset& ds,
                          const std::vector<int>& idx) {
  auto lp = eval_log_probs(net, ds, idx);
  return mean_entropy_rows(lp, int(idx.size()), net.classes());
}

SimilarityReport similarity_report(BlockNet<float>& teacher, BlockNet<float>& student,
                                   const Dataset& ds, const std::vector<int>& idx) {
  require_nonempty(idx, "similarity_report");
  const int k = teacher.classes();
  const int n = int(idx.size());
  auto lp_t = eval_log_probs(teacher, ds, idx);
  auto lp_s = eval_log_probs(student, ds, idx);
  SimilarityReport rep;
  rep.mean_kl = mean_kl_rows(lp_t, lp_s, n, k);
  rep.teacher_entropy = mean_entropy_rows(lp_t, n, k);
  rep.student_entropy = mean_entropy_rows(lp_s, n, k);
  int64_t same = 0;
  for (int i = 0; i < n; ++i) {
    int pt = 0, ps = 0;
    for (int j = 1; j < k; ++j) {
      if (lp_t[int64_t(i) * k + j] > lp_t[int64_t(i) * k + pt]) pt = j;
      if (lp_s[int64_t(i) * k + j] > lp_s[int64_t(i) * k + ps]) ps = j;
    }
    if (pt == ps) ++same;
  }
  rep.top1_agreement = double(same) / n;
  int pt_dim = 0, ps_dim = 0;
  auto ft = eval_pooled_features(teacher, ds, idx, &pt_dim);
  auto fs = eval_pooled_features(student, ds, idx, &ps_dim);
  rep.cka = cka_linear(ft, n, pt_dim, fs, ps_dim);
  return rep;
}

ProbeResult linear_probe_transfer(BlockNet<float>& extractor, const Dataset& target,
                                  int probe_epochs, uint64_t seed, double lr,
                                  int batch_size) {
  if (probe_epochs < 0) throw ConfigError("linear_probe_transfer: probe_epochs must be >= 0");
  int c = 0;
  auto train_feats = eval_pooled_features(extractor, target, target.train_idx, &c);
  auto test_feats = eval_pooled_features(extractor, target, target.test_idx, &c);
  const int k = target.classes;

  // Fresh zero-initialized probe head regardless of source class count (the
  // objective is convex in the head, so symmetry breaking is not needed).
  auto w = Tensor<float>::zeros({c, k}, true);
  auto b = Tensor<float>::zeros({k}, true);
  std::vector<ParamRef<float>> params = {{&w, true, "probe.weight"}, {&b, false, "probe.bias"}};

  SgdConfig cfg;
  cfg.lr = lr;
  cfg.momentum = 0.9;
  cfg.weight_decay = 0;
  cfg.epochs = probe_epochs;
  cfg.milestones.clear();
  cfg.batch_size = batch_size;
  Sgd<float> opt(params, cfg);

  auto batch_of = [&](const std::vector<double>& feats, const std::vector<int>& rows) {
    std::vector<float> v(rows.size() * size_t(c));
    for (size_t i = 0; i < rows.size(); ++i)
      for (int j = 0; j < c; ++j) v[i * size_t(c) + j] = float(feats[int64_t(rows[i]) * c + j]);
    return Tensor<float>::from({int(rows.size()), c}, std::move(v));
  };

  std::vector<int> positions(target.train_idx.size());
  for (size_t i = 0; i < positions.size(); ++i) positions[i] = int(i);
  for (int epoch = 0; epoch < probe_epochs; ++epoch) {
    for (const auto& rows : batches(positions, batch_size, seed, epoch)) {
      std::vector<int> labels(rows.size());
      for (size_t i = 0; i < rows.size(); ++i)
        labels[i] = target.labels[target.train_idx[rows[i]]];
      auto logits = ops::add_bias(ops::matmul(batch_of(train_feats, rows), w), b);
      auto loss = cross_entropy(logits, labels);
      opt.zero_grad();
      backward(loss);
      opt.step(float(lr));
    }
  }

  // Test accuracy with the trained head.
  std::vector<int> all(target.test_idx.size());
  for (size_t i = 0; i < all.size(); ++i) all[i] = int(i);
  auto logits = ops::add_bias(ops::matmul(batch_of(test_feats, all), w), b);
  auto pred = ops::argmax_rows(logits);
  int64_t hits = 0;
  for (size_t i = 0; i < all.size(); ++i)
    if (pred[i] == target.labels[target.test_idx[i]]) ++hits;

  ProbeResult res;
  res.accuracy = double(hits) / double(all.size());
  res.extractor_hash = extractor.state_hash();
  return res;
}

}  // namespace sftn
