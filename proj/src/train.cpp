// SPDX-License-Identifier: Apache-2.0
#include "sftn/train.hpp"

#include <chrono>
#include <cmath>

namespace sftn {

namespace {

double now_seconds() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

void check_finite(const Tensor<float>& loss, int epoch, size_t batch) {
  const float v = loss.item();
  if (!std::isfinite(v))
    throw DivergenceError("non-finite loss " + std::to_string(v) + " at epoch " +
                          std::to_string(epoch) + ", batch " + std::to_string(batch));
}

// Shared stage-1 epoch driver. `forward` yields (teacher_logits,
// branch_logits) for a batch; the loss is Eq.-3-shaped via sftn_loss.
template <class Forward>
void run_stage1_epochs(Forward&& forward, Sgd<float>& opt, BlockNet<float>& eval_net,
                       const Dataset& ds, const SgdConfig& sgd, const LossConfig& loss,
                       uint64_t seed, int first_epoch, int epochs, TrainResult& out) {
  for (int e = first_epoch; e < first_epoch + epochs; ++e) {
    EpochLog log;
    log.epoch = e;
    log.lr = lr_at(e, sgd);
    const auto batch_list = batches(ds.train_idx, sgd.batch_size, seed, e);
    size_t bi = 0;
    for (const auto& idx : batch_list) {
      auto x = make_batch<float>(ds, idx);
      auto y = gather_labels(ds, idx);
      SftnOutputs<float> outs = forward(x);
      auto parts = sftn_loss(outs.teacher_logits, outs.branch_logits, y, loss);
      check_finite(parts.total, e, bi);
      opt.zero_grad();
      backward(parts.total);
      opt.step(float(log.lr));
      log.loss += double(parts.total.item());
      log.teacher_ce += parts.teacher_ce;
      log.branch_kl += parts.branch_kl;
      log.branch_ce += parts.branch_ce;
      ++bi;
    }
    const double nb = double(batch_list.size());
    log.loss /= nb;
    log.teacher_ce /= nb;
    log.branch_kl /= nb;
    log.branch_ce /= nb;
    log.test_acc = accuracy(eval_net, ds, ds.test_idx);
    out.epochs.push_back(log);
  }
}

}  // namespace

TrainResult train_standard_teacher(BlockNet<float>& net, const Dataset& ds,
                                   const SgdConfig& sgd, uint64_t seed) {
  sgd.validate();
  if (ds.train_idx.empty()) throw ConfigError("train_standard_teacher: empty dataset");
  const double t0 = now_seconds();
  TrainResult out;
  LossConfig plain;  // only lambda_t survives with no branches
  Sgd<float> opt(net.params(), sgd);
  run_stage1_epochs(
      [&](const Tensor<float>& x) {
        SftnOutputs<float> o;
        o.teacher_logits = net.forward_with_taps(x, /*training=*/true, /*want_taps=*/false).logits;
        return o;
      },
      opt, net, ds, sgd, plain, seed, 0, sgd.epochs, out);
  out.wall_seconds = now_seconds() - t0;
  return out;
}

TrainResult train_sftn(SftnModel<float>& model, const Dataset& ds, const SgdConfig& sgd,
                       const LossConfig& loss, uint64_t seed) {
  sgd.validate();
  loss.validate(model.num_branches());
  if (ds.train_idx.empty()) throw ConfigError("train_sftn: empty dataset");
  const double t0 = now_seconds();
  TrainResult out;

  const auto active = loss.active_branches(model.num_branches());
  const bool with_branches =
      (loss.lambda_r_kl != 0 || loss.lambda_r_ce != 0) && !active.empty();
  // With inactive branches the parameter set degenerates to the trunk, which
  // makes the zero-weight run the standard trajectory, bit for bit.
  Sgd<float> opt(with_branches ? model.params() : model.trunk_params(), sgd);
  run_stage1_epochs(
      [&](const Tensor<float>& x) {
        return model.forward(x, /*training=*/true, with_branches, active);
      },
      opt, model.teacher(), ds, sgd, loss, seed, 0, sgd.epochs, out);
  out.wall_seconds = now_seconds() - t0;
  return out;
}

TrainResult finetune_sftn(SftnModel<float>& model, const Dataset& ds, const SgdConfig& sgd,
                          const LossConfig& loss, int epochs_branch_only, int epochs_joint,
                          uint64_t seed) {
  if (epochs_branch_only < 0 || epochs_joint < 0)
    throw ConfigError("finetune_sftn: epoch counts must be >= 0");
  SgdConfig combined = sgd;
  combined.epochs = epochs_branch_only + epochs_joint;
  combined.milestones.clear();
  for (int m : sgd.milestones)
    if (m < combined.epochs) combined.milestones.push_back(m);
  combined.validate();
  loss.validate(model.num_branches());
  if (ds.train_idx.empty()) throw ConfigError("finetune_sftn: empty dataset");

  const double t0 = now_seconds();
  TrainResult out;
  const auto active = loss.active_branches(model.num_branches());

  // Phase 1: trunk bitwise frozen (no grads, eval-mode forward so running
  // stats stay inert); only branches and transforms learn.
  model.teacher().set_requires_grad(false);
  {
    Sgd<float> opt(model.branch_params(), combined);
    run_stage1_epochs(
        [&](const Tensor<float>& x) {
          SftnOutputs<float> o;
          auto taps = model.teacher().forward_with_taps(x, /*training=*/false);
          o.teacher_logits = taps.logits;
          o.teacher_features = taps.features;
          for (int id : active) {
            auto& br = model.branches()[id - 1];
            Tensor<float> h = taps.features[br.id - 1];
            for (auto& l : br.transform) h = l.forward(h, /*training=*/true);
            for (auto& blk : br.blocks)
              for (auto& l : blk) h = l.forward(h, /*training=*/true);
            o.branch_ids.push_back(id);
            o.branch_logits.push_back(
                ops::add_bias(ops::matmul(ops::global_avgpool(h), br.head_w), br.head_b));
          }
          return o;
        },
        opt, model.teacher(), ds, combined, loss, seed, 0, epochs_branch_only, out);
  }

  // Phase 2: joint fine-tuning of everything under the full objective.
  model.teacher().set_requires_grad(true);
  {
    Sgd<float> opt(model.params(), combined);
    run_stage1_epochs(
        [&](const Tensor<float>& x) {
          return model.forward(x, /*training=*/true, /*with_branches=*/true, active);
        },
        opt, model.teacher(), ds, combined, loss, seed, epochs_branch_only, epochs_joint,
        out);
  }
  out.wall_seconds = now_seconds() - t0;
  return out;
}

TrainResult distill_train(BlockNet<float>& student, BlockNet<float>& teacher,
                          const Dataset& ds, const DistillConfig& dcfg, const SgdConfig& sgd,
                          uint64_t seed) {
  sgd.validate();
  dcfg.validate();
  if (ds.train_idx.empty()) throw ConfigError("distill_train: empty dataset");
  if (teacher.classes() != student.classes())
    throw ConfigError("distill_train: class count mismatch teacher " +
                      std::to_string(teacher.classes()) + " vs student " +
                      std::to_string(student.classes()));
  if (!(teacher.arch().input == student.arch().input))
    throw ConfigError("distill_train: input geometry mismatch teacher " +
                      teacher.arch().input.str() + " vs student " +
                      student.arch().input.str());

  const double t0 = now_seconds();
  teacher.set_requires_grad(false);
  const int k = teacher.classes();
  const bool feature_method = dcfg.method != DistillMethod::KD;
  const auto hints = feature_method ? dcfg.active_hints(student.num_blocks()) : std::vector<int>{};

  // The teacher is frozen, so its logits (and hinted features) per training
  // sample are computed once in eval mode and reused every epoch.
  const auto& tr = ds.train_idx;
  std::vector<float> t_logits(tr.size() * size_t(k));
  std::vector<std::vector<float>> t_feats(hints.size());
  std::vector<Shape3> t_feat_shape(hints.size());
  for (size_t h = 0; h < hints.size(); ++h) {
    t_feat_shape[h] = teacher.arch().blocks[hints[h] - 1].out_shape;
    t_feats[h].resize(tr.size() * size_t(t_feat_shape[h].numel()));
  }
  constexpr int kChunk = 128;
  for (size_t at = 0; at < tr.size(); at += kChunk) {
    const size_t end = std::min(tr.size(), at + kChunk);
    std::vector<int> chunk(tr.begin() + at, tr.begin() + end);
    auto taps = teacher.forward_with_taps(make_batch<float>(ds, chunk), /*training=*/false,
                                          feature_method);
    if (!feature_method) {
      auto logits = taps.logits;
      std::copy(logits.data().begin(), logits.data().end(),
                t_logits.begin() + at * size_t(k));
    } else {
      std::copy(taps.logits.data().begin(), taps.logits.data().end(),
                t_logits.begin() + at * size_t(k));
      for (size_t h = 0; h < hints.size(); ++h) {
        const auto& f = taps.features[hints[h] - 1];
        std::copy(f.data().begin(), f.data().end(),
                  t_feats[h].begin() + at * size_t(t_feat_shape[h].numel()));
      }
    }
  }

  // FitNets regressors: learned 1x1 convs from student to teacher channels.
  std::vector<Layer<float>> regressors;
  std::vector<ParamRef<float>> params = student.params();
  if (dcfg.method == DistillMethod::FitNets) {
    for (size_t h = 0; h < hints.size(); ++h) {
      const auto s_shape = student.arch().blocks[hints[h] - 1].out_shape;
      const auto t_shape = t_feat_shape[h];
      if (s_shape.h != t_shape.h || s_shape.w != t_shape.w)
        throw ConfigError("distill_train: FitNets hint block " + std::to_string(hints[h]) +
                          " spatial mismatch student " + s_shape.str() + " vs teacher " +
                          t_shape.str());
      regressors.emplace_back(LayerDesc::conv(s_shape.c, t_shape.c, 1, 1, 0));
    }
    std::vector<ParamRef<float>> rparams;
    int ri = 0;
    for (auto& r : regressors) r.collect(rparams, "regressor" + std::to_string(ri++));
    init_params_he(rparams, derive_seed(seed, 0xF17));
    for (auto& p : rparams) params.push_back(p);
  }

  // Gathers cached teacher outputs for a batch as constants.
  auto teacher_logits_for = [&](const std::vector<int>& pos) {
    std::vector<float> v(pos.size() * size_t(k));
    for (size_t i = 0; i < pos.size(); ++i)
      std::copy_n(t_logits.begin() + int64_t(pos[i]) * k, k, v.begin() + i * size_t(k));
    return Tensor<float>::from({int(pos.size()), k}, std::move(v));
  };
  auto teacher_feat_for = [&](size_t h, const std::vector<int>& pos) {
    const int64_t per = t_feat_shape[h].numel();
    std::vector<float> v(pos.size() * size_t(per));
    for (size_t i = 0; i < pos.size(); ++i)
      std::copy_n(t_feats[h].begin() + int64_t(pos[i]) * per, per,
                  v.begin() + i * size_t(per));
    return Tensor<float>::from(
        {int(pos.size()), t_feat_shape[h].c, t_feat_shape[h].h, t_feat_shape[h].w},
        std::move(v));
  };

  // Train over positions within the train split so cached rows line up.
  std::vector<int> positions(tr.size());
  for (size_t i = 0; i < positions.size(); ++i) positions[i] = int(i);

  TrainResult out;
  Sgd<float> opt(params, sgd);
  for (int e = 0; e < sgd.epochs; ++e) {
    EpochLog log;
    log.epoch = e;
    log.lr = lr_at(e, sgd);
    const auto batch_list = batches(positions, sgd.batch_size, seed, e);
    size_t bi = 0;
    for (const auto& pos : batch_list) {
      std::vector<int> idx(pos.size());
      std::vector<int> labels(pos.size());
      for (size_t i = 0; i < pos.size(); ++i) {
        idx[i] = tr[pos[i]];
        labels[i] = ds.labels[idx[i]];
      }
      auto x = make_batch<float>(ds, idx);
      auto taps = student.forward_with_taps(x, /*training=*/true, feature_method);
      auto total = kd_loss(taps.logits, teacher_logits_for(pos), labels,
                           float(dcfg.tau_kd), float(dcfg.lambda_kd));
      if (feature_method) {
        std::vector<Tensor<float>> tf(student.num_blocks());
        for (size_t h = 0; h < hints.size(); ++h) tf[hints[h] - 1] = teacher_feat_for(h, pos);
        Tensor<float> hint;
        if (dcfg.method == DistillMethod::FitNets)
          hint = fitnets_hint_loss(taps.features, tf, regressors, hints, /*training=*/true);
        else
          hint = sp_loss(taps.features, tf, hints);
        log.hint += double(hint.item());
        total = ops::add(total, ops::scale(hint, float(dcfg.lambda_hint)));
      }
      check_finite(total, e, bi);
      opt.zero_grad();
      backward(total);
      opt.step(float(log.lr));
      log.loss += double(total.item());
      ++bi;
    }
    log.loss /= double(batch_list.size());
    log.hint /= double(batch_list.size());
    log.test_acc = accuracy(student, ds, ds.test_idx);
    out.epochs.push_back(log);
  }
  out.wall_seconds = now_seconds() - t0;
  return out;
}

}  // namespace sftn
