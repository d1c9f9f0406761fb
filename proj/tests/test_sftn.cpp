// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sftn/gradcheck.hpp"
#include "sftn/train.hpp"

using namespace sftn;

namespace {

ArchSpec toy(const std::string& id, int c1, int c2, Shape3 input = {3, 16, 16},
             int classes = 5) {
  ArchSpec a;
  a.id = id;
  a.input = input;
  a.classes = classes;
  BlockSpec b1, b2;
  b1.layers = {LayerDesc::conv(input.c, c1, 3, 1, 1), LayerDesc::batchnorm(c1),
               LayerDesc::relu(), LayerDesc::maxpool(2, 2)};
  b2.layers = {LayerDesc::conv(c1, c2, 3, 1, 1), LayerDesc::batchnorm(c2), LayerDesc::relu(),
               LayerDesc::maxpool(2, 2)};
  a.blocks = {b1, b2};
  finalize_arch(a);
  return a;
}

template <class T>
Tensor<T> rand_batch(Rng& rng, Shape3 dims, int n) {
  std::vector<T> v(size_t(n) * dims.numel());
  for (auto& x : v) x = T(rng.uniform());
  return Tensor<T>::from({n, dims.c, dims.h, dims.w}, std::move(v));
}

SgdConfig quick_sgd(int epochs, int batch = 25) {
  SgdConfig s;
  s.epochs = epochs;
  s.milestones.clear();
  s.batch_size = batch;
  s.lr = 0.05;
  return s;
}

}  // namespace

TEST_CASE("transform rule: project / downsample / upsample / error") {
  auto proj = make_transform({64, 16, 16}, {32, 16, 16});
  REQUIRE(proj.size() == 3);
  CHECK(proj[0].kind == LayerKind::Conv);
  CHECK(proj[0].k == 1);
  CHECK(proj[0].in_ch == 64);
  CHECK(proj[0].out_ch == 32);
  CHECK(proj[1].kind == LayerKind::BatchNorm);
  CHECK(proj[2].kind == LayerKind::Relu);

  auto down = make_transform({64, 16, 16}, {128, 8, 8});
  CHECK(down[0].kind == LayerKind::Conv);
  CHECK(down[0].k == 3);
  CHECK(down[0].stride == 2);

  auto up = make_transform({64, 8, 8}, {32, 16, 16});
  CHECK(up[0].kind == LayerKind::ConvTranspose);
  CHECK(up[0].k == 4);
  CHECK(up[0].stride == 2);

  CHECK_THROWS_AS(make_transform({64, 16, 16}, {32, 4, 4}), ConfigError);
  CHECK_THROWS_AS(make_transform({64, 16, 16}, {32, 8, 16}), ConfigError);
}

TEST_CASE("softmax_tempered analytic values") {
  auto z3 = Tensor<double>::from({1, 3}, {0, 0, 0});
  auto q3 = softmax_tempered(z3, 1.0);
  for (double p : q3.data()) CHECK(p == doctest::Approx(1.0 / 3));

  auto z2 = Tensor<double>::from({1, 2}, {0, std::log(3.0)});
  auto q = softmax_tempered(z2, 1.0);
  CHECK(q.data()[0] == doctest::Approx(0.25).epsilon(1e-9));
  CHECK(q.data()[1] == doctest::Approx(0.75).epsilon(1e-9));

  auto z = Tensor<double>::from({1, 2}, {2, 4});
  auto qt = softmax_tempered(z, 2.0);
  CHECK(qt.data()[0] == doctest::Approx(0.26894).epsilon(1e-4));
  CHECK(qt.data()[1] == doctest::Approx(0.73106).epsilon(1e-4));

  double total = 0;
  for (double p : qt.data()) {
    CHECK(p > 0);
    total += p;
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
  CHECK_THROWS_AS(softmax_tempered(z, 0.0), ConfigError);
}

TEST_CASE("3-block model exposes exactly 2 branches; block N has none") {
  SftnModel<float> model(make_arch("teacher-s3", {3, 16, 16}, 10),
                         make_arch("student-s3", {3, 16, 16}, 10));
  CHECK(model.num_branches() == 2);
  Rng rng(3);
  model.init_params(1);
  auto out = model.forward(rand_batch<float>(rng, {3, 16, 16}, 2), false, true,
                           LossConfig{}.active_branches(2));
  CHECK(out.branch_logits.size() == 2);
  CHECK(out.branch_ids == std::vector<int>{1, 2});
  // a branch for the last block is a structural error
  CHECK_THROWS_AS(model.forward(rand_batch<float>(rng, {3, 16, 16}, 1), false, true, {3}),
                  ConfigError);
  LossConfig bad;
  bad.branches = {3};
  CHECK_THROWS_AS(bad.validate(2), ConfigError);
}

TEST_CASE("branch logits match manual transform+suffix composition bitwise") {
  SftnModel<float> model(toy("t", 8, 12), toy("s", 4, 6));
  model.init_params(11);
  Rng rng(5);
  auto x = rand_batch<float>(rng, {3, 16, 16}, 2);
  auto out = model.forward(x, false, true, {1});
  REQUIRE(out.branch_logits.size() == 1);

  auto& br = model.branches()[0];
  Tensor<float> h = out.teacher_features[0];
  for (auto& l : br.transform) h = l.forward(h, false);
  for (auto& blk : br.blocks)
    for (auto& l : blk) h = l.forward(h, false);
  auto manual = ops::add_bias(ops::matmul(ops::global_avgpool(h), br.head_w), br.head_b);
  CHECK(std::memcmp(manual.data().data(), out.branch_logits[0].data().data(),
                    size_t(manual.size()) * sizeof(float)) == 0);
}

TEST_CASE("branch weights copied from the teacher suffix reproduce q_T") {
  // teacher and student share the architecture; transform set to identity
  auto arch_t = toy("t", 6, 9);
  SftnModel<float> model(arch_t, arch_t);
  model.init_params(21);
  auto& br = model.branches()[0];
  // identity 1x1 conv
  auto& tw = br.transform[0].weight.data();
  std::fill(tw.begin(), tw.end(), 0.0f);
  for (int c = 0; c < 6; ++c) tw[size_t(c) * 6 + c] = 1.0f;
  std::fill(br.transform[0].bias.data().begin(), br.transform[0].bias.data().end(), 0.0f);
  // neutralize the transform batchnorm in eval mode: var + eps == 1
  auto& bn = br.transform[1];
  std::fill(bn.bn_buf.running_mean.begin(), bn.bn_buf.running_mean.end(), 0.0f);
  std::fill(bn.bn_buf.running_var.begin(), bn.bn_buf.running_var.end(), 1.0f - 1e-5f);
  // copy teacher block 2 + head into the branch
  auto& tblk = model.teacher().blocks()[1];
  for (size_t l = 0; l < tblk.size(); ++l) {
    auto& src = tblk[l];
    auto& dst = br.blocks[0][l];
    if (src.weight.defined()) dst.weight.data() = src.weight.data();
    if (src.bias.defined()) dst.bias.data() = src.bias.data();
    if (src.gamma.defined()) {
      dst.gamma.data() = src.gamma.data();
      dst.beta.data() = src.beta.data();
      dst.bn_buf = src.bn_buf;
    }
  }
  br.head_w.data() = model.teacher().head_weight().data();
  br.head_b.data() = model.teacher().head_bias().data();

  Rng rng(6);
  auto x = rand_batch<float>(rng, {3, 16, 16}, 3);
  auto out = model.forward(x, false, true, {1});
  auto q_t = softmax_tempered(out.teacher_logits, 1.0f);
  auto q_r = softmax_tempered(out.branch_logits[0], 1.0f);
  for (int64_t i = 0; i < q_t.size(); ++i)
    CHECK(q_r.data()[i] == doctest::Approx(q_t.data()[i]).epsilon(1e-5));
}

TEST_CASE("sftn_loss: reductions and the uniform hand oracle") {
  std::vector<int> labels = {1, 3, 0};
  auto t_logits = Tensor<double>::zeros({3, 4});
  std::vector<Tensor<double>> branches = {Tensor<double>::zeros({3, 4}),
                                          Tensor<double>::zeros({3, 4})};
  LossConfig cfg;  // lambda = (1, 3, 1)

  // all outputs uniform: loss = ln4 + 3*0 + ln4
  auto parts = sftn_loss(t_logits, branches, labels, cfg);
  CHECK(parts.total.item() == doctest::Approx(2 * std::log(4.0)).epsilon(1e-9));
  CHECK(parts.total.item() == doctest::Approx(2.77259).epsilon(1e-5));
  CHECK(parts.branch_kl == doctest::Approx(0.0));

  // zero branch weights reduce to the teacher CE term exactly
  LossConfig off;
  off.lambda_r_kl = 0;
  off.lambda_r_ce = 0;
  Rng rng(7);
  std::vector<double> z(12);
  for (auto& v : z) v = rng.uniform() * 4 - 2;
  auto t2 = Tensor<double>::from({3, 4}, std::move(z));
  auto only_t = sftn_loss(t2, branches, labels, off);
  auto ce = cross_entropy(t2, labels);
  CHECK(only_t.total.item() == ce.item());

  // identical branch and teacher outputs: KL term is 0
  auto same = sftn_loss(t2, {t2, t2}, labels, cfg);
  CHECK(same.branch_kl == doctest::Approx(0.0).epsilon(1e-12));

  CHECK_THROWS_AS(sftn_loss(t2, branches, {}, cfg), ConfigError);
  LossConfig neg;
  neg.lambda_r_kl = -1;
  CHECK_THROWS_AS(neg.validate(2), ConfigError);
}

TEST_CASE("tau_tilde -> infinity drives the branch KL to zero") {
  Rng rng(8);
  std::vector<double> a(20), b(20);
  for (auto& v : a) v = rng.uniform() * 6 - 3;
  for (auto& v : b) v = rng.uniform() * 6 - 3;
  auto t = Tensor<double>::from({4, 5}, std::move(a));
  auto r = Tensor<double>::from({4, 5}, std::move(b));
  LossConfig cfg;
  cfg.tau_tilde = 1e6;
  auto parts = sftn_loss(t, {r}, {0, 1, 2, 3}, cfg);
  CHECK(parts.branch_kl < 1e-4);
  CHECK(parts.branch_kl >= 0.0);
}

TEST_CASE("argmax of q_T is invariant to tau_tilde") {
  Rng rng(9);
  std::vector<double> z(30);
  for (auto& v : z) v = rng.uniform() * 8 - 4;
  auto logits = Tensor<double>::from({5, 6}, std::move(z));
  auto base = ops::argmax_rows(softmax_tempered(logits, 1.0));
  for (double tau : {0.25, 2.0, 10.0, 1000.0})
    CHECK(ops::argmax_rows(softmax_tempered(logits, tau)) == base);
}

TEST_CASE("sftn_loss gradient passes finite differences for all parameter groups") {
  // double instantiation of the full composite: trunk + transform + branch
  SftnModel<double> model(toy("t", 4, 6, {2, 8, 8}, 4), toy("s", 3, 4, {2, 8, 8}, 4));
  model.init_params(31);
  Rng rng(10);
  auto x = rand_batch<double>(rng, {2, 8, 8}, 2);
  std::vector<int> labels = {1, 3};
  LossConfig cfg;

  std::vector<Tensor<double>> points;
  for (auto& p : model.params()) points.push_back(*p.tensor);
  const double err = grad_check(
      [&] {
        auto out = model.forward(x, /*training=*/true, true, {1});
        return sftn_loss(out.teacher_logits, out.branch_logits, labels, cfg).total;
      },
      points, 1e-5);
  CHECK(err < 1e-4);
}

TEST_CASE("zero branch weights reproduce the standard trajectory bitwise") {
  auto ds = gen_synth_vision(SynthTask::Primary, 60, 123);
  auto arch_t = toy("t", 6, 8);
  arch_t.classes = 10;
  auto arch_s = toy("s", 3, 4);
  arch_s.classes = 10;

  BlockNet<float> plain(arch_t);
  plain.init_params(77);
  auto sgd = quick_sgd(2);
  train_standard_teacher(plain, ds, sgd, 77);

  SftnModel<float> model(arch_t, arch_s);
  model.init_params(77);
  LossConfig off;
  off.lambda_r_kl = 0;
  off.lambda_r_ce = 0;
  train_sftn(model, ds, sgd, off, 77);

  CHECK(model.teacher().state_hash() == plain.state_hash());
}

TEST_CASE("train_sftn: determinism and the 0-epoch contract") {
  auto ds = gen_synth_vision(SynthTask::Primary, 60, 9);
  auto arch_t = toy("t", 6, 8);
  arch_t.classes = 10;
  auto arch_s = toy("s", 3, 4);
  arch_s.classes = 10;
  LossConfig cfg;

  SftnModel<float> a(arch_t, arch_s), b(arch_t, arch_s);
  a.init_params(5);
  b.init_params(5);
  const uint64_t init_hash = a.teacher().state_hash();

  auto zero = quick_sgd(0);
  train_sftn(a, ds, zero, cfg, 5);
  CHECK(a.teacher().state_hash() == init_hash);  // 0 epochs: untouched

  auto two = quick_sgd(2);
  train_sftn(a, ds, two, cfg, 5);
  train_sftn(b, ds, two, cfg, 5);
  CHECK(a.teacher().state_hash() == b.teacher().state_hash());
  CHECK(a.teacher().state_hash() != init_hash);
}

TEST_CASE("branch mask: single-branch training normalizes by the active count") {
  Rng rng(12);
  std::vector<double> z1(8), z2(8), zt(8);
  for (auto& v : z1) v = rng.uniform();
  for (auto& v : z2) v = rng.uniform();
  for (auto& v : zt) v = rng.uniform();
  auto t = Tensor<double>::from({2, 4}, std::move(zt));
  auto b1 = Tensor<double>::from({2, 4}, std::move(z1));
  auto b2 = Tensor<double>::from({2, 4}, std::move(z2));
  std::vector<int> y = {0, 2};
  LossConfig cfg;
  // |A|=1 vs |A|=2: the normalizer follows the active set
  auto one = sftn_loss(t, {b1}, y, cfg);
  auto two = sftn_loss(t, {b1, b2}, y, cfg);
  auto ce1 = cross_entropy(b1, y).item(), ce2 = cross_entropy(b2, y).item();
  CHECK(one.branch_ce == doctest::Approx(ce1).epsilon(1e-9));
  CHECK(two.branch_ce == doctest::Approx((ce1 + ce2) / 2).epsilon(1e-9));
}

TEST_CASE("finetune: joint=0 keeps the trunk bitwise equal to the pretrained input") {
  auto ds = gen_synth_vision(SynthTask::Primary, 60, 31);
  auto arch_t = toy("t", 6, 8);
  arch_t.classes = 10;
  auto arch_s = toy("s", 3, 4);
  arch_s.classes = 10;

  BlockNet<float> pretrained(arch_t);
  pretrained.init_params(13);
  train_standard_teacher(pretrained, ds, quick_sgd(1), 13);
  const uint64_t pre_hash = pretrained.state_hash();

  SftnModel<float> model(arch_t, arch_s);
  model.init_params(13);
  auto src = pretrained.state();
  auto dst = model.teacher().state();
  for (size_t i = 0; i < src.size(); ++i) *dst[i].values = *src[i].values;

  LossConfig cfg;
  auto res = finetune_sftn(model, ds, quick_sgd(8), cfg, 3, 0, 13);
  CHECK(model.teacher().state_hash() == pre_hash);  // trunk fully inert
  // phase-1 branch objective decreases while the trunk is frozen
  REQUIRE(res.epochs.size() == 3);
  CHECK(res.epochs.back().loss < res.epochs.front().loss);
}

TEST_CASE("a non-finite loss aborts with epoch/batch diagnostics") {
  auto ds = gen_synth_vision(SynthTask::Primary, 60, 41);
  auto arch_t = toy("t", 6, 8);
  arch_t.classes = 10;
  auto arch_s = toy("s", 3, 4);
  arch_s.classes = 10;
  SftnModel<float> model(arch_t, arch_s);
  model.init_params(3);
  model.teacher().head_weight().data()[0] = std::nanf("");  // poisoned parameter
  LossConfig cfg;
  CHECK_THROWS_WITH_AS(train_sftn(model, ds, quick_sgd(1), cfg, 3),
                       doctest::Contains("epoch"), DivergenceError);
}

TEST_CASE("finetune: negative epoch counts are rejected") {
  auto arch_t = toy("t", 6, 8);
  auto arch_s = toy("s", 3, 4);
  SftnModel<float> model(arch_t, arch_s);
  auto ds = gen_synth_vision(SynthTask::Primary, 60, 1);
  ds.classes = 5;  // match toy arch classes via fresh gen is awkward; check throws first
  LossConfig cfg;
  CHECK_THROWS_AS(finetune_sftn(model, ds, quick_sgd(4), cfg, -1, 2, 1), ConfigError);
}
