// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sftn/gradcheck.hpp"
#include "sftn/train.hpp"

using namespace sftn;

namespace {

template <class T>
Tensor<T> rand_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = T(lo + rng.uniform() * (hi - lo));
  return Tensor<T>::from(std::move(shape), std::move(v));
}

// scalar softmax/KL oracle over one row
std::vector<double> softmax_row(const std::vector<double>& z, double tau) {
  std::vector<double> p(z.size());
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  double s = 0;
  for (size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp((z[i] - mx) / tau));
  for (auto& v : p) v /= s;
  return p;
}

double kl_rows_oracle(const std::vector<double>& zp, const std::vector<double>& zq,
                      double tau) {
  auto p = softmax_row(zp, tau), q = softmax_row(zq, tau);
  double kl = 0;
  for (size_t i = 0; i < p.size(); ++i) kl += p[i] * (std::log(p[i]) - std::log(q[i]));
  return kl;
}

ArchSpec toy(const std::string& id, int c1, int c2, int classes = 10) {
  ArchSpec a;
  a.id = id;
  a.input = {3, 16, 16};
  a.classes = classes;
  BlockSpec b1, b2;
  b1.layers = {LayerDesc::conv(3, c1, 3, 1, 1), LayerDesc::batchnorm(c1), LayerDesc::relu(),
               LayerDesc::maxpool(2, 2)};
  b2.layers = {LayerDesc::conv(c1, c2, 3, 1, 1), LayerDesc::batchnorm(c2), LayerDesc::relu(),
               LayerDesc::maxpool(2, 2)};
  a.blocks = {b1, b2};
  finalize_arch(a);
  return a;
}

}  // namespace

TEST_CASE("kd_loss: reductions and the K=2 hand oracle") {
  std::vector<int> label0 = {0};
  auto s = Tensor<double>::from({1, 2}, {0, 0});
  auto t = Tensor<double>::from({1, 2}, {0, std::log(3.0)});

  // s == t: KL term vanishes
  auto same = kd_loss(s, s, label0, 1.0, 1.0);
  CHECK(same.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // lambda_kd = 0: plain supervised CE
  auto plain = kd_loss(s, t, label0, 4.0, 0.0);
  CHECK(plain.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // hand-computed: CE = ln2, KL = 0.25 ln(.25/.5) + 0.75 ln(.75/.5)
  auto loss = kd_loss(s, t, label0, 1.0, 1.0);
  const double kl = 0.25 * std::log(0.25 / 0.5) + 0.75 * std::log(0.75 / 0.5);
  CHECK(kl == doctest::Approx(0.13081).epsilon(1e-4));
  CHECK(loss.item() == doctest::Approx(std::log(2.0) + kl).epsilon(1e-9));
  CHECK(loss.item() == doctest::Approx(0.82396).epsilon(1e-4));

  CHECK_THROWS_AS(kd_loss(s, t, label0, 0.0, 1.0), ConfigError);
}

TEST_CASE("kd_loss applies the tau^2 factor to the softened KL") {
  Rng rng(3);
  auto s = rand_tensor<double>(rng, {2, 4});
  auto t = rand_tensor<double>(rng, {2, 4});
  std::vector<int> y = {1, 2};
  const double tau = 2.5, lam = 0.7;
  auto loss = kd_loss(s, t, y, tau, lam);

  double want = cross_entropy(s, y).item();
  double klsum = 0;
  for (int i = 0; i < 2; ++i) {
    std::vector<double> zs(s.data().begin() + i * 4, s.data().begin() + (i + 1) * 4);
    std::vector<double> zt(t.data().begin() + i * 4, t.data().begin() + (i + 1) * 4);
    klsum += kl_rows_oracle(zt, zs, tau);
  }
  want += lam * tau * tau * klsum / 2;
  CHECK(loss.item() == doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("kd_loss insists on a frozen teacher side") {
  auto s = Tensor<double>::zeros({1, 2});
  auto t = Tensor<double>::zeros({1, 2}, /*requires_grad=*/true);
  CHECK_THROWS_AS(kd_loss(s, t, {0}, 1.0, 1.0), ConfigError);
}

TEST_CASE("softened teacher argmax is invariant to tau_kd") {
  Rng rng(4);
  auto t = rand_tensor<double>(rng, {4, 6}, -3, 3);
  auto base = ops::argmax_rows(t);
  for (double tau : {0.5, 1.0, 4.0, 25.0})
    CHECK(ops::argmax_rows(softmax_tempered(t, tau)) == base);
}

TEST_CASE("fitnets_hint_loss: zero, quadratic and random oracles") {
  Rng rng(5);
  const std::vector<int> hints = {1};
  // teacher features as constants
  auto ft = rand_tensor<double>(rng, {2, 4, 4, 4});
  std::vector<Tensor<double>> tfeats = {ft};

  // regressor = identity 1x1 conv, student features equal teacher features -> 0
  std::vector<Layer<double>> id_reg;
  id_reg.emplace_back(LayerDesc::conv(4, 4, 1, 1, 0));
  for (int c = 0; c < 4; ++c) id_reg[0].weight.data()[size_t(c) * 4 + c] = 1.0;
  std::vector<Tensor<double>> sfeats = {ft};
  auto zero = fitnets_hint_loss(sfeats, tfeats, id_reg, hints, false);
  CHECK(zero.item() == doctest::Approx(0.0));

  // regressed student = 0 -> mean(f^2)
  std::vector<Tensor<double>> zfeats = {Tensor<double>::zeros({2, 4, 4, 4})};
  auto q = fitnets_hint_loss(zfeats, tfeats, id_reg, hints, false);
  double want = 0;
  for (double v : ft.data()) want += v * v;
  want /= double(ft.size());
  CHECK(q.item() == doctest::Approx(want).epsilon(1e-12));

  // random pair with a random known regressor vs a direct elementwise oracle
  std::vector<Layer<double>> reg;
  reg.emplace_back(LayerDesc::conv(3, 4, 1, 1, 0));
  Rng rng2(6);
  for (auto& v : reg[0].weight.data()) v = rng2.uniform() - 0.5;
  for (auto& v : reg[0].bias.data()) v = rng2.uniform() - 0.5;
  auto fs = rand_tensor<double>(rng2, {2, 3, 4, 4});
  std::vector<Tensor<double>> sf = {fs};
  auto got = fitnets_hint_loss(sf, tfeats, reg, hints, false);
  double acc = 0;
  for (int n = 0; n < 2; ++n)
    for (int co = 0; co < 4; ++co)
      for (int i = 0; i < 16; ++i) {
        double r = reg[0].bias.data()[co];
        for (int ci = 0; ci < 3; ++ci)
          r += reg[0].weight.data()[size_t(co) * 3 + ci] *
               fs.data()[(size_t(n) * 3 + ci) * 16 + i];
        const double d = r - ft.data()[(size_t(n) * 4 + co) * 16 + i];
        acc += d * d;
      }
  acc /= 2 * 4 * 16;
  CHECK(got.item() == doctest::Approx(acc).epsilon(1e-6));

  // spatial mismatch is a configuration error
  std::vector<Tensor<double>> small = {Tensor<double>::zeros({2, 3, 2, 2})};
  CHECK_THROWS_AS(fitnets_hint_loss(small, tfeats, reg, hints, false), ConfigError);
}

TEST_CASE("sp_loss: zero, scale invariance and the brute-force Gram oracle") {
  Rng rng(7);
  auto ft = rand_tensor<double>(rng, {3, 2, 2, 2});
  std::vector<Tensor<double>> tf = {ft};

  std::vector<Tensor<double>> same = {ft};
  CHECK(sp_loss(same, tf, {1}).item() == doctest::Approx(0.0));

  // isotropic scaling cancels under row normalization
  auto scaled = ops::scale(ft, 2.0);
  std::vector<Tensor<double>> twice = {scaled};
  CHECK(sp_loss(twice, tf, {1}).item() == doctest::Approx(0.0).epsilon(1e-12));

  auto fs = rand_tensor<double>(rng, {3, 2, 2, 2});
  std::vector<Tensor<double>> sf = {fs};
  const double got = sp_loss(sf, tf, {1}).item();

  // brute force: G = row-normalized A A^T, loss = ||G_S - G_T||_F^2 / b^2
  auto gram = [](const std::vector<double>& a, int b, int chw) {
    std::vector<double> g(size_t(b) * b);
    for (int i = 0; i < b; ++i)
      for (int j = 0; j < b; ++j) {
        double s = 0;
        for (int k = 0; k < chw; ++k) s += a[size_t(i) * chw + k] * a[size_t(j) * chw + k];
        g[size_t(i) * b + j] = s;
      }
    for (int i = 0; i < b; ++i) {
      double norm = 0;
      for (int j = 0; j < b; ++j) norm += g[size_t(i) * b + j] * g[size_t(i) * b + j];
      norm = std::sqrt(norm);
      for (int j = 0; j < b; ++j) g[size_t(i) * b + j] /= norm;
    }
    return g;
  };
  auto gs = gram(fs.data(), 3, 8), gt = gram(ft.data(), 3, 8);
  double want = 0;
  for (size_t i = 0; i < gs.size(); ++i) want += (gs[i] - gt[i]) * (gs[i] - gt[i]);
  want /= 9.0;
  CHECK(got == doctest::Approx(want).epsilon(1e-6));

  // batch of one is rejected
  std::vector<Tensor<double>> lone = {rand_tensor<double>(rng, {1, 2, 2, 2})};
  std::vector<Tensor<double>> lone_t = {rand_tensor<double>(rng, {1, 2, 2, 2})};
  CHECK_THROWS_AS(sp_loss(lone, lone_t, {1}), ConfigError);
}

TEST_CASE("gradcheck: all three distillation losses (64-bit)") {
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    std::vector<int> y = {int(rng.uniform_int(4)), int(rng.uniform_int(4)),
                          int(rng.uniform_int(4))};
    auto t_logits = rand_tensor<double>(rng, {3, 4}, -2, 2);
    {
      auto s_logits = rand_tensor<double>(rng, {3, 4}, -2, 2);
      CHECK(grad_check([&] { return kd_loss(s_logits, t_logits, y, 3.0, 0.8); },
                       {s_logits}) < 1e-6);
    }
    {
      auto fs = rand_tensor<double>(rng, {3, 2, 3, 3});
      auto ft = rand_tensor<double>(rng, {3, 3, 3, 3});
      std::vector<Layer<double>> reg;
      reg.emplace_back(LayerDesc::conv(2, 3, 1, 1, 0));
      for (auto& v : reg[0].weight.data()) v = rng.uniform() - 0.5;
      auto reg_w = reg[0].weight, reg_b = reg[0].bias;
      CHECK(grad_check(
                [&] {
                  std::vector<Tensor<double>> sf = {fs}, tf = {ft};
                  return fitnets_hint_loss(sf, tf, reg, {1}, false);
                },
                {fs, reg_w, reg_b}) < 1e-6);
    }
    {
      auto fs = rand_tensor<double>(rng, {3, 2, 2, 2}, 0.2, 1.0);
      auto ft = rand_tensor<double>(rng, {3, 2, 2, 2}, 0.2, 1.0);
      CHECK(grad_check(
                [&] {
                  std::vector<Tensor<double>> sf = {fs}, tf = {ft};
                  return sp_loss(sf, tf, {1});
                },
                {fs}, 1e-5) < 1e-5);
    }
  }
}

TEST_CASE("distill_train: freeze, determinism and 0-epoch contracts") {
  auto ds = gen_synth_vision(SynthTask::Primary, 60, 2);
  BlockNet<float> teacher(toy("t", 8, 12));
  teacher.init_params(1);
  train_standard_teacher(teacher, ds, [] {
    SgdConfig s;
    s.epochs = 1;
    s.milestones.clear();
    s.batch_size = 25;
    return s;
  }(), 1);
  const uint64_t teacher_hash = teacher.state_hash();

  SgdConfig sgd;
  sgd.epochs = 2;
  sgd.milestones.clear();
  sgd.batch_size = 25;
  DistillConfig dcfg;

  BlockNet<float> s1(toy("s", 4, 6)), s2(toy("s", 4, 6));
  s1.init_params(50);
  s2.init_params(50);
  const uint64_t init_hash = s1.state_hash();

  SgdConfig zero = sgd;
  zero.epochs = 0;
  distill_train(s1, teacher, ds, dcfg, zero, 9);
  CHECK(s1.state_hash() == init_hash);

  auto r1 = distill_train(s1, teacher, ds, dcfg, sgd, 9);
  auto r2 = distill_train(s2, teacher, ds, dcfg, sgd, 9);
  CHECK(s1.state_hash() == s2.state_hash());
  CHECK(teacher.state_hash() == teacher_hash);  // stage 2 never writes the teacher
  REQUIRE(r1.epochs.size() == 2);
  CHECK(r1.epochs.back().test_acc >= 0.0);
  (void)r2;
}

TEST_CASE("distill_train: FitNets and SP run jointly with KD and log hint curves") {
  auto ds = gen_synth_vision(SynthTask::Primary, 60, 3);
  BlockNet<float> teacher(toy("t", 8, 12));
  teacher.init_params(4);
  SgdConfig sgd;
  sgd.epochs = 1;
  sgd.milestones.clear();
  sgd.batch_size = 20;

  for (auto method : {DistillMethod::FitNets, DistillMethod::SP}) {
    BlockNet<float> student(toy("s", 4, 6));
    student.init_params(7);
    DistillConfig dcfg;
    dcfg.method = method;
    auto res = distill_train(student, teacher, ds, dcfg, sgd, 11);
    REQUIRE(res.epochs.size() == 1);
    CHECK(std::isfinite(res.epochs[0].loss));
    CHECK(res.epochs[0].hint > 0.0);  // hint-loss curve present
  }
}

TEST_CASE("distill_train rejects mismatched teacher/student geometry") {
  auto ds = gen_synth_vision(SynthTask::Primary, 60, 5);
  BlockNet<float> teacher(toy("t", 8, 12, 10));
  BlockNet<float> student(toy("s", 4, 6, 7));  // class mismatch
  SgdConfig sgd;
  sgd.epochs = 1;
  sgd.milestones.clear();
  DistillConfig dcfg;
  CHECK_THROWS_AS(distill_train(student, teacher, ds, dcfg, sgd, 1), ConfigError);
}
