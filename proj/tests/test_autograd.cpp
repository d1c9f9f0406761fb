// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <thread>

#include "sftn/gradcheck.hpp"
#include "sftn/ops.hpp"

using namespace sftn;

namespace {

Tensor<double> rand_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = lo + rng.uniform() * (hi - lo);
  return Tensor<double>::from(std::move(shape), std::move(v));
}

// Keeps relu/maxpool inputs away from the kink so central differences see a
// locally smooth function.
Tensor<double> rand_tensor_nudged(Rng& rng, Shape shape, double margin = 0.05) {
  auto t = rand_tensor(rng, shape);
  for (auto& x : t.data())
    if (std::abs(x) < margin) x = x < 0 ? x - margin : x + margin;
  return t;
}

// Independent direct convolution: plain loops over output pixels, no im2col.
std::vector<double> conv2d_bruteforce(const std::vector<double>& x, int N, int Ci, int H,
                                      int W, const std::vector<double>& w, int Co, int kh,
                                      int kw, const std::vector<double>& b, int stride,
                                      int pad, int groups) {
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  const int cig = Ci / groups, cog = Co / groups;
  std::vector<double> out(size_t(N) * Co * Ho * Wo, 0.0);
  for (int n = 0; n < N; ++n)
    for (int co = 0; co < Co; ++co) {
      const int g = co / cog;
      for (int oh = 0; oh < Ho; ++oh)
        for (int ow = 0; ow < Wo; ++ow) {
          double acc = b[co];
          for (int ci = 0; ci < cig; ++ci)
            for (int ki = 0; ki < kh; ++ki)
              for (int kj = 0; kj < kw; ++kj) {
                const int ih = oh * stride - pad + ki;
                const int iw = ow * stride - pad + kj;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += x[((size_t(n) * Ci + g * cig + ci) * H + ih) * W + iw] *
                       w[((size_t(co) * cig + ci) * kh + ki) * kw + kj];
              }
          out[((size_t(n) * Co + co) * Ho + oh) * Wo + ow] = acc;
        }
    }
  return out;
}

}  // namespace

TEST_CASE("matmul identity and shape errors") {
  auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  auto eye = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  auto r = ops::matmul(a, eye);
  CHECK(r.data() == std::vector<double>{1, 2, 3, 4});
  auto bad = Tensor<double>::zeros({3, 2});
  CHECK_THROWS_WITH_AS(ops::matmul(a, bad), doctest::Contains("matmul"), ShapeError);
}

TEST_CASE("relu forward definition") {
  auto x = Tensor<double>::from({3}, {-1, 0, 2});
  auto y = ops::relu(x);
  CHECK(y.data() == std::vector<double>{0, 0, 2});
}

TEST_CASE("backward: d sum(x*x)/dx = 2x and relu subgradient(0)=0") {
  auto x = Tensor<double>::from({1}, {3}, true);
  backward(ops::sum(ops::mul(x, x)));
  CHECK(x.grad()[0] == doctest::Approx(6));

  auto z = Tensor<double>::from({2}, {-1, 2}, true);
  backward(ops::sum(ops::relu(z)));
  CHECK(z.grad()[0] == 0.0);
  CHECK(z.grad()[1] == 1.0);
}

TEST_CASE("backward errors: non-scalar loss, repeated backward") {
  auto x = Tensor<double>::from({2}, {1, 2}, true);
  auto y = ops::mul(x, x);
  CHECK_THROWS_AS(backward(y), ShapeError);
  auto loss = ops::sum(y);
  backward(loss);
  CHECK_THROWS_AS(backward(loss), std::logic_error);
}

TEST_CASE("gradient accumulation across consumers") {
  // x used twice: f = sum(x*x) + 3*sum(x) -> df/dx = 2x + 3
  auto x = Tensor<double>::from({3}, {1, -2, 0.5}, true);
  auto f = ops::add(ops::sum(ops::mul(x, x)), ops::scale(ops::sum(x), 3.0));
  backward(f);
  for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == doctest::Approx(2 * x.data()[i] + 3));
}

TEST_CASE("CE∘softmax gradient equals softmax minus one-hot") {
  Rng rng(5);
  auto z = rand_tensor(rng, {4, 3});
  z.set_requires_grad(true);
  std::vector<int> labels = {0, 2, 1, 2};
  auto logp = ops::log_softmax(z);
  backward(ops::nll_loss(logp, labels));
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 3; ++j) {
      const double p = std::exp(logp.data()[i * 3 + j]);
      const double expect = (p - (labels[i] == j ? 1.0 : 0.0)) / 4.0;
      CHECK(z.grad()[i * 3 + j] == doctest::Approx(expect).epsilon(1e-9));
    }
  }
  // and against central differences
  auto z2 = rand_tensor(rng, {4, 3});
  const double err = grad_check(
      [&] { return ops::nll_loss(ops::log_softmax(z2), labels); }, {z2}, 1e-5);
  CHECK(err < 1e-5);
}

TEST_CASE("conv2d matches brute-force direct convolution") {
  // the all-ones 3x3 case: center output is 9
  auto x = Tensor<double>::from({1, 1, 3, 3}, std::vector<double>(9, 1.0));
  auto w = Tensor<double>::from({1, 1, 3, 3}, std::vector<double>(9, 1.0));
  auto b = Tensor<double>::zeros({1});
  auto y = ops::conv2d(x, w, b, 1, 1);
  CHECK(y.shape() == Shape{1, 1, 3, 3});
  CHECK(y.data()[4] == doctest::Approx(9));
  CHECK(y.data()[0] == doctest::Approx(4));

  Rng rng(7);
  struct Case {
    int N, Ci, H, W, Co, k, stride, pad, groups;
  };
  for (const Case c : {Case{2, 3, 6, 5, 4, 3, 1, 1, 1}, Case{1, 4, 8, 8, 6, 3, 2, 1, 2},
                       Case{2, 4, 5, 5, 4, 1, 1, 0, 4}, Case{1, 2, 7, 7, 3, 4, 2, 1, 1}}) {
    auto x2 = rand_tensor(rng, {c.N, c.Ci, c.H, c.W});
    auto w2 = rand_tensor(rng, {c.Co, c.Ci / c.groups, c.k, c.k});
    auto b2 = rand_tensor(rng, {c.Co});
    auto got = ops::conv2d(x2, w2, b2, c.stride, c.pad, c.groups);
    auto want = conv2d_bruteforce(x2.data(), c.N, c.Ci, c.H, c.W, w2.data(), c.Co, c.k, c.k,
                                  b2.data(), c.stride, c.pad, c.groups);
    REQUIRE(got.size() == int64_t(want.size()));
    for (size_t i = 0; i < want.size(); ++i)
      CHECK(got.data()[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }
}

TEST_CASE("conv2d shape errors name the primitive and shapes") {
  auto x = Tensor<double>::zeros({1, 3, 8, 8});
  auto w = Tensor<double>::zeros({4, 2, 3, 3});  // wrong in-channels
  auto b = Tensor<double>::zeros({4});
  CHECK_THROWS_WITH_AS(ops::conv2d(x, w, b, 1, 1), doctest::Contains("conv2d"), ShapeError);
}

TEST_CASE("conv_transpose2d doubles the spatial size at k4 s2 p1") {
  Rng rng(8);
  auto x = rand_tensor(rng, {2, 3, 4, 4});
  auto w = rand_tensor(rng, {3, 5, 4, 4});
  auto b = rand_tensor(rng, {5});
  auto y = ops::conv_transpose2d(x, w, b, 2, 1);
  CHECK(y.shape() == Shape{2, 5, 8, 8});
}

TEST_CASE("maxpool ties break to the first index in scan order") {
  auto x = Tensor<double>::from({1, 1, 2, 2}, {1, 1, 1, 1}, true);
  auto y = ops::maxpool2d(x, 2, 2);
  backward(ops::sum(y));
  CHECK(x.grad() == std::vector<double>{1, 0, 0, 0});
}

TEST_CASE("forward is deterministic for a fixed seed") {
  for (int run = 0; run < 2; ++run) {
    Rng rng(99);
    static std::vector<double> first;
    auto x = rand_tensor(rng, {2, 3, 6, 6});
    auto w = rand_tensor(rng, {4, 3, 3, 3});
    auto b = rand_tensor(rng, {4});
    auto y = ops::conv2d(x, w, b, 1, 1);
    if (run == 0)
      first = y.data();
    else
      CHECK(std::memcmp(first.data(), y.data().data(), first.size() * sizeof(double)) == 0);
  }
}

// Per-primitive finite-difference checks, >= 20 random seeds each where the
// examples call for it.
TEST_CASE("gradcheck: every primitive, 20+ seeds") {
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    // elementwise / linear algebra
    {
      auto a = rand_tensor(rng, {3, 4}), c = rand_tensor(rng, {3, 4});
      auto m = rand_tensor(rng, {4, 2});
      CHECK(grad_check([&] { return ops::sum(ops::mul(ops::add(a, c), c)); }, {a, c}) < 1e-8);
      CHECK(grad_check([&] { return ops::sum(ops::mul(ops::sub(a, c), a)); }, {a, c}) < 1e-8);
      CHECK(grad_check([&] { return ops::sum(ops::matmul(a, m)); }, {a, m}) < 1e-8);
      CHECK(grad_check([&] { return ops::mean(ops::transpose(a)); }, {a}) < 1e-8);
      CHECK(grad_check([&] { return ops::sum(ops::scale(a, 1.7)); }, {a}) < 1e-8);
      auto bias = rand_tensor(rng, {4});
      CHECK(grad_check([&] { return ops::sum(ops::mul(ops::add_bias(a, bias), a)); },
                       {a, bias}) < 1e-8);
      CHECK(grad_check([&] { return ops::sum(ops::reshape(ops::mul(a, a), {2, 6})); }, {a}) <
            1e-8);
    }
    // transcendentals (positive inputs for log)
    {
      auto p = rand_tensor(rng, {6}, 0.2, 2.0);
      CHECK(grad_check([&] { return ops::sum(ops::log(p)); }, {p}) < 1e-7);
      CHECK(grad_check([&] { return ops::sum(ops::exp(p)); }, {p}) < 1e-7);
    }
    // relu away from the kink
    {
      auto x = rand_tensor_nudged(rng, {4, 5});
      CHECK(grad_check([&] { return ops::sum(ops::mul(ops::relu(x), x)); }, {x}) < 1e-7);
    }
    // softmax machinery
    {
      auto z = rand_tensor(rng, {3, 5});
      std::vector<int> y = {int(rng.uniform_int(5)), int(rng.uniform_int(5)),
                            int(rng.uniform_int(5))};
      CHECK(grad_check([&] { return ops::nll_loss(ops::log_softmax(z), y); }, {z}) < 1e-6);
      CHECK(grad_check([&] { return ops::mean(ops::mul(ops::log_softmax(z), z)); }, {z}) <
            1e-6);
    }
    // convolutions (plain, strided, grouped) and transpose
    {
      auto x = rand_tensor(rng, {2, 4, 5, 5});
      auto w = rand_tensor(rng, {4, 2, 3, 3});
      auto b = rand_tensor(rng, {4});
      CHECK(grad_check(
                [&] { return ops::mean(ops::mul(ops::conv2d(x, w, b, 2, 1, 2),
                                                ops::conv2d(x, w, b, 2, 1, 2))); },
                {x, w, b}, 1e-5) < 1e-6);
      auto wt = rand_tensor(rng, {4, 3, 4, 4});
      auto bt = rand_tensor(rng, {3});
      CHECK(grad_check(
                [&] {
                  auto y = ops::conv_transpose2d(x, wt, bt, 2, 1);
                  return ops::mean(ops::mul(y, y));
                },
                {x, wt, bt}, 1e-5) < 1e-6);
    }
    // pooling
    {
      auto x = rand_tensor_nudged(rng, {2, 3, 4, 4}, 0.02);
      CHECK(grad_check([&] { return ops::sum(ops::maxpool2d(x, 2, 2)); }, {x}) < 1e-7);
      CHECK(grad_check(
                [&] {
                  auto p = ops::global_avgpool(x);
                  return ops::sum(ops::mul(p, p));
                },
                {x}) < 1e-7);
    }
    // batchnorm, batch-stats and running-stats paths
    {
      auto x = rand_tensor(rng, {3, 2, 3, 3});
      auto g = rand_tensor(rng, {2}, 0.5, 1.5);
      auto be = rand_tensor(rng, {2});
      CHECK(grad_check(
                [&] {
                  ops::BnBuffers<double> buf;  // fresh: forward mutates running stats
                  buf.init(2);
                  auto y = ops::batchnorm2d(x, g, be, buf, true);
                  return ops::mean(ops::mul(y, y));
                },
                {x, g, be}, 1e-6) < 1e-5);
      ops::BnBuffers<double> frozen;
      frozen.init(2);
      frozen.running_mean = {0.3, -0.2};
      frozen.running_var = {1.4, 0.8};
      CHECK(grad_check(
                [&] {
                  auto y = ops::batchnorm2d(x, g, be, frozen, false);
                  return ops::mean(ops::mul(y, y));
                },
                {x, g, be}, 1e-6) < 1e-5);
    }
    // row normalization
    {
      auto x = rand_tensor(rng, {3, 6}, 0.2, 1.5);
      CHECK(grad_check(
                [&] {
                  auto y = ops::row_l2_normalize(x);
                  return ops::sum(ops::mul(y, ops::log(x)));
                },
                {x}, 1e-6) < 1e-6);
    }
  }
}

TEST_CASE("grad_check rejects non-finite functions") {
  auto x = Tensor<double>::from({1}, {-1.0});
  CHECK_THROWS(grad_check([&] { return ops::log(x); }, {x}));
}

TEST_CASE("batchnorm with batch size 1 falls back to running statistics") {
  Rng rng(31);
  auto x = rand_tensor(rng, {1, 2, 3, 3});
  auto g = rand_tensor(rng, {2}, 0.5, 1.5);
  auto b = rand_tensor(rng, {2});
  ops::BnBuffers<double> buf;
  buf.init(2);
  buf.running_mean = {0.4, -0.1};
  buf.running_var = {1.2, 0.9};
  const auto before_mean = buf.running_mean;
  auto train_out = ops::batchnorm2d(x, g, b, buf, /*training=*/true);
  auto eval_out = ops::batchnorm2d(x, g, b, buf, /*training=*/false);
  CHECK(train_out.data() == eval_out.data());   // same statistics used
  CHECK(buf.running_mean == before_mean);       // and nothing was updated
}

TEST_CASE("parallel thread count never changes results bitwise") {
  Rng rng(77);
  auto x = rand_tensor(rng, {4, 3, 10, 10});
  auto w = rand_tensor(rng, {6, 3, 3, 3});
  auto b = rand_tensor(rng, {6});
  set_num_threads(1);
  auto one = ops::conv2d(x, w, b, 1, 1);
  set_num_threads(4);
  auto four = ops::conv2d(x, w, b, 1, 1);
  set_num_threads(1);
  CHECK(std::memcmp(one.data().data(), four.data().data(),
                    size_t(one.size()) * sizeof(double)) == 0);
}

TEST_CASE("independent graphs train concurrently without interference") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    auto x = Tensor<double>::from({2, 3}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
    auto w = rand_tensor(rng, {3, 2});
    w.set_requires_grad(true);
    for (int i = 0; i < 50; ++i) {
      w.zero_grad();
      auto loss = ops::mean(ops::mul(ops::matmul(x, w), ops::matmul(x, w)));
      backward(loss);
      for (size_t j = 0; j < w.data().size(); ++j) w.data()[j] -= 0.01 * w.grad()[j];
    }
    return w.data();
  };
  auto serial = run(5);
  std::vector<double> threaded;
  std::thread worker([&] { threaded = run(5); });
  auto other = run(6);
  worker.join();
  CHECK(serial == threaded);
  CHECK(serial != other);
}

TEST_CASE("polynomial grad_check is near machine precision") {
  Rng rng(3);
  auto x = rand_tensor(rng, {5});
  CHECK(grad_check([&] { return ops::sum(ops::mul(x, x)); }, {x}) < 1e-8);
}
