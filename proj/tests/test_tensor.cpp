#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>

#include "sod/tensor.hpp"
#include "support/testutil.hpp"

using namespace sod;
using sodtest::gradcheck;
using sodtest::randn;

TEST_CASE("conv2d identity kernel passes input through") {
  Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor w = Tensor::full({1, 1, 1, 1}, 1.0);
  Tensor b = Tensor::zeros({1});
  Tensor y = conv2d(nullptr, x, w, b, 1, 0);
  CHECK(y.shape() == Shape{1, 1, 3, 3});
  for (real v : y.data()) CHECK(v == doctest::Approx(1.0));
}

TEST_CASE("conv2d all-ones 3x3 kernel sums the window") {
  Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor w = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor b = Tensor::zeros({1});
  Tensor y = conv2d(nullptr, x, w, b, 1, 0);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.item() == doctest::Approx(9.0));
}

TEST_CASE("conv2d rejects channel mismatch with both shapes in the message") {
  Tensor x = Tensor::zeros({1, 3, 4, 4});
  Tensor w = Tensor::zeros({2, 2, 3, 3});
  Tensor b = Tensor::zeros({2});
  CHECK_THROWS_WITH_AS(conv2d(nullptr, x, w, b, 1, 1),
                       doctest::Contains("[1,3,4,4]"), ShapeError);
}

TEST_CASE("conv2d output shape law over fuzzed geometry") {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 50; ++t) {
    int H = 1 + static_cast<int>(rng() % 12);
    int k = 1 + static_cast<int>(rng() % 4);
    int s = 1 + static_cast<int>(rng() % 3);
    int p = static_cast<int>(rng() % 3);
    if (H + 2 * p < k) continue;
    Tensor x = randn(rng, {1, 2, H, H}, 1.0, false);
    Tensor w = randn(rng, {3, 2, k, k}, 1.0, false);
    Tensor b = Tensor::zeros({3});
    Tensor y = conv2d(nullptr, x, w, b, s, p);
    CHECK(y.dim(2) == (H + 2 * p - k) / s + 1);
    CHECK(y.dim(3) == (H + 2 * p - k) / s + 1);
  }
}

TEST_CASE("conv2d gradients match finite differences") {
  std::mt19937_64 rng(11);
  Tensor x = randn(rng, {1, 2, 5, 5});
  Tensor w = randn(rng, {3, 2, 3, 3}, 0.5);
  Tensor b = randn(rng, {3}, 0.5);
  std::vector<Tensor> params{x, w, b};
  gradcheck(params, [&](Tape* t) { return sum(t, conv2d(t, params[0], params[1], params[2], 1, 1)); });
}

TEST_CASE("conv2d strided gradients match finite differences") {
  std::mt19937_64 rng(12);
  Tensor x = randn(rng, {2, 2, 6, 6});
  Tensor w = randn(rng, {2, 2, 3, 3}, 0.5);
  Tensor b = randn(rng, {2}, 0.5);
  std::vector<Tensor> params{x, w, b};
  gradcheck(params, [&](Tape* t) {
    return sum(t, square(t, conv2d(t, params[0], params[1], params[2], 2, 1)));
  });
}

TEST_CASE("silu basics") {
  Tensor z = Tensor::scalar(0.0);
  CHECK(silu(nullptr, z).item() == doctest::Approx(0.0));
  Tensor big = Tensor::scalar(20.0);
  CHECK(silu(nullptr, big).item() == doctest::Approx(20.0).epsilon(1e-6));
}

TEST_CASE("elementwise and activation gradients match finite differences") {
  std::mt19937_64 rng(21);
  auto check_unary = [&](Tensor (*op)(Tape*, const Tensor&)) {
    Tensor x = randn(rng, {2, 3});
    std::vector<Tensor> params{x};
    gradcheck(params, [&](Tape* t) { return sum(t, op(t, params[0])); });
  };
  check_unary(&silu);
  check_unary(&sigmoid);
  check_unary(&gelu);
  check_unary(&square);
  check_unary(&texp);
  check_unary(&tatan);

  // positive-domain ops
  Tensor xp = sodtest::randu(rng, {7}, 0.5, 3.0, true);
  std::vector<Tensor> pp{xp};
  gradcheck(pp, [&](Tape* t) { return sum(t, tlog(t, tsqrt(t, pp[0]))); });
}

TEST_CASE("binary op gradients match finite differences") {
  std::mt19937_64 rng(22);
  Tensor a = randn(rng, {3, 4});
  Tensor b = sodtest::randu(rng, {3, 4}, 0.5, 2.0, true);
  std::vector<Tensor> params{a, b};
  gradcheck(params, [&](Tape* t) {
    Tensor u = mul(t, params[0], params[1]);
    Tensor v = div(t, params[0], params[1]);
    Tensor w = maximum(t, params[0], params[1]);
    Tensor z = minimum(t, params[0], params[1]);
    return sum(t, add(t, add(t, u, v), sub(t, w, z)));
  });
}

TEST_CASE("linear and bmm gradients match finite differences") {
  std::mt19937_64 rng(23);
  Tensor x = randn(rng, {2, 3, 4});
  Tensor w = randn(rng, {4, 5}, 0.5);
  Tensor b = randn(rng, {5}, 0.5);
  std::vector<Tensor> params{x, w, b};
  gradcheck(params, [&](Tape* t) { return sum(t, square(t, linear(t, params[0], params[1], params[2]))); });

  Tensor p = randn(rng, {2, 3, 4});
  Tensor q = randn(rng, {2, 4, 2});
  std::vector<Tensor> params2{p, q};
  gradcheck(params2, [&](Tape* t) { return sum(t, square(t, bmm(t, params2[0], params2[1]))); });
}

TEST_CASE("softmax rows sum to one and gradients match") {
  std::mt19937_64 rng(24);
  Tensor x = randn(rng, {4, 6}, 2.0);
  Tensor y = softmax_last(nullptr, x);
  for (int r = 0; r < 4; ++r) {
    real s = 0;
    for (int c = 0; c < 6; ++c) s += y.data()[static_cast<size_t>(r * 6 + c)];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
  std::vector<Tensor> params{x};
  gradcheck(params, [&](Tape* t) {
    Tensor sm = softmax_last(t, params[0]);
    return sum(t, square(t, sm));
  });
}

TEST_CASE("layer_norm on constant vector gives zeros") {
  Tensor x = Tensor::full({2, 5}, 3.7);
  Tensor gamma = Tensor::full({5}, 1.0);
  Tensor beta = Tensor::zeros({5});
  Tensor y = layer_norm(nullptr, x, gamma, beta, 1e-5);
  for (real v : y.data()) CHECK(std::abs(v) < 1e-6);
}

TEST_CASE("layer_norm affine collapse gamma=0 beta=c") {
  Tensor x = Tensor::full({2, 4}, 1.0);
  x.data()[1] = 9.0;
  Tensor gamma = Tensor::zeros({4});
  Tensor beta = Tensor::full({4}, 2.5);
  Tensor y = layer_norm(nullptr, x, gamma, beta, 1e-5);
  for (real v : y.data()) CHECK(v == doctest::Approx(2.5));
}

TEST_CASE("layer_norm rejects extent mismatch") {
  Tensor x = Tensor::zeros({2, 4});
  Tensor gamma = Tensor::zeros({3});
  Tensor beta = Tensor::zeros({3});
  CHECK_THROWS_AS(layer_norm(nullptr, x, gamma, beta, 1e-5), ShapeError);
}

TEST_CASE("layer_norm gradients match finite differences") {
  std::mt19937_64 rng(25);
  Tensor x = randn(rng, {3, 6});
  Tensor gamma = randn(rng, {6}, 0.5);
  Tensor beta = randn(rng, {6}, 0.5);
  std::vector<Tensor> params{x, gamma, beta};
  gradcheck(params, [&](Tape* t) {
    return sum(t, square(t, layer_norm(t, params[0], params[1], params[2], 1e-5)));
  });
}

TEST_CASE("upsample_nearest2 replicates and its backward sums replicas") {
  Tensor x = Tensor::full({1, 1, 1, 1}, 7.0);
  x.set_requires_grad(true);
  Tape tape;
  Tensor y = upsample_nearest2(&tape, x);
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  for (real v : y.data()) CHECK(v == doctest::Approx(7.0));
  Tensor loss = sum(&tape, y);
  tape.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(4.0));
}

TEST_CASE("upsample_nearest2 gradients match finite differences") {
  std::mt19937_64 rng(26);
  Tensor x = randn(rng, {1, 2, 3, 3});
  std::vector<Tensor> params{x};
  gradcheck(params, [&](Tape* t) { return sum(t, square(t, upsample_nearest2(t, params[0]))); });
}

TEST_CASE("concat_channels ordering and unary identity") {
  std::mt19937_64 rng(27);
  Tensor a = randn(rng, {1, 2, 2, 2}, 1.0, false);
  Tensor b = randn(rng, {1, 2, 2, 2}, 1.0, false);
  Tensor one = concat_channels(nullptr, {a});
  for (size_t i = 0; i < a.data().size(); ++i) CHECK(one.data()[i] == a.data()[i]);
  Tensor y = concat_channels(nullptr, {a, b});
  CHECK(y.shape() == Shape{1, 4, 2, 2});
  for (size_t i = 0; i < 8; ++i) CHECK(y.data()[i] == a.data()[i]);
  for (size_t i = 0; i < 8; ++i) CHECK(y.data()[8 + i] == b.data()[i]);
}

TEST_CASE("concat_channels rejects spatial mismatch naming the operand") {
  Tensor a = Tensor::zeros({1, 2, 2, 2});
  Tensor b = Tensor::zeros({1, 2, 3, 3});
  CHECK_THROWS_WITH_AS(concat_channels(nullptr, {a, b}), doctest::Contains("operand 1"), ShapeError);
}

TEST_CASE("concat then split is the identity") {
  std::mt19937_64 rng(28);
  Tensor a = randn(rng, {2, 3, 4, 4}, 1.0, false);
  Tensor b = randn(rng, {2, 5, 4, 4}, 1.0, false);
  Tensor y = concat_channels(nullptr, {a, b});
  // split back via gather
  std::vector<std::int64_t> idx;
  for (int n = 0; n < 2; ++n)
    for (std::int64_t i = 0; i < 3 * 16; ++i) idx.push_back(n * 8 * 16 + i);
  Tensor a2 = gather(nullptr, y, idx, {2, 3, 4, 4});
  for (size_t i = 0; i < a.data().size(); ++i) CHECK(a2.data()[i] == a.data()[i]);
}

TEST_CASE("concat_channels gradients match finite differences") {
  std::mt19937_64 rng(29);
  Tensor a = randn(rng, {1, 2, 3, 3});
  Tensor b = randn(rng, {1, 3, 3, 3});
  std::vector<Tensor> params{a, b};
  gradcheck(params, [&](Tape* t) {
    return sum(t, square(t, concat_channels(t, {params[0], params[1]})));
  });
}

TEST_CASE("max_pool2d gradients match finite differences") {
  std::mt19937_64 rng(30);
  Tensor x = randn(rng, {1, 2, 6, 6});
  std::vector<Tensor> params{x};
  gradcheck(params, [&](Tape* t) { return sum(t, square(t, max_pool2d(t, params[0], 5, 1, 2))); });
}

TEST_CASE("batch_norm2d train-mode gradients match finite differences") {
  std::mt19937_64 rng(31);
  Tensor x = randn(rng, {2, 3, 4, 4});
  Tensor gamma = randn(rng, {3}, 0.5);
  Tensor beta = randn(rng, {3}, 0.5);
  std::vector<Tensor> params{x, gamma, beta};
  gradcheck(params, [&](Tape* t) {
    Tensor rm = Tensor::zeros({3});
    Tensor rv = Tensor::full({3}, 1.0);
    return sum(t, square(t, batch_norm2d(t, params[0], params[1], params[2], rm, rv, 0.03, 1e-3, true)));
  });
}

TEST_CASE("batch_norm2d eval-mode uses running statistics") {
  std::mt19937_64 rng(32);
  Tensor x = randn(rng, {1, 2, 2, 2}, 1.0, false);
  Tensor gamma = Tensor::full({2}, 1.0);
  Tensor beta = Tensor::zeros({2});
  Tensor rm = Tensor::full({2}, 0.5);
  Tensor rv = Tensor::full({2}, 4.0);
  Tensor y = batch_norm2d(nullptr, x, gamma, beta, rm, rv, 0.03, 1e-3, false);
  for (size_t i = 0; i < x.data().size(); ++i)
    CHECK(y.data()[i] == doctest::Approx((x.data()[i] - 0.5) / std::sqrt(4.0 + 1e-3)));
}

TEST_CASE("backward of sum gives ones, of sum of squares gives 2x") {
  std::mt19937_64 rng(33);
  Tensor x = randn(rng, {5});
  x.set_requires_grad(true);
  {
    Tape tape;
    Tensor loss = sum(&tape, x);
    tape.backward(loss);
    for (real g : x.grad()) CHECK(g == doctest::Approx(1.0));
  }
  x.zero_grad();
  {
    Tape tape;
    Tensor loss = sum(&tape, square(&tape, x));
    tape.backward(loss);
    for (size_t i = 0; i < 5; ++i) CHECK(x.grad()[i] == doctest::Approx(2.0 * x.data()[i]));
  }
}

TEST_CASE("backward rejects non-scalar loss") {
  Tensor x = Tensor::zeros({3}, true);
  Tape tape;
  Tensor y = mul_scalar(&tape, x, 2.0);
  CHECK_THROWS_AS(tape.backward(y), ShapeError);
}

TEST_CASE("composite conv->silu->sum matches finite differences") {
  std::mt19937_64 rng(34);
  Tensor x = randn(rng, {1, 2, 4, 4});
  Tensor w = randn(rng, {2, 2, 3, 3}, 0.5);
  Tensor b = randn(rng, {2}, 0.5);
  std::vector<Tensor> params{x, w, b};
  gradcheck(params, [&](Tape* t) {
    return sum(t, silu(t, conv2d(t, params[0], params[1], params[2], 1, 1)));
  });
}

TEST_CASE("permute/reshape round-trip and gradients") {
  std::mt19937_64 rng(35);
  Tensor x = randn(rng, {2, 3, 4});
  std::vector<Tensor> params{x};
  gradcheck(params, [&](Tape* t) {
    Tensor y = permute(t, params[0], {2, 0, 1});
    Tensor z = reshape(t, y, {4, 6});
    return sum(t, square(t, z));
  });
  Tensor y = permute(nullptr, x, {2, 0, 1});
  CHECK(y.shape() == Shape{4, 2, 3});
  Tensor back = permute(nullptr, y, {1, 2, 0});
  for (size_t i = 0; i < x.data().size(); ++i) CHECK(back.data()[i] == x.data()[i]);
}

TEST_CASE("gather scatter-add gradients match finite differences") {
  std::mt19937_64 rng(36);
  Tensor x = randn(rng, {3, 4});
  std::vector<std::int64_t> idx{0, 5, 5, 11, 3};
  std::vector<Tensor> params{x};
  gradcheck(params, [&](Tape* t) { return sum(t, square(t, gather(t, params[0], idx, {5}))); });
}

TEST_CASE("bce_with_logits_mean value and gradient") {
  std::mt19937_64 rng(37);
  Tensor x = randn(rng, {6}, 2.0);
  Tensor tgt = sodtest::randu(rng, {6}, 0.0, 1.0, false);
  double expect = 0;
  for (int i = 0; i < 6; ++i) {
    double p = 1 / (1 + std::exp(-x.data()[static_cast<size_t>(i)]));
    double t = tgt.data()[static_cast<size_t>(i)];
    expect += -(t * std::log(p) + (1 - t) * std::log(1 - p));
  }
  expect /= 6;
  CHECK(bce_with_logits_mean(nullptr, x, tgt).item() == doctest::Approx(expect).epsilon(1e-9));
  std::vector<Tensor> params{x};
  gradcheck(params, [&](Tape* t) { return bce_with_logits_mean(t, params[0], tgt); });
}

TEST_CASE("forward determinism: identical inputs give bit-identical outputs") {
  std::mt19937_64 rng(38);
  Tensor x = randn(rng, {1, 3, 6, 6}, 1.0, false);
  Tensor w = randn(rng, {4, 3, 3, 3}, 0.5, false);
  Tensor b = randn(rng, {4}, 0.5, false);
  Tensor y1 = silu(nullptr, conv2d(nullptr, x, w, b, 2, 1));
  Tensor y2 = silu(nullptr, conv2d(nullptr, x, w, b, 2, 1));
  for (size_t i = 0; i < y1.data().size(); ++i) CHECK(y1.data()[i] == y2.data()[i]);
}

TEST_CASE("finite validation surfaces NaN") {
  Tensor x = Tensor::zeros({2});
  x.data()[1] = std::numeric_limits<real>::quiet_NaN();
  CHECK_THROWS_AS(x.check_finite("probe"), NumericError);
}
