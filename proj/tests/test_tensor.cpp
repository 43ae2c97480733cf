#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "catsd/rng.hpp"
#include "catsd/tensor.hpp"

using namespace catsd;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = rng.uniform(lo, hi);
  return Tensor::from_data(std::move(shape), std::move(data));
}

}  // namespace

TEST_CASE("elementwise examples") {
  Tensor r = relu(Tensor::from_data({3}, {-1.0, 0.0, 2.0}));
  CHECK(r.data()[0] == 0.0);
  CHECK(r.data()[1] == 0.0);
  CHECK(r.data()[2] == 2.0);

  Tensor s = add(Tensor::from_data({2}, {1.0, 2.0}), Tensor::from_data({2}, {3.0, 4.0}));
  CHECK(s.data()[0] == 4.0);
  CHECK(s.data()[1] == 6.0);
}

TEST_CASE("mul backward is the product rule") {
  Tensor x = Tensor::from_data({1}, {3.0}, true);
  Tensor y = Tensor::from_data({1}, {5.0}, true);
  GradTape tape;
  Tensor z = mul(x, y);
  tape.backward(z);
  CHECK(x.grad()[0] == 5.0);
  CHECK(y.grad()[0] == 3.0);
}

TEST_CASE("broadcast follows trailing-dimension alignment") {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from_data({3}, {10, 20, 30});
  Tensor c = add(a, b);
  CHECK(c.shape() == Shape{2, 3});
  CHECK(c.at({0, 0}) == 11.0);
  CHECK(c.at({1, 2}) == 36.0);

  Tensor col = Tensor::from_data({2, 1}, {100, 200});
  Tensor d = add(a, col);
  CHECK(d.at({0, 2}) == 103.0);
  CHECK(d.at({1, 0}) == 204.0);

  CHECK_THROWS_AS(add(a, Tensor::from_data({4}, {1, 2, 3, 4})), std::invalid_argument);
}

TEST_CASE("broadcast backward reduces over expanded dims") {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4}, true);
  Tensor b = Tensor::from_data({2}, {5, 7}, true);
  GradTape tape;
  Tensor loss = sum(mul(a, b));
  tape.backward(loss);
  CHECK(b.grad()[0] == doctest::Approx(1 + 3));
  CHECK(b.grad()[1] == doctest::Approx(2 + 4));
  CHECK(a.grad()[0] == 5.0);
  CHECK(a.grad()[1] == 7.0);
}

TEST_CASE("log rejects non-positive input, exp rejects overflow") {
  CHECK_THROWS_AS(catsd::log(Tensor::from_data({2}, {1.0, 0.0})), std::invalid_argument);
  CHECK_THROWS_AS(catsd::exp(Tensor::from_data({1}, {1000.0})), std::invalid_argument);
  Tensor ok = catsd::log(Tensor::from_data({1}, {std::exp(1.0)}));
  CHECK(ok.item() == doctest::Approx(1.0));
}

TEST_CASE("conv2d identity kernel is the identity map bit-exact") {
  Rng rng(7);
  Tensor img = random_tensor({2, 5, 6}, rng);
  Tensor kernel = Tensor::zeros({2, 2, 1, 1});
  kernel.mutable_data()[0] = 1.0;  // out0 <- in0
  kernel.mutable_data()[3] = 1.0;  // out1 <- in1
  Tensor bias = Tensor::zeros({2});
  Tensor out = conv2d(img, kernel, bias, 0);
  REQUIRE(out.shape() == img.shape());
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out.data()[i] == img.data()[i]);
}

TEST_CASE("conv2d matches a hand computation") {
  Tensor img = Tensor::from_data({1, 2, 2}, {1, 2, 3, 4});
  Tensor kernel = Tensor::from_data({1, 1, 1, 1}, {2.0});
  Tensor bias = Tensor::from_data({1}, {1.0});
  Tensor out = conv2d(img, kernel, bias, 0);
  CHECK(out.data()[0] == 3.0);
  CHECK(out.data()[1] == 5.0);
  CHECK(out.data()[2] == 7.0);
  CHECK(out.data()[3] == 9.0);

  Tensor zero_k = Tensor::zeros({1, 1, 3, 3});
  Tensor zero_b = Tensor::zeros({1});
  Tensor z = conv2d(img, zero_k, zero_b, 1);
  for (double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("conv2d validates kernel and output extents") {
  Tensor img = Tensor::from_data({1, 2, 2}, {1, 2, 3, 4});
  CHECK_THROWS_AS(conv2d(img, Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1}), 0),
                  std::invalid_argument);
  CHECK_THROWS_AS(conv2d(img, Tensor::zeros({1, 1, 5, 5}), Tensor::zeros({1}), 0),
                  std::invalid_argument);
}

TEST_CASE("pool2d examples") {
  Tensor x = Tensor::from_data({1, 2, 2}, {1, 2, 3, 4});
  CHECK(pool2d(x, 2, PoolMode::Mean).item() == doctest::Approx(2.5));
  CHECK(pool2d(x, 2, PoolMode::Max).item() == 4.0);

  Tensor c = Tensor::full({1, 4, 4}, 3.25);
  Tensor cm = pool2d(c, 2, PoolMode::Mean);
  Tensor cx = pool2d(c, 2, PoolMode::Max);
  for (double v : cm.data()) CHECK(v == doctest::Approx(3.25));
  for (double v : cx.data()) CHECK(v == 3.25);

  CHECK_THROWS_AS(pool2d(Tensor::zeros({1, 3, 4}), 2, PoolMode::Mean), std::invalid_argument);
}

TEST_CASE("pool2d gradients") {
  Tensor x = Tensor::from_data({1, 2, 2}, {1, 5, 3, 4}, true);
  {
    GradTape tape;
    Tensor loss = sum(pool2d(x, 2, PoolMode::Max));
    tape.backward(loss);
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 1.0);  // argmax
    CHECK(x.grad()[3] == 0.0);
  }
  {
    GradTape tape;
    Tensor loss = sum(pool2d(x, 2, PoolMode::Mean));
    tape.backward(loss);
    for (double g : x.grad()) CHECK(g == doctest::Approx(0.25));
  }
}

TEST_CASE("softmax examples") {
  Tensor a = softmax(Tensor::from_data({2}, {0.0, 0.0}), {1.0, 1.0});
  CHECK(a.data()[0] == doctest::Approx(0.5));
  CHECK(a.data()[1] == doctest::Approx(0.5));

  Tensor b = softmax(Tensor::from_data({2}, {0.0, std::log(2.0)}), {1.0, 1.0});
  CHECK(b.data()[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(b.data()[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  // High-temperature limit: at T the distribution is 1/(1+exp(-20/T)), which
  // tends to uniform as T grows.
  Tensor c = softmax(Tensor::from_data({2}, {10.0, -10.0}), {1000.0, 1000.0});
  CHECK(c.data()[0] == doctest::Approx(1.0 / (1.0 + std::exp(-0.02))).epsilon(1e-12));
  Tensor c2 = softmax(Tensor::from_data({2}, {10.0, -10.0}), {1e7, 1e7});
  CHECK(std::abs(c2.data()[0] - 0.5) < 1e-4);
  CHECK(std::abs(c2.data()[1] - 0.5) < 1e-4);

  CHECK_THROWS_AS(softmax(Tensor::from_data({2}, {0.0, 0.0}), {1.0, 0.0}),
                  std::invalid_argument);
}

TEST_CASE("softmax sums to one and is shift invariant") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor logits = random_tensor({5, 3, 2}, rng, -30.0, 30.0);
    std::vector<double> temps(5);
    for (double& t : temps) t = rng.uniform(0.1, 10.0);
    Tensor y = softmax(logits, temps, 0);
    for (std::size_t i = 0; i < 6; ++i) {
      double s = 0.0;
      for (int c = 0; c < 5; ++c) s += y.data()[static_cast<std::size_t>(c) * 6 + i];
      CHECK(std::abs(s - 1.0) < 1e-12);
    }

    // Adding c*T_i to logit i shifts every temperature-divided logit by c.
    const double shift = rng.uniform(-5.0, 5.0);
    std::vector<double> shifted(logits.data().begin(), logits.data().end());
    for (int c = 0; c < 5; ++c)
      for (std::size_t i = 0; i < 6; ++i)
        shifted[static_cast<std::size_t>(c) * 6 + i] += shift * temps[static_cast<std::size_t>(c)];
    Tensor y2 = softmax(Tensor::from_data({5, 3, 2}, std::move(shifted)), temps, 0);
    for (std::size_t i = 0; i < y.size(); ++i)
      CHECK(std::abs(y.data()[i] - y2.data()[i]) < 1e-12);
  }
}

TEST_CASE("softmax along the trailing axis by default") {
  Tensor logits = Tensor::from_data({2, 3}, {0, 0, 0, 1, 1, 1});
  Tensor y = softmax(logits, {1, 1, 1});
  for (double v : y.data()) CHECK(v == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("backward fills leaf gradients") {
  Rng rng(3);
  Tensor x = random_tensor({4, 3}, rng);
  x.set_requires_grad(true);
  {
    GradTape tape;
    Tensor loss = sum(x);
    tape.backward(loss);
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  Tensor y = Tensor::from_data({1}, {3.0}, true);
  {
    GradTape tape;
    Tensor loss = sum(mul(y, y));
    tape.backward(loss);
    CHECK(y.grad()[0] == 6.0);
  }
}

TEST_CASE("backward rejects non-scalar roots") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  GradTape tape;
  Tensor y = relu(x);
  CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("composite graph gradient matches finite differences") {
  Rng rng(19);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor seed_a = random_tensor({2, 4, 4}, rng);
    Tensor seed_k = random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5);
    Tensor seed_b = random_tensor({3}, rng, -0.1, 0.1);
    auto f = [](const std::vector<Tensor>& in) {
      Tensor conv = conv2d(in[0], in[1], in[2], 1);
      Tensor act = relu(conv);
      Tensor pooled = pool2d(act, 2, PoolMode::Mean);
      Tensor up = upsample_bilinear(pooled, 2);
      Tensor sq = mul(up, up);
      return mean(add(sq, scalar_mul(up, 0.3)));
    };
    auto rep = grad_check(f, {seed_a, seed_k, seed_b}, 1e-5, 1e-4);
    CHECK(rep.pass);
    CHECK(rep.max_rel_error <= 1e-4);
  }
}

TEST_CASE("grad_check accepts a quadratic") {
  Rng rng(5);
  Tensor x = random_tensor({7}, rng);
  auto f = [](const std::vector<Tensor>& in) { return sum(mul(in[0], in[0])); };
  auto rep = grad_check(f, {x}, 1e-5, 1e-4);
  CHECK(rep.pass);
  CHECK(rep.coords_checked == 7);
}

TEST_CASE("grad_check flags a wrong gradient") {
  // exp's true derivative is exp(x); pretend it is 1 by composing through a
  // detached reconstruction: compare exp against a deliberately wrong analytic
  // value by checking that a mismatched function/gradient pair fails.
  Tensor x = Tensor::from_data({3}, {0.1, -0.2, 0.4});
  auto wrong = [](const std::vector<Tensor>& in) {
    // loss whose tape gradient is computed for sum(x*x) but whose value is
    // sum(x*x) + x0^3 asymmetry introduced via data-dependent constant
    Tensor sq = mul(in[0], in[0]);
    double bump = in[0].data()[0] * in[0].data()[0] * in[0].data()[0];
    return add(sum(sq), Tensor::scalar(bump));  // scalar term invisible to the tape
  };
  auto rep = grad_check(wrong, {x}, 1e-5, 1e-4);
  CHECK_FALSE(rep.pass);
}

TEST_CASE("slice, concat and l2_norm") {
  Tensor x = Tensor::from_data({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  Tensor s = slice_channels(x, 2);
  CHECK(s.shape() == Shape{2, 2});
  CHECK(s.data()[3] == 4.0);

  Tensor a = Tensor::from_data({2}, {3.0, 4.0});
  CHECK(l2_norm(a).item() == doctest::Approx(5.0));
  CHECK(l2_norm(Tensor::zeros({4})).item() == 0.0);

  Tensor c = concat({Tensor::from_data({2}, {1, 2}), Tensor::from_data({1}, {9})});
  CHECK(c.shape() == Shape{3});
  CHECK(c.data()[2] == 9.0);
}

TEST_CASE("l2_norm gradient is zero at the origin and exact elsewhere") {
  Tensor z = Tensor::zeros({3}, true);
  {
    GradTape tape;
    Tensor n = l2_norm(z);
    tape.backward(n);
    for (double g : z.grad()) CHECK(g == 0.0);
  }
  Rng rng(23);
  Tensor v = random_tensor({6}, rng);
  auto f = [](const std::vector<Tensor>& in) { return l2_norm(in[0]); };
  CHECK(grad_check(f, {v}, 1e-5, 1e-4).pass);
}

TEST_CASE("cross_entropy_mean value and gradient") {
  // Two pixels, two classes, uniform logits -> log 2 per pixel.
  Tensor logits = Tensor::zeros({2, 1, 2});
  CHECK(cross_entropy_mean(logits, {0, 1}).item() == doctest::Approx(std::log(2.0)));

  Rng rng(29);
  Tensor z = random_tensor({4, 2, 3}, rng);
  std::vector<int> labels(6);
  for (int& l : labels) l = static_cast<int>(rng.uniform_int(4));
  auto f = [&labels](const std::vector<Tensor>& in) {
    return cross_entropy_mean(in[0], labels);
  };
  CHECK(grad_check(f, {z}, 1e-5, 1e-4).pass);

  CHECK_THROWS_AS(cross_entropy_mean(logits, {0, 5}), std::invalid_argument);
}

TEST_CASE("region_pooled_slices matches direct means") {
  Tensor x = Tensor::from_data({1, 2, 2}, {1, 2, 3, 4});
  Tensor e = region_pooled_slices(x, {{0, 2, 0, 2}});
  REQUIRE(e.shape() == Shape{4});
  CHECK(e.data()[0] == doctest::Approx(1.5));
  CHECK(e.data()[1] == doctest::Approx(3.5));
  CHECK(e.data()[2] == doctest::Approx(2.0));
  CHECK(e.data()[3] == doctest::Approx(3.0));

  Rng rng(31);
  Tensor y = random_tensor({3, 4, 6}, rng);
  auto f = [](const std::vector<Tensor>& in) {
    Tensor emb = region_pooled_slices(in[0], {{0, 2, 0, 3}, {2, 4, 3, 6}, {0, 4, 0, 6}});
    return l2_norm(emb);
  };
  CHECK(grad_check(f, {y}, 1e-5, 1e-4).pass);

  CHECK_THROWS_AS(region_pooled_slices(x, {{0, 3, 0, 2}}), std::invalid_argument);
}

TEST_CASE("upsample_bilinear keeps constants and interpolates") {
  Tensor c = Tensor::full({2, 3, 3}, 0.7);
  Tensor up = upsample_bilinear(c, 4);
  CHECK(up.shape() == Shape{2, 12, 12});
  for (double v : up.data()) CHECK(v == doctest::Approx(0.7));
}

TEST_CASE("teacher evaluation under NoTapeScope records nothing") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  GradTape tape;
  {
    NoTapeScope frozen;
    Tensor y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(tape.size() == 0);
  Tensor z = sum(mul(x, x));
  tape.backward(z);
  CHECK(x.grad()[0] == doctest::Approx(2.0));
}
