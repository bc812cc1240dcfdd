#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "psdepth/rng.hpp"
#include "psdepth/tensor.hpp"
#include "support/finite_diff.hpp"

using namespace psd;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0,
                     bool requires_grad = true) {
  std::vector<double> vals(shape_numel(shape));
  for (double& v : vals) v = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(vals), requires_grad);
}

}  // namespace

TEST_CASE("exp identity case") {
  Tensor x = Tensor::scalar(0.0, true);
  Tensor y = exp(x);
  CHECK(y.item() == doctest::Approx(1.0).epsilon(1e-15));
  backward(y);
  CHECK(x.grad()[0] == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("softmax of a constant vector is uniform") {
  Tensor x = Tensor::full({4}, 3.7);
  Tensor y = softmax(x, 0);
  for (std::size_t i = 0; i < 4; ++i) CHECK(y.value_at(i) == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("gradient of mean(x*x) matches hand value and finite differences") {
  Tensor x = Tensor::from({3}, {1.0, 2.0, 3.0}, true);
  Tensor loss = mean(mul(x, x));
  backward(loss);
  // d/dx_i mean(x^2) = 2 x_i / 3
  CHECK(x.grad()[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  CHECK(x.grad()[1] == doctest::Approx(4.0 / 3.0).epsilon(1e-14));
  CHECK(x.grad()[2] == doctest::Approx(2.0).epsilon(1e-14));

  auto program = [](const std::vector<Tensor>& in) { return mean(mul(in[0], in[0])); };
  CHECK(oracle::gradcheck(program, {x}, 0) < 1e-6);
}

TEST_CASE("backward of sum gives ones; zero-weight loss gives zeros") {
  Tensor x = Tensor::from({3}, {4.0, -1.0, 0.5}, true);
  backward(sum(x));
  for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == 1.0);

  Tensor y = Tensor::from({3}, {4.0, -1.0, 0.5}, true);
  backward(sum(scale(y, 0.0)));
  for (std::size_t i = 0; i < 3; ++i) CHECK(y.grad()[i] == 0.0);
}

TEST_CASE("backward rejects non-scalar loss") {
  Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
  CHECK_THROWS_AS(backward(add(x, x)), NumericError);
}

TEST_CASE("detach blocks gradient and preserves values") {
  Tensor x = Tensor::from({3}, {0.5, -1.5, 2.0}, true);
  Tensor y = Tensor::from({3}, {1.0, 1.0, 1.0}, true);

  SUBCASE("L1(detach(x) - y) leaves x without gradient") {
    Tensor d = detach(x);
    for (std::size_t i = 0; i < 3; ++i) CHECK(d.value_at(i) == x.value_at(i));
    backward(norm_l1(sub(d, y)));
    CHECK_FALSE(x.has_grad());
    CHECK(y.has_grad());
  }

  SUBCASE("L1(x - detach(y)) gives sign gradient on x only") {
    backward(norm_l1(sub(x, detach(y))));
    CHECK_FALSE(y.has_grad());
    CHECK(x.grad()[0] == -1.0);  // 0.5 - 1 < 0
    CHECK(x.grad()[1] == -1.0);
    CHECK(x.grad()[2] == 1.0);
  }
}

TEST_CASE("fan-out gradients add exactly") {
  Rng rng(7);
  Tensor x = random_tensor({5}, rng);
  Tensor fx = sum(mul(x, x));
  Tensor gx = sum(exp(x));
  backward(add(fx, gx));
  std::vector<double> combined(x.grad().begin(), x.grad().end());

  Tensor x2 = Tensor::from({5}, std::vector<double>(x.values().begin(), x.values().end()), true);
  backward(sum(mul(x2, x2)));
  std::vector<double> gf(x2.grad().begin(), x2.grad().end());
  x2.zero_grad();
  backward(sum(exp(x2)));
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(combined[i] == gf[i] + x2.grad()[i]);
  }
}

TEST_CASE("finite-difference check across the op suite") {
  Rng rng(42);
  struct Case {
    const char* name;
    std::function<Tensor(const std::vector<Tensor>&)> program;
    std::vector<Tensor> inputs;
    double tol;
  };
  auto r = [&](Shape s, double lo = -2.0, double hi = 2.0) {
    return random_tensor(std::move(s), rng, lo, hi);
  };

  std::vector<Case> cases;
  cases.push_back({"add", [](const auto& in) { return sum(add(in[0], in[1])); },
                   {r({3, 4}), r({3, 4})}, 1e-6});
  cases.push_back({"sub", [](const auto& in) { return sum(mul(sub(in[0], in[1]), in[0])); },
                   {r({3, 4}), r({3, 4})}, 1e-6});
  cases.push_back({"mul", [](const auto& in) { return sum(mul(in[0], in[1])); },
                   {r({6}), r({6})}, 1e-6});
  cases.push_back({"div", [](const auto& in) { return sum(divide(in[0], in[1])); },
                   {r({6}), r({6}, 0.5, 2.0)}, 1e-6});
  cases.push_back({"scalar broadcast", [](const auto& in) { return sum(divide(sub(in[0], in[1]), in[2])); },
                   {r({4, 3}), r({1}), r({1}, 0.5, 2.0)}, 1e-6});
  cases.push_back({"row broadcast", [](const auto& in) { return sum(mul(add(in[0], in[1]), in[0])); },
                   {r({5, 3}), r({3})}, 1e-6});
  cases.push_back({"exp", [](const auto& in) { return sum(exp(in[0])); }, {r({7})}, 1e-6});
  cases.push_back({"log", [](const auto& in) { return sum(log(in[0])); }, {r({7}, 0.2, 2.0)}, 1e-6});
  cases.push_back({"sqrt", [](const auto& in) { return sum(sqrt(in[0])); }, {r({7}, 0.2, 2.0)}, 1e-6});
  cases.push_back({"abs away from kink", [](const auto& in) { return sum(abs(in[0])); },
                   {r({7}, 0.1, 2.0)}, 1e-6});
  cases.push_back({"atan", [](const auto& in) { return sum(atan(in[0])); }, {r({7})}, 1e-6});
  cases.push_back({"acos", [](const auto& in) { return sum(acos(in[0])); },
                   {r({7}, -0.9, 0.9)}, 1e-6});
  cases.push_back({"gelu away from 0", [](const auto& in) { return sum(gelu(in[0])); },
                   {r({7}, 0.01, 2.0)}, 1e-6});
  cases.push_back({"square", [](const auto& in) { return sum(square(in[0])); }, {r({7})}, 1e-6});
  cases.push_back({"matmul lhs", [](const auto& in) { return sum(matmul(in[0], in[1])); },
                   {r({3, 4}), r({4, 2})}, 1e-6});
  cases.push_back({"transpose", [](const auto& in) { return sum(mul(transpose(in[0]), in[1])); },
                   {r({3, 4}), r({4, 3})}, 1e-6});
  cases.push_back({"reshape", [](const auto& in) { return sum(square(reshape(in[0], {2, 6}))); },
                   {r({3, 4})}, 1e-6});
  cases.push_back({"mean", [](const auto& in) { return mean(square(in[0])); }, {r({9})}, 1e-6});
  cases.push_back({"mean_axis", [](const auto& in) { return sum(square(mean_axis(in[0], 1))); },
                   {r({3, 4, 2})}, 1e-6});
  cases.push_back({"var_axis", [](const auto& in) { return sum(var_axis(in[0], 0)); },
                   {r({5, 3})}, 1e-6});
  cases.push_back({"softmax", [](const auto& in) { return sum(square(softmax(in[0], 1))); },
                   {r({3, 5})}, 1e-6});
  cases.push_back({"layer_norm x", [](const auto& in) { return sum(square(layer_norm(in[0], in[1], in[2]))); },
                   {r({4, 6}), r({6}, 0.5, 1.5), r({6})}, 1e-6});
  cases.push_back({"concat+slice", [](const auto& in) {
                     Tensor c = concat({in[0], in[1]}, 1);
                     return sum(square(slice(c, 1, 1, 3)));
                   },
                   {r({2, 3}), r({2, 2})}, 1e-6});
  cases.push_back({"norm_l1 away from kink", [](const auto& in) { return norm_l1(in[0]); },
                   {r({6}, 0.1, 2.0)}, 1e-6});
  cases.push_back({"norm_l2", [](const auto& in) { return norm_l2(in[0]); },
                   {r({6}, 0.3, 2.0)}, 1e-6});
  cases.push_back({"upsample nearest", [](const auto& in) { return sum(square(upsample2x_nearest(in[0]))); },
                   {r({3, 2, 2})}, 1e-6});
  cases.push_back({"upsample bilinear", [](const auto& in) { return sum(square(upsample2x_bilinear(in[0]))); },
                   {r({3, 2, 2})}, 1e-6});
  cases.push_back({"resize bilinear", [](const auto& in) { return sum(square(resize_bilinear(in[0], 5, 7))); },
                   {r({3, 4, 2})}, 1e-6});
  cases.push_back({"depthwise conv x", [](const auto& in) {
                     return sum(square(depthwise_conv3x3(in[0], in[1], in[2])));
                   },
                   {r({4, 5, 2}), r({2, 3, 3}), r({2})}, 1e-6});

  for (auto& c : cases) {
    CAPTURE(c.name);
    for (std::size_t input = 0; input < c.inputs.size(); ++input) {
      CAPTURE(input);
      CHECK(oracle::gradcheck(c.program, c.inputs, input) < c.tol);
    }
  }
}

TEST_CASE("grid sample: forward values, zero outside, gradient to values only") {
  // 2x2 single-channel map with known corners.
  Tensor src = Tensor::from({2, 2, 1}, {1.0, 2.0, 3.0, 4.0}, true);
  SampleGrid grid;
  grid.width = 3;
  grid.height = 1;
  grid.x = {1.0, 5.0, 1.5};
  grid.y = {1.0, 1.0, 1.0};
  grid.valid = {1, 1, 0};
  Tensor out = grid_sample_bilinear(src, grid);
  CHECK(out.value_at(0) == doctest::Approx(2.5));  // center of the map
  CHECK(out.value_at(1) == 0.0);                   // outside the source extent
  CHECK(out.value_at(2) == 0.0);                   // masked invalid

  auto program = [&grid](const std::vector<Tensor>& in) {
    return sum(square(grid_sample_bilinear(in[0], grid)));
  };
  CHECK(oracle::gradcheck(program, {src}, 0) < 1e-6);
}

TEST_CASE("two-layer MLP gradient vs finite differences") {
  Rng rng(3);
  Tensor x = random_tensor({4, 5}, rng, -1.0, 1.0, false);
  Tensor w1 = random_tensor({5, 8}, rng, -0.5, 0.5);
  Tensor b1 = random_tensor({8}, rng, -0.1, 0.1);
  Tensor w2 = random_tensor({8, 3}, rng, -0.5, 0.5);
  Tensor b2 = random_tensor({3}, rng, -0.1, 0.1);

  auto program = [&x](const std::vector<Tensor>& p) {
    Tensor h = gelu(add(matmul(x, p[0]), p[1]));
    Tensor y = add(matmul(h, p[2]), p[3]);
    return mean(square(y));
  };
  std::vector<Tensor> params = {w1, b1, w2, b2};
  for (std::size_t i = 0; i < params.size(); ++i) {
    CAPTURE(i);
    CHECK(oracle::gradcheck(program, params, i) < 1e-4);
  }
}

TEST_CASE("shape mismatches raise structured errors naming the op") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("add"), ShapeError);
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("matmul"), ShapeError);
  CHECK_THROWS_AS(slice(a, 1, 2, 3), ShapeError);
  CHECK_THROWS_AS(reshape(a, {7}), ShapeError);
  CHECK_THROWS_AS(concat({a, b}, 0), ShapeError);
}

TEST_CASE("determinism: identical seeds give bit-identical values and gradients") {
  auto run = [] {
    Rng rng(11);
    Tensor x = random_tensor({6, 6}, rng);
    Tensor w = random_tensor({6, 6}, rng);
    Tensor loss = mean(square(gelu(matmul(x, w))));
    backward(loss);
    std::vector<double> out(w.grad().begin(), w.grad().end());
    out.push_back(loss.item());
    return out;
  };
  auto a = run();
  auto b = run();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("pairwise summation matches sequential on benign data") {
  Rng rng(5);
  std::vector<double> xs(1000);
  for (double& v : xs) v = rng.uniform(-1.0, 1.0);
  double seq = 0.0;
  for (double v : xs) seq += v;
  CHECK(pairwise_sum(xs) == doctest::Approx(seq).epsilon(1e-12));
}

TEST_CASE("gradient accumulates across backward calls until zeroed") {
  Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
  backward(sum(x));
  backward(sum(x));
  CHECK(x.grad()[0] == 2.0);
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0);
}
