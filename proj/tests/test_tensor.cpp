#include "doctest.h"

#include <cstring>
#include <random>

#include "drgrade/tensor.hpp"
#include "gradcheck.hpp"

using namespace drgrade;
using gradcheck::random_tensor;

namespace {

bool bitwise_equal(const Tensor<double>& a, const Tensor<double>& b) {
  return a.same_shape(b) && std::memcmp(a.data(), b.data(), sizeof(double) * std::size_t(a.size())) == 0;
}

void require_gradients(const char* name, const std::function<gradcheck::Report(std::uint64_t)>& check,
                       double tol) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto r = check(seed);
    INFO(name << " seed " << seed << " worst " << r.worst);
    REQUIRE(r.error < tol);
  }
}

}  // namespace

TEST_CASE("tensor shape bookkeeping") {
  Tensor<double> t({2, 3, 4, 5});
  CHECK(t.size() == 120);
  CHECK(t.rank() == 4);
  CHECK_THROWS_AS(Tensor<double>({2, 0, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor<double>({2, 2}, Vector<double>::Zero(3)), ShapeError);
  t.at(1, 2, 3, 4) = 7.0;
  CHECK(t[119] == 7.0);
}

TEST_CASE("conv2d identity kernel returns the input") {
  Tensor<double> x({1, 1, 3, 3});
  for (Index i = 0; i < 9; ++i) x[i] = double(i) - 4.0;
  const Tensor<double> w({1, 1, 1, 1}, 1.0);
  const Tensor<double> b({1});
  CHECK(bitwise_equal(conv2d(x, w, b), x));
}

TEST_CASE("conv2d 1x1 kernel equals per-pixel matrix product") {
  std::mt19937_64 rng(4);
  for (Index out = 1; out <= 4; ++out) {
    const Tensor<double> x = random_tensor({1, 2, 4, 4}, rng);
    const Tensor<double> w = random_tensor({out, 2, 1, 1}, rng);
    const Tensor<double> b = random_tensor({out}, rng);
    const Tensor<double> y = conv2d(x, w, b);
    REQUIRE(y.shape() == Shape{1, out, 4, 4});
    Eigen::MatrixXd wm(out, 2);
    for (Index o = 0; o < out; ++o)
      for (Index i = 0; i < 2; ++i) wm(o, i) = w.at(o, i, 0, 0);
    for (Index h = 0; h < 4; ++h) {
      for (Index c = 0; c < 4; ++c) {
        const Eigen::Vector2d pixel(x.at(0, 0, h, c), x.at(0, 1, h, c));
        const Eigen::VectorXd expect = wm * pixel;
        for (Index o = 0; o < out; ++o) CHECK(std::abs(y.at(0, o, h, c) - (expect(o) + b[o])) <= 1e-12);
      }
    }
  }
}

TEST_CASE("conv2d output size follows floor((H + 2p - K) / s) + 1") {
  std::mt19937_64 rng(1);
  const Tensor<double> x = random_tensor({2, 3, 7, 6}, rng);
  const Tensor<double> w = random_tensor({4, 3, 3, 3}, rng);
  const Tensor<double> b({4});
  CHECK(conv2d(x, w, b, 2, 1).shape() == Shape{2, 4, 4, 3});
  CHECK(conv2d(x, w, b, 1, 0).shape() == Shape{2, 4, 5, 4});
  CHECK(conv2d(x, w, b, 3, 0).shape() == Shape{2, 4, 2, 2});
}

TEST_CASE("conv2d rejects mismatched shapes with the dimension named") {
  const Tensor<double> x({1, 3, 4, 4});
  const Tensor<double> b({2});
  try {
    conv2d(x, Tensor<double>({2, 2, 3, 3}), b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("input-channel") != std::string::npos);
  }
  CHECK_THROWS_AS(conv2d(x, Tensor<double>({2, 3, 3, 3}), Tensor<double>({3})), ShapeError);
  CHECK_THROWS_AS(conv2d(x, Tensor<double>({2, 3, 7, 7}), b, 1, 1), ShapeError);
}

TEST_CASE("conv2d weight gradient of sum(output) matches central differences") {
  std::mt19937_64 rng(11);
  Tensor<double> x = random_tensor({2, 2, 5, 5}, rng);
  Tensor<double> w = random_tensor({3, 2, 3, 3}, rng);
  Tensor<double> b = random_tensor({3}, rng);
  const Tensor<double> ones(conv2d(x, w, b, 1, 1).shape(), 1.0);
  const auto g = conv2d_backward(x, w, b, ones, 1, 1);
  const double err = gradcheck::relative_error(
      w, g.d_params.at("weight"), [&] { return conv2d(x, w, b, 1, 1).flat().sum(); }, rng);
  CHECK(err < 1e-4);
}

TEST_CASE("batchnorm2d constant channel maps to zero in train mode") {
  const Tensor<double> x({3, 2, 2, 2}, 4.25);
  const Tensor<double> gamma({2}, 1.0), beta({2});
  auto running = BatchNormStats<double>::fresh(2);
  const auto y = batchnorm2d(x, gamma, beta, Mode::kTrain, running);
  CHECK(y.flat().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("batchnorm2d train output has per-channel mean beta") {
  std::mt19937_64 rng(2);
  const Tensor<double> x = random_tensor({4, 3, 3, 3}, rng, 3.0);
  const Tensor<double> gamma({3}, 1.0), beta({3}, 5.0);
  auto running = BatchNormStats<double>::fresh(3);
  const auto y = batchnorm2d(x, gamma, beta, Mode::kTrain, running);
  for (Index c = 0; c < 3; ++c) {
    double s = 0;
    for (Index n = 0; n < 4; ++n)
      for (Index i = 0; i < 9; ++i) s += y[(n * 3 + c) * 9 + i];
    CHECK(std::abs(s / 36.0 - 5.0) < 1e-6);
  }
}

TEST_CASE("batchnorm2d running statistics use momentum 0.1 and the unbiased variance") {
  Tensor<double> x({2, 1, 1, 2});
  x[0] = 1, x[1] = 2, x[2] = 3, x[3] = 6;  // mean 3, unbiased var 14/3
  const Tensor<double> gamma({1}, 1.0), beta({1});
  auto running = BatchNormStats<double>::fresh(1);
  batchnorm2d(x, gamma, beta, Mode::kTrain, running);
  CHECK(running.mean[0] == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(running.var[0] == doctest::Approx(0.9 + 0.1 * 14.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("batchnorm2d eval mode uses running statistics and leaves them alone") {
  Tensor<double> x({1, 1, 1, 2});
  x[0] = 3, x[1] = -1;
  const Tensor<double> gamma({1}, 2.0), beta({1}, 0.5);
  BatchNormStats<double> running{Vector<double>::Constant(1, 1.0), Vector<double>::Constant(1, 4.0)};
  const auto y = batchnorm2d(x, gamma, beta, Mode::kEval, running);
  const double inv = 1.0 / std::sqrt(4.0 + 1e-5);
  CHECK(y[0] == doctest::Approx(2.0 * 2.0 * inv + 0.5));
  CHECK(y[1] == doctest::Approx(-2.0 * 2.0 * inv + 0.5));
  CHECK(running.mean[0] == 1.0);
  CHECK(running.var[0] == 4.0);
}

TEST_CASE("batchnorm2d rejects a single value per channel in train mode") {
  const Tensor<double> x({1, 3, 1, 1}, 1.0);
  const Tensor<double> gamma({3}, 1.0), beta({3});
  auto running = BatchNormStats<double>::fresh(3);
  CHECK_THROWS_AS(batchnorm2d(x, gamma, beta, Mode::kTrain, running), ValidationError);
  CHECK_NOTHROW(batchnorm2d(x, gamma, beta, Mode::kEval, running));
  CHECK_THROWS_AS(batchnorm2d(Tensor<double>({2, 2, 2, 2}), gamma, beta, Mode::kTrain, running),
                  ShapeError);
}

TEST_CASE("pointwise ops and pools") {
  const Tensor<double> zero({1, 1, 1, 1});
  CHECK(sigmoid(zero)[0] == 0.5);

  Tensor<double> extreme({1, 1, 1, 2});
  extreme[0] = 1e4, extreme[1] = -1e4;
  const auto s = sigmoid(extreme);
  CHECK(s[0] < 1.0);
  CHECK(s[1] > 0.0);

  Tensor<double> ch({1, 1, 2, 2});
  ch[0] = 1, ch[1] = 2, ch[2] = 3, ch[3] = 4;
  const auto pooled = adaptive_avg_pool_1x1(ch);
  CHECK(pooled.shape() == Shape{1, 1, 1, 1});
  CHECK(pooled[0] == 2.5);
  CHECK(global_avg_pool(ch).shape() == Shape{1, 1});
  CHECK(global_avg_pool(ch)[0] == 2.5);

  Tensor<double> r({1, 1, 1, 3});
  r[0] = -2, r[1] = 0, r[2] = 3;
  const auto y = relu(r);
  CHECK(y[0] == 0.0);
  CHECK(y[1] == 0.0);
  CHECK(y[2] == 3.0);
}

TEST_CASE("mul_broadcast applies channel and spatial gates") {
  std::mt19937_64 rng(3);
  const Tensor<double> x = random_tensor({2, 3, 2, 2}, rng);
  const Tensor<double> cg = random_tensor({2, 3, 1, 1}, rng);
  const Tensor<double> sg = random_tensor({2, 1, 2, 2}, rng);
  const auto a = mul_broadcast(x, cg);
  const auto b = mul_broadcast(x, sg);
  for (Index n = 0; n < 2; ++n)
    for (Index c = 0; c < 3; ++c)
      for (Index h = 0; h < 2; ++h)
        for (Index w = 0; w < 2; ++w) {
          CHECK(a.at(n, c, h, w) == x.at(n, c, h, w) * cg.at(n, c, 0, 0));
          CHECK(b.at(n, c, h, w) == x.at(n, c, h, w) * sg.at(n, 0, h, w));
        }
  CHECK_THROWS_AS(mul_broadcast(x, Tensor<double>({2, 2, 1, 1})), ShapeError);
  CHECK_THROWS_AS(mul_broadcast(x, Tensor<double>({2, 3, 2})), ShapeError);
}

TEST_CASE("linear layer") {
  Tensor<double> x({1, 2});
  x[0] = 1, x[1] = 2;
  Tensor<double> w({2, 1});
  w[0] = 3, w[1] = 4;
  const Tensor<double> b({1}, 5.0);
  CHECK(linear(x, w, b)[0] == 16.0);

  std::mt19937_64 rng(5);
  const Tensor<double> in = random_tensor({3, 4}, rng);
  Tensor<double> eye({4, 4});
  eye.matrix().setIdentity();
  CHECK(bitwise_equal(linear(in, eye, Tensor<double>({4})), in));
  CHECK_THROWS_AS(linear(in, Tensor<double>({3, 2}), Tensor<double>({2})), ShapeError);
  CHECK_THROWS_AS(linear(in, Tensor<double>({4, 2}), Tensor<double>({3})), ShapeError);
}

TEST_CASE("layer gradients match central differences over 100 seeds") {
  for (const auto& check : gradcheck::all_checks()) {
    if (check.name == "cbam" || check.name == "fcn_head" || check.name == "ranking_head" ||
        check.name == "losses") {
      continue;
    }
    require_gradients(check.name.c_str(), check.run, check.tolerance);
  }
}

TEST_CASE("gradient tensors have the shapes of their values") {
  std::mt19937_64 rng(9);
  const Tensor<double> x = random_tensor({2, 3, 5, 5}, rng);
  const Tensor<double> w = random_tensor({4, 3, 3, 3}, rng);
  const Tensor<double> b = random_tensor({4}, rng);
  const auto y = conv2d(x, w, b, 2, 1);
  const auto g = conv2d_backward(x, w, b, y, 2, 1);
  CHECK(g.d_input.same_shape(x));
  CHECK(g.d_params.at("weight").same_shape(w));
  CHECK(g.d_params.at("bias").same_shape(b));
}

TEST_CASE("forward ops are deterministic and finite") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor<double> x = random_tensor({2, 3, 4, 4}, rng, 10.0);
    const Tensor<double> w = random_tensor({2, 3, 3, 3}, rng);
    const Tensor<double> b = random_tensor({2}, rng);
    const Tensor<double> gamma = random_tensor({2}, rng), beta = random_tensor({2}, rng);
    auto run = [&] {
      const auto c = conv2d(x, w, b, 1, 1);
      const auto bn = batchnorm2d_forward(c, gamma, beta, Mode::kTrain, BatchNormStats<double>::fresh(2));
      return sigmoid(relu(bn.output));
    };
    const auto a = run(), c = run();
    CHECK(bitwise_equal(a, c));
    CHECK(a.flat().allFinite());
  }
}

TEST_CASE("float and double forward agree") {
  std::mt19937_64 rng(13);
  const Tensor<double> x = random_tensor({1, 2, 4, 4}, rng);
  const Tensor<double> w = random_tensor({3, 2, 3, 3}, rng);
  const Tensor<double> b = random_tensor({3}, rng);
  const auto yd = conv2d(x, w, b, 1, 1);
  const auto yf = conv2d(x.cast<float>(), w.cast<float>(), b.cast<float>(), 1, 1);
  CHECK((yd.flat() - yf.cast<double>().flat()).cwiseAbs().maxCoeff() < 1e-5);
}
