#include <gtest/gtest.h>

#include <cmath>

#include "spkprof/ndcore.hpp"
#include "spkprof/random.hpp"
#include "spkprof/vae.hpp"

using namespace spkprof;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& x : m.flat()) x = rng.normal();
  return m;
}

DenseLayer random_layer(std::size_t in, std::size_t out, Activation a, Rng& rng) {
  DenseLayer l(in, out, a);
  for (double& w : l.weights.flat()) w = rng.normal();
  for (double& b : l.bias) b = rng.normal();
  return l;
}

// One layer as a parameter set, so flatten/unflatten and grad_check apply.
struct OneLayer {
  DenseLayer l;
  template <class F>
  void visit(F&& f) { visit_layer("l", l, f); }
  template <class F>
  void visit(F&& f) const { visit_layer("l", l, f); }
};

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Rng rng(1);
  const Matrix m = random_matrix(3, 3, rng);
  EXPECT_EQ(matmul(Matrix::identity(3), m), m);
}

TEST(Matmul, HandArithmetic) {
  const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  const Matrix b = Matrix::from_rows({{0}, {1}});
  EXPECT_EQ(matmul(a, b), Matrix::from_rows({{2}, {4}}));
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(2);
  const Matrix a = random_matrix(5, 7, rng), b = random_matrix(7, 3, rng);
  const Matrix c = matmul(a, b);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 7; ++k) s += a(i, k) * b(k, j);
      EXPECT_NEAR(c(i, j), s, 1e-12);
    }
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  try {
    matmul(Matrix(2, 3), Matrix(2, 3));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
  }
}

TEST(Matmul, AssociativeAndIdentityOnRandomMatrices) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    Rng rng(s);
    const Matrix a = random_matrix(3, 4, rng), b = random_matrix(4, 2, rng), c = random_matrix(2, 5, rng);
    const Matrix l = matmul(matmul(a, b), c), r = matmul(a, matmul(b, c));
    for (std::size_t i = 0; i < l.size(); ++i) EXPECT_NEAR(l.flat()[i], r.flat()[i], 1e-10);
    const Matrix ai = matmul(a, Matrix::identity(4));
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(ai.flat()[i], a.flat()[i], 1e-10);
  }
}

TEST(LayerForward, ZeroLayerGivesZeros) {
  DenseLayer l(4, 3, Activation::identity);
  auto [y, cache] = layer_forward(l, Vec{1, 2, 3, 4});
  EXPECT_EQ(y, Vec(3, 0.0));
}

TEST(LayerForward, SoftplusIsPositiveEverywhere) {
  Rng rng(3);
  DenseLayer l = random_layer(3, 6, Activation::softplus, rng);
  for (double scale : {1.0, 100.0, 1e6}) {
    auto [y, c] = layer_forward(l, Vec{-scale, scale, -2 * scale});
    for (double v : y) {
      EXPECT_GT(v, 0.0);
      EXPECT_TRUE(std::isfinite(v));
    }
  }
}

TEST(LayerForward, TanhMatchesScalarFormula) {
  Rng rng(4);
  DenseLayer l = random_layer(5, 4, Activation::tanh, rng);
  const Vec x = rng.normal_vector(5);
  auto [y, c] = layer_forward(l, x);
  for (std::size_t o = 0; o < 4; ++o) {
    double p = l.bias[o];
    for (std::size_t i = 0; i < 5; ++i) p += l.weights(o, i) * x[i];
    EXPECT_NEAR(y[o], std::tanh(p), 1e-12);
  }
}

TEST(LayerForward, WrongWidthIsShapeError) {
  DenseLayer l(4, 3, Activation::identity);
  EXPECT_THROW(layer_forward(l, Vec{1, 2}), ShapeError);
}

TEST(LayerBackward, IdentityUnitUpstreamGivesWeightRow) {
  Rng rng(5);
  DenseLayer l = random_layer(4, 3, Activation::identity, rng);
  auto [y, cache] = layer_forward(l, rng.normal_vector(4));
  auto [dx, g] = layer_backward(l, cache, Vec{1, 0, 0});
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(dx[i], l.weights(0, i));
}

TEST(LayerBackward, ZeroUpstreamGivesZeroGradients) {
  Rng rng(6);
  DenseLayer l = random_layer(4, 3, Activation::tanh, rng);
  auto [y, cache] = layer_forward(l, rng.normal_vector(4));
  auto [dx, g] = layer_backward(l, cache, Vec(3, 0.0));
  EXPECT_EQ(dx, Vec(4, 0.0));
  EXPECT_EQ(g.bias, Vec(3, 0.0));
  for (double w : g.weights.flat()) EXPECT_EQ(w, 0.0);
}

TEST(LayerBackward, StaleCacheIsContractError) {
  Rng rng(7);
  DenseLayer a = random_layer(4, 3, Activation::tanh, rng);
  DenseLayer b = random_layer(4, 3, Activation::tanh, rng);
  auto [y, cache] = layer_forward(a, rng.normal_vector(4));
  EXPECT_THROW(layer_backward(b, cache, Vec(3, 1.0)), ContractError);
}

// Every activation, 10 random instantiations, all coordinates (well over 100).
TEST(LayerBackward, MatchesFiniteDifferences) {
  std::size_t coords = 0;
  for (Activation a : {Activation::identity, Activation::tanh, Activation::relu, Activation::softplus}) {
    for (std::uint64_t s = 0; s < 10; ++s) {
      Rng rng(100 + s);
      OneLayer p{random_layer(4, 3, a, rng)};
      const Vec x = rng.normal_vector(4);
      const Vec up = rng.normal_vector(3);
      auto loss = [&](const OneLayer& q, std::span<const double> in) {
        auto [y, c] = layer_forward(q.l, in);
        return dot(y, up);
      };
      auto [y, cache] = layer_forward(p.l, x);
      auto [dx, g] = layer_backward(p.l, cache, up);

      OneLayer gp{p.l};
      gp.l.weights = g.weights;
      gp.l.bias = g.bias;
      auto f = [&](std::span<const double> flat) {
        OneLayer q = p;
        unflatten(q, flat);
        return loss(q, x);
      };
      const auto r = grad_check(f, flatten(p), flatten(gp));
      EXPECT_LT(r.max_relative_error, 1e-4) << to_string(a) << " seed " << s;
      auto fx = [&](std::span<const double> in) { return loss(p, in); };
      const auto rx = grad_check(fx, x, dx);
      EXPECT_LT(rx.max_relative_error, 1e-4) << to_string(a) << " seed " << s;
      coords += r.checked + rx.checked;
    }
  }
  EXPECT_GE(coords, 100u);
}

TEST(GradCheck, QuadraticIsExact) {
  Rng rng(8);
  const Vec p = rng.normal_vector(10);
  auto f = [](std::span<const double> x) { return 0.5 * squared_norm(x); };
  EXPECT_LT(grad_check(f, p, p).max_relative_error, 1e-8);
}

TEST(GradCheck, FlagsSmallAnalyticErrors) {
  Rng rng(13);
  const Vec p = rng.normal_vector(10);
  auto f = [](std::span<const double> x) { return 0.5 * squared_norm(x); };
  Vec g = p;
  g[3] *= 1.01;
  EXPECT_GT(grad_check(f, p, g).max_relative_error, 5e-3);
  // A spurious gradient above the floor at a stationary coordinate is caught.
  Vec q = p;
  q[4] = 0.0;
  Vec spurious = q;
  spurious[4] = 1e-5;
  EXPECT_GT(grad_check(f, q, spurious).max_relative_error, 0.5);
}

TEST(GradCheck, ConstantFunctionHasZeroGradient) {
  const Vec p{1, 2, 3};
  auto f = [](std::span<const double>) { return 4.2; };
  const auto r = grad_check(f, p, Vec(3, 0.0));
  EXPECT_EQ(r.max_relative_error, 0.0);
  EXPECT_EQ(r.worst_numeric, 0.0);
}

TEST(GradCheck, NonFiniteLossIsReported) {
  auto f = [](std::span<const double> x) { return x[0] > 0 ? std::log(-1.0) : 0.0; };
  EXPECT_THROW(grad_check(f, Vec{1.0}, Vec{0.0}), NumericError);
}

TEST(Softplus, NeverOverflows) {
  EXPECT_TRUE(std::isfinite(softplus(1000.0)));
  EXPECT_NEAR(softplus(1000.0), 1000.0, 1e-12);
  EXPECT_GT(activate(Activation::softplus, -1000.0), 0.0);
  EXPECT_NEAR(softplus(0.0), std::log(2.0), 1e-15);
}

TEST(ParameterSet, FlattenUnflattenRoundTrip) {
  Rng rng(9);
  OneLayer p{random_layer(3, 2, Activation::tanh, rng)};
  OneLayer q{DenseLayer(3, 2, Activation::tanh)};
  unflatten(q, flatten(p));
  EXPECT_EQ(p.l, q.l);
  EXPECT_EQ(parameter_count(p), 8u);
  EXPECT_THROW(unflatten(q, Vec(7)), ShapeError);
  EXPECT_THROW(unflatten(q, Vec(9)), ShapeError);
}

TEST(Adam, ZeroLearningRateLeavesParamsUnchanged) {
  Rng rng(10);
  OneLayer p{random_layer(3, 2, Activation::tanh, rng)};
  const OneLayer before = p;
  OneLayer g{random_layer(3, 2, Activation::tanh, rng)};
  AdamState st = make_adam_state(p);
  AdamConfig cfg;
  cfg.lr = 0.0;
  adam_update(p, g, st, cfg);
  EXPECT_EQ(p.l, before.l);
  EXPECT_EQ(st.step, 1);
}

TEST(Adam, FirstStepMovesByLearningRateAgainstGradientSign) {
  OneLayer p{DenseLayer(1, 1, Activation::identity)};
  OneLayer g{DenseLayer(1, 1, Activation::identity)};
  g.l.weights(0, 0) = 3.0;
  g.l.bias[0] = -0.5;
  AdamState st = make_adam_state(p);
  AdamConfig cfg;
  adam_update(p, g, st, cfg);
  // Bias-corrected first step is lr * g / (|g| + eps).
  EXPECT_NEAR(p.l.weights(0, 0), -1e-3, 1e-9);
  EXPECT_NEAR(p.l.bias[0], 1e-3, 1e-9);
}

TEST(Adam, FrozenParametersStayPut) {
  Rng rng(11);
  OneLayer p{random_layer(3, 2, Activation::tanh, rng)};
  const OneLayer before = p;
  OneLayer g{random_layer(3, 2, Activation::tanh, rng)};
  AdamState st = make_adam_state(p);
  adam_update(p, g, st, AdamConfig{}, [](const std::string& n) { return n == "l.bias"; });
  EXPECT_EQ(p.l.weights, before.l.weights);
  EXPECT_NE(p.l.bias, before.l.bias);
}

TEST(SolveSpd, RecoversKnownSolution) {
  Rng rng(12);
  const Matrix a = random_matrix(4, 4, rng);
  Matrix spd = matmul(transpose(a), a);
  for (std::size_t i = 0; i < 4; ++i) spd(i, i) += 1.0;
  const Matrix x = random_matrix(4, 2, rng);
  const Matrix b = matmul(spd, x);
  const Matrix got = solve_spd(spd, b);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(got.flat()[i], x.flat()[i], 1e-10);
}
