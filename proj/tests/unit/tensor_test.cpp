#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "dcn/ops.hpp"
#include "dcn/tensor.hpp"
#include "grad_suite.hpp"
#include "oracles.hpp"

namespace dcn {
namespace {

using D = Tensor<double>;

std::vector<double> values_of(const D& t) { return {t.values().begin(), t.values().end()}; }
std::vector<double> grad_of(const D& t) { return {t.grad().begin(), t.grad().end()}; }

TEST(Ops, ReluExample) {
  D x({3}, {-1.0, 0.0, 2.0});
  EXPECT_EQ(values_of(relu(x)), (std::vector<double>{0, 0, 2}));
}

TEST(Ops, SoftmaxOfEqualLogitsIsUniform) {
  D z({2}, {0.0, 0.0});
  EXPECT_EQ(values_of(softmax(z, 0)), (std::vector<double>{0.5, 0.5}));
}

TEST(Ops, ConvOfOnesSumsWindow) {
  D x({1, 1, 3, 3}, 1.0), w({1, 1, 3, 3}, 1.0);
  D y = conv2d(x, w, D());
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.item(), 9.0);
}

TEST(Ops, ForwardOpByNameMatchesDirectCall) {
  D x({1, 1, 3, 3}, 1.0), w({1, 1, 3, 3}, 1.0);
  std::vector<D> in = {x, w};
  EXPECT_EQ(forward_op<double>(op_from_name("conv2d"), in).item(), 9.0);
  EXPECT_THROW(op_from_name("conv3d"), GraphError);
  std::vector<D> one = {x};
  EXPECT_THROW(forward_op<double>(OpKind::add, one), GraphError);
}

TEST(Ops, ShapeMismatchNamesTheDimension) {
  D a({2, 3}), b({3, 2});
  try {
    add(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("2x3"), std::string::npos) << e.what();
  }
  EXPECT_THROW(conv2d(D({1, 2, 5, 5}), D({1, 3, 3, 3}), D()), DimensionError);
  EXPECT_THROW(maxpool2d(D({1, 1, 1, 1}), 2, 2, 2, 2), DimensionError);
}

TEST(Ops, ElementCountMatchesShape) {
  std::mt19937_64 rng(1);
  for (Shape s : {Shape{}, Shape{4}, Shape{2, 3, 5}, Shape{1, 2, 3, 4}}) {
    D t(s, 0.5);
    EXPECT_EQ(t.numel(), shape_numel(s));
  }
  EXPECT_THROW(D(Shape{2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
}

TEST(Backward, PolynomialExample) {
  D x({3}, {1.0, 2.0, 3.0}, true);
  backward(sum(mul(x, x)));
  EXPECT_EQ(grad_of(x), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, SumOfSoftmaxHasZeroGradient) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    D z({7}, oracle::uniform_values(7, rng), true);
    backward(sum(softmax(z, 0)));
    ASSERT_EQ(z.grad().size(), 7u);
    for (double g : z.grad()) EXPECT_NEAR(g, 0.0, 1e-15);
  }
}

TEST(Backward, RejectsNonScalarAndUntrackedOutputs) {
  D x({3}, 1.0, true);
  EXPECT_THROW(backward(relu(x)), GraphError);
  D y({1}, 1.0);
  EXPECT_THROW(backward(y), GraphError);
}

TEST(Backward, GradHasValueShape) {
  D x({2, 3}, 0.5, true);
  backward(sum(mul(x, x)));
  EXPECT_EQ(x.grad().size(), x.numel());
}

TEST(Backward, StopAtLeavesAncestorsUntouched) {
  std::mt19937_64 rng(3);
  D x({4}, oracle::uniform_values(4, rng), true);
  D a = mul(x, x);
  D b = relu(a);
  D out = sum(mul(softmax(b, 0), D({4}, {1.0, 2.0, 3.0, 4.0})));
  // Poison the ancestors of b.
  for (auto& g : x.mutable_grad()) g = 42.0;
  for (auto& g : a.mutable_grad()) g = -7.0;
  backward(out, {b});
  for (double g : x.grad()) EXPECT_EQ(g, 42.0);
  for (double g : a.grad()) EXPECT_EQ(g, -7.0);
  ASSERT_TRUE(b.has_grad());
  double norm = 0;
  for (double g : b.grad()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

TEST(Backward, LeafGradsAccumulate) {
  D x({2}, {1.0, -1.0}, true);
  backward(sum(scale(x, 3.0)));
  backward(sum(scale(x, 3.0)));
  EXPECT_EQ(grad_of(x), (std::vector<double>{6, 6}));
}

TEST(Backward, DetachCutsTheTape) {
  D x({2}, {1.0, 2.0}, true);
  D y = mul(x, x);
  D d = y.detach();
  EXPECT_TRUE(d.is_leaf());
  EXPECT_FALSE(d.requires_grad());
  EXPECT_EQ(values_of(d), values_of(y));
}

TEST(Backward, NoGradGuardRecordsNothing) {
  D x({2}, 1.0, true);
  NoGradGuard guard;
  D y = mul(x, x);
  EXPECT_TRUE(y.is_leaf());
  EXPECT_FALSE(y.requires_grad());
}

TEST(ZeroGrad, ClearsEveryGrad) {
  std::vector<D> params = {D({3}, 1.0, true), D({2, 2}, 2.0, true)};
  backward(add(sum(mul(params[0], params[0])), sum(params[1])));
  zero_grad(params);
  for (const auto& p : params)
    for (double g : p.grad()) EXPECT_EQ(g, 0.0);
}

TEST(ZeroGrad, EmptySetIsNoOp) {
  std::vector<D> none;
  EXPECT_NO_THROW(zero_grad(none));
}

TEST(ZeroGrad, InterleavedMatchesSingleBackward) {
  std::mt19937_64 rng(4);
  D w({2, 1, 3, 3}, oracle::uniform_values(18, rng), true);
  D x({1, 1, 5, 5}, oracle::uniform_values(25, rng));
  auto loss = [&] { return sum(relu(conv2d(x, w, D()))); };
  backward(loss());
  const auto once = grad_of(w);
  std::vector<D> params = {w};
  zero_grad(params);
  backward(loss());
  zero_grad(params);
  backward(loss());
  EXPECT_EQ(grad_of(w), once);
}

TEST(Softmax, RowsSumToOneAndEntropyIsBounded) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t C = 2 + trial % 12;
    D z({3, C}, oracle::uniform_values(3 * C, rng, -20.0, 20.0));
    D p = softmax(z, 1);
    for (std::size_t r = 0; r < 3; ++r) {
      std::vector<long double> row;
      long double total = 0;
      for (std::size_t c = 0; c < C; ++c) {
        row.push_back(p.at(r * C + c));
        total += row.back();
      }
      EXPECT_NEAR(static_cast<double>(total), 1.0, 1e-12);
      const long double h = oracle::entropy_ld(row);
      EXPECT_GE(h, -1e-15L);
      EXPECT_LE(h, std::log(static_cast<long double>(C)) + 1e-12L);
    }
  }
}

TEST(Dropout, InferenceIsIdentity) {
  std::mt19937_64 rng(6);
  D x({4, 5}, oracle::uniform_values(20, rng));
  EXPECT_EQ(values_of(dropout(x, 0.5, false, rng)), values_of(x));
}

TEST(Dropout, TrainScalesSurvivors) {
  std::mt19937_64 rng(7);
  D x({1000}, 1.0);
  D y = dropout(x, 0.25, true, rng);
  std::size_t kept = 0;
  for (double v : y.values()) {
    if (v != 0.0) {
      EXPECT_NEAR(v, 1.0 / 0.75, 1e-12);
      ++kept;
    }
  }
  EXPECT_NEAR(static_cast<double>(kept) / 1000.0, 0.75, 0.05);
}

TEST(Batchnorm, InferenceUsesRunningStatistics) {
  std::mt19937_64 rng(8);
  D x({2, 2, 3, 3}, oracle::uniform_values(36, rng));
  D gamma({2}, {1.5, 0.5}), beta({2}, {0.1, -0.2});
  BatchNormState<double> st{D({2}, {0.3, -0.4}), D({2}, {2.0, 0.5})};
  D y1 = batchnorm(x, gamma, beta, st, false);
  D y2 = batchnorm(x, gamma, beta, st, false);
  EXPECT_EQ(values_of(y1), values_of(y2));
  EXPECT_EQ(values_of(st.running_mean), (std::vector<double>{0.3, -0.4}));
  for (std::size_t i = 0; i < 36; ++i) {
    const std::size_t c = (i / 9) % 2;
    const double m = c ? -0.4 : 0.3, v = c ? 0.5 : 2.0;
    const double g = c ? 0.5 : 1.5, b = c ? -0.2 : 0.1;
    EXPECT_NEAR(y1.at(i), (x.at(i) - m) / std::sqrt(v + 1e-5) * g + b, 1e-12);
  }
}

TEST(Batchnorm, TrainUpdatesRunningStatistics) {
  D x({2, 1, 1, 2}, {1.0, 3.0, 5.0, 7.0});
  D gamma({1}, 1.0), beta({1}, 0.0);
  BatchNormState<double> st{D({1}, 0.0), D({1}, 1.0)};
  batchnorm(x, gamma, beta, st, true);
  // mean 4, biased variance 5; running = 0.9 * old + 0.1 * batch.
  EXPECT_NEAR(st.running_mean.at(0), 0.4, 1e-12);
  EXPECT_GT(st.running_var.at(0), 1.0);
}

TEST(Log, ClampsAtFloor) {
  D x({2}, {0.0, 1.0});
  D y = log(x);
  EXPECT_NEAR(y.at(0), std::log(1e-12), 1e-9);
  EXPECT_EQ(y.at(1), 0.0);
}

TEST(Cells, GatherAndPlaceRoundTrip) {
  std::mt19937_64 rng(9);
  D map({2, 3, 2, 2}, oracle::uniform_values(24, rng));
  std::vector<Cell> cells = {{1, 0, 1}, {0, 1, 0}};
  D v = gather_cells<double>(map, cells);
  ASSERT_EQ(v.shape(), (Shape{2, 3, 1, 1}));
  EXPECT_EQ(v.at(0), map.at(((1 * 3 + 0) * 2 + 0) * 2 + 1));
  D placed = place_cells<double>(map, v, cells);
  EXPECT_EQ(values_of(placed), values_of(map));
}

TEST(GradientCheck, EveryPrimitive) {
  for (const auto& e : oracle::primitive_gradient_suite(20, 11)) {
    EXPECT_EQ(e.trials, 20u) << e.name;
    EXPECT_LT(e.worst.max_rel_error, 1e-4) << e.name << ": " << e.worst.worst;
  }
}

TEST(GradientCheck, CoversEveryPrimitiveKind) {
  std::set<std::string> names;
  for (const auto& c : oracle::primitive_cases()) names.insert(c.name);
  for (const char* op : {"conv2d", "maxpool2d", "avgpool_global", "maxpool_global", "relu",
                         "softmax", "batchnorm", "dropout", "add", "mul", "linear_combination",
                         "log", "sum", "slice", "pad", "concat", "resize_bilinear", "reshape",
                         "gather_cells", "place_cells", "scale"})
    EXPECT_TRUE(names.contains(op)) << op;
}

TEST(GradientCheck, SmallPresetsPerCoordinate) {
  std::mt19937_64 rng(12);
  for (const char* name : {"toy-coarse", "toy-fine"}) {
    auto stack = build_preset<double>(name, 3);
    D x({2, 1, 8, 8}, oracle::uniform_values(128, rng), true);
    auto w = oracle::uniform_values(shape_numel(stack.output_shape(x.shape())), rng, -1.0, 1.0);
    auto f = [&] { return oracle::readout(stack.forward(x, Mode::train), w); };
    auto wrt = stack.parameters();
    wrt.push_back(x);
    const auto r = oracle::check_gradients(f, wrt);
    EXPECT_LT(r.max_rel_error, 1e-4) << name << ": " << r.worst;
  }
}

TEST(GradientCheck, PresetStacksDirectional) {
  for (const auto& e : oracle::preset_gradient_suite(2, 13))
    EXPECT_LT(e.worst.max_rel_error, 1e-4) << e.name << ": " << e.worst.worst;
}

}  // namespace
}  // namespace dcn
