#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "dcn/data.hpp"
#include "dcn/training.hpp"
#include "oracles.hpp"

namespace dcn {
namespace {

using D = Tensor<double>;

std::vector<double> flat_params(const LayerStack<float>& s) {
  std::vector<double> out;
  for (const auto& p : s.parameters()) out.insert(out.end(), p.values().begin(), p.values().end());
  return out;
}

bool all_zero_or_absent(const std::vector<Tensor<double>>& params) {
  for (const auto& p : params)
    if (p.has_grad())
      for (double g : p.grad())
        if (g != 0.0) return false;
  return true;
}

Dataset toy_digits(std::size_t n, std::uint64_t seed) {
  CanvasSpec spec;
  spec.height = 28;
  spec.width = 28;
  spec.digit_height = 14;
  spec.digit_width = 10;
  spec.clutter_count = 3;
  spec.seed = seed;
  return synth_cluttered(spec, n);
}

TEST(CrossEntropy, Examples) {
  std::vector<std::size_t> y = {3};
  std::vector<double> onehot(10, 0.0);
  onehot[3] = 1.0;
  EXPECT_NEAR(cross_entropy_loss(D({1, 10}, onehot), std::span(y)).item(), 0.0, 1e-15);
  EXPECT_NEAR(cross_entropy_loss(D({1, 10}, 0.1), std::span(y)).item(), std::log(10.0), 1e-12);
  std::vector<double> p = {0.25, 0.75};
  std::vector<std::size_t> y0 = {0};
  EXPECT_NEAR(cross_entropy_loss(D({1, 2}, p), std::span(y0)).item(), 1.386294, 1e-6);
  std::vector<std::size_t> bad = {10};
  EXPECT_THROW(cross_entropy_loss(D({1, 10}, 0.1), std::span(bad)), std::out_of_range);
}

TEST(CrossEntropy, AveragesOverBatch) {
  std::vector<std::size_t> y = {0, 1};
  std::vector<double> p = {0.5, 0.5, 0.25, 0.75};
  EXPECT_NEAR(cross_entropy_loss(D({2, 2}, p), std::span(y)).item(),
              (std::log(2.0) + std::log(4.0 / 3.0)) / 2, 1e-12);
}

TEST(Hint, Examples) {
  std::mt19937_64 rng(1);
  auto v = oracle::uniform_values(12, rng);
  EXPECT_EQ(hint_loss(D({3, 4, 1, 1}, v), D({3, 4, 1, 1}, v)).item(), 0.0);
  EXPECT_EQ(hint_loss(D({1, 2, 1, 1}, {1.0, 0.0}), D({1, 2, 1, 1}, {0.0, 1.0})).item(), 2.0);
  EXPECT_THROW(hint_loss(D({1, 2, 1, 1}), D({2, 2, 1, 1})), DimensionError);
}

TEST(Hint, GradientReachesCoarseOnly) {
  std::mt19937_64 rng(2);
  auto stacks = build_family<double>("toy", 3);
  D x({2, 1, 28, 28}, oracle::uniform_values(2 * 784, rng, 0.0, 1.0));
  std::vector<Cell> cells = {{0, 1, 2}, {1, 6, 6}, {1, 0, 3}};
  D c_map = stacks.coarse.forward(x, Mode::train);
  D patches = crop_cells(x, cells, stacks.coarse, 0);
  D f = stacks.fine.forward(patches, Mode::train);
  backward(hint_loss(gather_cells<double>(c_map, cells), f));
  EXPECT_TRUE(all_zero_or_absent(stacks.fine.parameters()));
  EXPECT_TRUE(all_zero_or_absent(stacks.top.parameters()));
  EXPECT_FALSE(all_zero_or_absent(stacks.coarse.parameters()));
}

TEST(Routing, UnselectedPositionsFeedCoarseOnly) {
  std::mt19937_64 rng(3);
  auto stacks = build_family<double>("toy", 4);
  D x({1, 1, 28, 28}, oracle::uniform_values(784, rng, 0.0, 1.0));
  std::vector<Cell> cells = {{0, 3, 4}};
  D c_leaf = stacks.coarse.infer(x).detach().set_requires_grad(true);
  D f_leaf = stacks.fine.infer(crop_cells(x, cells, stacks.coarse, 0)).detach().set_requires_grad(true);
  std::vector<std::size_t> y = {7};
  backward(cross_entropy_loss(stacks.top.infer(assemble_refined<double>(c_leaf, f_leaf, cells).map),
                              std::span(y)));
  // The swapped position sends nothing to the coarse map; every other
  // position does, and the fine vector receives the rest.
  for (std::size_t d = 0; d < 8; ++d) EXPECT_EQ(c_leaf.grad()[(d * 7 + 3) * 7 + 4], 0.0);
  double coarse_norm = 0, fine_norm = 0;
  for (double g : c_leaf.grad()) coarse_norm += g * g;
  for (double g : f_leaf.grad()) fine_norm += g * g;
  EXPECT_GT(coarse_norm, 0.0);
  EXPECT_GT(fine_norm, 0.0);
}

TEST(Routing, FineGradientComesFromSelectedPatchOnly) {
  // Single-position probe: the fine-parameter gradient of the refined
  // objective equals the gradient obtained by pushing dJ/dr at the selected
  // position back through the fine stack on that patch alone.
  std::mt19937_64 rng(4);
  auto stacks = build_family<double>("toy", 5);
  D x({1, 1, 28, 28}, oracle::uniform_values(784, rng, 0.0, 1.0));
  std::vector<Cell> cells = {{0, 5, 1}};
  std::vector<std::size_t> y = {2};
  D patches = crop_cells(x, cells, stacks.coarse, 0);

  D c_map = stacks.coarse.infer(x);
  D f = stacks.fine.forward(patches, Mode::infer);
  backward(cross_entropy_loss(stacks.top.infer(assemble_refined<double>(c_map, f, cells).map),
                              std::span(y)));
  std::vector<std::vector<double>> full;
  for (const auto& p : stacks.fine.parameters()) full.emplace_back(p.grad().begin(), p.grad().end());

  D f_leaf = f.detach().set_requires_grad(true);
  backward(cross_entropy_loss(stacks.top.infer(assemble_refined<double>(c_map, f_leaf, cells).map),
                              std::span(y)));
  D upstream(f_leaf.shape(), std::vector<double>(f_leaf.grad().begin(), f_leaf.grad().end()));
  auto params = stacks.fine.parameters();
  zero_grad(params);
  backward(sum(mul(stacks.fine.forward(patches, Mode::infer), upstream)));
  for (std::size_t k = 0; k < params.size(); ++k)
    for (std::size_t i = 0; i < params[k].numel(); ++i)
      EXPECT_NEAR(params[k].grad()[i], full[k][i], 1e-12);
}

TEST(TrainStep, FullSwapLeavesCoarseUnchangedAtLambdaZero) {
  auto data = toy_digits(16, 5);
  std::vector<std::size_t> idx(16);
  std::iota(idx.begin(), idx.end(), 0);
  auto stacks = build_family<float>("toy", 6);
  TrainConfig config;
  config.k = 49;
  config.lambda = 0.0;
  Optimizers<float> opt(config, stacks);
  const auto before_coarse = flat_params(stacks.coarse), before_fine = flat_params(stacks.fine);
  train_step(images_tensor<float>(data, idx), class_labels(data, idx), config,
             family_config("toy"), stacks, opt);
  EXPECT_EQ(flat_params(stacks.coarse), before_coarse);
  EXPECT_NE(flat_params(stacks.fine), before_fine);
}

TEST(TrainStep, NoSelectionLeavesFineUnchanged) {
  auto data = toy_digits(16, 6);
  std::vector<std::size_t> idx(16);
  std::iota(idx.begin(), idx.end(), 0);
  auto stacks = build_family<float>("toy", 7);
  TrainConfig config;
  config.k = 0;
  Optimizers<float> opt(config, stacks);
  const auto before = flat_params(stacks.fine);
  train_step(images_tensor<float>(data, idx), class_labels(data, idx), config,
             family_config("toy"), stacks, opt);
  EXPECT_EQ(flat_params(stacks.fine), before);
}

TEST(TrainStep, LambdaZeroIsRefinedCrossEntropy) {
  auto data = toy_digits(8, 7);
  std::vector<std::size_t> idx(8);
  std::iota(idx.begin(), idx.end(), 0);
  auto stacks = build_family<double>("toy", 8);
  TrainConfig config;
  config.k = 4;
  config.lambda = 0.0;
  Optimizers<double> opt(config, stacks);
  const auto r = train_step(images_tensor<double>(data, idx), class_labels(data, idx), config,
                            family_config("toy"), stacks, opt);
  EXPECT_EQ(r.loss, r.cross_entropy);
  EXPECT_GT(r.hint, 0.0);
}

TEST(TrainStep, ConvexCombination) {
  auto data = toy_digits(8, 8);
  std::vector<std::size_t> idx(8);
  std::iota(idx.begin(), idx.end(), 0);
  for (double lambda : {0.25, 0.5, 0.9}) {
    auto stacks = build_family<double>("toy", 9);
    TrainConfig config;
    config.k = 3;
    config.lambda = lambda;
    Optimizers<double> opt(config, stacks);
    const auto r = train_step(images_tensor<double>(data, idx), class_labels(data, idx), config,
                              family_config("toy"), stacks, opt);
    // hint is reported per patch; the objective uses the per-example sum.
    const double hint_sum_per_example = r.hint * 3.0;
    EXPECT_NEAR(r.loss, (1 - lambda) * r.cross_entropy + lambda * hint_sum_per_example, 1e-9);
  }
}

TEST(TrainStep, HintOnlyPullsCoarseTowardFine) {
  auto data = toy_digits(16, 9);
  std::vector<std::size_t> idx(16);
  std::iota(idx.begin(), idx.end(), 0);
  auto stacks = build_family<double>("toy", 10);
  TrainConfig config;
  // Every cell selected, so the hint is a fixed convex quadratic in the
  // (linear) coarse stack and small steps must decrease it.
  config.k = 49;
  config.lambda = 1.0;
  config.coarse_optimizer = OptimizerConfig::sgd(0.002, 0.0, 1.0);
  config.fine_optimizer = OptimizerConfig::sgd(1e-3, 0.0, 1.0);
  config.top_optimizer = OptimizerConfig::sgd(1e-3, 0.0, 1.0);
  Optimizers<double> opt(config, stacks);
  const auto fine_before = flat_params(stacks.fine.cast<float>());
  const auto x = images_tensor<double>(data, idx);
  const auto y = class_labels(data, idx);
  std::vector<double> trajectory;
  for (int s = 0; s < 50; ++s)
    trajectory.push_back(train_step(x, y, config, family_config("toy"), stacks, opt).hint);
  for (std::size_t s = 1; s < trajectory.size(); ++s)
    EXPECT_LT(trajectory[s], trajectory[s - 1]) << "step " << s;
  EXPECT_EQ(flat_params(stacks.fine.cast<float>()), fine_before);
}

TEST(TrainStep, FailureLeavesParametersUntouched) {
  auto data = toy_digits(4, 10);
  std::vector<std::size_t> idx = {0, 1, 2, 3};
  auto stacks = build_family<float>("toy", 11);
  TrainConfig config;
  config.k = 2;
  Optimizers<float> opt(config, stacks);
  const auto before = flat_params(stacks.coarse);
  const auto before_fine = flat_params(stacks.fine);
  std::vector<std::size_t> bad = {1, 2, 99, 3};
  EXPECT_THROW(train_step(images_tensor<float>(data, idx), bad, config, family_config("toy"),
                          stacks, opt),
               std::out_of_range);
  EXPECT_EQ(flat_params(stacks.coarse), before);
  EXPECT_EQ(flat_params(stacks.fine), before_fine);
}

TEST(TrainStep, LossDecreasesOnFixedBatch) {
  for (const char* family : {"toy", "cmnist"}) {
    CanvasSpec spec;
    spec.height = std::string(family) == "toy" ? 28 : 40;
    spec.width = spec.height;
    spec.digit_height = 14;
    spec.digit_width = 10;
    spec.seed = 11;
    auto data = synth_cluttered(spec, 50);
    std::vector<std::size_t> idx(50);
    std::iota(idx.begin(), idx.end(), 0);
    auto stacks = build_family<float>(family, 12);
    TrainConfig config;
    config.k = 4;
    Optimizers<float> opt(config, stacks);
    const auto x = images_tensor<float>(data, idx);
    const auto y = class_labels(data, idx);
    std::vector<double> losses;
    for (int s = 0; s < 20; ++s)
      losses.push_back(train_step(x, y, config, family_config(family), stacks, opt).loss);
    const double tail = (losses[15] + losses[16] + losses[17] + losses[18] + losses[19]) / 5;
    EXPECT_LT(tail, losses[0]) << family;
  }
}

TEST(Config, Validation) {
  TrainConfig c;
  c.lambda = 1.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.lambda = -0.1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.lambda = 0.5;
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_EQ(parse_model_kind("dcn"), ModelKind::dcn);
  EXPECT_THROW(parse_model_kind("medium"), std::invalid_argument);
}

// A top whose output ignores its input: always class 3.
DcnStacks<float> constant_predictor() {
  auto stacks = build_family<float>("toy", 13);
  auto params = stacks.top.parameters();
  auto& fc_weight = params[params.size() - 2];
  auto& fc_bias = params.back();
  for (auto& w : fc_weight.mutable_values()) w = 0.0f;
  for (std::size_t c = 0; c < fc_bias.numel(); ++c) fc_bias.mutable_values()[c] = c == 3 ? 5.0f : 0.0f;
  return stacks;
}

TEST(Evaluate, ConstantPredictor) {
  auto stacks = constant_predictor();
  Dataset balanced;
  balanced.height = balanced.width = 28;
  std::vector<std::uint8_t> blank(28 * 28, 0);
  for (int r = 0; r < 3; ++r)
    for (std::uint8_t d = 0; d < 10; ++d) balanced.push_back(blank, {d});
  for (ModelKind m : {ModelKind::coarse, ModelKind::fine, ModelKind::dcn})
    EXPECT_NEAR(evaluate(balanced, stacks, m, 4, family_config("toy")).error, 0.9, 1e-12);

  Dataset threes;
  threes.height = threes.width = 28;
  for (int r = 0; r < 7; ++r) threes.push_back(blank, {3});
  EXPECT_EQ(evaluate(threes, stacks, ModelKind::dcn, 4, family_config("toy")).error, 0.0);
  EXPECT_THROW(evaluate(Dataset{}, stacks, ModelKind::coarse, 0, family_config("toy")),
               std::invalid_argument);
}

TEST(Evaluate, KZeroMatchesCoarse) {
  auto data = toy_digits(40, 14);
  auto stacks = build_family<float>("toy", 15);
  const auto config = family_config("toy");
  EXPECT_EQ(evaluate(data, stacks, ModelKind::dcn, 0, config).error,
            evaluate(data, stacks, ModelKind::coarse, 0, config).error);
}

TEST(Train, DeterministicLogs) {
  auto train_set = toy_digits(64, 16), test_set = toy_digits(32, 17);
  auto run = [&] {
    auto stacks = build_family<float>("toy", 18);
    TrainConfig config;
    config.k = 3;
    config.epochs = 2;
    config.batch_size = 16;
    config.seed = 5;
    std::vector<EpochRecord> seen;
    auto log = train(stacks, train_set, test_set, config, family_config("toy"),
                     [&](const EpochRecord& r) { seen.push_back(r); });
    EXPECT_EQ(seen, log.epochs);
    return log;
  };
  const auto a = run(), b = run();
  ASSERT_EQ(a.epochs.size(), 2u);
  EXPECT_EQ(a, b);
  std::ostringstream sa, sb;
  a.write_csv(sa);
  b.write_csv(sb);
  EXPECT_EQ(sa.str(), sb.str());
  EXPECT_EQ(sa.str().substr(0, 41), "epoch,train_loss,test_error,hint_distance");
}

}  // namespace
}  // namespace dcn
