#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "dcn/attention.hpp"
#include "dcn/cost_model.hpp"
#include "dcn/seq_head.hpp"
#include "oracles.hpp"

namespace dcn {
namespace {

struct Family {
  DcnStacks<double> stacks;
  DcnConfig config;
};

Family family(const std::string& name) { return {build_family<double>(name, 1), family_config(name)}; }

Tensor<double> random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Tensor<double>({1, 1, h, w}, oracle::uniform_values(h * w, rng, 0.0, 1.0));
}

TEST(ConvMults, Examples) {
  EXPECT_EQ(conv_mults(2, 4, 3, 3, 6, 6), 6u * 6 * 4 * 2 * 3 * 3);
  EXPECT_EQ(conv_mults(2, 4, 3, 3, 6, 6), 2592u);
  EXPECT_EQ(conv_mults(1, 1, 1, 1, 1, 1), 1u);
}

TEST(ConvMults, MatchesCountedConvolution) {
  Tensor<double> x({3, 2, 9, 8}, std::vector<double>(3 * 2 * 9 * 8, 0.5));
  Tensor<double> w({4, 2, 3, 2}, std::vector<double>(4 * 2 * 3 * 2, 0.1));
  Tensor<double> b({4}, std::vector<double>(4, 0.0));
  OpCounter counter;
  {
    CountingScope scope(counter, "probe");
    conv2d(x, w, b, Conv2dOptions{2, 1, 1, 0});
  }
  // output 5x7
  EXPECT_EQ(counter.total(), 3 * conv_mults(2, 4, 3, 2, 5, 7));
}

TEST(PlanCost, CmnistMatchesReportedCounts) {
  auto f = family("cmnist");
  const auto fine = plan_cost(Plan::fine(), 100, 100, f.stacks, f.config);
  const auto dcn = plan_cost(Plan::dcn(8), 100, 100, f.stacks, f.config);
  const auto coarse = plan_cost(Plan::coarse(), 100, 100, f.stacks, f.config);
  EXPECT_NEAR(static_cast<double>(fine.total()), 84.5e6, 0.1 * 84.5e6);
  EXPECT_NEAR(static_cast<double>(dcn.total()), 27.7e6, 0.1 * 27.7e6);
  EXPECT_GE(static_cast<double>(fine.total()) / dcn.total(), 2.5);
  EXPECT_EQ(coarse.total(), 6357420u);
  EXPECT_EQ(fine.total(), 82951584u);
  EXPECT_EQ(dcn.total(), 26667756u);
}

TEST(PlanCost, TotalsEqualSumOfParts) {
  for (const std::string name : {"cmnist", "toy", "svhn", "seqdesk"}) {
    auto f = family(name);
    const std::size_t h = name == "toy" ? 28 : name == "cmnist" ? 100 : 64;
    const std::size_t w = name == "toy" ? 28 : name == "cmnist" ? 100 : 160;
    for (const Plan& plan : {Plan::coarse(), Plan::fine(), Plan::soft_attention(), Plan::dcn(3)}) {
      const auto r = plan_cost(plan, h, w, f.stacks, f.config);
      EXPECT_TRUE(r.consistent()) << name;
      std::uint64_t sum = 0;
      for (const auto& l : r.layers) sum += l.mults;
      EXPECT_EQ(sum, r.total()) << name;
    }
  }
}

TEST(PlanCost, KZeroIsCoarsePlusSaliency) {
  for (const std::string name : {"cmnist", "toy", "seqdesk"}) {
    auto f = family(name);
    const std::size_t h = name == "toy" ? 28 : name == "cmnist" ? 100 : 44;
    const std::size_t w = name == "toy" ? 28 : name == "cmnist" ? 100 : 108;
    const auto dcn0 = plan_cost(Plan::dcn(0), h, w, f.stacks, f.config);
    const auto coarse = plan_cost(Plan::coarse(), h, w, f.stacks, f.config);
    EXPECT_EQ(dcn0.total(), coarse.total() + dcn0.saliency_pass) << name;
    EXPECT_EQ(dcn0.fine_on_patches, 0u);
  }
}

TEST(PlanCost, FullGridPatchesCostAtLeastFine) {
  for (const std::string name : {"cmnist", "toy", "seqdesk"}) {
    auto f = family(name);
    const std::size_t h = name == "toy" ? 28 : name == "cmnist" ? 100 : 44;
    const std::size_t w = name == "toy" ? 28 : name == "cmnist" ? 100 : 108;
    const auto map = f.stacks.coarse.output_shape({1, 1, h, w});
    const auto full = plan_cost(Plan::dcn(map[2] * map[3]), h, w, f.stacks, f.config);
    const auto over = plan_cost(Plan::dcn(map[2] * map[3] + 50), h, w, f.stacks, f.config);
    EXPECT_GE(full.total(), plan_cost(Plan::fine(), h, w, f.stacks, f.config).total()) << name;
    EXPECT_EQ(over.total(), full.total()) << name;
  }
}

TEST(PlanCost, AffineInK) {
  auto f = family("cmnist");
  const auto geometry = f.stacks.coarse.field_geometry();
  const std::size_t side = geometry.size_h + f.config.context_px;
  std::uint64_t per_patch = 0;
  for (const auto& l : stack_costs(f.stacks.fine, Shape{1, 1, side, side}, section::fine_on_patches))
    per_patch += l.mults;
  ASSERT_GT(per_patch, 0u);
  const std::size_t ks[] = {1, 2, 4, 8};
  std::uint64_t costs[4];
  for (int i = 0; i < 4; ++i) costs[i] = plan_cost(Plan::dcn(ks[i]), 100, 100, f.stacks, f.config).total();
  for (int i = 1; i < 4; ++i) EXPECT_EQ(costs[i] - costs[0], (ks[i] - ks[0]) * per_patch);
}

TEST(PlanCost, SaliencyChargesTopForwardAndBackward) {
  auto f = family("cmnist");
  const auto r = plan_cost(Plan::dcn(4), 100, 100, f.stacks, f.config);
  std::uint64_t forward = 0, backward = 0;
  for (const auto& l : r.layers) {
    if (l.section != section::saliency) continue;
    EXPECT_EQ(l.layer.rfind("top/", 0), 0u) << l.layer;
    (l.phase == Phase::forward ? forward : backward) += l.mults;
  }
  EXPECT_GT(forward, 0u);
  EXPECT_EQ(backward, 2 * forward);
}

TEST(PlanCost, InputTooSmall) {
  auto f = family("cmnist");
  EXPECT_THROW(plan_cost(Plan::coarse(), 8, 8, f.stacks, f.config), DimensionError);
  EXPECT_THROW(plan_cost(Plan::dcn(2, {}), 100, 100, f.stacks, f.config), std::invalid_argument);
}

TEST(PlanCost, ScalesSumAndSkip) {
  auto f = family("seqdesk");
  const auto one = plan_cost(Plan::dcn(4, {1.0}), 44, 108, f.stacks, f.config);
  const auto half = plan_cost(Plan::dcn(4, {0.5}), 44, 108, f.stacks, f.config);
  const auto both = plan_cost(Plan::dcn(4, {1.0, 0.5}), 44, 108, f.stacks, f.config);
  EXPECT_EQ(both.total(), one.total() + half.total());
  const auto skipped = plan_cost(Plan::dcn(4, {1.0, 0.25}), 44, 108, f.stacks, f.config);
  EXPECT_EQ(skipped.total(), one.total());
}

TEST(Counter, CoarseAndFinePlansMatchPrediction) {
  for (const std::string name : {"cmnist", "toy"}) {
    auto f = family(name);
    const std::size_t side = name == "toy" ? 28 : 100;
    const auto x = random_image(side, side, 3);
    OpCounter counter;
    {
      CountingScope scope(counter, section::coarse);
      coarse_predict_batch(x, f.stacks);
    }
    const auto predicted = plan_cost(Plan::coarse(), side, side, f.stacks, f.config);
    EXPECT_EQ(counter.total(), predicted.total()) << name;
    EXPECT_EQ(counter.section_total(section::coarse), predicted.coarse_everywhere) << name;
    counter.clear();
    {
      CountingScope scope(counter, section::fine_everywhere);
      fine_predict_batch(x, f.stacks);
    }
    const auto fine = plan_cost(Plan::fine(), side, side, f.stacks, f.config);
    EXPECT_EQ(counter.total(), fine.total()) << name;
    EXPECT_EQ(counter.section_total(section::fine_everywhere), fine.fine_everywhere) << name;
  }
}

TEST(Counter, DcnSweepMatchesPredictionAndIsAffine) {
  auto f = family("cmnist");
  const auto x = random_image(100, 100, 4);
  std::vector<std::uint64_t> counted;
  const std::size_t ks[] = {1, 2, 4, 8};
  for (std::size_t k : ks) {
    const auto r = dcn_infer(x, f.stacks, k, f.config);
    const auto predicted = plan_cost(Plan::dcn(k), 100, 100, f.stacks, f.config);
    EXPECT_EQ(r.cost.total(), predicted.total()) << k;
    EXPECT_EQ(r.cost.saliency_pass, predicted.saliency_pass) << k;
    EXPECT_EQ(r.cost.fine_on_patches, predicted.fine_on_patches) << k;
    counted.push_back(r.cost.total());
  }
  // Every point must lie on the line through the first two.
  const std::uint64_t slope = (counted[1] - counted[0]);
  for (int i = 1; i < 4; ++i) EXPECT_EQ(counted[i] - counted[0], (ks[i] - ks[0]) * slope);
}

TEST(Counter, IndependentOfInputValues) {
  auto f = family("toy");
  const auto a = dcn_infer(random_image(28, 28, 5), f.stacks, 3, f.config);
  const auto b = dcn_infer(Tensor<double>({1, 1, 28, 28}), f.stacks, 3, f.config);
  EXPECT_EQ(a.cost.total(), b.cost.total());
  EXPECT_EQ(a.cost.saliency_pass, b.cost.saliency_pass);
}

TEST(Counter, SaliencyTouchesOnlyTopLayers) {
  auto f = family("cmnist");
  const auto r = dcn_infer(random_image(100, 100, 6), f.stacks, 2, f.config);
  for (const auto& l : r.cost.layers)
    if (l.section == section::saliency) EXPECT_EQ(l.layer.rfind("top/", 0), 0u) << l.layer;
}

TEST(Counter, SequenceDcnMatchesPrediction) {
  auto f = family("seqdesk");
  const auto x = random_image(44, 108, 7);
  const std::vector<double> scales = {1.0, 0.75};
  OpCounter counter;
  {
    CountingScope scope(counter, section::coarse);
    dcn_sequence_infer(x, f.stacks, 5, scales, f.config);
  }
  const auto predicted = plan_cost(Plan::dcn(5, scales), 44, 108, f.stacks, f.config);
  EXPECT_EQ(counter.total(), predicted.total());
  EXPECT_EQ(counter.section_total(section::saliency), predicted.saliency_pass);
}

TEST(Csv, Format) {
  auto f = family("cmnist");
  std::ostringstream os;
  write_cost_csv_header(os);
  write_cost_csv_row(os, plan_cost(Plan::dcn(8), 100, 100, f.stacks, f.config));
  EXPECT_EQ(os.str(), "plan,input_h,input_w,k,total_mults\ndcn,100,100,8,26667756\n");
  std::ostringstream table;
  write_layer_table(table, plan_cost(Plan::coarse(), 100, 100, f.stacks, f.config));
  EXPECT_NE(table.str().find("coarse,coarse,coarse/conv1,forward,12x47x47,"), std::string::npos)
      << table.str();
}

TEST(Plans, NamesRoundTrip) {
  for (auto k : {PlanKind::coarse, PlanKind::fine, PlanKind::soft_attention, PlanKind::dcn})
    EXPECT_EQ(parse_plan(plan_name(k)), k);
  EXPECT_THROW(parse_plan("medium"), std::invalid_argument);
  EXPECT_EQ(scaled_extent(44, 0.5), 22u);
  EXPECT_EQ(scaled_extent(3, 0.01), 1u);
  EXPECT_THROW(scaled_extent(3, 0.0), std::invalid_argument);
}

}  // namespace
}  // namespace dcn
