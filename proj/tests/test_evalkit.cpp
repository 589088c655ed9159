#include <gtest/gtest.h>

#include <cmath>

#include "propq/error.hpp"
#include "propq/evalkit.hpp"

using namespace propq;

namespace {

const BoundingBox kFar(200, 200, 10, 10);

std::vector<GroundTruth> three_gts() {
  return {{1, BoundingBox(10, 10, 10, 10)}, {1, BoundingBox(50, 50, 10, 10)}, {1, BoundingBox(90, 90, 10, 10)}};
}

}  // namespace

// TP, FP, TP, FP, TP over three ground truths. Precision envelope is
// 1 up to recall 1/3, 2/3 up to 2/3 and 0.6 up to 1; the 101 recall points
// split 34 / 33 / 34 between them.
TEST(AveragePrecision, HandComputedCurve) {
  const auto gts = three_gts();
  const std::vector<Detection> dets{{1, gts[0].box, 0.9}, {1, kFar, 0.8}, {1, gts[1].box, 0.7},
                                    {1, kFar, 0.6}, {1, gts[2].box, 0.5}};
  const double want = (34 * 1.0 + 33 * (2.0 / 3.0) + 34 * 0.6) / 101.0;
  EXPECT_NEAR(*average_precision(dets, gts, {}), want, 1e-12);
  EXPECT_DOUBLE_EQ(*average_recall(dets, gts, {}), 1.0);
}

TEST(AveragePrecision, PerfectAndEmpty) {
  const auto gts = three_gts();
  std::vector<Detection> dets;
  for (const auto& g : gts) dets.push_back({1, g.box, 0.9});
  EXPECT_DOUBLE_EQ(*average_precision(dets, gts, {}), 1.0);
  EXPECT_DOUBLE_EQ(*average_precision({}, gts, {}), 0.0);
  EXPECT_DOUBLE_EQ(*average_recall({}, gts, {}), 0.0);
  EXPECT_FALSE(average_precision(dets, {}, {}));
}

TEST(AveragePrecision, DuplicateDetectionIsFalsePositive) {
  const std::vector<GroundTruth> gts{{1, BoundingBox(10, 10, 10, 10)}};
  const std::vector<Detection> dets{{1, gts[0].box, 0.9}, {1, gts[0].box, 0.95}};
  // the higher score matches, the other is a false positive after full recall
  EXPECT_DOUBLE_EQ(*average_precision(dets, gts, {}), 1.0);
  const std::vector<Detection> worse{{1, kFar, 0.99}, {1, gts[0].box, 0.9}};
  EXPECT_DOUBLE_EQ(*average_precision(worse, gts, {}), 0.5);
}

TEST(AveragePrecision, ThresholdAndImageSeparation) {
  const std::vector<GroundTruth> gts{{1, BoundingBox(10, 10, 10, 10)}};
  // IoU of a half-shifted box is 1/3
  const std::vector<Detection> shifted{{1, BoundingBox(15, 10, 10, 10), 0.9}};
  EXPECT_DOUBLE_EQ(*average_recall(shifted, gts, {}), 0.0);
  EvalConfig loose;
  loose.iou_threshold = 0.3;
  EXPECT_DOUBLE_EQ(*average_recall(shifted, gts, loose), 1.0);
  const std::vector<Detection> other_image{{2, gts[0].box, 0.9}};
  EXPECT_DOUBLE_EQ(*average_recall(other_image, gts, {}), 0.0);
}

TEST(AverageRecall, MaxDetectionsCap) {
  const auto gts = three_gts();
  std::vector<Detection> dets{{1, kFar, 0.99}, {1, kFar, 0.98}};
  for (const auto& g : gts) dets.push_back({1, g.box, 0.5});
  EvalConfig c;
  c.max_detections = 3;
  EXPECT_NEAR(*average_recall(dets, gts, c), 1.0 / 3.0, 1e-12);
}

TEST(BucketedMetric, SizeBucketsAndCategories) {
  std::vector<GroundTruth> gts{{1, BoundingBox(10, 10, 8, 8)}, {1, BoundingBox(100, 100, 50, 50)},
                               {1, BoundingBox(300, 300, 120, 120), "nevus"}};
  std::vector<Detection> dets{{1, gts[0].box, 0.9}, {1, gts[2].box, 0.8, "nevus"}};
  const auto ar = average_recall_table(dets, gts, {});
  EXPECT_DOUBLE_EQ(*ar.small, 1.0);
  EXPECT_DOUBLE_EQ(*ar.medium, 0.0);
  EXPECT_DOUBLE_EQ(*ar.large, 1.0);
  EXPECT_DOUBLE_EQ(ar.per_category.at("lesion"), 0.5);
  EXPECT_DOUBLE_EQ(ar.per_category.at("nevus"), 1.0);
  EXPECT_DOUBLE_EQ(*ar.all, 0.75);
  gts.pop_back();
  gts.pop_back();
  EXPECT_FALSE(average_precision_table(dets, gts, {}).large);
}

TEST(GradientCurve, HandScoreMap) {
  AnchorGrid g;
  g.stride = 8;
  g.scales = {16};
  g.feat_h = g.feat_w = 5;
  ScoredImage img{g, std::vector<double>(25), {BoundingBox(20, 20, 16, 16)}};
  // score = 1 - 0.1 * manhattan distance from the center cell (2, 2)
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x) img.s_cls[y * 5 + x] = 1.0 - 0.1 * (std::abs(x - 2) + std::abs(y - 2));
  const ScoredImage imgs[] = {img};
  const auto c = confidence_gradient_curve(imgs, 3);
  EXPECT_EQ(c.distances, (std::vector<int>{0, 1, 2, 3}));
  EXPECT_EQ(c.samples, (std::vector<std::size_t>{1, 4, 8, 8}));
  for (int d = 0; d <= 3; ++d) EXPECT_NEAR(c.delta_scores[d], -0.1 * d, 1e-12);
  EXPECT_NEAR(c.mean_from(1), -0.2, 1e-12);
}

TEST(GradientCurve, FlatScoresGiveZeroCurve) {
  AnchorGrid g;
  g.feat_h = g.feat_w = 6;
  ScoredImage img{g, std::vector<double>(72, 0.3), {BoundingBox(12, 30, 10, 12), BoundingBox(40, 8, 20, 20)}};
  const ScoredImage imgs[] = {img};
  const auto c = confidence_gradient_curve(imgs, 2);
  for (double v : c.delta_scores) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(c.samples[0], 2u);
  img.gts = {BoundingBox(100, 8, 4, 4)};
  const ScoredImage bad[] = {img};
  EXPECT_THROW(confidence_gradient_curve(bad, 2), InvalidArgument);
}

TEST(Pearson, KnownCases) {
  const std::vector<double> x{1, 2, 3, 4, 5};
  EXPECT_NEAR(pearson(x, std::vector<double>{2, 4, 6, 8, 10}), 1.0, 1e-12);
  EXPECT_NEAR(pearson(x, std::vector<double>{5, 4, 3, 2, 1}), -1.0, 1e-12);
  // symmetric parabola: zero linear correlation
  EXPECT_NEAR(pearson(x, std::vector<double>{4, 1, 0, 1, 4}), 0.0, 1e-12);
  // hand value: x = {1,2,3}, y = {1,3,2} gives 0.5
  EXPECT_NEAR(pearson(std::vector<double>{1, 2, 3}, std::vector<double>{1, 3, 2}), 0.5, 1e-12);
  EXPECT_THROW(pearson(x, std::vector<double>(5, 1.0)), InvalidArgument);
  EXPECT_THROW(pearson(std::vector<double>{1}, std::vector<double>{1}), InvalidArgument);
  EXPECT_THROW(pearson(x, std::vector<double>{1, 2}), InvalidArgument);
}

TEST(ScoreIouCorrelation, OptionalNwdColumn) {
  const std::vector<BoundingBox> gts{BoundingBox(20, 20, 10, 10)};
  ImageProposals img{{}, gts};
  for (int k = 0; k < 6; ++k) {
    const double shift = k * 2.0;
    img.proposals.push_back(Proposal::make(BoundingBox(20 + shift, 20, 10, 10), 1.0 - 0.1 * k, 0.9 - 0.1 * k, {}, k));
  }
  const ImageProposals imgs[] = {img};
  const auto r = score_iou_correlation(imgs);
  EXPECT_EQ(r.count, 6u);
  ASSERT_TRUE(r.nwd);
  EXPECT_GT(r.cls, 0.9);
  img.proposals[0].p_nwd.reset();
  const ImageProposals without[] = {img};
  EXPECT_FALSE(score_iou_correlation(without).nwd);
}
