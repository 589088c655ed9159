#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "propq/boxgeom.hpp"
#include "propq/pipeline.hpp"

namespace propq {

struct EvalConfig {
  double iou_threshold = 0.5;
  std::size_t max_detections = 100;
  // Size is sqrt(box area): small < small_max <= medium < medium_max <= large.
  double small_max = 32.0;
  double medium_max = 96.0;

  void validate() const;
};

enum class SizeBucket { All, Small, Medium, Large };

struct Detection {
  int image_id = 0;
  BoundingBox box;
  double score = 0.0;
  std::string category = "lesion";
};

struct GroundTruth {
  int image_id = 0;
  BoundingBox box;
  std::string category = "lesion";
};

/// One metric over all objects and per size bucket. A bucket without
/// ground truths is absent rather than zero.
struct BucketedMetric {
  std::optional<double> all, small, medium, large;
  std::map<std::string, double> per_category;
};

/// 101-point interpolated AP at one IoU threshold, averaged over categories.
/// Detections are matched greedily in descending score (input order on ties),
/// each ground truth at most once.
std::optional<double> average_precision(std::span<const Detection> dets,
                                        std::span<const GroundTruth> gts, const EvalConfig& cfg,
                                        SizeBucket bucket = SizeBucket::All);

/// Fraction of ground truths matched by the top max_detections per image.
std::optional<double> average_recall(std::span<const Detection> dets,
                                     std::span<const GroundTruth> gts, const EvalConfig& cfg,
                                     SizeBucket bucket = SizeBucket::All);

BucketedMetric average_precision_table(std::span<const Detection> dets,
                                       std::span<const GroundTruth> gts, const EvalConfig& cfg);
BucketedMetric average_recall_table(std::span<const Detection> dets,
                                    std::span<const GroundTruth> gts, const EvalConfig& cfg);

/// Classification scores of one image in head layout (A, H, W).
struct ScoredImage {
  AnchorGrid grid;
  std::vector<double> s_cls;
  std::vector<BoundingBox> gts;
};

/// delta_scores[x] is the mean of s_cls(x) - s_cls(0) over every ground truth
/// and every position at Manhattan distance x from the ground truth's center
/// cell, read at the anchor that best fits the ground truth there.
struct GradientCurve {
  std::vector<int> distances;
  std::vector<double> delta_scores;
  std::vector<std::size_t> samples;

  /// Mean of delta_scores over distances >= `from`.
  double mean_from(int from) const;
};

GradientCurve confidence_gradient_curve(std::span<const ScoredImage> images, int max_distance);

/// Throws when either variable has zero variance or fewer than two points.
double pearson(std::span<const double> x, std::span<const double> y);

struct ImageProposals {
  std::vector<Proposal> proposals;
  std::vector<BoundingBox> gts;
};

struct ScoreIouCorrelation {
  double cls = 0.0;
  std::optional<double> nwd;
  double final_score = 0.0;
  std::size_t count = 0;
};

/// Pearson of s_cls, p_nwd and s_final against each proposal's best IoU with
/// the image's ground truths (0 when the image has none).
ScoreIouCorrelation score_iou_correlation(std::span<const ImageProposals> images);

}  // namespace propq
