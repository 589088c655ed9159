#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "propq/boxgeom.hpp"
#include "propq/heads.hpp"
#include "propq/losses.hpp"
#include "propq/nn.hpp"
#include "propq/pipeline.hpp"

namespace propq {

/// Everything the loss needs besides the network outputs.
struct LossConfig {
  AssignConfig assign;
  std::size_t samples_per_image = 256;
  double positive_fraction = 0.5;
  LossWeights weights;
  ConfidenceLoss confidence_loss = ConfidenceLoss::Sbce;
  // Similarity the confidence branch learns to predict; IoU, GIoU, DIoU or NWD.
  BoxMetric confidence_metric = BoxMetric::Nwd;
  NwdConfig nwd;

  void validate() const;
};

/// Maps a box similarity into [0, 1] so a sigmoid output can regress it.
/// GIoU and DIoU live in [-1, 1] and are shifted and halved.
double confidence_target(BoxMetric metric, const BoundingBox& pred, const BoundingBox& gt,
                         const NwdConfig& nwd);

/// One image's sampled anchors and their regression targets.
struct SampledTargets {
  std::vector<std::size_t> sampled;  // anchor indices
  std::vector<double> labels;        // parallel to `sampled`
  std::vector<std::size_t> positives;
  std::vector<int> positive_gt;
  std::vector<BoxDeltas> positive_deltas;
  // Filled from the current prediction, treated as constants.
  std::vector<double> confidence_targets;
};

/// Up to samples_per_image anchors, at most positive_fraction of them positive,
/// drawn uniformly without replacement. Sorted by anchor index.
SampledTargets sample_targets(const AssignmentResult& assignment,
                              std::span<const BoundingBox> anchors,
                              std::span<const BoundingBox> gts, const LossConfig& cfg,
                              std::mt19937_64& rng);

/// Confidence labels: the metric between each positive's decoded predicted
/// box and its matched ground truth.
void fill_confidence_targets(SampledTargets& targets, const HeadOutput& out,
                             const AnchorGrid& grid, std::span<const BoundingBox> anchors,
                             std::span<const BoundingBox> gts, const LossConfig& cfg);

struct LossComponents {
  double cls = 0.0;
  double loc = 0.0;
  double nwd = 0.0;
  double total = 0.0;
};

/// Classification, box and confidence losses for one image combined as
/// cls + loc + lambda * nwd. Writes the gradient when `grad` is non-null.
LossComponents head_loss(const HeadOutput& out, const SampledTargets& targets,
                         const AnchorGrid& grid, const LossConfig& cfg, HeadGrad* grad);

struct TrainImage {
  nn::Tensor image;
  std::vector<BoundingBox> gts;
  std::vector<BoundingBox> ignore_regions;
};

/// Cached per-image state that does not depend on the weights.
struct PreparedImage {
  const TrainImage* source = nullptr;
  AnchorGrid grid;
  std::vector<BoundingBox> anchors;
  AssignmentResult assignment;
};

struct AnchorConfig {
  std::vector<double> scales{16.0, 32.0};
  std::vector<double> aspect_ratios{1.0};

  std::size_t per_position() const noexcept { return scales.size() * aspect_ratios.size(); }
};

PreparedImage prepare_image(const TrainImage& img, const AnchorConfig& anchors,
                            const LossConfig& cfg);

/// Runs `fn(i)` for i in [0, n) on up to `threads` workers.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

/// SplitMix64 finalizer, for deriving independent seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

/// One SGD update on a batch: per-image losses are averaged, and per-image
/// gradients are summed in batch order so results do not depend on `threads`.
/// Throws DivergenceError on a non-finite loss.
LossComponents training_step(Detector& model, nn::Sgd& sgd, std::span<const PreparedImage* const> batch,
                             const LossConfig& cfg, std::uint64_t step_seed, int threads = 1);

}  // namespace propq
