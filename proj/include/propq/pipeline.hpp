#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "propq/boxgeom.hpp"
#include "propq/losses.hpp"

namespace propq {

/// Anchors tiled over a feature map: one per (position, scale, ratio).
/// Ratio is h/w; an anchor of scale s has area s*s.
struct AnchorGrid {
  int stride = 8;
  std::vector<double> scales{16.0, 32.0};
  std::vector<double> aspect_ratios{1.0};
  int feat_h = 0;
  int feat_w = 0;

  static AnchorGrid for_image(int image_w, int image_h, int stride, std::vector<double> scales,
                              std::vector<double> ratios);

  std::size_t per_position() const noexcept { return scales.size() * aspect_ratios.size(); }
  std::size_t count() const noexcept {
    return static_cast<std::size_t>(feat_h) * static_cast<std::size_t>(feat_w) * per_position();
  }
  // Index into a (per_position, feat_h, feat_w) head tensor for anchor `i`.
  std::size_t tensor_index(std::size_t anchor) const noexcept;
  std::size_t anchor_index(std::size_t a, int y, int x) const noexcept {
    return (static_cast<std::size_t>(y) * static_cast<std::size_t>(feat_w) +
            static_cast<std::size_t>(x)) * per_position() + a;
  }
  void validate() const;
};

/// Row-major over positions, then scale, then ratio.
std::vector<BoundingBox> generate_anchors(const AnchorGrid& grid);

enum class AnchorLabel : std::int8_t { Ignore = -1, Negative = 0, Positive = 1 };

struct AssignConfig {
  double label_threshold = 0.5;
  double negative_threshold = 0.5;
  bool rescue_best_anchor = true;

  void validate() const;
};

struct AssignmentResult {
  std::vector<AnchorLabel> labels;
  std::vector<int> matched_gt;  // -1 unless positive
  std::vector<double> max_iou;

  std::size_t positives() const;
  std::size_t negatives() const;
};

/// Max-IoU assignment. Positive at max IoU >= label_threshold, negative below
/// negative_threshold, ignore in between. With rescue, each ground truth's
/// best anchor (lowest index on ties) is forced positive; later ground truths
/// win when they share a best anchor.
AssignmentResult assign_labels(std::span<const BoundingBox> anchors,
                               std::span<const BoundingBox> gts, const AssignConfig& cfg);

/// Turns negatives into ignores when at least `min_cover` of the anchor's area
/// falls inside an ignore region.
void apply_ignore_regions(AssignmentResult& result, std::span<const BoundingBox> anchors,
                          std::span<const BoundingBox> regions, double min_cover = 0.5);

struct BoxDeltas {
  double dx = 0, dy = 0, dw = 0, dh = 0;
};

BoxDeltas encode_deltas(const BoundingBox& anchor, const BoundingBox& gt);
BoundingBox decode_deltas(const BoundingBox& anchor, const BoxDeltas& d);

struct Proposal {
  BoundingBox box;
  double s_cls = 0.0;
  std::optional<double> p_nwd;
  double s_final = 0.0;
  std::size_t anchor = 0;

  static Proposal make(const BoundingBox& box, double s_cls, std::optional<double> p_nwd,
                       const LossWeights& w, std::size_t anchor = 0);
};

enum class ScoreKey { Cls, Final };

inline double score_of(const Proposal& p, ScoreKey key) {
  return key == ScoreKey::Cls ? p.s_cls : p.s_final;
}

/// Greedy NMS: boxes are visited in descending score (lower index first on
/// ties) and dropped when IoU with a kept box exceeds the threshold.
std::vector<Proposal> nms(std::span<const Proposal> proposals, double iou_threshold,
                          ScoreKey key = ScoreKey::Final);

/// Drops scores below `proposal_threshold`, then keeps the best k.
std::vector<Proposal> select_topk(std::span<const Proposal> proposals, std::size_t k,
                                  double proposal_threshold = 0.0, ScoreKey key = ScoreKey::Final);

struct ProposalConfig {
  std::size_t pre_nms_topk = 2000;
  double nms_iou = 0.7;
  std::size_t post_nms_topk = 1000;
  double score_threshold = 0.0;
  ScoreKey key = ScoreKey::Final;

  static ProposalConfig training() { return {}; }
  static ProposalConfig detection() { return {2000, 0.5, 200, 0.0, ScoreKey::Final}; }
};

/// top-k, NMS, top-k.
std::vector<Proposal> filter_proposals(std::span<const Proposal> proposals,
                                       const ProposalConfig& cfg);

}  // namespace propq
