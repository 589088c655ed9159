#include "propq/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "propq/error.hpp"

namespace propq {

AnchorGrid AnchorGrid::for_image(int image_w, int image_h, int stride, std::vector<double> scales,
                                 std::vector<double> ratios) {
  if (stride <= 0 || image_w <= 0 || image_h <= 0)
    throw InvalidArgument("anchor grid needs positive stride and image size");
  AnchorGrid g;
  g.stride = stride;
  g.scales = std::move(scales);
  g.aspect_ratios = std::move(ratios);
  g.feat_w = (image_w + stride - 1) / stride;
  g.feat_h = (image_h + stride - 1) / stride;
  g.validate();
  return g;
}

std::size_t AnchorGrid::tensor_index(std::size_t anchor) const noexcept {
  const std::size_t a = anchor % per_position();
  const std::size_t pos = anchor / per_position();
  return a * static_cast<std::size_t>(feat_h) * static_cast<std::size_t>(feat_w) + pos;
}

void AnchorGrid::validate() const {
  if (stride <= 0) throw InvalidArgument("anchor stride must be positive");
  if (scales.empty() || aspect_ratios.empty())
    throw InvalidArgument("anchor grid needs at least one scale and one aspect ratio");
  if (feat_h <= 0 || feat_w <= 0) throw InvalidArgument("anchor grid needs a non-empty feature map");
  for (double s : scales)
    if (!(s > 0.0)) throw InvalidArgument("anchor scales must be positive");
  for (double r : aspect_ratios)
    if (!(r > 0.0)) throw InvalidArgument("anchor aspect ratios must be positive");
}

std::vector<BoundingBox> generate_anchors(const AnchorGrid& grid) {
  grid.validate();
  std::vector<BoundingBox> out;
  out.reserve(grid.count());
  for (int y = 0; y < grid.feat_h; ++y) {
    for (int x = 0; x < grid.feat_w; ++x) {
      const double cx = (x + 0.5) * grid.stride;
      const double cy = (y + 0.5) * grid.stride;
      for (double s : grid.scales) {
        for (double r : grid.aspect_ratios) {
          const double root = std::sqrt(r);
          out.emplace_back(cx, cy, s / root, s * root);
        }
      }
    }
  }
  return out;
}

void AssignConfig::validate() const {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in_unit(label_threshold) || !in_unit(negative_threshold))
    throw InvalidArgument("assignment thresholds must lie in [0, 1]");
  if (negative_threshold > label_threshold)
    throw InvalidArgument("negative_threshold must not exceed label_threshold");
}

std::size_t AssignmentResult::positives() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), AnchorLabel::Positive));
}

std::size_t AssignmentResult::negatives() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), AnchorLabel::Negative));
}

AssignmentResult assign_labels(std::span<const BoundingBox> anchors,
                               std::span<const BoundingBox> gts, const AssignConfig& cfg) {
  cfg.validate();
  const std::size_t n = anchors.size();
  AssignmentResult r{std::vector<AnchorLabel>(n, AnchorLabel::Negative), std::vector<int>(n, -1),
                     std::vector<double>(n, 0.0)};
  if (gts.empty()) return r;

  std::vector<double> best_for_gt(gts.size(), -1.0);
  std::vector<std::size_t> best_anchor(gts.size(), 0);
  std::vector<int> argmax(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    double best = -1.0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(anchors[i], gts[g]);
      if (v > best) {
        best = v;
        argmax[i] = static_cast<int>(g);
      }
      if (v > best_for_gt[g]) {
        best_for_gt[g] = v;
        best_anchor[g] = i;
      }
    }
    r.max_iou[i] = best;
    if (best >= cfg.label_threshold) {
      r.labels[i] = AnchorLabel::Positive;
      r.matched_gt[i] = argmax[i];
    } else if (best >= cfg.negative_threshold) {
      r.labels[i] = AnchorLabel::Ignore;
    }
  }
  if (cfg.rescue_best_anchor) {
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (best_for_gt[g] <= 0.0) continue;
      const std::size_t i = best_anchor[g];
      r.labels[i] = AnchorLabel::Positive;
      r.matched_gt[i] = static_cast<int>(g);
    }
  }
  return r;
}

void apply_ignore_regions(AssignmentResult& result, std::span<const BoundingBox> anchors,
                          std::span<const BoundingBox> regions, double min_cover) {
  if (regions.empty()) return;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    if (result.labels[i] != AnchorLabel::Negative) continue;
    const Corners a = anchors[i].to_corners();
    for (const auto& region : regions) {
      const Corners c = region.to_corners();
      const double iw = std::max(0.0, std::min(a.x1, c.x1) - std::max(a.x0, c.x0));
      const double ih = std::max(0.0, std::min(a.y1, c.y1) - std::max(a.y0, c.y0));
      if (iw * ih >= min_cover * anchors[i].area()) {
        result.labels[i] = AnchorLabel::Ignore;
        break;
      }
    }
  }
}

namespace {
// exp clamp for size deltas, the usual log(1000/16)
const double kMaxSizeDelta = std::log(1000.0 / 16.0);
}  // namespace

BoxDeltas encode_deltas(const BoundingBox& anchor, const BoundingBox& gt) {
  return {(gt.cx() - anchor.cx()) / anchor.w(), (gt.cy() - anchor.cy()) / anchor.h(),
          std::log(gt.w() / anchor.w()), std::log(gt.h() / anchor.h())};
}

BoundingBox decode_deltas(const BoundingBox& anchor, const BoxDeltas& d) {
  const double dw = std::clamp(d.dw, -kMaxSizeDelta, kMaxSizeDelta);
  const double dh = std::clamp(d.dh, -kMaxSizeDelta, kMaxSizeDelta);
  return {anchor.cx() + d.dx * anchor.w(), anchor.cy() + d.dy * anchor.h(),
          anchor.w() * std::exp(dw), anchor.h() * std::exp(dh)};
}

Proposal Proposal::make(const BoundingBox& box, double s_cls, std::optional<double> p_nwd,
                        const LossWeights& w, std::size_t anchor) {
  // a saturated sigmoid rounds to exactly 0 or 1; nudge it back inside (0, 1)
  constexpr double lo = std::numeric_limits<double>::min(), hi = 1.0 - 0x1p-53;
  const double s_final =
      p_nwd ? rectify_score(std::clamp(s_cls, lo, hi), std::clamp(*p_nwd, lo, hi), w) : s_cls;
  return Proposal{box, s_cls, p_nwd, s_final, anchor};
}

namespace {

std::vector<std::size_t> order_by_score(std::span<const Proposal> proposals, ScoreKey key) {
  std::vector<std::size_t> order(proposals.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return score_of(proposals[a], key) > score_of(proposals[b], key);
  });
  return order;
}

}  // namespace

std::vector<Proposal> nms(std::span<const Proposal> proposals, double iou_threshold, ScoreKey key) {
  if (!(iou_threshold >= 0.0 && iou_threshold <= 1.0))
    throw InvalidArgument("nms threshold must lie in [0, 1]");
  std::vector<Proposal> kept;
  for (std::size_t idx : order_by_score(proposals, key)) {
    const Proposal& cand = proposals[idx];
    bool suppressed = false;
    for (const Proposal& k : kept) {
      if (iou(cand.box, k.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(cand);
  }
  return kept;
}

std::vector<Proposal> select_topk(std::span<const Proposal> proposals, std::size_t k,
                                  double proposal_threshold, ScoreKey key) {
  std::vector<Proposal> out;
  for (std::size_t idx : order_by_score(proposals, key)) {
    if (out.size() >= k) break;
    if (score_of(proposals[idx], key) < proposal_threshold) continue;
    out.push_back(proposals[idx]);
  }
  return out;
}

std::vector<Proposal> filter_proposals(std::span<const Proposal> proposals,
                                       const ProposalConfig& cfg) {
  auto pre = select_topk(proposals, cfg.pre_nms_topk, cfg.score_threshold, cfg.key);
  auto kept = nms(pre, cfg.nms_iou, cfg.key);
  if (kept.size() > cfg.post_nms_topk)
    kept.erase(kept.begin() + static_cast<std::ptrdiff_t>(cfg.post_nms_topk), kept.end());
  return kept;
}

}  // namespace propq
