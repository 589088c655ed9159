#include "propq/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "propq/error.hpp"

namespace propq {

void EvalConfig::validate() const {
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0))
    throw InvalidArgument("eval iou_threshold must lie in (0, 1]");
  if (max_detections == 0) throw InvalidArgument("eval max_detections must be positive");
  if (!(small_max > 0.0 && medium_max > small_max))
    throw InvalidArgument("eval size buckets must be increasing");
}

namespace {

bool in_bucket(const BoundingBox& b, SizeBucket bucket, const EvalConfig& cfg) {
  const double size = std::sqrt(b.area());
  switch (bucket) {
    case SizeBucket::All: return true;
    case SizeBucket::Small: return size < cfg.small_max;
    case SizeBucket::Medium: return size >= cfg.small_max && size < cfg.medium_max;
    case SizeBucket::Large: return size >= cfg.medium_max;
  }
  return false;
}

struct MatchResult {
  std::vector<std::pair<double, bool>> scored;  // (score, true positive) of counted detections
  std::size_t num_gt = 0;
  std::size_t matched_gt = 0;
};

MatchResult match_category(std::span<const Detection> dets, std::span<const GroundTruth> gts,
                           const std::string& category, const EvalConfig& cfg, SizeBucket bucket) {
  std::set<int> image_ids;
  for (const auto& g : gts)
    if (g.category == category) image_ids.insert(g.image_id);
  for (const auto& d : dets)
    if (d.category == category) image_ids.insert(d.image_id);

  struct Counted {
    double score;
    std::size_t index;
    bool tp;
  };
  std::vector<Counted> counted;
  MatchResult r;
  for (int image : image_ids) {
    std::vector<const GroundTruth*> g;
    std::vector<bool> ignored;
    for (const auto& gt : gts) {
      if (gt.image_id != image || gt.category != category) continue;
      g.push_back(&gt);
      ignored.push_back(!in_bucket(gt.box, bucket, cfg));
      if (!ignored.back()) ++r.num_gt;
    }
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < dets.size(); ++i)
      if (dets[i].image_id == image && dets[i].category == category) order.push_back(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
    if (order.size() > cfg.max_detections) order.resize(cfg.max_detections);

    std::vector<bool> taken(g.size(), false);
    for (std::size_t di : order) {
      const Detection& d = dets[di];
      // regular ground truths first, then ignored ones
      int best = -1;
      for (int pass = 0; pass < 2 && best < 0; ++pass) {
        double best_iou = cfg.iou_threshold;
        for (std::size_t k = 0; k < g.size(); ++k) {
          if (taken[k] || ignored[k] != (pass == 1)) continue;
          const double v = iou(d.box, g[k]->box);
          if (v >= best_iou && (best < 0 || v > best_iou)) {
            best_iou = v;
            best = static_cast<int>(k);
          }
        }
      }
      if (best >= 0) {
        taken[static_cast<std::size_t>(best)] = true;
        if (ignored[static_cast<std::size_t>(best)]) continue;
        ++r.matched_gt;
        counted.push_back({d.score, di, true});
      } else if (in_bucket(d.box, bucket, cfg)) {
        counted.push_back({d.score, di, false});
      }
    }
  }
  std::stable_sort(counted.begin(), counted.end(), [](const Counted& a, const Counted& b) {
    return a.score != b.score ? a.score > b.score : a.index < b.index;
  });
  for (const auto& c : counted) r.scored.emplace_back(c.score, c.tp);
  return r;
}

double interpolated_ap(const MatchResult& m) {
  const std::size_t n = m.scored.size();
  std::vector<double> precision(n), recall(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (m.scored[i].second) ++tp;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(m.num_gt);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r - 1e-12);
    if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return sum / 101.0;
}

std::vector<std::string> categories_with_gt(std::span<const GroundTruth> gts) {
  std::set<std::string> cats;
  for (const auto& g : gts) cats.insert(g.category);
  return {cats.begin(), cats.end()};
}

template <typename Fn>
std::optional<double> mean_over_categories(std::span<const Detection> dets,
                                           std::span<const GroundTruth> gts, const EvalConfig& cfg,
                                           SizeBucket bucket, Fn per_category,
                                           std::map<std::string, double>* out = nullptr) {
  cfg.validate();
  double sum = 0.0;
  int n = 0;
  for (const auto& cat : categories_with_gt(gts)) {
    const MatchResult m = match_category(dets, gts, cat, cfg, bucket);
    if (m.num_gt == 0) continue;
    const double v = per_category(m);
    if (out) (*out)[cat] = v;
    sum += v;
    ++n;
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

double recall_of(const MatchResult& m) {
  return static_cast<double>(m.matched_gt) / static_cast<double>(m.num_gt);
}

template <typename Fn>
BucketedMetric table(std::span<const Detection> dets, std::span<const GroundTruth> gts,
                     const EvalConfig& cfg, Fn fn) {
  BucketedMetric t;
  t.all = mean_over_categories(dets, gts, cfg, SizeBucket::All, fn, &t.per_category);
  t.small = mean_over_categories(dets, gts, cfg, SizeBucket::Small, fn);
  t.medium = mean_over_categories(dets, gts, cfg, SizeBucket::Medium, fn);
  t.large = mean_over_categories(dets, gts, cfg, SizeBucket::Large, fn);
  return t;
}

}  // namespace

std::optional<double> average_precision(std::span<const Detection> dets,
                                        std::span<const GroundTruth> gts, const EvalConfig& cfg,
                                        SizeBucket bucket) {
  return mean_over_categories(dets, gts, cfg, bucket, interpolated_ap);
}

std::optional<double> average_recall(std::span<const Detection> dets,
                                     std::span<const GroundTruth> gts, const EvalConfig& cfg,
                                     SizeBucket bucket) {
  return mean_over_categories(dets, gts, cfg, bucket, recall_of);
}

BucketedMetric average_precision_table(std::span<const Detection> dets,
                                       std::span<const GroundTruth> gts, const EvalConfig& cfg) {
  return table(dets, gts, cfg, interpolated_ap);
}

BucketedMetric average_recall_table(std::span<const Detection> dets,
                                    std::span<const GroundTruth> gts, const EvalConfig& cfg) {
  return table(dets, gts, cfg, recall_of);
}

double GradientCurve::mean_from(int from) const {
  double sum = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < distances.size(); ++i) {
    if (distances[i] < from || samples[i] == 0) continue;
    sum += delta_scores[i];
    ++n;
  }
  return n ? sum / n : 0.0;
}

GradientCurve confidence_gradient_curve(std::span<const ScoredImage> images, int max_distance) {
  if (max_distance < 0) throw InvalidArgument("max_distance must be non-negative");
  const auto bins = static_cast<std::size_t>(max_distance) + 1;
  std::vector<double> sums(bins, 0.0);
  GradientCurve curve;
  curve.samples.assign(bins, 0);
  for (const auto& img : images) {
    const AnchorGrid& grid = img.grid;
    const std::size_t hw = static_cast<std::size_t>(grid.feat_h) * static_cast<std::size_t>(grid.feat_w);
    if (img.s_cls.size() != grid.per_position() * hw)
      throw InvalidArgument("score map does not match its anchor grid");
    const auto anchors = generate_anchors(grid);
    for (const auto& gt : img.gts) {
      const int cx = static_cast<int>(std::floor(gt.cx() / grid.stride));
      const int cy = static_cast<int>(std::floor(gt.cy() / grid.stride));
      if (cx < 0 || cy < 0 || cx >= grid.feat_w || cy >= grid.feat_h)
        throw InvalidArgument("ground truth center lies outside the feature map");
      std::size_t best_a = 0;
      double best_iou = -1.0;
      for (std::size_t a = 0; a < grid.per_position(); ++a) {
        const double v = iou(anchors[grid.anchor_index(a, cy, cx)], gt);
        if (v > best_iou) {
          best_iou = v;
          best_a = a;
        }
      }
      auto score = [&](int y, int x) {
        return img.s_cls[best_a * hw + static_cast<std::size_t>(y) * grid.feat_w + x];
      };
      const double center = score(cy, cx);
      for (int dy = -max_distance; dy <= max_distance; ++dy) {
        for (int dx = -max_distance; dx <= max_distance; ++dx) {
          const int d = std::abs(dx) + std::abs(dy);
          const int y = cy + dy, x = cx + dx;
          if (d > max_distance || y < 0 || x < 0 || y >= grid.feat_h || x >= grid.feat_w) continue;
          sums[static_cast<std::size_t>(d)] += score(y, x) - center;
          ++curve.samples[static_cast<std::size_t>(d)];
        }
      }
    }
  }
  for (std::size_t d = 0; d < bins; ++d) {
    curve.distances.push_back(static_cast<int>(d));
    curve.delta_scores.push_back(curve.samples[d] ? sums[d] / static_cast<double>(curve.samples[d]) : 0.0);
  }
  return curve;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw InvalidArgument("pearson: length mismatch");
  if (x.size() < 2) throw InvalidArgument("pearson: need at least two points");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) throw InvalidArgument("pearson: zero variance, correlation undefined");
  return sxy / std::sqrt(sxx * syy);
}

ScoreIouCorrelation score_iou_correlation(std::span<const ImageProposals> images) {
  std::vector<double> cls, nwd_pred, fin, ious;
  bool have_nwd = true;
  for (const auto& img : images) {
    for (const auto& p : img.proposals) {
      double best = 0.0;
      for (const auto& g : img.gts) best = std::max(best, iou(p.box, g));
      ious.push_back(best);
      cls.push_back(p.s_cls);
      fin.push_back(p.s_final);
      if (p.p_nwd) nwd_pred.push_back(*p.p_nwd);
      else have_nwd = false;
    }
  }
  ScoreIouCorrelation r;
  r.count = ious.size();
  r.cls = pearson(cls, ious);
  r.final_score = pearson(fin, ious);
  if (have_nwd) r.nwd = pearson(nwd_pred, ious);
  return r;
}

}  // namespace propq
