#include "propq/boxgeom.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "propq/error.hpp"

namespace propq {

BoundingBox::BoundingBox(double cx, double cy, double w, double h)
    : cx_(cx), cy_(cy), w_(w), h_(h) {
  if (!std::isfinite(cx) || !std::isfinite(cy) || !std::isfinite(w) || !std::isfinite(h))
    throw InvalidArgument("bounding box has non-finite coordinates");
  if (!(w > 0.0) || !(h > 0.0))
    throw InvalidArgument("bounding box needs positive width and height, got w=" +
                          std::to_string(w) + " h=" + std::to_string(h));
}

BoundingBox BoundingBox::from_corners(double x0, double y0, double x1, double y1) {
  return BoundingBox(0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0);
}

Corners BoundingBox::to_corners() const noexcept {
  return {cx_ - 0.5 * w_, cy_ - 0.5 * h_, cx_ + 0.5 * w_, cy_ + 0.5 * h_};
}

void NwdConfig::validate() const {
  if (!(c > 0.0) || !std::isfinite(c))
    throw InvalidArgument("NWD constant C must be positive");
}

std::string_view to_string(BoxMetric m) {
  switch (m) {
    case BoxMetric::Iou: return "iou";
    case BoxMetric::Giou: return "giou";
    case BoxMetric::Diou: return "diou";
    case BoxMetric::W2: return "w2";
    case BoxMetric::Nwd: return "nwd";
  }
  return "?";
}

BoxMetric parse_box_metric(std::string_view name) {
  for (auto m : {BoxMetric::Iou, BoxMetric::Giou, BoxMetric::Diou, BoxMetric::W2, BoxMetric::Nwd})
    if (to_string(m) == name) return m;
  throw InvalidArgument("unknown box metric '" + std::string(name) + "'");
}

namespace {

struct Overlap {
  double inter;
  double uni;
  Corners hull;
};

Overlap overlap(const BoundingBox& a, const BoundingBox& b) noexcept {
  const Corners ca = a.to_corners();
  const Corners cb = b.to_corners();
  const double iw = std::max(0.0, std::min(ca.x1, cb.x1) - std::max(ca.x0, cb.x0));
  const double ih = std::max(0.0, std::min(ca.y1, cb.y1) - std::max(ca.y0, cb.y0));
  const double inter = iw * ih;
  const Corners hull{std::min(ca.x0, cb.x0), std::min(ca.y0, cb.y0), std::max(ca.x1, cb.x1),
                     std::max(ca.y1, cb.y1)};
  // areas from the same corners as the intersection, so self-IoU is exactly 1
  const double area_a = (ca.x1 - ca.x0) * (ca.y1 - ca.y0);
  const double area_b = (cb.x1 - cb.x0) * (cb.y1 - cb.y0);
  return {inter, area_a + area_b - inter, hull};
}

}  // namespace

double iou(const BoundingBox& a, const BoundingBox& b) noexcept {
  const Overlap o = overlap(a, b);
  return o.inter / o.uni;
}

double giou(const BoundingBox& a, const BoundingBox& b) noexcept {
  const Overlap o = overlap(a, b);
  const double hull = (o.hull.x1 - o.hull.x0) * (o.hull.y1 - o.hull.y0);
  return o.inter / o.uni - (hull - o.uni) / hull;
}

double diou(const BoundingBox& a, const BoundingBox& b) noexcept {
  const Overlap o = overlap(a, b);
  const double dx = a.cx() - b.cx();
  const double dy = a.cy() - b.cy();
  const double hw = o.hull.x1 - o.hull.x0;
  const double hh = o.hull.y1 - o.hull.y0;
  return o.inter / o.uni - (dx * dx + dy * dy) / (hw * hw + hh * hh);
}

double w2(const BoundingBox& a, const BoundingBox& b) noexcept {
  const double d[4] = {a.cx() - b.cx(), a.cy() - b.cy(), 0.5 * (a.w() - b.w()),
                       0.5 * (a.h() - b.h())};
  return std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + d[3] * d[3]);
}

double nwd(const BoundingBox& a, const BoundingBox& b, const NwdConfig& cfg) {
  cfg.validate();
  return std::exp(-w2(a, b) / cfg.c);
}

double evaluate(BoxMetric m, const BoundingBox& a, const BoundingBox& b, const NwdConfig& cfg) {
  switch (m) {
    case BoxMetric::Iou: return iou(a, b);
    case BoxMetric::Giou: return giou(a, b);
    case BoxMetric::Diou: return diou(a, b);
    case BoxMetric::W2: return w2(a, b);
    case BoxMetric::Nwd: return nwd(a, b, cfg);
  }
  throw InvalidArgument("unknown box metric");
}

MetricMatrix pairwise_matrix(BoxMetric m, std::span<const BoundingBox> a,
                             std::span<const BoundingBox> b, const NwdConfig& cfg) {
  if (a.empty() || b.empty()) throw InvalidArgument("pairwise_matrix needs non-empty box lists");
  cfg.validate();
  MetricMatrix out{a.size(), b.size(), std::vector<double>(a.size() * b.size())};
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) out.values[i * b.size() + j] = evaluate(m, a[i], b[j], cfg);
  return out;
}

}  // namespace propq
