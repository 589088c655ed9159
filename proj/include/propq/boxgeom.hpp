#pragma once

#include <span>
#include <string_view>
#include <vector>

namespace propq {

/// Corner-form box, (x0, y0) top-left and (x1, y1) bottom-right.
struct Corners {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

/// Axis-aligned box in center form. Width and height are strictly positive;
/// construction rejects anything else.
class BoundingBox {
 public:
  BoundingBox(double cx, double cy, double w, double h);

  static BoundingBox from_corners(double x0, double y0, double x1, double y1);
  static BoundingBox from_corners(const Corners& c) {
    return from_corners(c.x0, c.y0, c.x1, c.y1);
  }

  double cx() const noexcept { return cx_; }
  double cy() const noexcept { return cy_; }
  double w() const noexcept { return w_; }
  double h() const noexcept { return h_; }
  double area() const noexcept { return w_ * h_; }
  Corners to_corners() const noexcept;

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;

 private:
  double cx_, cy_, w_, h_;
};

/// The constant C normalizing the Wasserstein distance, in pixels.
struct NwdConfig {
  double c = 28.0;

  void validate() const;
};

enum class BoxMetric { Iou, Giou, Diou, W2, Nwd };

std::string_view to_string(BoxMetric m);
BoxMetric parse_box_metric(std::string_view name);

double iou(const BoundingBox& a, const BoundingBox& b) noexcept;
double giou(const BoundingBox& a, const BoundingBox& b) noexcept;
double diou(const BoundingBox& a, const BoundingBox& b) noexcept;
// Euclidean distance between (cx, cy, w/2, h/2) vectors.
double w2(const BoundingBox& a, const BoundingBox& b) noexcept;
double nwd(const BoundingBox& a, const BoundingBox& b, const NwdConfig& cfg);

double evaluate(BoxMetric m, const BoundingBox& a, const BoundingBox& b,
                const NwdConfig& cfg = {});

/// Row-major |a| x |b| matrix of metric values.
struct MetricMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;

  double operator()(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
};

MetricMatrix pairwise_matrix(BoxMetric m, std::span<const BoundingBox> a,
                             std::span<const BoundingBox> b, const NwdConfig& cfg = {});

}  // namespace propq
