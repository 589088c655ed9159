// Acceptance suite: one PASS/FAIL line per criterion. Criteria can be picked
// on the command line (`acceptance 1 4 9`); by default all ten run.
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "propq/error.hpp"
#include "propq/experiment.hpp"

using namespace propq;
using nn::Tensor;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      notes.push_back("FAILED " + what);
    }
  }
  void note(const std::string& s) { notes.push_back(s); }
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

int worker_threads() { return static_cast<int>(std::max(1u, std::thread::hardware_concurrency())); }

BoundingBox random_box(std::mt19937_64& rng, double extent = 100.0, double max_size = 40.0) {
  std::uniform_real_distribution<double> pos(0.0, extent), size(0.5, max_size);
  return {pos(rng), pos(rng), size(rng), size(rng)};
}

// |a - b| relative to the larger magnitude, with an absolute floor for values
// that are zero up to finite-difference noise.
bool grad_close(double analytic, double fd) {
  return std::abs(analytic - fd) <= 1e-4 * std::max(std::abs(analytic), std::abs(fd)) + 1e-9;
}

// ---------------------------------------------------------------- 1
Outcome metric_suite() {
  Outcome o;
  auto near = [](double a, double b) { return std::abs(a - b) <= 1e-9; };
  const auto c = [](double x0, double y0, double x1, double y1) { return BoundingBox::from_corners(x0, y0, x1, y1); };
  o.require(near(iou(c(0, 0, 10, 10), c(5, 0, 15, 10)), 1.0 / 3.0), "iou hand value 1/3");
  o.require(near(giou(c(0, 0, 10, 10), c(20, 0, 30, 10)), -1.0 / 3.0), "giou hand value -1/3");
  o.require(near(diou(c(0, 0, 10, 10), c(10, 0, 20, 10)), -0.2), "diou hand value -0.2");
  o.require(near(w2(BoundingBox(10, 10, 6, 6), BoundingBox(13, 14, 6, 6)), 5.0), "w2 offset (3,4)");
  o.require(near(w2(BoundingBox(10, 10, 10, 10), BoundingBox(10, 10, 14, 10)), 2.0), "w2 size change");
  o.require(near(nwd(BoundingBox(10, 10, 6, 6), BoundingBox(13, 14, 6, 6), {10.0}), std::exp(-0.5)),
            "nwd exp(-0.5)");
  o.require(near(giou(c(0, 0, 10, 10), c(10, 0, 20, 10)), iou(c(0, 0, 10, 10), c(10, 0, 20, 10))),
            "giou == iou when hull is the union");
  o.require(near(diou(BoundingBox(5, 5, 4, 4), BoundingBox(5, 5, 8, 2)), iou(BoundingBox(5, 5, 4, 4), BoundingBox(5, 5, 8, 2))),
            "diou == iou for concentric boxes");

  std::mt19937_64 rng(2024);
  std::size_t bad_sym = 0, bad_id = 0, bad_order = 0;
  for (int t = 0; t < 10000; ++t) {
    const auto a = random_box(rng), b = random_box(rng);
    for (auto m : {BoxMetric::Iou, BoxMetric::Giou, BoxMetric::Diou, BoxMetric::W2, BoxMetric::Nwd}) {
      if (std::abs(evaluate(m, a, b, {}) - evaluate(m, b, a, {})) > 1e-12) ++bad_sym;
      const double self = evaluate(m, a, a, {});
      if (std::abs(self - (m == BoxMetric::W2 ? 0.0 : 1.0)) > 1e-12) ++bad_id;
    }
    const double i = iou(a, b), g = giou(a, b), d = diou(a, b), n = nwd(a, b, {});
    const bool ordered = i >= 0 && i <= 1 && g <= i + 1e-12 && g >= -1 && d <= i + 1e-12 && d >= -1 &&
                         n > 0 && n <= 1 && std::abs(n - std::exp(-w2(a, b) / 28.0)) < 1e-12;
    if (!ordered) ++bad_order;
  }
  o.require(bad_sym == 0, fmt("symmetry (%zu violations)", bad_sym));
  o.require(bad_id == 0, fmt("identity (%zu violations)", bad_id));
  o.require(bad_order == 0, fmt("range and ordering (%zu violations)", bad_order));
  o.note("10000 random pairs x 5 metrics");
  return o;
}

// ---------------------------------------------------------------- 2
Outcome sbce_suite() {
  Outcome o;
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double worst_bce = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const double y = (rng() & 1) ? 1.0 : 0.0;
    const double p = 1e-6 + unit(rng) * (1 - 2e-6);
    const double s = sbce(std::vector{p}, std::vector{y}).loss;
    const double bce = -(y * std::log(p) + (1 - y) * std::log(1 - p));
    worst_bce = std::max(worst_bce, std::abs(s - bce));
  }
  o.require(worst_bce <= 1e-10, fmt("hard-label BCE equivalence (max diff %.3g)", worst_bce));

  std::size_t fd_fail = 0, dominance_fail = 0;
  const double h = 1e-7;
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> y(3), p(3);
    for (int k = 0; k < 3; ++k) {
      y[k] = unit(rng);
      do p[k] = unit(rng);
      while (std::abs(p[k] - y[k]) < 1e-3 || std::abs(p[k] - y[k]) > 0.999);
    }
    const auto r = sbce(p, y);
    const auto l1 = l1_loss(p, y);
    for (int k = 0; k < 3; ++k) {
      auto up = p, down = p;
      up[k] += h;
      down[k] -= h;
      const double fd = (sbce(up, y).loss - sbce(down, y).loss) / (2 * h);
      if (std::abs(r.grad[k] - fd) / std::abs(fd) >= 1e-4) ++fd_fail;
      if (!(std::abs(r.grad[k]) > std::abs(l1.grad[k]))) ++dominance_fail;
    }
  }
  o.require(fd_fail == 0, fmt("finite differences (%zu of 3000 off)", fd_fail));
  o.require(dominance_fail == 0, fmt("gradient dominance over L1 (%zu of 3000 off)", dominance_fail));
  o.note("1000 points of dimension 3");
  return o;
}

// ---------------------------------------------------------------- 3
Tensor random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng, double away_from_zero = 0.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& v : t.values) {
    do v = n(rng);
    while (std::abs(v) < away_from_zero);
  }
  return t;
}

double dot(const Tensor& a, const Tensor& b) {
  return std::inner_product(a.values.begin(), a.values.end(), b.values.begin(), 0.0);
}

// Checks input and parameter gradients of L = <r, f(x)> for one layer.
// Returns the number of mismatching coordinates.
std::size_t check_layer(nn::ParamStore& store, Tensor x, std::mt19937_64& rng,
                        const std::function<Tensor(const Tensor&)>& fwd,
                        const std::function<Tensor(const Tensor&, const Tensor&, std::span<double>)>& bwd) {
  const Tensor r = random_tensor(fwd(x).shape, rng);
  std::vector<double> grads(store.size(), 0.0);
  const Tensor gx = bwd(x, r, grads);
  std::size_t bad = 0;
  const double h = 1e-6;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x.values[i];
    x.values[i] = keep + h;
    const double up = dot(r, fwd(x));
    x.values[i] = keep - h;
    const double down = dot(r, fwd(x));
    x.values[i] = keep;
    bad += !grad_close(gx.values[i], (up - down) / (2 * h));
  }
  auto& v = store.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double keep = v[i];
    v[i] = keep + h;
    const double up = dot(r, fwd(x));
    v[i] = keep - h;
    const double down = dot(r, fwd(x));
    v[i] = keep;
    bad += !grad_close(grads[i], (up - down) / (2 * h));
  }
  return bad;
}

void randomize(nn::ParamStore& store, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 0.5);
  for (auto& v : store.values()) v = n(rng);
}

Outcome gradient_suite() {
  Outcome o;
  std::mt19937_64 rng(99);
  for (auto [k, s] : {std::pair{1, 1}, {3, 1}, {3, 2}, {1, 2}}) {
    nn::ParamStore store;
    const nn::Conv2d conv(store, "conv", 3, 4, k, s);
    randomize(store, rng);
    const auto bad = check_layer(
        store, random_tensor({3, 7, 6}, rng), rng, [&](const Tensor& x) { return conv.forward(store, x); },
        [&](const Tensor& x, const Tensor& g, std::span<double> gr) { return conv.backward(store, x, g, gr); });
    o.require(bad == 0, fmt("conv k=%d stride=%d (%zu coordinates)", k, s, bad));
  }
  for (std::size_t groups : {1, 3, 6}) {
    nn::ParamStore store;
    const nn::GroupNorm gn(store, "gn", 6, groups);
    randomize(store, rng);
    const auto bad = check_layer(
        store, random_tensor({6, 4, 5}, rng), rng, [&](const Tensor& x) { return gn.forward(store, x); },
        [&](const Tensor& x, const Tensor& g, std::span<double> gr) {
          nn::GroupNorm::Cache cache;
          gn.forward(store, x, &cache);
          return gn.backward(store, cache, g, gr);
        });
    o.require(bad == 0, fmt("group norm, %zu groups (%zu coordinates)", groups, bad));
  }
  {
    nn::ParamStore none;
    const auto bad_relu = check_layer(
        none, random_tensor({2, 5, 5}, rng, 0.05), rng, [](const Tensor& x) { return nn::relu(x); },
        [](const Tensor& x, const Tensor& g, std::span<double>) { return nn::relu_backward(x, g); });
    o.require(bad_relu == 0, fmt("relu (%zu coordinates)", bad_relu));
    const auto bad_sig = check_layer(
        none, random_tensor({2, 5, 5}, rng), rng, [](const Tensor& x) { return nn::sigmoid(x); },
        [](const Tensor& x, const Tensor& g, std::span<double>) { return nn::sigmoid_backward(nn::sigmoid(x), g); });
    o.require(bad_sig == 0, fmt("sigmoid (%zu coordinates)", bad_sig));
  }

  // composed head + RPN loss, confidence targets held fixed
  struct Case {
    HeadVariant variant;
    ConfidenceLoss conf;
    BoxMetric metric;
  };
  for (const Case& cs : {Case{HeadVariant::Sadh, ConfidenceLoss::Sbce, BoxMetric::Nwd},
                         Case{HeadVariant::VanillaRpn, ConfidenceLoss::Sbce, BoxMetric::Giou},
                         Case{HeadVariant::VanillaRpn, ConfidenceLoss::L1, BoxMetric::Iou}}) {
    HeadConfig hc;
    hc.variant = cs.variant;
    hc.channels = 8;
    BackboneConfig bc;
    bc.channels = {4, 8, 8};
    Detector det(bc, hc);
    det.init(rng());
    std::normal_distribution<double> n(0.0, 0.2);
    for (auto& v : det.params().values()) v += n(rng);
    std::vector<std::uint8_t> px(32 * 32);
    for (auto& p : px) p = static_cast<std::uint8_t>(rng() % 256);
    const Tensor img = image_tensor(32, 32, px);
    const auto grid = AnchorGrid::for_image(32, 32, Detector::kStride, {16, 32}, {1});
    const auto anchors = generate_anchors(grid);
    const std::vector<BoundingBox> gts{BoundingBox(11, 13, 12, 10), BoundingBox(22, 20, 14, 16)};
    LossConfig lc;
    lc.confidence_loss = cs.conf;
    lc.confidence_metric = cs.metric;
    lc.weights.lambda_nwd = 0.7;
    const auto assignment = assign_labels(anchors, gts, lc.assign);
    std::mt19937_64 srng(1);
    SampledTargets targets = sample_targets(assignment, anchors, gts, lc, srng);
    Detector::Trace trace;
    const HeadOutput out = det.forward(img, &trace);
    fill_confidence_targets(targets, out, grid, anchors, gts, lc);
    HeadGrad g;
    head_loss(out, targets, grid, lc, &g);
    std::vector<double> grads(det.params().size(), 0.0);
    det.backward(trace, out, g, grads);
    std::size_t bad = 0;
    const double h = 1e-6;
    auto& v = det.params().values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double keep = v[i];
      v[i] = keep + h;
      const double up = head_loss(det.forward(img), targets, grid, lc, nullptr).total;
      v[i] = keep - h;
      const double down = head_loss(det.forward(img), targets, grid, lc, nullptr).total;
      v[i] = keep;
      bad += !grad_close(grads[i], (up - down) / (2 * h));
    }
    o.require(bad == 0, fmt("backbone+%s head+loss (%zu of %zu params)", std::string(to_string(cs.variant)).c_str(),
                            bad, v.size()));
  }
  return o;
}

// ---------------------------------------------------------------- 4
// Pairwise-matrix NMS: visit in priority order, each kept box removes every
// later box it overlaps beyond the threshold.
std::vector<std::size_t> reference_nms(const std::vector<Proposal>& props, double thr) {
  const std::size_t n = props.size();
  std::vector<std::vector<double>> m(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) m[i][j] = iou(props[i].box, props[j].box);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return props[a].s_final != props[b].s_final ? props[a].s_final > props[b].s_final : a < b;
  });
  std::vector<bool> removed(n, false);
  std::vector<std::size_t> kept;
  for (std::size_t oi = 0; oi < n; ++oi) {
    const std::size_t i = order[oi];
    if (removed[i]) continue;
    kept.push_back(i);
    for (std::size_t oj = oi + 1; oj < n; ++oj)
      if (m[i][order[oj]] > thr) removed[order[oj]] = true;
  }
  return kept;
}

Outcome pipeline_suite() {
  Outcome o;
  std::mt19937_64 rng(4242);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::size_t nms_bad = 0;
  for (int t = 0; t < 1000; ++t) {
    std::vector<Proposal> props;
    for (int k = 0; k < 20; ++k) {
      // coarse scores force ties
      const double s = 0.05 + std::floor(unit(rng) * 10) / 11.0;
      props.push_back(Proposal::make(random_box(rng, 60.0, 30.0), s, std::nullopt, {}, k));
    }
    const double thr = t % 2 ? 0.7 : 0.5;
    const auto got = nms(props, thr);
    const auto want = reference_nms(props, thr);
    bool same = got.size() == want.size();
    for (std::size_t i = 0; same && i < got.size(); ++i) same = got[i].anchor == want[i];
    nms_bad += !same;
  }
  o.require(nms_bad == 0, fmt("NMS vs pairwise reference (%zu of 1000 differ)", nms_bad));

  std::size_t assign_bad = 0;
  for (int t = 0; t < 500; ++t) {
    std::vector<BoundingBox> anchors, gts;
    for (int k = 0; k < 10; ++k) anchors.push_back(random_box(rng, 40.0, 25.0));
    for (int k = 0; k < 3; ++k) gts.push_back(random_box(rng, 40.0, 25.0));
    if (t % 5 == 0) anchors[3] = anchors[7];  // exact duplicates exercise tie-breaks
    AssignConfig cfg;
    cfg.negative_threshold = t % 2 ? 0.5 : 0.3;
    const auto r = assign_labels(anchors, gts, cfg);
    // exhaustive IoU table
    std::vector<std::vector<double>> m(anchors.size(), std::vector<double>(gts.size()));
    for (std::size_t i = 0; i < anchors.size(); ++i)
      for (std::size_t g = 0; g < gts.size(); ++g) m[i][g] = iou(anchors[i], gts[g]);
    std::vector<AnchorLabel> labels(anchors.size());
    std::vector<int> matched(anchors.size(), -1);
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      const auto it = std::max_element(m[i].begin(), m[i].end());
      const double best = *it;
      labels[i] = best >= cfg.label_threshold   ? AnchorLabel::Positive
                  : best >= cfg.negative_threshold ? AnchorLabel::Ignore
                                                   : AnchorLabel::Negative;
      if (labels[i] == AnchorLabel::Positive) matched[i] = static_cast<int>(it - m[i].begin());
    }
    for (std::size_t g = 0; g < gts.size(); ++g) {
      std::size_t best_i = 0;
      for (std::size_t i = 1; i < anchors.size(); ++i)
        if (m[i][g] > m[best_i][g]) best_i = i;
      if (m[best_i][g] > 0.0) {
        labels[best_i] = AnchorLabel::Positive;
        matched[best_i] = static_cast<int>(g);
      }
    }
    assign_bad += !(labels == r.labels && matched == r.matched_gt);
  }
  o.require(assign_bad == 0, fmt("assignment vs exhaustive loop (%zu of 500 differ)", assign_bad));

  // sizes within a 20x ratio, inside the decoder's log(1000/16) size-delta clamp
  double worst_rt = 0.0;
  std::uniform_real_distribution<double> pos(0.0, 100.0), size(2.0, 40.0);
  for (int t = 0; t < 1000; ++t) {
    const BoundingBox a(pos(rng), pos(rng), size(rng), size(rng)), g(pos(rng), pos(rng), size(rng), size(rng));
    const auto back = decode_deltas(a, encode_deltas(a, g));
    worst_rt = std::max({worst_rt, std::abs(back.cx() - g.cx()), std::abs(back.cy() - g.cy()),
                         std::abs(back.w() - g.w()), std::abs(back.h() - g.h())});
  }
  o.require(worst_rt <= 1e-9, fmt("delta round trip (max error %.3g)", worst_rt));
  o.require(std::abs(encode_deltas(BoundingBox(0, 0, 10, 10), BoundingBox(1, 0, 10, 10)).dx - 0.1) < 1e-12,
            "delta dx = 0.1 for a +1 shift");

  // TP, FP, TP, FP, TP over three ground truths: precision envelope 1 / 2/3 / 0.6
  // across 34 / 33 / 34 of the 101 recall points; recall 1.
  const std::vector<GroundTruth> gts{{1, BoundingBox(10, 10, 10, 10)}, {1, BoundingBox(50, 50, 10, 10)},
                                     {1, BoundingBox(90, 90, 10, 10)}};
  const BoundingBox far(200, 200, 10, 10);
  const std::vector<Detection> dets{{1, gts[0].box, 0.9}, {1, far, 0.8}, {1, gts[1].box, 0.7}, {1, far, 0.6},
                                    {1, gts[2].box, 0.5}};
  const double ap_want = (34.0 + 33.0 * 2.0 / 3.0 + 34.0 * 0.6) / 101.0;
  const double ap = average_precision(dets, gts, {}).value_or(-1);
  const double ar = average_recall(dets, gts, {}).value_or(-1);
  o.require(std::abs(ap - ap_want) < 1e-12, fmt("AP hand case (%.6f vs %.6f)", ap, ap_want));
  o.require(std::abs(ar - 1.0) < 1e-12, fmt("AR hand case (%.6f)", ar));
  return o;
}

// ---------------------------------------------------------------- 5
Outcome tiling_suite() {
  Outcome o;
  const int W = 3456, H = 5184, T = 1024;
  const auto plan = plan_tiles(W, H, T);
  o.require(plan.size() == 24, fmt("24 tiles for 3456x5184 (got %zu)", plan.size()));
  std::vector<std::uint8_t> covered(static_cast<std::size_t>(W) * H, 0);
  for (const auto& t : plan)
    for (int y = t.y0; y < std::min(H, t.y0 + T); ++y)
      std::fill_n(covered.begin() + static_cast<std::ptrdiff_t>(y) * W + t.x0, std::min(T, W - t.x0), 1);
  o.require(std::all_of(covered.begin(), covered.end(), [](std::uint8_t c) { return c; }), "full pixel coverage");

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> px(0.0, W - 80), py(0.0, H - 80), sz(8.0, 80.0);
  AnnotationSet src;
  src.images.push_back({1, "big.pgm", W, H, {}, std::nullopt, std::nullopt});
  for (int k = 0; k < 400; ++k) {
    Instance inst;
    inst.id = k + 1;
    inst.image_id = 1;
    const double x0 = px(rng), y0 = py(rng);
    inst.box = {x0, y0, x0 + sz(rng), y0 + sz(rng)};
    src.instances.push_back(inst);
  }
  // straddles the first vertical seam for certain
  src.instances.push_back({401, 1, "lesion", {1000, 100, 1040, 130}, {}, std::nullopt});

  TileOptions masked;
  masked.tile_size = T;
  const auto md = emit_tiled_dataset(src, masked);
  TileOptions partial = masked;
  partial.mode = MaskMode::KeepPartial;
  const auto kp = emit_tiled_dataset(src, partial);

  // reference containment from the tile plan
  std::size_t whole = 0, straddling = 0;
  for (const auto& t : plan)
    for (const auto& inst : src.instances) {
      const auto& b = inst.box;
      const bool inside = b.x0 >= t.x0 && b.y0 >= t.y0 && b.x1 <= t.x0 + T && b.y1 <= t.y0 + T;
      const bool touches = b.x1 > t.x0 && b.y1 > t.y0 && b.x0 < t.x0 + T && b.y0 < t.y0 + T;
      whole += inside;
      straddling += touches && !inside;
    }
  std::size_t partial_in_masked = 0, masks = 0;
  for (const auto& inst : md.annotations.instances) {
    const auto& b = inst.box;
    partial_in_masked += !(b.x0 >= 0 && b.y0 >= 0 && b.x1 <= T && b.y1 <= T);
  }
  for (const auto& t : md.tiles) masks += t.masks.size();
  o.require(partial_in_masked == 0, fmt("masked mode emits no partial instance (%zu found)", partial_in_masked));
  o.require(md.annotations.instances.size() == whole,
            fmt("masked mode keeps exactly the contained instances (%zu vs %zu)", md.annotations.instances.size(), whole));
  o.require(masks == straddling, fmt("every straddling instance is masked (%zu vs %zu)", masks, straddling));
  o.require(kp.annotations.instances.size() == whole + straddling,
            fmt("keep-partial emits clipped partials (%zu vs %zu)", kp.annotations.instances.size(), whole + straddling));
  bool clipped = true;
  for (const auto& inst : kp.annotations.instances) {
    const auto& b = inst.box;
    clipped = clipped && b.x0 >= 0 && b.y0 >= 0 && b.x1 <= T && b.y1 <= T && b.x1 > b.x0 && b.y1 > b.y0;
  }
  o.require(clipped, "keep-partial boxes are clipped to their tile");
  o.note(fmt("%zu whole, %zu straddling placements", whole, straddling));

  // pixels: a small image written to disk, masked region must hold the fill value
  const fs::path dir = fs::temp_directory_path() / "propq_acceptance_tiles";
  fs::remove_all(dir);
  fs::create_directories(dir / "src");
  GrayImage img(300, 200, 77);
  write_pgm(dir / "src" / "small.pgm", img);
  AnnotationSet small;
  small.images.push_back({1, "small.pgm", 300, 200, {}, std::nullopt, std::nullopt});
  small.instances.push_back({1, 1, "lesion", {120, 20, 140, 40}, {}, std::nullopt});
  TileOptions opt;
  opt.tile_size = 128;
  opt.mask_value = 3;
  const auto written = write_tiled_dataset(small, dir / "src", opt, dir / "out");
  std::size_t fill_ok = 0, fill_expected = 0;
  for (std::size_t i = 0; i < written.tiles.size(); ++i) {
    const auto tile = read_pgm(dir / "out" / "images" / written.annotations.images[i].file_name);
    for (const auto& r : written.tiles[i].masks)
      for (int y = r.y0; y < r.y1; ++y)
        for (int x = r.x0; x < r.x1; ++x) {
          ++fill_expected;
          fill_ok += tile.at(x, y) == 3;
        }
  }
  o.require(fill_expected > 0 && fill_ok == fill_expected, fmt("masked pixels hold the fill value (%zu/%zu)", fill_ok, fill_expected));
  return o;
}

// ---------------------------------------------------------------- 6, 7, 8
const std::vector<std::uint64_t> kSeeds{1, 2, 3};

struct HeadComparison {
  std::uint64_t seed;
  double sadh_falloff, vanilla_falloff;
  double pearson_cls, pearson_final;
};

// Trained once and shared by criteria 6 and 7.
const std::vector<HeadComparison>& head_comparisons() {
  static std::vector<HeadComparison> cache;
  if (!cache.empty()) return cache;
  const int threads = worker_threads();
  for (std::uint64_t seed : kSeeds) {
    ExperimentConfig sadh;
    sadh.seed = seed;
    ExperimentConfig vanilla = sadh;
    vanilla.head.variant = HeadVariant::VanillaRpn;
    const Dataset train_set = synthesize(sadh, Split::Train, threads);
    const Dataset test_set = synthesize(sadh, Split::Test, threads);
    const auto t0 = std::chrono::steady_clock::now();
    const Model ms = train(sadh, train_set, threads);
    const auto t1 = std::chrono::steady_clock::now();
    const Model mv = train(vanilla, train_set, threads);
    const auto t2 = std::chrono::steady_clock::now();
    const auto rs = analyze(ms, test_set, threads);
    const auto rv = analyze(mv, test_set, threads);
    cache.push_back({seed, rs.curve.mean_from(2), rv.curve.mean_from(2), rs.correlation.cls,
                     rs.correlation.final_score});
    std::printf("  seed %llu trained: sadh %.1fs, vanilla %.1fs (%d threads)\n", static_cast<unsigned long long>(seed),
                std::chrono::duration<double>(t1 - t0).count(), std::chrono::duration<double>(t2 - t1).count(), threads);
    std::fflush(stdout);
  }
  return cache;
}

Outcome gradient_curve_direction() {
  Outcome o;
  for (const auto& c : head_comparisons()) {
    o.note(fmt("seed %llu: mean ds_cls(x>=2) sadh %.4f vanilla %.4f", static_cast<unsigned long long>(c.seed),
               c.sadh_falloff, c.vanilla_falloff));
    o.require(c.sadh_falloff < c.vanilla_falloff, fmt("SADH steeper at seed %llu", static_cast<unsigned long long>(c.seed)));
  }
  return o;
}

Outcome correlation_direction() {
  Outcome o;
  for (const auto& c : head_comparisons()) {
    o.note(fmt("seed %llu: pearson cls %.4f final %.4f", static_cast<unsigned long long>(c.seed), c.pearson_cls,
               c.pearson_final));
    o.require(c.pearson_final > c.pearson_cls,
              fmt("rectified score correlates better at seed %llu", static_cast<unsigned long long>(c.seed)));
  }
  return o;
}

Outcome ablation_ordering() {
  Outcome o;
  const auto rows = ablate(ExperimentConfig{}, kSeeds, worker_threads(), {2, 3});
  std::map<std::pair<std::uint64_t, std::string>, double> ap;
  for (const auto& r : rows) ap[{r.seed, r.axis + "=" + r.value}] = r.ap;
  int loss_ok = 0, metric_ok = 0;
  for (std::uint64_t s : kSeeds) {
    const double sbce = ap[{s, "loss.confidence_loss=sbce"}], l1 = ap[{s, "loss.confidence_loss=l1"}];
    const double nwd_ap = ap[{s, "loss.confidence_metric=nwd"}], iou_ap = ap[{s, "loss.confidence_metric=iou"}];
    loss_ok += sbce >= l1;
    metric_ok += nwd_ap >= iou_ap;
    o.note(fmt("seed %llu: AP sbce %.4f l1 %.4f | nwd %.4f iou %.4f giou %.4f diou %.4f%s%s",
               static_cast<unsigned long long>(s), sbce, l1, nwd_ap, iou_ap, ap[{s, "loss.confidence_metric=giou"}],
               ap[{s, "loss.confidence_metric=diou"}], sbce >= l1 ? "" : " [sbce<l1]",
               nwd_ap >= iou_ap ? "" : " [nwd<iou]"));
  }
  o.require(loss_ok >= 2, fmt("SBCE >= L1 in %d of 3 seeds", loss_ok));
  o.require(metric_ok >= 2, fmt("NWD >= IoU in %d of 3 seeds", metric_ok));
  return o;
}

// ---------------------------------------------------------------- 9
Outcome overfit_oracle() {
  Outcome o;
  ExperimentConfig cfg;
  cfg.seed = 11;
  cfg.train_images = 1;
  cfg.schedule.batch_size = 1;
  cfg.schedule.sgd.epochs = 500;
  cfg.schedule.max_steps = 500;
  // batch of one with the default 0.002 step leaves a few false positives
  // ranked above true ones after 500 steps; 0.01 fits seeds 11-13 fully
  cfg.schedule.sgd.lr = 0.01;
  const Dataset one = synthesize(cfg, Split::Train);
  std::size_t steps = 0;
  const Model m = train(cfg, one, worker_threads(), [&](const TrainLogRow&) { ++steps; });
  const auto report = evaluate(m, one);
  const double ap = report.ap.all.value_or(0.0);
  o.note(fmt("%zu instances, %zu steps, AP@0.5 %.4f, AR@0.5 %.4f", report.instances, steps, ap,
             report.ar.all.value_or(0.0)));
  o.require(steps <= 500, "at most 500 steps");
  o.require(ap >= 0.95, fmt("AP@0.5 >= 0.95 (got %.4f)", ap));
  return o;
}

// ---------------------------------------------------------------- 10
int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(PROPQ_CLI_PATH) + " " + args + " >>" + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file() || e.path().filename() == "cli.log") continue;
    std::ifstream f(e.path(), std::ios::binary);
    std::ostringstream s;
    s << f.rdbuf();
    files[fs::relative(e.path(), root).string()] = s.str();
  }
  return files;
}

Outcome cli_determinism() {
  Outcome o;
  const fs::path root = fs::temp_directory_path() / "propq_acceptance_cli";
  fs::remove_all(root);
  fs::create_directories(root);
  {
    std::ofstream(root / "config.json") << R"({"seed": 5, "train_images": 6, "test_images": 3,
      "synth": {"image_size": 96, "size_mean": 12, "min_lesions": 2, "max_lesions": 4},
      "backbone": {"channels": [4, 8, 8]}, "head": {"channels": 8},
      "loss": {"samples_per_image": 64}, "sgd": {"epochs": 2}})";
  }
  const std::string cfg = (root / "config.json").string();
  auto run_all = [&](const std::string& name, int threads) {
    const fs::path d = root / name;
    fs::create_directories(d);
    const fs::path log = d / "cli.log";
    const std::string t = " --threads " + std::to_string(threads);
    const std::string ds = (d / "synth").string();
    int bad = 0;
    bad += run_cli("synth --config " + cfg + " --out " + ds + t, log) != 0;
    bad += run_cli("tile --input " + ds + "/test/annotations.json --images " + ds + "/test/images --tile-size 64 --out " +
                       (d / "tiles").string() + t, log) != 0;
    bad += run_cli("tile --input " + ds + "/test/annotations.json --images " + ds +
                       "/test/images --tile-size 64 --mask-mode keep-partial --out " + (d / "tiles_kp").string() + t,
                   log) != 0;
    bad += run_cli("train --config " + cfg + " --data " + ds + "/train --out " + (d / "train").string() + t, log) != 0;
    const std::string ck = (d / "train" / "checkpoint.json").string();
    bad += run_cli("eval --checkpoint " + ck + " --data " + ds + "/test --out " + (d / "eval").string() + t, log) != 0;
    bad += run_cli("analyze --checkpoint " + ck + " --label m --data " + ds + "/test --out " + (d / "analyze").string() + t,
                   log) != 0;
    bad += run_cli("ablate --config " + cfg + " --seeds 1 2 --groups 1 --out " + (d / "ablate").string() + t, log) != 0;
    return bad;
  };
  const int fa = run_all("a_threads1", 1);
  const int fb = run_all("b_threads1", 1);
  const int fc = run_all("c_threads4", 4);
  o.require(fa + fb + fc == 0, fmt("all commands exit 0 (%d failures)", fa + fb + fc));
  const auto a = snapshot(root / "a_threads1");
  const auto b = snapshot(root / "b_threads1");
  const auto c = snapshot(root / "c_threads4");
  auto diff = [](const auto& x, const auto& y) {
    std::vector<std::string> out;
    for (const auto& [k, v] : x) {
      auto it = y.find(k);
      if (it == y.end() || it->second != v) out.push_back(k);
    }
    if (x.size() != y.size()) out.push_back("<file sets differ>");
    return out;
  };
  const auto ab = diff(a, b), ac = diff(a, c);
  o.note(fmt("%zu output files per run", a.size()));
  o.require(a.size() > 20, "every command wrote output");
  o.require(ab.empty(), "run 1 == run 2" + (ab.empty() ? std::string() : " (first difference: " + ab.front() + ")"));
  o.require(ac.empty(), "threads 1 == threads 4" + (ac.empty() ? std::string() : " (first difference: " + ac.front() + ")"));
  return o;
}

struct Criterion {
  int id;
  const char* title;
  Outcome (*run)();
  double budget_s;  // 0: no runtime target
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "closed-form metric suite", metric_suite, 5},
      {2, "SBCE correctness", sbce_suite, 5},
      {3, "finite-difference gradient checks", gradient_suite, 60},
      {4, "pipeline oracles", pipeline_suite, 0},
      {5, "masked crop", tiling_suite, 0},
      {6, "SADH confidence-gradient curve is steeper", gradient_curve_direction, 0},
      {7, "rectified score correlates better with IoU", correlation_direction, 0},
      {8, "ablation ordering", ablation_ordering, 0},
      {9, "single-image overfit", overfit_oracle, 0},
      {10, "CLI determinism", cli_determinism, 0},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  int failed = 0;
  std::vector<std::string> summary;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.notes.push_back(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_s > 0 && secs > c.budget_s) o.require(false, fmt("runtime %.1fs over the %.0fs budget", secs, c.budget_s));
    for (const auto& n : o.notes) std::printf("  [%d] %s\n", c.id, n.c_str());
    const std::string line = fmt("criterion %2d %s: %s (%.1fs)", c.id, o.pass ? "PASS" : "FAIL", c.title, secs);
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
    summary.push_back(line);
    failed += !o.pass;
  }
  std::printf("\nsummary\n");
  for (const auto& s : summary) std::printf("%s\n", s.c_str());
  return failed == 0 ? 0 : 1;
}
