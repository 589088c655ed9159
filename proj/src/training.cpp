#include "propq/training.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>

#include "propq/error.hpp"

namespace propq {

void LossConfig::validate() const {
  assign.validate();
  weights.validate();
  nwd.validate();
  if (samples_per_image == 0) throw InvalidArgument("samples_per_image must be positive");
  if (!(positive_fraction > 0.0 && positive_fraction <= 1.0))
    throw InvalidArgument("positive_fraction must lie in (0, 1]");
  if (confidence_metric == BoxMetric::W2)
    throw InvalidArgument("w2 is a distance, not a confidence target");
}

double confidence_target(BoxMetric metric, const BoundingBox& pred, const BoundingBox& gt,
                         const NwdConfig& nwd_cfg) {
  switch (metric) {
    case BoxMetric::Iou: return iou(pred, gt);
    case BoxMetric::Giou: return 0.5 * (giou(pred, gt) + 1.0);
    case BoxMetric::Diou: return 0.5 * (diou(pred, gt) + 1.0);
    case BoxMetric::Nwd: return nwd(pred, gt, nwd_cfg);
    case BoxMetric::W2: break;
  }
  throw InvalidArgument("w2 is a distance, not a confidence target");
}

SampledTargets sample_targets(const AssignmentResult& assignment,
                              std::span<const BoundingBox> anchors,
                              std::span<const BoundingBox> gts, const LossConfig& cfg,
                              std::mt19937_64& rng) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < assignment.labels.size(); ++i) {
    if (assignment.labels[i] == AnchorLabel::Positive) pos.push_back(i);
    else if (assignment.labels[i] == AnchorLabel::Negative) neg.push_back(i);
  }
  const auto max_pos = static_cast<std::size_t>(
      std::floor(static_cast<double>(cfg.samples_per_image) * cfg.positive_fraction));
  const std::size_t n_pos = std::min(pos.size(), max_pos);
  const std::size_t n_neg = std::min(neg.size(), cfg.samples_per_image - n_pos);
  // partial Fisher-Yates with explicit index draws keeps the draw order fixed
  auto draw = [&rng](std::vector<std::size_t>& v, std::size_t k) {
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng() % (v.size() - i));
      std::swap(v[i], v[j]);
    }
    v.resize(k);
    std::sort(v.begin(), v.end());
  };
  draw(pos, n_pos);
  draw(neg, n_neg);

  SampledTargets t;
  std::merge(pos.begin(), pos.end(), neg.begin(), neg.end(), std::back_inserter(t.sampled));
  t.labels.reserve(t.sampled.size());
  for (std::size_t i : t.sampled)
    t.labels.push_back(assignment.labels[i] == AnchorLabel::Positive ? 1.0 : 0.0);
  t.positives = pos;
  for (std::size_t i : pos) {
    const int g = assignment.matched_gt[i];
    t.positive_gt.push_back(g);
    t.positive_deltas.push_back(encode_deltas(anchors[i], gts[static_cast<std::size_t>(g)]));
  }
  return t;
}

namespace {

BoxDeltas deltas_at(const HeadOutput& out, const AnchorGrid& grid, std::size_t anchor) {
  const std::size_t a = anchor % grid.per_position();
  const std::size_t pos = anchor / grid.per_position();
  const std::size_t hw = static_cast<std::size_t>(grid.feat_h) * static_cast<std::size_t>(grid.feat_w);
  const auto& v = out.box_deltas.values;
  return {v[(4 * a) * hw + pos], v[(4 * a + 1) * hw + pos], v[(4 * a + 2) * hw + pos],
          v[(4 * a + 3) * hw + pos]};
}

}  // namespace

void fill_confidence_targets(SampledTargets& targets, const HeadOutput& out,
                             const AnchorGrid& grid, std::span<const BoundingBox> anchors,
                             std::span<const BoundingBox> gts, const LossConfig& cfg) {
  targets.confidence_targets.clear();
  for (std::size_t k = 0; k < targets.positives.size(); ++k) {
    const std::size_t i = targets.positives[k];
    const BoundingBox pred = decode_deltas(anchors[i], deltas_at(out, grid, i));
    const auto& gt = gts[static_cast<std::size_t>(targets.positive_gt[k])];
    targets.confidence_targets.push_back(confidence_target(cfg.confidence_metric, pred, gt, cfg.nwd));
  }
}

LossComponents head_loss(const HeadOutput& out, const SampledTargets& targets,
                         const AnchorGrid& grid, const LossConfig& cfg, HeadGrad* grad) {
  const std::size_t hw = static_cast<std::size_t>(grid.feat_h) * static_cast<std::size_t>(grid.feat_w);
  if (out.cls_logits.size() != grid.per_position() * hw)
    throw InvalidArgument("head_loss: output does not match the anchor grid");
  if (grad) *grad = HeadGrad::zeros_like(out);
  LossComponents lc;

  if (!targets.sampled.empty()) {
    std::vector<double> logits;
    logits.reserve(targets.sampled.size());
    for (std::size_t i : targets.sampled) logits.push_back(out.cls_logits.values[grid.tensor_index(i)]);
    const LossGrad cls = cls_loss(logits, targets.labels);
    lc.cls = cls.loss;
    if (grad)
      for (std::size_t k = 0; k < targets.sampled.size(); ++k)
        grad->cls_logits.values[grid.tensor_index(targets.sampled[k])] += cls.grad[k];
  }

  const std::size_t n_pos = targets.positives.size();
  if (n_pos > 0) {
    std::vector<double> pred, target;
    pred.reserve(4 * n_pos);
    target.reserve(4 * n_pos);
    for (std::size_t k = 0; k < n_pos; ++k) {
      const BoxDeltas d = deltas_at(out, grid, targets.positives[k]);
      const BoxDeltas& t = targets.positive_deltas[k];
      pred.insert(pred.end(), {d.dx, d.dy, d.dw, d.dh});
      target.insert(target.end(), {t.dx, t.dy, t.dw, t.dh});
    }
    const LossGrad loc = loc_loss(pred, target, n_pos);
    lc.loc = loc.loss;
    if (grad) {
      for (std::size_t k = 0; k < n_pos; ++k) {
        const std::size_t i = targets.positives[k];
        const std::size_t a = i % grid.per_position();
        const std::size_t pos = i / grid.per_position();
        for (std::size_t c = 0; c < 4; ++c)
          grad->box_deltas.values[(4 * a + c) * hw + pos] += loc.grad[4 * k + c];
      }
    }

    if (out.nwd_pred && cfg.weights.lambda_nwd > 0.0) {
      if (targets.confidence_targets.size() != n_pos)
        throw InvalidArgument("head_loss: confidence targets not filled");
      std::vector<double> p;
      p.reserve(n_pos);
      for (std::size_t i : targets.positives) p.push_back(out.nwd_pred->values[grid.tensor_index(i)]);
      const LossGrad conf = confidence_loss(cfg.confidence_loss, p, targets.confidence_targets);
      lc.nwd = conf.loss;
      if (grad)
        for (std::size_t k = 0; k < n_pos; ++k)
          grad->nwd_pred->values[grid.tensor_index(targets.positives[k])] +=
              cfg.weights.lambda_nwd * conf.grad[k];
    }
  }
  lc.total = rpn_total_loss(lc.cls, lc.loc, lc.nwd, cfg.weights);
  return lc;
}

PreparedImage prepare_image(const TrainImage& img, const AnchorConfig& anchors,
                            const LossConfig& cfg) {
  PreparedImage p;
  p.source = &img;
  p.grid = AnchorGrid::for_image(static_cast<int>(img.image.dim(2)), static_cast<int>(img.image.dim(1)),
                                 Detector::kStride, anchors.scales, anchors.aspect_ratios);
  p.anchors = generate_anchors(p.grid);
  p.assignment = assign_labels(p.anchors, img.gts, cfg.assign);
  apply_ignore_regions(p.assignment, p.anchors, img.ignore_regions);
  return p;
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

LossComponents training_step(Detector& model, nn::Sgd& sgd,
                             std::span<const PreparedImage* const> batch, const LossConfig& cfg,
                             std::uint64_t step_seed, int threads) {
  if (batch.empty()) throw InvalidArgument("training_step: empty batch");
  const std::size_t n_params = model.params().size();
  std::vector<std::vector<double>> grads(batch.size());
  std::vector<LossComponents> parts(batch.size());

  parallel_for(batch.size(), threads, [&](std::size_t b) {
    const PreparedImage& img = *batch[b];
    std::mt19937_64 rng(mix_seed(step_seed, b));
    Detector::Trace trace;
    const HeadOutput out = model.forward(img.source->image, &trace);
    SampledTargets targets = sample_targets(img.assignment, img.anchors, img.source->gts, cfg, rng);
    if (out.nwd_pred) fill_confidence_targets(targets, out, img.grid, img.anchors, img.source->gts, cfg);
    HeadGrad g;
    parts[b] = head_loss(out, targets, img.grid, cfg, &g);
    grads[b].assign(n_params, 0.0);
    model.backward(trace, out, g, grads[b]);
  });

  const double inv = 1.0 / static_cast<double>(batch.size());
  LossComponents mean;
  std::vector<double> total(n_params, 0.0);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    mean.cls += parts[b].cls * inv;
    mean.loc += parts[b].loc * inv;
    mean.nwd += parts[b].nwd * inv;
    mean.total += parts[b].total * inv;
    for (std::size_t i = 0; i < n_params; ++i) total[i] += grads[b][i] * inv;
  }
  if (!std::isfinite(mean.total))
    throw DivergenceError("non-finite training loss");
  for (double g : total)
    if (!std::isfinite(g)) throw DivergenceError("non-finite gradient");
  sgd.step(model.params().values(), total);
  return mean;
}

}  // namespace propq
