#include "propq/losses.hpp"

#include <cmath>
#include <string>

#include "propq/error.hpp"

namespace propq {

namespace {

void check_lengths(std::span<const double> a, std::span<const double> b, const char* what) {
  if (a.size() != b.size())
    throw InvalidArgument(std::string(what) + ": length mismatch (" + std::to_string(a.size()) +
                          " vs " + std::to_string(b.size()) + ")");
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

void reduce(LossGrad& out, Reduction r) {
  if (r != Reduction::Mean || out.grad.empty()) return;
  const double inv = 1.0 / static_cast<double>(out.grad.size());
  out.loss *= inv;
  for (double& g : out.grad) g *= inv;
}

}  // namespace

void LossWeights::validate() const {
  if (!(lambda_nwd >= 0.0) || !std::isfinite(lambda_nwd))
    throw InvalidArgument("lambda_nwd must be a finite value >= 0");
  if (!(omega_nwd >= 0.0 && omega_nwd <= 2.0))
    throw InvalidArgument("omega_nwd must lie in [0, 2]");
}

LossGrad sbce(std::span<const double> p, std::span<const double> y, Reduction reduction) {
  check_lengths(p, y, "sbce");
  if (p.empty()) throw InvalidArgument("sbce: empty batch");
  LossGrad out{0.0, std::vector<double>(p.size())};
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gap = std::abs(y[i] - p[i]);
    if (!(gap < 1.0))
      throw DivergenceError("sbce: non-finite loss, |y - p| >= 1 at element " + std::to_string(i));
    out.loss -= std::log1p(-gap);
    out.grad[i] = sign(p[i] - y[i]) / (1.0 - gap);
  }
  reduce(out, reduction);
  return out;
}

LossGrad l1_loss(std::span<const double> p, std::span<const double> y, Reduction reduction) {
  check_lengths(p, y, "l1_loss");
  LossGrad out{0.0, std::vector<double>(p.size())};
  for (std::size_t i = 0; i < p.size(); ++i) {
    out.loss += std::abs(p[i] - y[i]);
    out.grad[i] = sign(p[i] - y[i]);
  }
  reduce(out, reduction);
  return out;
}

std::string_view to_string(ConfidenceLoss l) { return l == ConfidenceLoss::Sbce ? "sbce" : "l1"; }

ConfidenceLoss parse_confidence_loss(std::string_view name) {
  if (name == "sbce") return ConfidenceLoss::Sbce;
  if (name == "l1") return ConfidenceLoss::L1;
  throw InvalidArgument("unknown confidence loss '" + std::string(name) + "'");
}

LossGrad cls_loss(std::span<const double> logits, std::span<const double> labels) {
  check_lengths(logits, labels, "cls_loss");
  if (logits.empty()) throw InvalidArgument("cls_loss: empty sample set");
  const double inv = 1.0 / static_cast<double>(logits.size());
  LossGrad out{0.0, std::vector<double>(logits.size())};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double x = logits[i];
    const double t = labels[i];
    if (t != 0.0 && t != 1.0) throw InvalidArgument("cls_loss: labels must be 0 or 1");
    // log(1 + e^x) - t x, written to avoid overflow
    out.loss += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
    const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    out.grad[i] = (s - t) * inv;
  }
  out.loss *= inv;
  return out;
}

LossGrad loc_loss(std::span<const double> pred, std::span<const double> target,
                  std::size_t normalizer, double beta) {
  check_lengths(pred, target, "loc_loss");
  if (!(beta > 0.0)) throw InvalidArgument("loc_loss: beta must be positive");
  LossGrad out{0.0, std::vector<double>(pred.size(), 0.0)};
  if (pred.empty()) return out;
  if (normalizer == 0) throw InvalidArgument("loc_loss: zero normalizer with non-empty input");
  const double inv = 1.0 / static_cast<double>(normalizer);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    const double ad = std::abs(d);
    if (ad < beta) {
      out.loss += 0.5 * d * d / beta;
      out.grad[i] = d / beta * inv;
    } else {
      out.loss += ad - 0.5 * beta;
      out.grad[i] = sign(d) * inv;
    }
  }
  out.loss *= inv;
  return out;
}

double rpn_total_loss(double cls, double loc, double nwd, const LossWeights& w) {
  w.validate();
  if (cls < 0.0 || loc < 0.0 || nwd < 0.0)
    throw InvalidArgument("rpn_total_loss: component losses must be non-negative");
  return cls + loc + w.lambda_nwd * nwd;
}

double rectify_score(double s_cls, double p, const LossWeights& w) {
  w.validate();
  if (!(s_cls > 0.0 && s_cls < 1.0) || !(p > 0.0 && p < 1.0))
    throw InvalidArgument("rectify_score: inputs must lie strictly inside (0, 1)");
  return std::sqrt(std::pow(s_cls, 2.0 - w.omega_nwd) * std::pow(p, w.omega_nwd));
}

}  // namespace propq
