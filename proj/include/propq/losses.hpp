#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

namespace propq {

enum class Reduction { Sum, Mean };

struct LossGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

/// Weights of the NWD term in the total RPN loss and in score rectification.
/// Both default to 1; values in roughly (0.8, 1.2) are the useful range.
struct LossWeights {
  double lambda_nwd = 1.0;
  double omega_nwd = 1.0;

  void validate() const;
};

/// Soft-label binary cross entropy: -sum log(1 - |y - p|).
/// Reduces to ordinary BCE when y is 0 or 1. Gradient at p == y is 0.
LossGrad sbce(std::span<const double> p, std::span<const double> y,
              Reduction reduction = Reduction::Mean);

/// sum |p - y|, subgradient 0 at ties.
LossGrad l1_loss(std::span<const double> p, std::span<const double> y,
                 Reduction reduction = Reduction::Mean);

enum class ConfidenceLoss { Sbce, L1 };
std::string_view to_string(ConfidenceLoss l);
ConfidenceLoss parse_confidence_loss(std::string_view name);

inline LossGrad confidence_loss(ConfidenceLoss kind, std::span<const double> p,
                                std::span<const double> y, Reduction r = Reduction::Mean) {
  return kind == ConfidenceLoss::Sbce ? sbce(p, y, r) : l1_loss(p, y, r);
}

/// Mean binary cross entropy on logits. Labels must be 0 or 1.
LossGrad cls_loss(std::span<const double> logits, std::span<const double> labels);

/// Smooth-L1 summed over all delta components and divided by `normalizer`
/// (the number of positive samples). Empty input gives zero loss.
LossGrad loc_loss(std::span<const double> pred, std::span<const double> target,
                  std::size_t normalizer, double beta = 1.0);

double rpn_total_loss(double cls, double loc, double nwd, const LossWeights& w);

/// sqrt(s_cls^(2 - omega) * p^omega). Both inputs must lie in (0, 1).
double rectify_score(double s_cls, double p, const LossWeights& w);

}  // namespace propq
