#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "propq/losses.hpp"
#include "propq/nn.hpp"
#include "propq/pipeline.hpp"

namespace propq {

enum class HeadVariant { VanillaRpn, Sadh };
std::string_view to_string(HeadVariant v);
HeadVariant parse_head_variant(std::string_view name);

/// Architecture switches. The vanilla head always uses one shared 3x3
/// intermediate; `cls_kernel` only applies to SADH.
struct HeadConfig {
  HeadVariant variant = HeadVariant::Sadh;
  int cls_kernel = 1;
  bool nwd_branch = true;
  std::size_t channels = 16;
  std::size_t anchors_per_position = 2;
  bool group_norm = true;

  void validate() const;
};

/// Per-anchor head outputs laid out as (A, H, W), (4A, H, W) and (A, H, W).
/// Delta channel 4a + k holds component k (dx, dy, dw, dh) of anchor a.
/// `nwd_pred` is already passed through a sigmoid.
struct HeadOutput {
  nn::Tensor cls_logits;
  nn::Tensor box_deltas;
  std::optional<nn::Tensor> nwd_pred;
};

/// Gradients of some loss w.r.t. each HeadOutput tensor.
struct HeadGrad {
  nn::Tensor cls_logits;
  nn::Tensor box_deltas;
  std::optional<nn::Tensor> nwd_pred;

  static HeadGrad zeros_like(const HeadOutput& out);
};

/// conv, optional group norm, ReLU.
class ConvBlock {
 public:
  struct Cache {
    nn::Tensor input;
    nn::GroupNorm::Cache norm;
    nn::Tensor pre_activation;
  };

  ConvBlock() = default;
  ConvBlock(nn::ParamStore& store, const std::string& name, std::size_t in_ch, std::size_t out_ch,
            int kernel, int stride, bool group_norm);

  nn::Tensor forward(const nn::ParamStore& p, const nn::Tensor& in, Cache* cache) const;
  nn::Tensor backward(const nn::ParamStore& p, const Cache& cache, const nn::Tensor& grad_out,
                      std::span<double> grads) const;
  void init(nn::ParamStore& p, std::mt19937_64& rng) const;

 private:
  nn::Conv2d conv_;
  std::optional<nn::GroupNorm> norm_;
};

class Head {
 public:
  struct Trace {
    ConvBlock::Cache cls_block;
    ConvBlock::Cache loc_block;  // the shared block for the vanilla head
    nn::Tensor cls_features;
    nn::Tensor loc_features;
  };

  Head() = default;
  Head(nn::ParamStore& store, const HeadConfig& cfg);

  const HeadConfig& config() const noexcept { return cfg_; }

  /// Dispatches on the configured variant.
  HeadOutput forward(const nn::ParamStore& p, const nn::Tensor& feature, Trace* trace = nullptr) const;
  /// Shared 3x3 conv + ReLU feeding 1x1 classification and regression convs.
  HeadOutput forward_vanilla(const nn::ParamStore& p, const nn::Tensor& feature, Trace* trace) const;
  /// Classification through its own (1x1 by default) block, localization and
  /// the NWD branch through a 3x3 block.
  HeadOutput forward_sadh(const nn::ParamStore& p, const nn::Tensor& feature, Trace* trace) const;

  nn::Tensor backward(const nn::ParamStore& p, const Trace& trace, const HeadOutput& out,
                      const HeadGrad& grad, std::span<double> grads) const;

  void init(nn::ParamStore& p, std::mt19937_64& rng) const;

 private:
  HeadConfig cfg_;
  ConvBlock cls_block_;  // unused by the vanilla head
  ConvBlock loc_block_;
  nn::Conv2d cls_out_, reg_out_, nwd_out_;
};

/// Three stride-2 3x3 conv blocks, so the feature map has stride 8.
struct BackboneConfig {
  std::vector<std::size_t> channels{8, 16, 16};

  void validate() const;
};

class Detector {
 public:
  struct Trace {
    std::vector<ConvBlock::Cache> backbone;
    nn::Tensor feature;
    Head::Trace head;
  };

  static constexpr int kStride = 8;

  Detector(const BackboneConfig& backbone, const HeadConfig& head);

  /// Seeded He-normal init; the classification bias starts at -log(99).
  void init(std::uint64_t seed);

  nn::Tensor features(const nn::Tensor& image, Trace* trace = nullptr) const;
  HeadOutput forward(const nn::Tensor& image, Trace* trace = nullptr) const;
  /// Accumulates parameter gradients for one image into `grads`.
  void backward(const Trace& trace, const HeadOutput& out, const HeadGrad& grad,
                std::span<double> grads) const;

  nn::ParamStore& params() noexcept { return params_; }
  const nn::ParamStore& params() const noexcept { return params_; }
  const Head& head() const noexcept { return head_; }
  const HeadConfig& head_config() const noexcept { return head_.config(); }
  const BackboneConfig& backbone_config() const noexcept { return backbone_cfg_; }

 private:
  BackboneConfig backbone_cfg_;
  nn::ParamStore params_;
  std::vector<ConvBlock> backbone_;
  Head head_;
};

/// (1, H, W) tensor with pixels mapped from [0, 255] to [-2, 2].
nn::Tensor image_tensor(int width, int height, std::span<const std::uint8_t> pixels);

/// One proposal per anchor, in anchor order: s_cls = sigmoid(logit), box from
/// decoded deltas, s_final rectified when the NWD prediction is present.
std::vector<Proposal> head_to_proposals(const HeadOutput& out, const AnchorGrid& grid,
                                        std::span<const BoundingBox> anchors, const LossWeights& w);

}  // namespace propq
