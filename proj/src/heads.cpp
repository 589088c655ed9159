#include "propq/heads.hpp"

#include <cmath>
#include <string>

#include "propq/error.hpp"

namespace propq {

using nn::Tensor;

std::string_view to_string(HeadVariant v) {
  return v == HeadVariant::Sadh ? "sadh" : "vanilla_rpn";
}

HeadVariant parse_head_variant(std::string_view name) {
  if (name == "sadh") return HeadVariant::Sadh;
  if (name == "vanilla_rpn" || name == "vanilla") return HeadVariant::VanillaRpn;
  throw InvalidArgument("unknown head variant '" + std::string(name) + "'");
}

void HeadConfig::validate() const {
  if (cls_kernel != 1 && cls_kernel != 3) throw InvalidArgument("cls_kernel must be 1 or 3");
  if (channels == 0) throw InvalidArgument("head channels must be positive");
  if (anchors_per_position == 0) throw InvalidArgument("anchors_per_position must be positive");
}

HeadGrad HeadGrad::zeros_like(const HeadOutput& out) {
  HeadGrad g{Tensor(out.cls_logits.shape), Tensor(out.box_deltas.shape), std::nullopt};
  if (out.nwd_pred) g.nwd_pred = Tensor(out.nwd_pred->shape);
  return g;
}

ConvBlock::ConvBlock(nn::ParamStore& store, const std::string& name, std::size_t in_ch,
                     std::size_t out_ch, int kernel, int stride, bool group_norm)
    : conv_(store, name + ".conv", in_ch, out_ch, kernel, stride) {
  if (group_norm) norm_.emplace(store, name + ".gn", out_ch, nn::default_groups(out_ch));
}

Tensor ConvBlock::forward(const nn::ParamStore& p, const Tensor& in, Cache* cache) const {
  Tensor x = conv_.forward(p, in);
  nn::GroupNorm::Cache norm_cache;
  if (norm_) x = norm_->forward(p, x, cache ? &norm_cache : nullptr);
  Tensor y = nn::relu(x);
  if (cache) *cache = Cache{in, std::move(norm_cache), std::move(x)};
  return y;
}

Tensor ConvBlock::backward(const nn::ParamStore& p, const Cache& cache, const Tensor& grad_out,
                           std::span<double> grads) const {
  Tensor g = nn::relu_backward(cache.pre_activation, grad_out);
  if (norm_) g = norm_->backward(p, cache.norm, g, grads);
  return conv_.backward(p, cache.input, g, grads);
}

void ConvBlock::init(nn::ParamStore& p, std::mt19937_64& rng) const {
  conv_.init(p, rng);
  if (norm_) norm_->init(p);
}

Head::Head(nn::ParamStore& store, const HeadConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t c = cfg.channels, a = cfg.anchors_per_position;
  if (cfg.variant == HeadVariant::Sadh) {
    cls_block_ = ConvBlock(store, "head.cls_inter", c, c, cfg.cls_kernel, 1, cfg.group_norm);
    loc_block_ = ConvBlock(store, "head.loc_inter", c, c, 3, 1, cfg.group_norm);
  } else {
    loc_block_ = ConvBlock(store, "head.shared", c, c, 3, 1, cfg.group_norm);
  }
  cls_out_ = nn::Conv2d(store, "head.cls", c, a, 1);
  reg_out_ = nn::Conv2d(store, "head.reg", c, 4 * a, 1);
  if (cfg.nwd_branch) nwd_out_ = nn::Conv2d(store, "head.nwd", c, a, 1);
}

void Head::init(nn::ParamStore& p, std::mt19937_64& rng) const {
  if (cfg_.variant == HeadVariant::Sadh) cls_block_.init(p, rng);
  loc_block_.init(p, rng);
  cls_out_.init(p, rng);
  reg_out_.init(p, rng);
  if (cfg_.nwd_branch) nwd_out_.init(p, rng);
  // small output weights keep the initial predictions near their biases
  for (const nn::Conv2d* conv : {&cls_out_, &reg_out_, &nwd_out_}) {
    if (conv == &nwd_out_ && !cfg_.nwd_branch) continue;
    for (double& w : p.view(conv->weight())) w *= 0.1;
  }
  constexpr double prior = 0.01;
  for (double& b : p.view(cls_out_.bias())) b = -std::log((1.0 - prior) / prior);
}

HeadOutput Head::forward(const nn::ParamStore& p, const Tensor& feature, Trace* trace) const {
  if (feature.shape.size() != 3 || feature.shape[0] != cfg_.channels)
    throw InvalidArgument("head: feature map must have " + std::to_string(cfg_.channels) +
                          " channels");
  return cfg_.variant == HeadVariant::Sadh ? forward_sadh(p, feature, trace)
                                           : forward_vanilla(p, feature, trace);
}

HeadOutput Head::forward_vanilla(const nn::ParamStore& p, const Tensor& feature,
                                 Trace* trace) const {
  ConvBlock::Cache cache;
  Tensor shared = loc_block_.forward(p, feature, trace ? &cache : nullptr);
  HeadOutput out{cls_out_.forward(p, shared), reg_out_.forward(p, shared), std::nullopt};
  if (cfg_.nwd_branch) out.nwd_pred = nn::sigmoid(nwd_out_.forward(p, shared));
  if (trace) {
    trace->loc_block = std::move(cache);
    trace->loc_features = std::move(shared);
  }
  return out;
}

HeadOutput Head::forward_sadh(const nn::ParamStore& p, const Tensor& feature, Trace* trace) const {
  ConvBlock::Cache cls_cache, loc_cache;
  Tensor cls_feat = cls_block_.forward(p, feature, trace ? &cls_cache : nullptr);
  Tensor loc_feat = loc_block_.forward(p, feature, trace ? &loc_cache : nullptr);
  HeadOutput out{cls_out_.forward(p, cls_feat), reg_out_.forward(p, loc_feat), std::nullopt};
  if (cfg_.nwd_branch) out.nwd_pred = nn::sigmoid(nwd_out_.forward(p, loc_feat));
  if (trace) {
    trace->cls_block = std::move(cls_cache);
    trace->loc_block = std::move(loc_cache);
    trace->cls_features = std::move(cls_feat);
    trace->loc_features = std::move(loc_feat);
  }
  return out;
}

namespace {

void add_into(Tensor& acc, const Tensor& g) {
  for (std::size_t i = 0; i < acc.size(); ++i) acc.values[i] += g.values[i];
}

}  // namespace

Tensor Head::backward(const nn::ParamStore& p, const Trace& trace, const HeadOutput& out,
                      const HeadGrad& grad, std::span<double> grads) const {
  Tensor g_loc = reg_out_.backward(p, trace.loc_features, grad.box_deltas, grads);
  if (cfg_.nwd_branch) {
    if (!out.nwd_pred || !grad.nwd_pred) throw InvalidArgument("head backward: missing NWD gradient");
    const Tensor g_logit = nn::sigmoid_backward(*out.nwd_pred, *grad.nwd_pred);
    add_into(g_loc, nwd_out_.backward(p, trace.loc_features, g_logit, grads));
  }
  if (cfg_.variant == HeadVariant::VanillaRpn) {
    add_into(g_loc, cls_out_.backward(p, trace.loc_features, grad.cls_logits, grads));
    return loc_block_.backward(p, trace.loc_block, g_loc, grads);
  }
  const Tensor g_cls = cls_out_.backward(p, trace.cls_features, grad.cls_logits, grads);
  Tensor g_feature = loc_block_.backward(p, trace.loc_block, g_loc, grads);
  add_into(g_feature, cls_block_.backward(p, trace.cls_block, g_cls, grads));
  return g_feature;
}

void BackboneConfig::validate() const {
  if (channels.size() != 3) throw InvalidArgument("backbone needs exactly three stages");
  for (auto c : channels)
    if (c == 0) throw InvalidArgument("backbone channels must be positive");
}

Detector::Detector(const BackboneConfig& backbone, const HeadConfig& head)
    : backbone_cfg_(backbone) {
  backbone.validate();
  head.validate();
  if (backbone.channels.back() != head.channels)
    throw InvalidArgument("backbone output channels must equal head channels");
  std::size_t in = 1;
  for (std::size_t i = 0; i < backbone.channels.size(); ++i) {
    backbone_.emplace_back(params_, "backbone." + std::to_string(i), in, backbone.channels[i], 3, 2,
                           false);
    in = backbone.channels[i];
  }
  head_ = Head(params_, head);
}

void Detector::init(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (const auto& block : backbone_) block.init(params_, rng);
  head_.init(params_, rng);
}

Tensor Detector::features(const Tensor& image, Trace* trace) const {
  Tensor x = image;
  if (trace) trace->backbone.resize(backbone_.size());
  for (std::size_t i = 0; i < backbone_.size(); ++i)
    x = backbone_[i].forward(params_, x, trace ? &trace->backbone[i] : nullptr);
  return x;
}

HeadOutput Detector::forward(const Tensor& image, Trace* trace) const {
  Tensor feature = features(image, trace);
  HeadOutput out = head_.forward(params_, feature, trace ? &trace->head : nullptr);
  if (trace) trace->feature = std::move(feature);
  return out;
}

void Detector::backward(const Trace& trace, const HeadOutput& out, const HeadGrad& grad,
                        std::span<double> grads) const {
  if (grads.size() != params_.size()) throw InvalidArgument("detector backward: gradient size");
  Tensor g = head_.backward(params_, trace.head, out, grad, grads);
  for (std::size_t i = backbone_.size(); i-- > 0;)
    g = backbone_[i].backward(params_, trace.backbone[i], g, grads);
}

Tensor image_tensor(int width, int height, std::span<const std::uint8_t> pixels) {
  if (width <= 0 || height <= 0 ||
      pixels.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height))
    throw InvalidArgument("image_tensor: pixel count does not match size");
  Tensor t({1, static_cast<std::size_t>(height), static_cast<std::size_t>(width)});
  for (std::size_t i = 0; i < pixels.size(); ++i) t.values[i] = (pixels[i] / 255.0 - 0.5) * 4.0;
  return t;
}

std::vector<Proposal> head_to_proposals(const HeadOutput& out, const AnchorGrid& grid,
                                        std::span<const BoundingBox> anchors, const LossWeights& w) {
  const std::size_t a_count = grid.per_position();
  const std::size_t hw = static_cast<std::size_t>(grid.feat_h) * static_cast<std::size_t>(grid.feat_w);
  if (anchors.size() != grid.count() || out.cls_logits.size() != a_count * hw ||
      out.box_deltas.size() != 4 * a_count * hw ||
      (out.nwd_pred && out.nwd_pred->size() != a_count * hw))
    throw InvalidArgument("head_to_proposals: output and anchor counts disagree");
  std::vector<Proposal> proposals;
  proposals.reserve(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const std::size_t a = i % a_count;
    const std::size_t pos = i / a_count;
    const double s_cls = nn::sigmoid(out.cls_logits.values[a * hw + pos]);
    const auto delta = [&](std::size_t k) { return out.box_deltas.values[(4 * a + k) * hw + pos]; };
    const BoundingBox box = decode_deltas(anchors[i], {delta(0), delta(1), delta(2), delta(3)});
    std::optional<double> p;
    if (out.nwd_pred) p = out.nwd_pred->values[a * hw + pos];
    proposals.push_back(Proposal::make(box, s_cls, p, w, i));
  }
  return proposals;
}

}  // namespace propq
