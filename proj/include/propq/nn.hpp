#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace propq::nn {

/// Dense row-major array of doubles.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> values;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, double fill = 0.0);

  std::size_t size() const noexcept { return values.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  /// (channel, row, column) access for rank-3 feature maps.
  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return values[(c * shape[1] + y) * shape[2] + x];
  }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return values[(c * shape[1] + y) * shape[2] + x];
  }
};

std::size_t shape_size(std::span<const std::size_t> shape);

/// Location of one named parameter inside a ParamStore.
struct ParamRef {
  std::size_t offset = 0;
  std::size_t size = 0;
};

/// All trainable values of a model in one flat buffer, so gradients, SGD
/// state and checkpoints are plain vectors of the same length.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    std::vector<std::size_t> shape;
    ParamRef ref;
  };

  ParamRef add(std::string name, std::vector<std::size_t> shape, double fill = 0.0);

  std::span<double> view(ParamRef r) { return {values_.data() + r.offset, r.size}; }
  std::span<const double> view(ParamRef r) const { return {values_.data() + r.offset, r.size}; }

  std::vector<double>& values() noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return values_.size(); }

 private:
  std::vector<double> values_;
  std::vector<Entry> entries_;
};

/// Cross-correlation with square kernel, zero padding (k-1)/2 and the given
/// stride. Weight layout (out, in, k, k).
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamStore& store, const std::string& name, std::size_t in_ch, std::size_t out_ch,
         int kernel, int stride = 1);

  Tensor forward(const ParamStore& p, const Tensor& in) const;
  /// Accumulates parameter gradients into `grads` (same layout as the store)
  /// and returns the gradient w.r.t. the input.
  Tensor backward(const ParamStore& p, const Tensor& in, const Tensor& grad_out,
                  std::span<double> grads) const;

  /// He-normal weights, zero bias.
  void init(ParamStore& p, std::mt19937_64& rng) const;

  ParamRef weight() const noexcept { return weight_; }
  ParamRef bias() const noexcept { return bias_; }
  int kernel() const noexcept { return k_; }
  std::size_t out_channels() const noexcept { return out_; }

 private:
  std::size_t out_size(std::size_t n) const;
  void check_input(const Tensor& in) const;

  ParamRef weight_, bias_;
  std::size_t in_ = 0, out_ = 0;
  int k_ = 1, stride_ = 1, pad_ = 0;
};

/// Group normalization over (channels-in-group, H, W) with per-channel affine.
class GroupNorm {
 public:
  struct Cache {
    Tensor normalized;
    std::vector<double> rstd;  // per group
  };

  GroupNorm() = default;
  GroupNorm(ParamStore& store, const std::string& name, std::size_t channels, std::size_t groups,
            double eps = 1e-5);

  Tensor forward(const ParamStore& p, const Tensor& in, Cache* cache = nullptr) const;
  Tensor backward(const ParamStore& p, const Cache& cache, const Tensor& grad_out,
                  std::span<double> grads) const;

  void init(ParamStore& p) const;

  std::size_t groups() const noexcept { return groups_; }

 private:
  ParamRef gamma_, beta_;
  std::size_t channels_ = 0, groups_ = 1;
  double eps_ = 1e-5;
};

/// min(32, channels), reduced until it divides `channels`.
std::size_t default_groups(std::size_t channels);

Tensor relu(const Tensor& x);
/// grad_out masked by (forward input > 0).
Tensor relu_backward(const Tensor& input, const Tensor& grad_out);

double sigmoid(double x) noexcept;
Tensor sigmoid(const Tensor& x);
/// grad_out * s * (1 - s), given the forward output s.
Tensor sigmoid_backward(const Tensor& output, const Tensor& grad_out);

struct SgdConfig {
  double lr = 0.002;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int epochs = 15;

  void validate() const;
};

/// Momentum SGD with L2 weight decay folded into the gradient:
///   v = momentum * v + grad + weight_decay * param;  param -= lr * v
class Sgd {
 public:
  explicit Sgd(SgdConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  void step(std::span<double> params, std::span<const double> grads);
  const std::vector<double>& velocity() const noexcept { return velocity_; }

 private:
  SgdConfig cfg_;
  std::vector<double> velocity_;
};

}  // namespace propq::nn
