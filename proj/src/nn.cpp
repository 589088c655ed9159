#include "propq/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "propq/error.hpp"

namespace propq::nn {

std::size_t shape_size(std::span<const std::size_t> shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(std::vector<std::size_t> s, double fill)
    : shape(std::move(s)), values(shape_size(shape), fill) {}

ParamRef ParamStore::add(std::string name, std::vector<std::size_t> shape, double fill) {
  const ParamRef ref{values_.size(), shape_size(shape)};
  values_.resize(values_.size() + ref.size, fill);
  entries_.push_back({std::move(name), std::move(shape), ref});
  return ref;
}

Conv2d::Conv2d(ParamStore& store, const std::string& name, std::size_t in_ch, std::size_t out_ch,
               int kernel, int stride)
    : in_(in_ch), out_(out_ch), k_(kernel), stride_(stride), pad_((kernel - 1) / 2) {
  if (kernel < 1 || kernel % 2 == 0) throw InvalidArgument("conv kernel must be odd and positive");
  if (stride < 1) throw InvalidArgument("conv stride must be positive");
  if (in_ch == 0 || out_ch == 0) throw InvalidArgument("conv needs at least one channel");
  const auto k = static_cast<std::size_t>(kernel);
  weight_ = store.add(name + ".weight", {out_ch, in_ch, k, k});
  bias_ = store.add(name + ".bias", {out_ch});
}

void Conv2d::init(ParamStore& p, std::mt19937_64& rng) const {
  const double fan_in = static_cast<double>(in_) * k_ * k_;
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (double& w : p.view(weight_)) w = dist(rng);
  for (double& b : p.view(bias_)) b = 0.0;
}

std::size_t Conv2d::out_size(std::size_t n) const {
  return (n + 2 * static_cast<std::size_t>(pad_) - static_cast<std::size_t>(k_)) /
             static_cast<std::size_t>(stride_) + 1;
}

void Conv2d::check_input(const Tensor& in) const {
  if (in.shape.size() != 3 || in.shape[0] != in_)
    throw InvalidArgument("conv2d: expected input with " + std::to_string(in_) + " channels");
}

namespace {

// Output columns ox whose input column ox*s + k - pad lands inside [0, n).
std::pair<long, long> valid_range(long n_out, long n_in, long s, long k, long pad) {
  long lo = 0;
  while (lo < n_out && lo * s + k - pad < 0) ++lo;
  long hi = n_out;
  while (hi > lo && (hi - 1) * s + k - pad >= n_in) --hi;
  return {lo, hi};
}

}  // namespace

Tensor Conv2d::forward(const ParamStore& p, const Tensor& in) const {
  check_input(in);
  const long H = static_cast<long>(in.shape[1]), W = static_cast<long>(in.shape[2]);
  const long Ho = static_cast<long>(out_size(in.shape[1]));
  const long Wo = static_cast<long>(out_size(in.shape[2]));
  const long s = stride_, pad = pad_, K = k_;
  Tensor out({out_, static_cast<std::size_t>(Ho), static_cast<std::size_t>(Wo)});
  const auto w = p.view(weight_);
  const auto b = p.view(bias_);
  for (std::size_t oc = 0; oc < out_; ++oc) {
    double* o = out.values.data() + oc * Ho * Wo;
    std::fill(o, o + Ho * Wo, b[oc]);
    for (std::size_t ic = 0; ic < in_; ++ic) {
      const double* src = in.values.data() + ic * H * W;
      for (long ky = 0; ky < K; ++ky) {
        const auto [y_lo, y_hi] = valid_range(Ho, H, s, ky, pad);
        for (long kx = 0; kx < K; ++kx) {
          const double wv = w[((oc * in_ + ic) * K + ky) * K + kx];
          const auto [x_lo, x_hi] = valid_range(Wo, W, s, kx, pad);
          for (long oy = y_lo; oy < y_hi; ++oy) {
            const double* row = src + (oy * s + ky - pad) * W + (kx - pad);
            double* orow = o + oy * Wo;
            if (s == 1) {
              for (long ox = x_lo; ox < x_hi; ++ox) orow[ox] += wv * row[ox];
            } else {
              for (long ox = x_lo; ox < x_hi; ++ox) orow[ox] += wv * row[ox * s];
            }
          }
        }
      }
    }
  }
  return out;
}

Tensor Conv2d::backward(const ParamStore& p, const Tensor& in, const Tensor& grad_out,
                        std::span<double> grads) const {
  check_input(in);
  const long H = static_cast<long>(in.shape[1]), W = static_cast<long>(in.shape[2]);
  const long Ho = static_cast<long>(out_size(in.shape[1]));
  const long Wo = static_cast<long>(out_size(in.shape[2]));
  if (grad_out.shape.size() != 3 || grad_out.shape[0] != out_ ||
      grad_out.shape[1] != static_cast<std::size_t>(Ho) ||
      grad_out.shape[2] != static_cast<std::size_t>(Wo))
    throw InvalidArgument("conv2d backward: gradient shape mismatch");
  const long s = stride_, pad = pad_, K = k_;
  const auto w = p.view(weight_);
  double* gw = grads.data() + weight_.offset;
  double* gb = grads.data() + bias_.offset;
  Tensor grad_in(in.shape);
  for (std::size_t oc = 0; oc < out_; ++oc) {
    const double* go = grad_out.values.data() + oc * Ho * Wo;
    double bsum = 0.0;
    for (long i = 0; i < Ho * Wo; ++i) bsum += go[i];
    gb[oc] += bsum;
    for (std::size_t ic = 0; ic < in_; ++ic) {
      const double* src = in.values.data() + ic * H * W;
      double* gsrc = grad_in.values.data() + ic * H * W;
      for (long ky = 0; ky < K; ++ky) {
        const auto [y_lo, y_hi] = valid_range(Ho, H, s, ky, pad);
        for (long kx = 0; kx < K; ++kx) {
          const std::size_t wi = ((oc * in_ + ic) * K + ky) * K + kx;
          const double wv = w[wi];
          const auto [x_lo, x_hi] = valid_range(Wo, W, s, kx, pad);
          double acc = 0.0;
          for (long oy = y_lo; oy < y_hi; ++oy) {
            const long off = (oy * s + ky - pad) * W + (kx - pad);
            const double* row = src + off;
            double* grow = gsrc + off;
            const double* gorow = go + oy * Wo;
            if (s == 1) {
              for (long ox = x_lo; ox < x_hi; ++ox) {
                acc += gorow[ox] * row[ox];
                grow[ox] += wv * gorow[ox];
              }
            } else {
              for (long ox = x_lo; ox < x_hi; ++ox) {
                acc += gorow[ox] * row[ox * s];
                grow[ox * s] += wv * gorow[ox];
              }
            }
          }
          gw[wi] += acc;
        }
      }
    }
  }
  return grad_in;
}

std::size_t default_groups(std::size_t channels) {
  std::size_t g = std::min<std::size_t>(32, channels);
  while (g > 1 && channels % g != 0) --g;
  return std::max<std::size_t>(g, 1);
}

GroupNorm::GroupNorm(ParamStore& store, const std::string& name, std::size_t channels,
                     std::size_t groups, double eps)
    : channels_(channels), groups_(groups), eps_(eps) {
  if (groups == 0 || channels % groups != 0)
    throw InvalidArgument("group norm: " + std::to_string(channels) +
                          " channels not divisible into " + std::to_string(groups) + " groups");
  if (!(eps > 0.0)) throw InvalidArgument("group norm: epsilon must be positive");
  gamma_ = store.add(name + ".gamma", {channels}, 1.0);
  beta_ = store.add(name + ".beta", {channels}, 0.0);
}

void GroupNorm::init(ParamStore& p) const {
  for (double& g : p.view(gamma_)) g = 1.0;
  for (double& b : p.view(beta_)) b = 0.0;
}

Tensor GroupNorm::forward(const ParamStore& p, const Tensor& in, Cache* cache) const {
  if (in.shape.size() != 3 || in.shape[0] != channels_)
    throw InvalidArgument("group norm: channel mismatch");
  const std::size_t hw = in.shape[1] * in.shape[2];
  const std::size_t per = channels_ / groups_ * hw;
  const auto gamma = p.view(gamma_);
  const auto beta = p.view(beta_);
  Tensor out(in.shape);
  Tensor xhat(in.shape);
  std::vector<double> rstd(groups_);
  for (std::size_t g = 0; g < groups_; ++g) {
    const double* x = in.values.data() + g * per;
    double mean = 0.0;
    for (std::size_t i = 0; i < per; ++i) mean += x[i];
    mean /= static_cast<double>(per);
    double var = 0.0;
    for (std::size_t i = 0; i < per; ++i) var += (x[i] - mean) * (x[i] - mean);
    var /= static_cast<double>(per);
    rstd[g] = 1.0 / std::sqrt(var + eps_);
    for (std::size_t i = 0; i < per; ++i) {
      const std::size_t idx = g * per + i;
      const std::size_t c = idx / hw;
      xhat.values[idx] = (x[i] - mean) * rstd[g];
      out.values[idx] = gamma[c] * xhat.values[idx] + beta[c];
    }
  }
  if (cache) *cache = Cache{std::move(xhat), std::move(rstd)};
  return out;
}

Tensor GroupNorm::backward(const ParamStore& p, const Cache& cache, const Tensor& grad_out,
                           std::span<double> grads) const {
  const Tensor& xhat = cache.normalized;
  if (grad_out.shape != xhat.shape) throw InvalidArgument("group norm backward: shape mismatch");
  const std::size_t hw = xhat.shape[1] * xhat.shape[2];
  const std::size_t per = channels_ / groups_ * hw;
  const auto gamma = p.view(gamma_);
  double* ggamma = grads.data() + gamma_.offset;
  double* gbeta = grads.data() + beta_.offset;
  Tensor grad_in(xhat.shape);
  for (std::size_t c = 0; c < channels_; ++c) {
    double sg = 0.0, sb = 0.0;
    for (std::size_t i = c * hw; i < (c + 1) * hw; ++i) {
      sg += grad_out.values[i] * xhat.values[i];
      sb += grad_out.values[i];
    }
    ggamma[c] += sg;
    gbeta[c] += sb;
  }
  const double m = static_cast<double>(per);
  for (std::size_t g = 0; g < groups_; ++g) {
    double sum_d = 0.0, sum_dx = 0.0;
    for (std::size_t i = g * per; i < (g + 1) * per; ++i) {
      const double d = grad_out.values[i] * gamma[i / hw];
      sum_d += d;
      sum_dx += d * xhat.values[i];
    }
    for (std::size_t i = g * per; i < (g + 1) * per; ++i) {
      const double d = grad_out.values[i] * gamma[i / hw];
      grad_in.values[i] = cache.rstd[g] / m * (m * d - sum_d - xhat.values[i] * sum_dx);
    }
  }
  return grad_in;
}

Tensor relu(const Tensor& x) {
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out.values[i] = x.values[i] > 0.0 ? x.values[i] : 0.0;
  return out;
}

Tensor relu_backward(const Tensor& input, const Tensor& grad_out) {
  Tensor out(input.shape);
  for (std::size_t i = 0; i < input.size(); ++i)
    out.values[i] = input.values[i] > 0.0 ? grad_out.values[i] : 0.0;
  return out;
}

double sigmoid(double x) noexcept {
  // kept strictly inside (0, 1) so downstream logs and ratios stay finite
  constexpr double lo = std::numeric_limits<double>::min();
  static const double hi = std::nextafter(1.0, 0.0);
  const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  return std::clamp(s, lo, hi);
}

Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out.values[i] = sigmoid(x.values[i]);
  return out;
}

Tensor sigmoid_backward(const Tensor& output, const Tensor& grad_out) {
  Tensor out(output.shape);
  for (std::size_t i = 0; i < output.size(); ++i) {
    const double s = output.values[i];
    out.values[i] = grad_out.values[i] * s * (1.0 - s);
  }
  return out;
}

void SgdConfig::validate() const {
  if (!(lr > 0.0)) throw InvalidArgument("sgd: learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("sgd: momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw InvalidArgument("sgd: weight decay must be non-negative");
  if (epochs < 0) throw InvalidArgument("sgd: epochs must be non-negative");
}

void Sgd::step(std::span<double> params, std::span<const double> grads) {
  if (params.size() != grads.size())
    throw InvalidArgument("sgd: parameter/gradient size mismatch");
  if (velocity_.empty()) velocity_.assign(params.size(), 0.0);
  if (velocity_.size() != params.size()) throw InvalidArgument("sgd: parameter count changed");
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity_[i] = cfg_.momentum * velocity_[i] + grads[i] + cfg_.weight_decay * params[i];
    params[i] -= cfg_.lr * velocity_[i];
  }
}

}  // namespace propq::nn
