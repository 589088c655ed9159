#include "propq/synthgen.hpp"

#include <algorithm>
#include <cstdio>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "propq/error.hpp"
#include "propq/training.hpp"

namespace propq {

void SynthConfig::validate() const {
  if (image_size < 16) throw ConfigError("synth.image_size must be at least 16");
  if (min_lesions < 0 || max_lesions < min_lesions)
    throw ConfigError("synth lesion count range is empty");
  if (!(size_mean > 0.0) || !(size_sigma >= 0.0) || !(min_size > 0.0))
    throw ConfigError("synth size distribution must be positive");
  if (size_mean * 2.0 > image_size)
    throw ConfigError("synth.size_mean " + std::to_string(size_mean) +
                      " is too large for image_size " + std::to_string(image_size));
  if (!(contrast_min > 0.0 && contrast_max >= contrast_min && contrast_max <= 1.0))
    throw ConfigError("synth contrast range must satisfy 0 < min <= max <= 1");
  if (!(hard_contrast_min > 0.0 && hard_contrast_max >= hard_contrast_min &&
        hard_contrast_max <= contrast_min))
    throw ConfigError("synth hard contrast range must lie below the normal range");
  if (!(noise >= 0.0)) throw ConfigError("synth.noise must be non-negative");
  if (!(hard_fraction >= 0.0 && hard_fraction <= 1.0))
    throw ConfigError("synth.hard_fraction must lie in [0, 1]");
}

void render_lesion(std::vector<double>& canvas, int width, int height, const Lesion& l) {
  const double ax = 0.5 * l.w, ay = 0.5 * l.h;
  // the profile is below 1e-4 of the contrast beyond 3.7 half-sizes
  const int x0 = std::max(0, static_cast<int>(std::floor(l.cx - 3.7 * ax)));
  const int x1 = std::min(width, static_cast<int>(std::ceil(l.cx + 3.7 * ax)));
  const int y0 = std::max(0, static_cast<int>(std::floor(l.cy - 3.7 * ay)));
  const int y1 = std::min(height, static_cast<int>(std::ceil(l.cy + 3.7 * ay)));
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      const double dx = (x + 0.5 - l.cx) / ax;
      const double dy = (y + 0.5 - l.cy) / ay;
      canvas[static_cast<std::size_t>(y) * width + x] +=
          l.contrast * std::exp2(-(dx * dx + dy * dy));
    }
  }
}

namespace {

struct ImagePlan {
  int lesions;
  std::uint64_t first_lesion;  // global index, drives the hard-lesion schedule
};

bool is_hard(std::uint64_t global_index, double fraction) {
  const double a = std::floor(static_cast<double>(global_index) * fraction);
  const double b = std::floor(static_cast<double>(global_index + 1) * fraction);
  return b > a;
}

std::vector<Lesion> place_lesions(const SynthConfig& cfg, const ImagePlan& plan,
                                  std::mt19937_64& rng) {
  std::normal_distribution<double> log_size(
      std::log(cfg.size_mean) - 0.5 * cfg.size_sigma * cfg.size_sigma, cfg.size_sigma);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double max_size = 0.25 * cfg.image_size;
  std::vector<Lesion> out;
  for (int k = 0; k < plan.lesions; ++k) {
    const bool hard = is_hard(plan.first_lesion + static_cast<std::uint64_t>(k), cfg.hard_fraction);
    const double size = std::clamp(std::exp(log_size(rng)), cfg.min_size, max_size);
    const double aspect = std::exp(std::log(0.75) + unit(rng) * (std::log(4.0 / 3.0) - std::log(0.75)));
    const double w = size * std::sqrt(aspect);
    const double h = size / std::sqrt(aspect);
    const double contrast =
        hard ? cfg.hard_contrast_min + unit(rng) * (cfg.hard_contrast_max - cfg.hard_contrast_min)
             : cfg.contrast_min + unit(rng) * (cfg.contrast_max - cfg.contrast_min);
    // rejection sampling on position to avoid heavy overlaps
    Lesion l{};
    for (int attempt = 0; attempt < 50; ++attempt) {
      l = Lesion{0.5 * w + unit(rng) * (cfg.image_size - w), 0.5 * h + unit(rng) * (cfg.image_size - h),
                 w, h, contrast, hard};
      const BoundingBox box(l.cx, l.cy, l.w, l.h);
      bool clear = true;
      for (const auto& other : out)
        if (iou(box, BoundingBox(other.cx, other.cy, other.w, other.h)) > 0.1) clear = false;
      if (clear) break;
    }
    out.push_back(l);
  }
  return out;
}

GrayImage render_image(const SynthConfig& cfg, const std::vector<Lesion>& lesions,
                       std::mt19937_64& rng) {
  const int n = cfg.image_size;
  std::vector<double> canvas(static_cast<std::size_t>(n) * n);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, cfg.noise);
  // low-frequency skin-like texture
  const double fx = 2.0 + 3.0 * unit(rng), fy = 2.0 + 3.0 * unit(rng);
  const double px = 2.0 * std::numbers::pi * unit(rng), py = 2.0 * std::numbers::pi * unit(rng);
  const double base = 0.35 + 0.1 * unit(rng);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x)
      canvas[static_cast<std::size_t>(y) * n + x] =
          base + 0.04 * std::sin(fx * 2.0 * std::numbers::pi * x / n + px) *
                     std::cos(fy * 2.0 * std::numbers::pi * y / n + py);
  for (const auto& l : lesions) render_lesion(canvas, n, n, l);
  GrayImage img(n, n);
  for (std::size_t i = 0; i < canvas.size(); ++i) {
    const double v = std::clamp(canvas[i] + noise(rng), 0.0, 1.0);
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return img;
}

}  // namespace

SynthDataset generate(const SynthConfig& cfg, int n_images, int threads) {
  cfg.validate();
  if (n_images < 0) throw ConfigError("image count must be non-negative");
  std::mt19937_64 master(cfg.seed);
  std::vector<ImagePlan> plans;
  std::uint64_t next_lesion = 0;
  for (int i = 0; i < n_images; ++i) {
    const int span = cfg.max_lesions - cfg.min_lesions + 1;
    const int count = cfg.min_lesions + static_cast<int>(master() % static_cast<std::uint64_t>(span));
    plans.push_back({count, next_lesion});
    next_lesion += static_cast<std::uint64_t>(count);
  }

  SynthDataset ds;
  ds.pixels.resize(static_cast<std::size_t>(n_images));
  ds.lesions.resize(static_cast<std::size_t>(n_images));
  parallel_for(static_cast<std::size_t>(n_images), threads, [&](std::size_t i) {
    std::mt19937_64 rng(mix_seed(cfg.seed, i));
    ds.lesions[i] = place_lesions(cfg, plans[i], rng);
    ds.pixels[i] = render_image(cfg, ds.lesions[i], rng);
  });

  int next_id = 1;
  for (int i = 0; i < n_images; ++i) {
    ImageRecord rec;
    rec.id = i + 1;
    char name[32];
    std::snprintf(name, sizeof name, "synth_%05d.pgm", i + 1);
    rec.file_name = name;
    rec.width = rec.height = cfg.image_size;
    ds.annotations.images.push_back(rec);
    for (const auto& l : ds.lesions[static_cast<std::size_t>(i)]) {
      Instance inst;
      inst.id = next_id++;
      inst.image_id = rec.id;
      inst.category = "lesion";
      inst.box = BoundingBox(l.cx, l.cy, l.w, l.h).to_corners();
      const double edge = cfg.image_size;
      inst.box = {std::max(inst.box.x0, 0.0), std::max(inst.box.y0, 0.0),
                  std::min(inst.box.x1, edge), std::min(inst.box.y1, edge)};
      inst.contrast = l.contrast;
      ds.annotations.instances.push_back(std::move(inst));
    }
  }
  return ds;
}

}  // namespace propq
