#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "propq/annotations.hpp"

namespace propq {

/// Blob-lesion image generator. Lesion size sqrt(w*h) is log-normal with the
/// given mean; hard lesions get contrast below `hard_contrast_max`.
struct SynthConfig {
  int image_size = 256;
  int min_lesions = 3;
  int max_lesions = 10;
  double size_mean = 20.0;
  double size_sigma = 0.35;
  double min_size = 6.0;
  double contrast_min = 0.25;
  double contrast_max = 0.6;
  double hard_contrast_min = 0.08;
  double hard_contrast_max = 0.15;
  double noise = 0.03;
  double hard_fraction = 0.3;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Blob geometry and intensity. The profile is contrast * 2^-r^2 with r the
/// elliptical radius normalised by the half-sizes, so it falls to half the
/// contrast exactly on the annotated box's inscribed ellipse.
struct Lesion {
  double cx, cy, w, h;
  double contrast;
  bool hard;
};

struct SynthDataset {
  std::vector<GrayImage> pixels;
  AnnotationSet annotations;
  std::vector<std::vector<Lesion>> lesions;  // per image
};

/// Deterministic in (config, n_images); `threads` only affects speed.
SynthDataset generate(const SynthConfig& cfg, int n_images, int threads = 1);

/// Adds one lesion's noiseless profile to a floating point canvas.
void render_lesion(std::vector<double>& canvas, int width, int height, const Lesion& l);

}  // namespace propq
