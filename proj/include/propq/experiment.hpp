#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "propq/annotations.hpp"
#include "propq/evalkit.hpp"
#include "propq/heads.hpp"
#include "propq/synthgen.hpp"
#include "propq/tiler.hpp"
#include "propq/training.hpp"

namespace propq {

struct TrainSchedule {
  nn::SgdConfig sgd;
  std::size_t batch_size = 2;
  std::size_t max_steps = 0;  // 0: run all epochs
};

struct ProposalSettings {
  ProposalConfig train = ProposalConfig::training();
  ProposalConfig test = ProposalConfig::detection();
};

struct AnalysisSettings {
  int max_distance = 4;
  // Proposals below this IoU with every ground truth are left out of the
  // score-IoU correlation; 0 keeps all of them.
  double correlation_min_iou = 0.0;
};

/// Complete declarative description of a run. Round-trips through JSON.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  SynthConfig synth;
  int train_images = 64;
  int test_images = 16;
  TileOptions tiler;
  AnchorConfig anchors;
  BackboneConfig backbone;
  HeadConfig head;
  LossConfig loss;
  TrainSchedule schedule;
  ProposalSettings proposals;
  EvalConfig eval;
  AnalysisSettings analysis;

  void validate() const;

  std::string to_json() const;
  /// Missing fields keep their defaults; unknown fields and type errors are
  /// ConfigErrors naming the offending field.
  static ExperimentConfig from_json(std::string_view text, const std::string& origin = "<config>");
  static ExperimentConfig load(const std::filesystem::path& path);

  /// FNV-1a of the canonical JSON with the listed dotted fields removed.
  std::uint64_t hash(const std::vector<std::string>& exclude = {}) const;
};

/// Images with their pixels, as used for training and evaluation.
struct Dataset {
  AnnotationSet annotations;
  std::vector<GrayImage> pixels;  // parallel to annotations.images

  std::size_t size() const noexcept { return pixels.size(); }

  /// `dir/annotations.json` plus `dir/images/<file_name>`.
  static Dataset load(const std::filesystem::path& dir);
  void save(const std::filesystem::path& dir) const;
};

enum class Split { Train, Test };

/// The synthetic split for `cfg.seed`. Train and test use unrelated seeds.
Dataset synthesize(const ExperimentConfig& cfg, Split split, int threads = 1);

struct TrainLogRow {
  std::size_t step = 0;
  int epoch = 0;
  LossComponents loss;
};

struct Model {
  ExperimentConfig config;
  Detector detector;

  explicit Model(const ExperimentConfig& cfg);

  std::string checkpoint_json() const;
  void save(const std::filesystem::path& path) const;
  static Model from_checkpoint(std::string_view text, const std::string& origin = "<checkpoint>");
  static Model load(const std::filesystem::path& path);

  /// Adopts everything in `cfg` except the architecture and loss, which stay
  /// as trained. Throws ConfigError if the architectures differ.
  void rebind(const ExperimentConfig& cfg);
};

using TrainObserver = std::function<void(const TrainLogRow&)>;

/// Seeded init and SGD over the dataset for the configured epochs.
/// Throws DivergenceError naming the step on a non-finite loss.
Model train(const ExperimentConfig& cfg, const Dataset& data, int threads = 1,
            const TrainObserver& observer = {});

std::string train_log_csv(const std::vector<TrainLogRow>& rows);

/// Every anchor's proposal for one image, before any filtering.
std::vector<Proposal> raw_proposals(const Model& model, const GrayImage& image,
                                    HeadOutput* out = nullptr);

struct EvalReport {
  std::size_t images = 0;
  std::size_t instances = 0;
  std::size_t detections = 0;
  BucketedMetric ap;
  BucketedMetric ar;

  std::string to_json() const;
};

/// Detection pipeline (test-time NMS and cap) followed by AP/AR.
EvalReport evaluate(const Model& model, const Dataset& data, int threads = 1);

struct AnalysisReport {
  GradientCurve curve;
  ScoreIouCorrelation correlation;
};

/// Confidence-gradient curve over every ground truth and score-IoU
/// correlation over the training-time proposal set of each image.
AnalysisReport analyze(const Model& model, const Dataset& data, int threads = 1);

std::string gradient_curves_csv(const std::vector<std::pair<std::string, GradientCurve>>& curves);
std::string correlations_csv(const std::vector<std::pair<std::string, ScoreIouCorrelation>>& rows);
std::string gradient_curves_svg(const std::vector<std::pair<std::string, GradientCurve>>& curves);
std::string correlations_svg(const std::vector<std::pair<std::string, ScoreIouCorrelation>>& rows);

/// One ablation variant: which group, the axis it varies and its value.
struct AblationVariant {
  int group = 0;
  std::string axis;
  std::string value;
  ExperimentConfig config;
};

/// Group 1 varies the SADH classification kernel (3, 1); groups 2 and 3 use
/// the vanilla head with a confidence branch and vary its loss (l1, sbce)
/// and its target metric (iou, giou, diou, nwd).
std::vector<AblationVariant> ablation_variants(const ExperimentConfig& base);

struct AblationRow {
  int group = 0;
  std::string axis;
  std::string value;
  std::uint64_t seed = 0;
  std::uint64_t control_hash = 0;
  double ap = 0.0;
  double ar = 0.0;
};

std::vector<AblationRow> ablate(const ExperimentConfig& base, const std::vector<std::uint64_t>& seeds,
                                int threads = 1, const std::vector<int>& groups = {1, 2, 3});
std::string ablation_csv(const std::vector<AblationRow>& rows);

}  // namespace propq
