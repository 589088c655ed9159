#include "propq/propq.h"

#include <cstring>
#include <filesystem>
#include <memory>
#include <new>
#include <string>
#include <vector>

#include "json.hpp"

#include "propq/error.hpp"
#include "propq/experiment.hpp"
#include "propq/losses.hpp"
#include "propq/tiler.hpp"

struct propq_config {
  propq::ExperimentConfig cfg;
};

struct propq_dataset {
  propq::Dataset data;
};

struct propq_model {
  propq::Model model;
};

namespace {

thread_local std::string g_last_error;

propq_status fail(propq_status s, const std::string& msg) {
  g_last_error = msg;
  return s;
}

template <class F>
propq_status guarded(F&& f) {
  try {
    f();
    g_last_error.clear();
    return PROPQ_OK;
  } catch (const propq::Error& e) {
    return fail(static_cast<propq_status>(e.kind()), e.what());
  } catch (const std::bad_alloc&) {
    return fail(PROPQ_ERR_INTERNAL, "out of memory");
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(PROPQ_ERR_IO, e.what());
  } catch (const std::exception& e) {
    return fail(PROPQ_ERR_INTERNAL, e.what());
  }
}

void require(bool ok, const char* what) {
  if (!ok) throw propq::InvalidArgument(what);
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

}  // namespace

extern "C" {

const char* propq_version(void) { return "0.1.0"; }

const char* propq_last_error(void) { return g_last_error.c_str(); }

void propq_string_free(char* s) { std::free(s); }

propq_status propq_config_default(propq_config** out) {
  return guarded([&] {
    require(out, "out is null");
    *out = new propq_config{};
  });
}

propq_status propq_config_parse(const char* json, propq_config** out) {
  return guarded([&] {
    require(json && out, "null argument");
    *out = new propq_config{propq::ExperimentConfig::from_json(json)};
  });
}

propq_status propq_config_load(const char* path, propq_config** out) {
  return guarded([&] {
    require(path && out, "null argument");
    *out = new propq_config{propq::ExperimentConfig::load(path)};
  });
}

propq_status propq_config_to_json(const propq_config* cfg, char** out) {
  return guarded([&] {
    require(cfg && out, "null argument");
    *out = dup_string(cfg->cfg.to_json());
  });
}

propq_status propq_config_set_seed(propq_config* cfg, uint64_t seed) {
  return guarded([&] {
    require(cfg, "config is null");
    cfg->cfg.seed = seed;
  });
}

propq_status propq_config_get_seed(const propq_config* cfg, uint64_t* out) {
  return guarded([&] {
    require(cfg && out, "null argument");
    *out = cfg->cfg.seed;
  });
}

propq_status propq_config_hash(const propq_config* cfg, const char* const* exclude,
                               size_t n_exclude, uint64_t* out) {
  return guarded([&] {
    require(cfg && out && (exclude || n_exclude == 0), "null argument");
    std::vector<std::string> ex(exclude, exclude + n_exclude);
    *out = cfg->cfg.hash(ex);
  });
}

void propq_config_free(propq_config* cfg) { delete cfg; }

propq_status propq_box_metric(const char* metric, const double a[4], const double b[4], double c,
                              double* out) {
  return guarded([&] {
    require(metric && a && b && out, "null argument");
    const propq::BoundingBox ba(a[0], a[1], a[2], a[3]);
    const propq::BoundingBox bb(b[0], b[1], b[2], b[3]);
    const auto m = propq::parse_box_metric(metric);
    propq::NwdConfig nc;
    if (m == propq::BoxMetric::Nwd) {
      nc.c = c;
      nc.validate();
    }
    *out = propq::evaluate(m, ba, bb, nc);
  });
}

propq_status propq_sbce(const double* y, const double* p, size_t n, double* loss, double* grad) {
  return guarded([&] {
    require(y && p && loss, "null argument");
    const auto r = propq::sbce({p, n}, {y, n}, propq::Reduction::Sum);
    *loss = r.loss;
    if (grad) std::copy(r.grad.begin(), r.grad.end(), grad);
  });
}

propq_status propq_rectify_score(double s_cls, double p_nwd, double omega, double* out) {
  return guarded([&] {
    require(out, "out is null");
    propq::LossWeights w;
    w.omega_nwd = omega;
    w.validate();
    *out = propq::rectify_score(s_cls, p_nwd, w);
  });
}

propq_status propq_plan_tiles(int w, int h, int tile_size, size_t* count) {
  return guarded([&] {
    require(count, "count is null");
    *count = propq::plan_tiles(w, h, tile_size).size();
  });
}

propq_status propq_dataset_synthesize(const propq_config* cfg, propq_split split, int threads,
                                      propq_dataset** out) {
  return guarded([&] {
    require(cfg && out, "null argument");
    require(split == PROPQ_SPLIT_TRAIN || split == PROPQ_SPLIT_TEST, "unknown split");
    const auto s = split == PROPQ_SPLIT_TRAIN ? propq::Split::Train : propq::Split::Test;
    *out = new propq_dataset{propq::synthesize(cfg->cfg, s, threads)};
  });
}

propq_status propq_dataset_load(const char* dir, propq_dataset** out) {
  return guarded([&] {
    require(dir && out, "null argument");
    *out = new propq_dataset{propq::Dataset::load(dir)};
  });
}

propq_status propq_dataset_save(const propq_dataset* data, const char* dir) {
  return guarded([&] {
    require(data && dir, "null argument");
    data->data.save(dir);
  });
}

propq_status propq_dataset_counts(const propq_dataset* data, size_t* images, size_t* instances) {
  return guarded([&] {
    require(data, "dataset is null");
    if (images) *images = data->data.annotations.images.size();
    if (instances) *instances = data->data.annotations.instances.size();
  });
}

void propq_dataset_free(propq_dataset* data) { delete data; }

propq_status propq_tile(const char* annotations_path, const char* image_dir, int tile_size,
                        const char* mode, int mask_value, const char* out_dir,
                        propq_tile_summary* summary) {
  return guarded([&] {
    require(annotations_path && image_dir && mode && out_dir, "null argument");
    if (mask_value < 0 || mask_value > 255)
      throw propq::ConfigError("mask value must lie in [0, 255], got " + std::to_string(mask_value));
    propq::TileOptions opts;
    opts.tile_size = tile_size;
    opts.mode = propq::parse_mask_mode(mode);
    opts.mask_value = static_cast<std::uint8_t>(mask_value);
    opts.validate();
    const auto source = propq::AnnotationSet::load(annotations_path);
    const auto tiled = propq::write_tiled_dataset(source, image_dir, opts, out_dir);
    if (summary) {
      summary->source_images = source.images.size();
      summary->tiles = tiled.tiles.size();
      summary->instances = tiled.annotations.instances.size();
      summary->masked = 0;
      for (const auto& t : tiled.tiles) summary->masked += t.masks.size();
    }
  });
}

propq_status propq_train(const propq_config* cfg, const propq_dataset* data, int threads,
                         propq_train_callback callback, void* user, propq_model** out) {
  return guarded([&] {
    require(cfg && data && out, "null argument");
    propq::TrainObserver obs;
    if (callback)
      obs = [&](const propq::TrainLogRow& r) {
        callback(r.step, r.epoch, r.loss.cls, r.loss.loc, r.loss.nwd, r.loss.total, user);
      };
    *out = new propq_model{propq::train(cfg->cfg, data->data, threads, obs)};
  });
}

propq_status propq_model_load(const char* path, propq_model** out) {
  return guarded([&] {
    require(path && out, "null argument");
    *out = new propq_model{propq::Model::load(path)};
  });
}

propq_status propq_model_save(const propq_model* model, const char* path) {
  return guarded([&] {
    require(model && path, "null argument");
    model->model.save(path);
  });
}

propq_status propq_model_checkpoint(const propq_model* model, char** out) {
  return guarded([&] {
    require(model && out, "null argument");
    *out = dup_string(model->model.checkpoint_json());
  });
}

propq_status propq_model_config(const propq_model* model, propq_config** out) {
  return guarded([&] {
    require(model && out, "null argument");
    *out = new propq_config{model->model.config};
  });
}

propq_status propq_model_rebind(propq_model* model, const propq_config* cfg) {
  return guarded([&] {
    require(model && cfg, "null argument");
    model->model.rebind(cfg->cfg);
  });
}

void propq_model_free(propq_model* model) { delete model; }

propq_status propq_evaluate(const propq_model* model, const propq_dataset* data, int threads,
                            char** report_json, double* ap, double* ar) {
  return guarded([&] {
    require(model && data, "null argument");
    const auto report = propq::evaluate(model->model, data->data, threads);
    if (report_json) *report_json = dup_string(report.to_json());
    if (ap) *ap = report.ap.all.value_or(-1.0);
    if (ar) *ar = report.ar.all.value_or(-1.0);
  });
}

propq_status propq_analyze(const propq_model* const* models, const char* const* labels,
                           size_t n_models, const propq_dataset* data, int threads,
                           const char* out_dir, char** summary_json) {
  return guarded([&] {
    require(models && labels && data && n_models > 0, "null argument");
    std::vector<std::pair<std::string, propq::GradientCurve>> curves;
    std::vector<std::pair<std::string, propq::ScoreIouCorrelation>> corrs;
    nlohmann::ordered_json summary = nlohmann::ordered_json::array();
    for (size_t i = 0; i < n_models; ++i) {
      require(models[i] && labels[i], "null model or label");
      const auto rep = propq::analyze(models[i]->model, data->data, threads);
      curves.emplace_back(labels[i], rep.curve);
      corrs.emplace_back(labels[i], rep.correlation);
      nlohmann::ordered_json j;
      j["label"] = labels[i];
      j["config_hash"] = models[i]->model.config.hash();
      j["head"] = std::string(propq::to_string(models[i]->model.config.head.variant));
      j["distances"] = rep.curve.distances;
      j["delta_s_cls"] = rep.curve.delta_scores;
      j["samples"] = rep.curve.samples;
      j["pearson_cls_iou"] = rep.correlation.cls;
      j["pearson_nwd_iou"] =
          rep.correlation.nwd ? nlohmann::ordered_json(*rep.correlation.nwd) : nullptr;
      j["pearson_final_iou"] = rep.correlation.final_score;
      j["proposals"] = rep.correlation.count;
      summary.push_back(std::move(j));
    }
    if (out_dir) {
      const std::filesystem::path dir(out_dir);
      std::error_code ec;
      std::filesystem::create_directories(dir, ec);
      if (ec) throw propq::IoError("cannot create " + dir.string() + ": " + ec.message());
      propq::write_text_file(dir / "gradient_curves.csv", propq::gradient_curves_csv(curves));
      propq::write_text_file(dir / "gradient_curves.svg", propq::gradient_curves_svg(curves));
      propq::write_text_file(dir / "correlations.csv", propq::correlations_csv(corrs));
      propq::write_text_file(dir / "correlations.svg", propq::correlations_svg(corrs));
    }
    if (summary_json) *summary_json = dup_string(summary.dump(2) + "\n");
  });
}

propq_status propq_ablate(const propq_config* base, const uint64_t* seeds, size_t n_seeds,
                          const int* groups, size_t n_groups, int threads, char** csv) {
  return guarded([&] {
    require(base && seeds && csv, "null argument");
    std::vector<int> g = groups ? std::vector<int>(groups, groups + n_groups) : std::vector<int>{1, 2, 3};
    for (int v : g)
      if (v < 1 || v > 3) throw propq::ConfigError("ablation group must be 1, 2 or 3");
    const auto rows = propq::ablate(base->cfg, {seeds, seeds + n_seeds}, threads, g);
    *csv = dup_string(propq::ablation_csv(rows));
  });
}

}  // extern "C"
