// propq command-line front end. Talks to the library only through propq.h.
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "propq/propq.h"

namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitIo = 4;

// Carries a library status out to main(), which turns it into an exit code.
struct Failure {
  propq_status status;
  std::string message;
};

void check(propq_status s, const std::string& context) {
  if (s != PROPQ_OK) throw Failure{s, context + ": " + propq_last_error()};
}

int exit_code(propq_status s) {
  switch (s) {
    case PROPQ_ERR_INVALID_ARGUMENT:
    case PROPQ_ERR_CONFIG:
      return kExitConfig;
    case PROPQ_ERR_DIVERGENCE:
      return 3;
    case PROPQ_ERR_IO:
      return kExitIo;
    default:
      return 1;
  }
}

template <class T, void (*Free)(T*)>
struct Handle {
  T* p = nullptr;
  Handle() = default;
  Handle(const Handle&) = delete;
  Handle& operator=(const Handle&) = delete;
  Handle(Handle&& o) noexcept : p(o.p) { o.p = nullptr; }
  Handle& operator=(Handle&& o) noexcept {
    std::swap(p, o.p);
    return *this;
  }
  ~Handle() { Free(p); }
  T** out() { return &p; }
  T* get() const { return p; }
};

using Config = Handle<propq_config, propq_config_free>;
using DatasetH = Handle<propq_dataset, propq_dataset_free>;
using ModelH = Handle<propq_model, propq_model_free>;

struct OwnedString {
  char* p = nullptr;
  ~OwnedString() { propq_string_free(p); }
  std::string str() const { return p ? p : ""; }
};

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Failure{PROPQ_ERR_IO, "cannot create " + dir.string() + ": " + ec.message()};
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw Failure{PROPQ_ERR_IO, "cannot write " + path.string()};
}

Config load_config(const std::string& path, std::optional<std::uint64_t> seed) {
  Config cfg;
  if (path.empty())
    check(propq_config_default(cfg.out()), "default config");
  else
    check(propq_config_load(path.c_str(), cfg.out()), "config");
  if (seed) check(propq_config_set_seed(cfg.get(), *seed), "seed");
  return cfg;
}

std::string config_json(const propq_config* cfg) {
  OwnedString s;
  check(propq_config_to_json(cfg, &s.p), "config");
  return s.str();
}

DatasetH dataset_for(const std::string& dir, const propq_config* cfg, propq_split split, int threads) {
  DatasetH d;
  if (!dir.empty())
    check(propq_dataset_load(dir.c_str(), d.out()), "dataset " + dir);
  else
    check(propq_dataset_synthesize(cfg, split, threads, d.out()), "synthesize");
  return d;
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  int threads = 1;
};

void add_common(CLI::App* cmd, Common& c, bool with_config = true) {
  if (with_config) {
    cmd->add_option("--config", c.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
    cmd->add_option("--seed", c.seed, "Override the config seed");
  }
  cmd->add_option("--out", c.out, "Output directory");
  cmd->add_option("--threads", c.threads, "Worker threads")->check(CLI::PositiveNumber);
}

void cmd_synth(const Common& c, const std::string& split) {
  const Config cfg = load_config(c.config, c.seed);
  const fs::path out(c.out);
  ensure_dir(out);
  write_file(out / "config.json", config_json(cfg.get()));
  std::vector<std::pair<std::string, propq_split>> splits;
  if (split != "test") splits.emplace_back("train", PROPQ_SPLIT_TRAIN);
  if (split != "train") splits.emplace_back("test", PROPQ_SPLIT_TEST);
  for (const auto& [name, s] : splits) {
    DatasetH d;
    check(propq_dataset_synthesize(cfg.get(), s, c.threads, d.out()), "synthesize " + name);
    check(propq_dataset_save(d.get(), (out / name).string().c_str()), "write " + name);
    size_t images = 0, instances = 0;
    check(propq_dataset_counts(d.get(), &images, &instances), "counts");
    std::printf("%s: %zu images, %zu instances -> %s\n", name.c_str(), images, instances,
                (out / name).string().c_str());
  }
}

struct TileArgs {
  std::string input, images, mode = "masked";
  int tile_size = 1024;
  int mask_value = 0;
};

void cmd_tile(const Common& c, const TileArgs& t) {
  propq_tile_summary s{};
  check(propq_tile(t.input.c_str(), t.images.c_str(), t.tile_size, t.mode.c_str(), t.mask_value,
                   c.out.c_str(), &s),
        "tile");
  std::printf("%zu images -> %zu tiles, %zu instances kept, %zu regions masked (%s)\n",
              s.source_images, s.tiles, s.instances, s.masked, t.mode.c_str());
}

void on_step(size_t step, int epoch, double cls, double loc, double nwd, double total, void* user) {
  auto* csv = static_cast<std::string*>(user);
  char line[256];
  std::snprintf(line, sizeof line, "%zu,%d,%.9g,%.9g,%.9g,%.9g\n", step, epoch, cls, loc, nwd, total);
  *csv += line;
}

void cmd_train(const Common& c, const std::string& data_dir) {
  const Config cfg = load_config(c.config, c.seed);
  const fs::path out(c.out);
  ensure_dir(out);
  write_file(out / "config.json", config_json(cfg.get()));
  const DatasetH data = dataset_for(data_dir, cfg.get(), PROPQ_SPLIT_TRAIN, c.threads);
  std::string log = "step,epoch,loss_cls,loss_loc,loss_nwd,loss_total\n";
  ModelH model;
  const propq_status s = propq_train(cfg.get(), data.get(), c.threads, on_step, &log, model.out());
  write_file(out / "train_log.csv", log);
  check(s, "train");
  check(propq_model_save(model.get(), (out / "checkpoint.json").string().c_str()), "checkpoint");
  std::printf("trained %zu steps -> %s\n", static_cast<size_t>(std::count(log.begin(), log.end(), '\n') - 1),
              (out / "checkpoint.json").string().c_str());
}

ModelH load_model(const std::string& path, const Common& c) {
  ModelH m;
  check(propq_model_load(path.c_str(), m.out()), "checkpoint " + path);
  if (!c.config.empty() || c.seed) {
    Config cfg;
    if (!c.config.empty())
      cfg = load_config(c.config, c.seed);
    else
      check(propq_model_config(m.get(), cfg.out()), "config");
    if (c.seed) check(propq_config_set_seed(cfg.get(), *c.seed), "seed");
    check(propq_model_rebind(m.get(), cfg.get()), "config " + c.config);
  }
  return m;
}

void cmd_eval(const Common& c, const std::string& checkpoint, const std::string& data_dir) {
  const ModelH model = load_model(checkpoint, c);
  Config cfg;
  check(propq_model_config(model.get(), cfg.out()), "config");
  const DatasetH data = dataset_for(data_dir, cfg.get(), PROPQ_SPLIT_TEST, c.threads);
  OwnedString report;
  double ap = 0, ar = 0;
  check(propq_evaluate(model.get(), data.get(), c.threads, &report.p, &ap, &ar), "evaluate");
  const fs::path out(c.out);
  ensure_dir(out);
  write_file(out / "config.json", config_json(cfg.get()));
  write_file(out / "eval.json", report.str());
  std::printf("AP@0.5 %.4f  AR@0.5 %.4f -> %s\n", ap, ar, (out / "eval.json").string().c_str());
}

void cmd_analyze(const Common& c, const std::vector<std::string>& checkpoints,
                 std::vector<std::string> labels, const std::string& data_dir) {
  if (!labels.empty() && labels.size() != checkpoints.size())
    throw Failure{PROPQ_ERR_CONFIG, "--label must be given once per --checkpoint"};
  std::vector<ModelH> models;
  for (const auto& path : checkpoints) models.push_back(load_model(path, c));
  if (labels.empty())
    for (const auto& path : checkpoints) labels.push_back(fs::path(path).parent_path().filename().string());
  Config cfg;
  check(propq_model_config(models.front().get(), cfg.out()), "config");
  const DatasetH data = dataset_for(data_dir, cfg.get(), PROPQ_SPLIT_TEST, c.threads);
  std::vector<const propq_model*> ptrs;
  std::vector<const char*> names;
  for (size_t i = 0; i < models.size(); ++i) {
    ptrs.push_back(models[i].get());
    names.push_back(labels[i].c_str());
  }
  OwnedString summary;
  check(propq_analyze(ptrs.data(), names.data(), ptrs.size(), data.get(), c.threads, c.out.c_str(),
                      &summary.p),
        "analyze");
  write_file(fs::path(c.out) / "config.json", config_json(cfg.get()));
  write_file(fs::path(c.out) / "analysis.json", summary.str());
  std::fputs(summary.str().c_str(), stdout);
}

void cmd_ablate(const Common& c, std::vector<std::uint64_t> seeds, const std::vector<int>& groups) {
  const Config cfg = load_config(c.config, std::nullopt);
  if (seeds.empty()) {
    std::uint64_t s = 0;
    check(propq_config_get_seed(cfg.get(), &s), "seed");
    seeds.push_back(c.seed.value_or(s));
  }
  OwnedString csv;
  check(propq_ablate(cfg.get(), seeds.data(), seeds.size(), groups.empty() ? nullptr : groups.data(),
                     groups.size(), c.threads, &csv.p),
        "ablate");
  const fs::path out(c.out);
  ensure_dir(out);
  write_file(out / "config.json", config_json(cfg.get()));
  write_file(out / "ablation.csv", csv.str());
  std::fputs(csv.str().c_str(), stdout);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Proposal-quality experiments for small-lesion region proposal networks"};
  app.require_subcommand(1);
  app.set_version_flag("--version", propq_version());

  Common common;
  std::string split = "both";
  auto* synth = app.add_subcommand("synth", "Generate the synthetic train/test datasets");
  add_common(synth, common);
  synth->add_option("--split", split, "Which split to write")->check(CLI::IsMember({"train", "test", "both"}));

  TileArgs tile;
  auto* tile_cmd = app.add_subcommand("tile", "Cut annotated images into fixed-size tiles");
  add_common(tile_cmd, common, false);
  tile_cmd->add_option("--input", tile.input, "Annotation JSON")->required()->check(CLI::ExistingFile);
  tile_cmd->add_option("--images", tile.images, "Directory holding the source images")->required();
  tile_cmd->add_option("--tile-size", tile.tile_size, "Tile edge in pixels");
  tile_cmd->add_option("--mask-mode", tile.mode, "Partial instance handling")
      ->check(CLI::IsMember({"masked", "keep-partial"}));
  tile_cmd->add_option("--mask-value", tile.mask_value, "Fill value for masked pixels");

  std::string data_dir;
  auto* train = app.add_subcommand("train", "Train a detector and write a checkpoint");
  add_common(train, common);
  train->add_option("--data", data_dir, "Dataset directory (default: synthesize the train split)");

  std::string checkpoint;
  auto* eval = app.add_subcommand("eval", "AP/AR of a checkpoint on a dataset");
  add_common(eval, common);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--data", data_dir, "Dataset directory (default: synthesize the test split)");

  std::vector<std::string> checkpoints, labels;
  auto* analyze = app.add_subcommand("analyze", "Confidence-gradient curves and score-IoU correlations");
  add_common(analyze, common);
  analyze->add_option("--checkpoint", checkpoints, "Checkpoint file (repeatable)")->required();
  analyze->add_option("--label", labels, "Name per checkpoint");
  analyze->add_option("--data", data_dir, "Dataset directory (default: synthesize the test split)");

  std::vector<std::uint64_t> seeds;
  std::vector<int> groups;
  auto* ablate = app.add_subcommand("ablate", "Head, loss and metric ablation sweep");
  add_common(ablate, common);
  ablate->add_option("--seeds", seeds, "Seeds shared by every variant");
  ablate->add_option("--groups", groups, "Groups to run (1 kernel, 2 loss, 3 metric)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*synth) cmd_synth(common, split);
    if (*tile_cmd) cmd_tile(common, tile);
    if (*train) cmd_train(common, data_dir);
    if (*eval) cmd_eval(common, checkpoint, data_dir);
    if (*analyze) cmd_analyze(common, checkpoints, labels, data_dir);
    if (*ablate) cmd_ablate(common, seeds, groups);
  } catch (const Failure& f) {
    std::fprintf(stderr, "error: %s\n", f.message.c_str());
    return exit_code(f.status);
  }
  return 0;
}
