#include "propq/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "propq/error.hpp"
#include "json.hpp"

namespace propq {

using ojson = nlohmann::ordered_json;

namespace {

const char* score_key_name(ScoreKey k) { return k == ScoreKey::Cls ? "cls" : "final"; }

ScoreKey parse_score_key(const std::string& s) {
  if (s == "cls") return ScoreKey::Cls;
  if (s == "final") return ScoreKey::Final;
  throw ConfigError("unknown score key '" + s + "'");
}

ojson proposal_json(const ProposalConfig& p) {
  ojson j;
  j["pre_nms_topk"] = p.pre_nms_topk;
  j["nms_iou"] = p.nms_iou;
  j["post_nms_topk"] = p.post_nms_topk;
  j["score_threshold"] = p.score_threshold;
  j["score"] = score_key_name(p.key);
  return j;
}

ojson config_json(const ExperimentConfig& c) {
  ojson j;
  j["seed"] = c.seed;
  j["train_images"] = c.train_images;
  j["test_images"] = c.test_images;
  const SynthConfig& s = c.synth;
  j["synth"] = {{"image_size", s.image_size},       {"min_lesions", s.min_lesions},
                {"max_lesions", s.max_lesions},     {"size_mean", s.size_mean},
                {"size_sigma", s.size_sigma},       {"min_size", s.min_size},
                {"contrast_min", s.contrast_min},   {"contrast_max", s.contrast_max},
                {"hard_contrast_min", s.hard_contrast_min},
                {"hard_contrast_max", s.hard_contrast_max},
                {"noise", s.noise},                 {"hard_fraction", s.hard_fraction}};
  j["tiler"] = {{"tile_size", c.tiler.tile_size},
                {"mask_mode", std::string(to_string(c.tiler.mode))},
                {"mask_value", static_cast<int>(c.tiler.mask_value)}};
  j["anchors"] = {{"scales", c.anchors.scales}, {"aspect_ratios", c.anchors.aspect_ratios}};
  j["backbone"] = {{"channels", c.backbone.channels}};
  j["head"] = {{"variant", std::string(to_string(c.head.variant))},
               {"cls_kernel", c.head.cls_kernel},
               {"nwd_branch", c.head.nwd_branch},
               {"channels", c.head.channels},
               {"group_norm", c.head.group_norm}};
  const LossConfig& l = c.loss;
  j["loss"] = {{"label_threshold", l.assign.label_threshold},
               {"negative_threshold", l.assign.negative_threshold},
               {"rescue_best_anchor", l.assign.rescue_best_anchor},
               {"samples_per_image", l.samples_per_image},
               {"positive_fraction", l.positive_fraction},
               {"lambda_nwd", l.weights.lambda_nwd},
               {"omega_nwd", l.weights.omega_nwd},
               {"confidence_loss", std::string(to_string(l.confidence_loss))},
               {"confidence_metric", std::string(to_string(l.confidence_metric))},
               {"nwd_c", l.nwd.c}};
  j["sgd"] = {{"lr", c.schedule.sgd.lr},
              {"momentum", c.schedule.sgd.momentum},
              {"weight_decay", c.schedule.sgd.weight_decay},
              {"epochs", c.schedule.sgd.epochs},
              {"batch_size", c.schedule.batch_size},
              {"max_steps", c.schedule.max_steps}};
  j["proposals"] = {{"train", proposal_json(c.proposals.train)},
                    {"test", proposal_json(c.proposals.test)}};
  j["eval"] = {{"iou_threshold", c.eval.iou_threshold},
               {"max_detections", c.eval.max_detections},
               {"small_max", c.eval.small_max},
               {"medium_max", c.eval.medium_max}};
  j["analysis"] = {{"max_distance", c.analysis.max_distance},
                   {"correlation_min_iou", c.analysis.correlation_min_iou}};
  return j;
}

const char* type_name(const ojson& v) {
  if (v.is_number_integer()) return "integer";
  if (v.is_number()) return "number";
  return v.type_name();
}

bool compatible(const ojson& def, const ojson& val) {
  if (def.is_number_integer()) return val.is_number_integer();
  if (def.is_number()) return val.is_number();
  return def.type() == val.type();
}

// Overlays `user` onto `defaults`, rejecting unknown fields and type changes.
void overlay(ojson& defaults, const ojson& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError(path.empty() ? "config must be a JSON object" :
                                                          "field '" + path + "' must be an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string field = path.empty() ? it.key() : path + "." + it.key();
    if (!defaults.contains(it.key())) throw ConfigError("unknown field '" + field + "'");
    ojson& slot = defaults[it.key()];
    if (slot.is_object()) {
      overlay(slot, it.value(), field);
    } else if (slot.is_array()) {
      if (!it.value().is_array()) throw ConfigError("field '" + field + "' must be an array");
      for (const auto& e : it.value())
        if (!e.is_number()) throw ConfigError("field '" + field + "' must hold numbers");
      slot = it.value();
    } else {
      if (!compatible(slot, it.value()))
        throw ConfigError("field '" + field + "' must be of type " + type_name(slot) + ", got " +
                          type_name(it.value()));
      slot = it.value();
    }
  }
}

template <typename T>
T get(const ojson& j, const char* key, const std::string& path) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("field '" + path + "." + key + "' has an invalid value");
  }
}

ProposalConfig proposal_from(const ojson& j, const std::string& path) {
  ProposalConfig p;
  p.pre_nms_topk = get<std::size_t>(j, "pre_nms_topk", path);
  p.nms_iou = get<double>(j, "nms_iou", path);
  p.post_nms_topk = get<std::size_t>(j, "post_nms_topk", path);
  p.score_threshold = get<double>(j, "score_threshold", path);
  p.key = parse_score_key(get<std::string>(j, "score", path));
  if (!(p.nms_iou >= 0.0 && p.nms_iou <= 1.0))
    throw ConfigError("field '" + path + ".nms_iou' must lie in [0, 1]");
  return p;
}

ExperimentConfig config_from(const ojson& j) {
  ExperimentConfig c;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.train_images = j.at("train_images").get<int>();
  c.test_images = j.at("test_images").get<int>();
  const ojson& s = j.at("synth");
  c.synth.image_size = get<int>(s, "image_size", "synth");
  c.synth.min_lesions = get<int>(s, "min_lesions", "synth");
  c.synth.max_lesions = get<int>(s, "max_lesions", "synth");
  c.synth.size_mean = get<double>(s, "size_mean", "synth");
  c.synth.size_sigma = get<double>(s, "size_sigma", "synth");
  c.synth.min_size = get<double>(s, "min_size", "synth");
  c.synth.contrast_min = get<double>(s, "contrast_min", "synth");
  c.synth.contrast_max = get<double>(s, "contrast_max", "synth");
  c.synth.hard_contrast_min = get<double>(s, "hard_contrast_min", "synth");
  c.synth.hard_contrast_max = get<double>(s, "hard_contrast_max", "synth");
  c.synth.noise = get<double>(s, "noise", "synth");
  c.synth.hard_fraction = get<double>(s, "hard_fraction", "synth");
  const ojson& t = j.at("tiler");
  c.tiler.tile_size = get<int>(t, "tile_size", "tiler");
  try {
    c.tiler.mode = parse_mask_mode(get<std::string>(t, "mask_mode", "tiler"));
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("field 'tiler.mask_mode': ") + e.what());
  }
  const int mask_value = get<int>(t, "mask_value", "tiler");
  if (mask_value < 0 || mask_value > 255) throw ConfigError("field 'tiler.mask_value' must lie in [0, 255]");
  c.tiler.mask_value = static_cast<std::uint8_t>(mask_value);
  c.anchors.scales = get<std::vector<double>>(j.at("anchors"), "scales", "anchors");
  c.anchors.aspect_ratios = get<std::vector<double>>(j.at("anchors"), "aspect_ratios", "anchors");
  c.backbone.channels = get<std::vector<std::size_t>>(j.at("backbone"), "channels", "backbone");
  const ojson& h = j.at("head");
  try {
    c.head.variant = parse_head_variant(get<std::string>(h, "variant", "head"));
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("field 'head.variant': ") + e.what());
  }
  c.head.cls_kernel = get<int>(h, "cls_kernel", "head");
  c.head.nwd_branch = get<bool>(h, "nwd_branch", "head");
  c.head.channels = get<std::size_t>(h, "channels", "head");
  c.head.group_norm = get<bool>(h, "group_norm", "head");
  c.head.anchors_per_position = c.anchors.per_position();
  const ojson& l = j.at("loss");
  c.loss.assign.label_threshold = get<double>(l, "label_threshold", "loss");
  c.loss.assign.negative_threshold = get<double>(l, "negative_threshold", "loss");
  c.loss.assign.rescue_best_anchor = get<bool>(l, "rescue_best_anchor", "loss");
  c.loss.samples_per_image = get<std::size_t>(l, "samples_per_image", "loss");
  c.loss.positive_fraction = get<double>(l, "positive_fraction", "loss");
  c.loss.weights.lambda_nwd = get<double>(l, "lambda_nwd", "loss");
  c.loss.weights.omega_nwd = get<double>(l, "omega_nwd", "loss");
  try {
    c.loss.confidence_loss = parse_confidence_loss(get<std::string>(l, "confidence_loss", "loss"));
    c.loss.confidence_metric = parse_box_metric(get<std::string>(l, "confidence_metric", "loss"));
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("field 'loss': ") + e.what());
  }
  c.loss.nwd.c = get<double>(l, "nwd_c", "loss");
  const ojson& g = j.at("sgd");
  c.schedule.sgd.lr = get<double>(g, "lr", "sgd");
  c.schedule.sgd.momentum = get<double>(g, "momentum", "sgd");
  c.schedule.sgd.weight_decay = get<double>(g, "weight_decay", "sgd");
  c.schedule.sgd.epochs = get<int>(g, "epochs", "sgd");
  c.schedule.batch_size = get<std::size_t>(g, "batch_size", "sgd");
  c.schedule.max_steps = get<std::size_t>(g, "max_steps", "sgd");
  c.proposals.train = proposal_from(j.at("proposals").at("train"), "proposals.train");
  c.proposals.test = proposal_from(j.at("proposals").at("test"), "proposals.test");
  const ojson& e = j.at("eval");
  c.eval.iou_threshold = get<double>(e, "iou_threshold", "eval");
  c.eval.max_detections = get<std::size_t>(e, "max_detections", "eval");
  c.eval.small_max = get<double>(e, "small_max", "eval");
  c.eval.medium_max = get<double>(e, "medium_max", "eval");
  c.analysis.max_distance = get<int>(j.at("analysis"), "max_distance", "analysis");
  c.analysis.correlation_min_iou = get<double>(j.at("analysis"), "correlation_min_iou", "analysis");
  return c;
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void erase_path(ojson& j, const std::string& dotted) {
  ojson* node = &j;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(key)) return;
    if (dot == std::string::npos) {
      node->erase(key);
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  auto wrap = [](const char* section, auto&& fn) {
    try {
      fn();
    } catch (const InvalidArgument& e) {
      throw ConfigError(std::string(section) + ": " + e.what());
    }
  };
  synth.validate();
  if (train_images < 0 || test_images < 0) throw ConfigError("image counts must be non-negative");
  wrap("tiler", [&] { tiler.validate(); });
  wrap("anchors", [&] {
    AnchorGrid g;
    g.scales = anchors.scales;
    g.aspect_ratios = anchors.aspect_ratios;
    g.feat_h = g.feat_w = 1;
    g.validate();
  });
  wrap("backbone", [&] { backbone.validate(); });
  wrap("head", [&] { head.validate(); });
  if (head.anchors_per_position != anchors.per_position())
    throw ConfigError("head.anchors_per_position disagrees with the anchor configuration");
  if (backbone.channels.back() != head.channels)
    throw ConfigError("backbone.channels must end with head.channels");
  wrap("loss", [&] { loss.validate(); });
  wrap("sgd", [&] { schedule.sgd.validate(); });
  if (schedule.batch_size == 0) throw ConfigError("sgd.batch_size must be positive");
  wrap("eval", [&] { eval.validate(); });
  if (analysis.max_distance < 0) throw ConfigError("analysis.max_distance must be non-negative");
}

std::string ExperimentConfig::to_json() const { return config_json(*this).dump(2) + "\n"; }

ExperimentConfig ExperimentConfig::from_json(std::string_view text, const std::string& origin) {
  ojson user;
  try {
    user = ojson::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  ojson merged = config_json(ExperimentConfig{});
  try {
    overlay(merged, user, "");
    ExperimentConfig c = config_from(merged);
    c.validate();
    return c;
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(origin + ": " + e.what());
  }
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  return from_json(read_text_file(path), path.string());
}

std::uint64_t ExperimentConfig::hash(const std::vector<std::string>& exclude) const {
  ojson j = config_json(*this);
  for (const auto& field : exclude) erase_path(j, field);
  return fnv1a(j.dump());
}

Dataset Dataset::load(const std::filesystem::path& dir) {
  Dataset d;
  d.annotations = AnnotationSet::load(dir / "annotations.json");
  for (const auto& img : d.annotations.images) {
    GrayImage px = read_pgm(dir / "images" / img.file_name);
    if (px.width != img.width || px.height != img.height)
      throw IoError((dir / "images" / img.file_name).string() + ": size disagrees with annotations");
    d.pixels.push_back(std::move(px));
  }
  return d;
}

void Dataset::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir / "images");
  for (std::size_t i = 0; i < pixels.size(); ++i)
    write_pgm(dir / "images" / annotations.images[i].file_name, pixels[i]);
  annotations.save(dir / "annotations.json");
}

Dataset synthesize(const ExperimentConfig& cfg, Split split, int threads) {
  SynthConfig s = cfg.synth;
  s.seed = mix_seed(cfg.seed, split == Split::Train ? 0x7261696eULL : 0x74657374ULL);
  SynthDataset gen = generate(s, split == Split::Train ? cfg.train_images : cfg.test_images, threads);
  return Dataset{std::move(gen.annotations), std::move(gen.pixels)};
}

Model::Model(const ExperimentConfig& cfg) : config(cfg), detector(cfg.backbone, cfg.head) {
  config.validate();
}

std::string Model::checkpoint_json() const {
  ojson j;
  j["format"] = "propq-checkpoint";
  j["version"] = 1;
  j["config"] = config_json(config);
  ojson params = ojson::array();
  const auto& store = detector.params();
  for (const auto& e : store.entries()) {
    const auto v = store.view(e.ref);
    params.push_back({{"name", e.name}, {"shape", e.shape}, {"values", std::vector<double>(v.begin(), v.end())}});
  }
  j["params"] = std::move(params);
  return j.dump() + "\n";
}

void Model::save(const std::filesystem::path& path) const { write_text_file(path, checkpoint_json()); }

Model Model::from_checkpoint(std::string_view text, const std::string& origin) {
  ojson j;
  try {
    j = ojson::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(origin + ": " + e.what());
  }
  if (!j.is_object() || j.value("format", std::string{}) != "propq-checkpoint" ||
      j.value("version", 0) != 1)
    throw IoError(origin + ": not a version 1 propq checkpoint");
  Model m(ExperimentConfig::from_json(j.at("config").dump(), origin + " (embedded config)"));
  auto& store = m.detector.params();
  const ojson& params = j.at("params");
  if (!params.is_array() || params.size() != store.entries().size())
    throw ConfigError(origin + ": parameter list does not match the embedded architecture");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = store.entries()[i];
    const ojson& p = params[i];
    if (p.at("name").get<std::string>() != e.name ||
        p.at("shape").get<std::vector<std::size_t>>() != e.shape)
      throw ConfigError(origin + ": parameter '" + e.name + "' missing or misshapen");
    const auto values = p.at("values").get<std::vector<double>>();
    if (values.size() != e.ref.size) throw ConfigError(origin + ": parameter '" + e.name + "' truncated");
    std::copy(values.begin(), values.end(), store.view(e.ref).begin());
  }
  return m;
}

Model Model::load(const std::filesystem::path& path) {
  return from_checkpoint(read_text_file(path), path.string());
}

void Model::rebind(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto arch = [](const ExperimentConfig& c) {
    const ojson j = ojson::parse(c.to_json());
    return ojson{j.at("anchors"), j.at("backbone"), j.at("head")};
  };
  if (arch(cfg) != arch(config))
    throw ConfigError("config does not match the checkpoint architecture (anchors, backbone or head differ)");
  ExperimentConfig merged = cfg;
  merged.anchors = config.anchors;
  merged.backbone = config.backbone;
  merged.head = config.head;
  merged.loss = config.loss;
  config = merged;
}

namespace {

std::vector<TrainImage> training_images(const Dataset& data) {
  std::vector<TrainImage> out;
  out.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& rec = data.annotations.images[i];
    TrainImage t;
    t.image = image_tensor(data.pixels[i].width, data.pixels[i].height, data.pixels[i].pixels);
    for (const auto* inst : data.annotations.instances_of(rec.id)) t.gts.push_back(inst->bbox());
    for (const auto& r : rec.ignore_regions)
      if (r.x1 > r.x0 && r.y1 > r.y0) t.ignore_regions.push_back(BoundingBox::from_corners(r));
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<BoundingBox> gts_of(const Dataset& data, std::size_t i) {
  std::vector<BoundingBox> out;
  for (const auto* inst : data.annotations.instances_of(data.annotations.images[i].id))
    out.push_back(inst->bbox());
  return out;
}

}  // namespace

Model train(const ExperimentConfig& cfg, const Dataset& data, int threads,
            const TrainObserver& observer) {
  Model model(cfg);
  model.detector.init(mix_seed(cfg.seed, 0x696e6974ULL));
  if (data.size() == 0) throw ConfigError("training dataset is empty");

  const auto images = training_images(data);
  std::vector<PreparedImage> prepared(images.size());
  parallel_for(images.size(), threads, [&](std::size_t i) {
    prepared[i] = prepare_image(images[i], cfg.anchors, cfg.loss);
  });

  nn::Sgd sgd(cfg.schedule.sgd);
  const std::size_t batch = std::min(cfg.schedule.batch_size, images.size());
  std::size_t step = 0;
  for (int epoch = 0; epoch < cfg.schedule.sgd.epochs; ++epoch) {
    std::vector<std::size_t> order(images.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, 0x10000ULL + static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng() % i)]);
    for (std::size_t start = 0; start + batch <= order.size(); start += batch) {
      if (cfg.schedule.max_steps && step >= cfg.schedule.max_steps) return model;
      std::vector<const PreparedImage*> members;
      for (std::size_t k = start; k < start + batch; ++k) members.push_back(&prepared[order[k]]);
      LossComponents lc;
      try {
        lc = training_step(model.detector, sgd, members, cfg.loss,
                           mix_seed(cfg.seed, 0x100000000ULL + step), threads);
      } catch (const DivergenceError& e) {
        throw DivergenceError(std::string(e.what()) + " at step " + std::to_string(step) +
                              " (epoch " + std::to_string(epoch) + ")");
      }
      if (observer) observer({step, epoch, lc});
      ++step;
    }
  }
  return model;
}

namespace {

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

std::string train_log_csv(const std::vector<TrainLogRow>& rows) {
  std::string out = "step,epoch,loss_cls,loss_loc,loss_nwd,loss_total\n";
  for (const auto& r : rows)
    out += std::to_string(r.step) + "," + std::to_string(r.epoch) + "," + fmt_double(r.loss.cls) +
           "," + fmt_double(r.loss.loc) + "," + fmt_double(r.loss.nwd) + "," +
           fmt_double(r.loss.total) + "\n";
  return out;
}

std::vector<Proposal> raw_proposals(const Model& model, const GrayImage& image, HeadOutput* out) {
  const AnchorGrid grid = AnchorGrid::for_image(image.width, image.height, Detector::kStride,
                                                model.config.anchors.scales,
                                                model.config.anchors.aspect_ratios);
  const auto anchors = generate_anchors(grid);
  HeadOutput head = model.detector.forward(image_tensor(image.width, image.height, image.pixels));
  auto proposals = head_to_proposals(head, grid, anchors, model.config.loss.weights);
  if (out) *out = std::move(head);
  return proposals;
}

namespace {

ojson bucket_json(const BucketedMetric& m) {
  auto opt = [](const std::optional<double>& v) { return v ? ojson(*v) : ojson(nullptr); };
  ojson j;
  j["all"] = opt(m.all);
  j["small"] = opt(m.small);
  j["medium"] = opt(m.medium);
  j["large"] = opt(m.large);
  ojson cats = ojson::object();
  for (const auto& [k, v] : m.per_category) cats[k] = v;
  j["per_category"] = std::move(cats);
  return j;
}

}  // namespace

std::string EvalReport::to_json() const {
  ojson j;
  j["images"] = images;
  j["instances"] = instances;
  j["detections"] = detections;
  j["ap"] = bucket_json(ap);
  j["ar"] = bucket_json(ar);
  return j.dump(2) + "\n";
}

EvalReport evaluate(const Model& model, const Dataset& data, int threads) {
  if (data.size() == 0) throw ConfigError("evaluation dataset is empty");
  std::vector<std::vector<Proposal>> per_image(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) {
    per_image[i] = filter_proposals(raw_proposals(model, data.pixels[i]), model.config.proposals.test);
  });
  std::vector<Detection> dets;
  std::vector<GroundTruth> gts;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const int id = data.annotations.images[i].id;
    for (const auto& p : per_image[i]) dets.push_back({id, p.box, score_of(p, model.config.proposals.test.key), "lesion"});
    for (const auto* inst : data.annotations.instances_of(id)) gts.push_back({id, inst->bbox(), inst->category});
  }
  // detections carry no class; score them against every category present
  std::vector<Detection> all_dets;
  std::vector<std::string> cats;
  for (const auto& g : gts)
    if (std::find(cats.begin(), cats.end(), g.category) == cats.end()) cats.push_back(g.category);
  if (cats.empty()) cats.push_back("lesion");
  for (const auto& cat : cats)
    for (auto d : dets) {
      d.category = cat;
      all_dets.push_back(d);
    }
  EvalReport r;
  r.images = data.size();
  r.instances = gts.size();
  r.detections = dets.size();
  r.ap = average_precision_table(all_dets, gts, model.config.eval);
  r.ar = average_recall_table(all_dets, gts, model.config.eval);
  return r;
}

AnalysisReport analyze(const Model& model, const Dataset& data, int threads) {
  if (data.size() == 0) throw ConfigError("analysis dataset is empty");
  std::vector<ScoredImage> scored(data.size());
  std::vector<ImageProposals> proposals(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) {
    HeadOutput out;
    auto raw = raw_proposals(model, data.pixels[i], &out);
    const auto& img = data.pixels[i];
    scored[i].grid = AnchorGrid::for_image(img.width, img.height, Detector::kStride,
                                           model.config.anchors.scales,
                                           model.config.anchors.aspect_ratios);
    scored[i].s_cls.resize(out.cls_logits.size());
    for (std::size_t k = 0; k < out.cls_logits.size(); ++k)
      scored[i].s_cls[k] = nn::sigmoid(out.cls_logits.values[k]);
    scored[i].gts = gts_of(data, i);
    proposals[i].gts = scored[i].gts;
    for (auto& p : filter_proposals(raw, model.config.proposals.train)) {
      double best = 0.0;
      for (const auto& g : proposals[i].gts) best = std::max(best, iou(p.box, g));
      if (model.config.analysis.correlation_min_iou <= 0.0 ||
          best >= model.config.analysis.correlation_min_iou)
        proposals[i].proposals.push_back(p);
    }
  });
  return {confidence_gradient_curve(scored, model.config.analysis.max_distance),
          score_iou_correlation(proposals)};
}

std::string gradient_curves_csv(const std::vector<std::pair<std::string, GradientCurve>>& curves) {
  std::string out = "model,distance,delta_s_cls,samples\n";
  for (const auto& [label, c] : curves)
    for (std::size_t i = 0; i < c.distances.size(); ++i)
      out += label + "," + std::to_string(c.distances[i]) + "," + fmt_double(c.delta_scores[i]) + "," +
             std::to_string(c.samples[i]) + "\n";
  return out;
}

std::string correlations_csv(const std::vector<std::pair<std::string, ScoreIouCorrelation>>& rows) {
  std::string out = "model,proposals,pearson_cls_iou,pearson_nwd_iou,pearson_final_iou\n";
  for (const auto& [label, r] : rows)
    out += label + "," + std::to_string(r.count) + "," + fmt_double(r.cls) + "," +
           (r.nwd ? fmt_double(*r.nwd) : std::string{}) + "," + fmt_double(r.final_score) + "\n";
  return out;
}

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::string svg_header(int w, int h) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) + "\" height=\"" +
         std::to_string(h) + "\" font-family=\"sans-serif\" font-size=\"12\">\n"
         "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

}  // namespace

std::string gradient_curves_svg(const std::vector<std::pair<std::string, GradientCurve>>& curves) {
  const int W = 480, H = 320, L = 60, R = 20, T = 20, B = 40;
  double lo = 0.0, hi = 0.0;
  int max_x = 1;
  for (const auto& [_, c] : curves) {
    for (double v : c.delta_scores) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (!c.distances.empty()) max_x = std::max(max_x, c.distances.back());
  }
  if (hi - lo < 1e-9) lo -= 1.0;
  auto px = [&](double x) { return L + (W - L - R) * x / max_x; };
  auto py = [&](double y) { return T + (H - T - B) * (hi - y) / (hi - lo); };
  std::string s = svg_header(W, H);
  s += "<line x1=\"" + fmt_double(L) + "\" y1=\"" + fmt_double(py(0)) + "\" x2=\"" + fmt_double(W - R) +
       "\" y2=\"" + fmt_double(py(0)) + "\" stroke=\"#999\"/>\n";
  s += "<text x=\"" + std::to_string(W / 2) + "\" y=\"" + std::to_string(H - 8) +
       "\" text-anchor=\"middle\">Manhattan distance</text>\n";
  s += "<text x=\"14\" y=\"" + std::to_string(H / 2) + "\" transform=\"rotate(-90 14 " +
       std::to_string(H / 2) + ")\" text-anchor=\"middle\">delta s_cls</text>\n";
  s += "<text x=\"" + std::to_string(L - 6) + "\" y=\"" + fmt_double(py(lo) + 4) +
       "\" text-anchor=\"end\">" + fmt_double(lo) + "</text>\n";
  for (std::size_t k = 0; k < curves.size(); ++k) {
    const auto& [label, c] = curves[k];
    const char* color = kPalette[k % 6];
    std::string pts;
    for (std::size_t i = 0; i < c.distances.size(); ++i)
      pts += fmt_double(px(c.distances[i])) + "," + fmt_double(py(c.delta_scores[i])) + " ";
    s += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"2\" points=\"" +
         pts + "\"/>\n";
    s += "<text x=\"" + std::to_string(W - R - 120) + "\" y=\"" + std::to_string(T + 16 * (k + 1)) +
         "\" fill=\"" + color + "\">" + label + "</text>\n";
  }
  return s + "</svg>\n";
}

std::string correlations_svg(const std::vector<std::pair<std::string, ScoreIouCorrelation>>& rows) {
  const int bar = 22, gap = 14, L = 160;
  const int H = 30 + static_cast<int>(rows.size()) * (3 * bar + gap);
  const int W = 480;
  std::string s = svg_header(W, H);
  int y = 20;
  for (const auto& [label, r] : rows) {
    const std::pair<const char*, std::optional<double>> bars[] = {
        {"s_cls", r.cls}, {"p_nwd", r.nwd}, {"s_final", r.final_score}};
    for (std::size_t k = 0; k < 3; ++k) {
      const double v = bars[k].second.value_or(0.0);
      const double len = std::max(0.0, v) * (W - L - 60);
      s += "<text x=\"" + std::to_string(L - 6) + "\" y=\"" + std::to_string(y + 15) +
           "\" text-anchor=\"end\">" + label + " " + bars[k].first + "</text>\n";
      s += "<rect x=\"" + std::to_string(L) + "\" y=\"" + std::to_string(y) + "\" width=\"" +
           fmt_double(len) + "\" height=\"" + std::to_string(bar - 4) + "\" fill=\"" + kPalette[k] +
           "\"/>\n";
      s += "<text x=\"" + fmt_double(L + len + 4) + "\" y=\"" + std::to_string(y + 15) + "\">" +
           (bars[k].second ? fmt_double(v) : std::string("n/a")) + "</text>\n";
      y += bar;
    }
    y += gap;
  }
  return s + "</svg>\n";
}

std::vector<AblationVariant> ablation_variants(const ExperimentConfig& base) {
  std::vector<AblationVariant> out;
  for (int kernel : {3, 1}) {
    ExperimentConfig c = base;
    c.head.variant = HeadVariant::Sadh;
    c.head.nwd_branch = false;
    c.head.cls_kernel = kernel;
    out.push_back({1, "head.cls_kernel", std::to_string(kernel) + "x" + std::to_string(kernel), c});
  }
  for (auto loss : {ConfidenceLoss::L1, ConfidenceLoss::Sbce}) {
    ExperimentConfig c = base;
    c.head.variant = HeadVariant::VanillaRpn;
    c.head.nwd_branch = true;
    c.loss.confidence_metric = BoxMetric::Nwd;
    c.loss.confidence_loss = loss;
    out.push_back({2, "loss.confidence_loss", std::string(to_string(loss)), c});
  }
  for (auto metric : {BoxMetric::Iou, BoxMetric::Giou, BoxMetric::Diou, BoxMetric::Nwd}) {
    ExperimentConfig c = base;
    c.head.variant = HeadVariant::VanillaRpn;
    c.head.nwd_branch = true;
    c.loss.confidence_loss = ConfidenceLoss::Sbce;
    c.loss.confidence_metric = metric;
    out.push_back({3, "loss.confidence_metric", std::string(to_string(metric)), c});
  }
  return out;
}

std::vector<AblationRow> ablate(const ExperimentConfig& base, const std::vector<std::uint64_t>& seeds,
                                int threads, const std::vector<int>& groups) {
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  std::vector<AblationRow> rows;
  const auto variants = ablation_variants(base);
  for (std::uint64_t seed : seeds) {
    ExperimentConfig seeded = base;
    seeded.seed = seed;
    const Dataset train_set = synthesize(seeded, Split::Train, threads);
    const Dataset test_set = synthesize(seeded, Split::Test, threads);
    // identical configs (same run under two groups) are trained once
    std::vector<std::pair<std::uint64_t, EvalReport>> done;
    for (const auto& v : variants) {
      if (std::find(groups.begin(), groups.end(), v.group) == groups.end()) continue;
      ExperimentConfig c = v.config;
      c.seed = seed;
      const std::uint64_t full = c.hash();
      auto hit = std::find_if(done.begin(), done.end(), [&](const auto& d) { return d.first == full; });
      if (hit == done.end()) {
        const Model m = train(c, train_set, threads);
        done.emplace_back(full, evaluate(m, test_set, threads));
        hit = done.end() - 1;
      }
      AblationRow row;
      row.group = v.group;
      row.axis = v.axis;
      row.value = v.value;
      row.seed = seed;
      row.control_hash = c.hash({v.axis, "seed"});
      row.ap = hit->second.ap.all.value_or(0.0);
      row.ar = hit->second.ar.all.value_or(0.0);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "group,axis,value,seed,control_hash,ap,ar\n";
  for (const auto& r : rows) {
    char hash[20];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(r.control_hash));
    out += std::to_string(r.group) + "," + r.axis + "," + r.value + "," + std::to_string(r.seed) + "," +
           hash + "," + fmt_double(r.ap) + "," + fmt_double(r.ar) + "\n";
  }
  return out;
}

}  // namespace propq
