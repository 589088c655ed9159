#include "propq/annotations.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include "propq/error.hpp"
#include "json.hpp"

namespace propq {

using ojson = nlohmann::ordered_json;

namespace {

std::string image_context(const ImageRecord& img) {
  return "image " + std::to_string(img.id) + " (" + img.file_name + ")";
}

}  // namespace

void AnnotationSet::validate() const {
  std::map<int, const ImageRecord*> by_id;
  for (const auto& img : images) {
    if (img.width <= 0 || img.height <= 0)
      throw InvalidArgument(image_context(img) + " has non-positive size");
    if (!by_id.emplace(img.id, &img).second)
      throw InvalidArgument("duplicate image id " + std::to_string(img.id));
  }
  for (const auto& inst : instances) {
    auto it = by_id.find(inst.image_id);
    if (it == by_id.end())
      throw InvalidArgument("annotation " + std::to_string(inst.id) + " references unknown image " +
                            std::to_string(inst.image_id));
    const auto& b = inst.box;
    if (!(b.x1 > b.x0) || !(b.y1 > b.y0))
      throw InvalidArgument("annotation " + std::to_string(inst.id) + " has an empty box");
    const ImageRecord& img = *it->second;
    if (b.x0 < 0 || b.y0 < 0 || b.x1 > img.width || b.y1 > img.height)
      throw InvalidArgument("annotation " + std::to_string(inst.id) + " lies outside " +
                            image_context(img));
  }
}

const ImageRecord& AnnotationSet::image(int id) const {
  for (const auto& img : images)
    if (img.id == id) return img;
  throw InvalidArgument("unknown image id " + std::to_string(id));
}

std::vector<const Instance*> AnnotationSet::instances_of(int image_id) const {
  std::vector<const Instance*> out;
  for (const auto& inst : instances)
    if (inst.image_id == image_id) out.push_back(&inst);
  return out;
}

namespace {

ojson corners_json(const Corners& c) { return ojson::array({c.x0, c.y0, c.x1, c.y1}); }

Corners corners_from(const ojson& j, const std::string& ctx) {
  if (!j.is_array() || j.size() != 4) throw IoError(ctx + ": expected [x0, y0, x1, y1]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

}  // namespace

std::string AnnotationSet::to_json() const {
  ojson doc;
  ojson imgs = ojson::array();
  for (const auto& img : images) {
    ojson j;
    j["id"] = img.id;
    j["file_name"] = img.file_name;
    j["width"] = img.width;
    j["height"] = img.height;
    if (img.source_image_id) j["source_image_id"] = *img.source_image_id;
    if (img.origin) j["origin"] = ojson::array({img.origin->first, img.origin->second});
    if (!img.ignore_regions.empty()) {
      ojson regions = ojson::array();
      for (const auto& r : img.ignore_regions) regions.push_back(corners_json(r));
      j["ignore_regions"] = std::move(regions);
    }
    imgs.push_back(std::move(j));
  }
  ojson anns = ojson::array();
  for (const auto& inst : instances) {
    ojson j;
    j["id"] = inst.id;
    j["image_id"] = inst.image_id;
    j["category"] = inst.category;
    j["bbox"] = corners_json(inst.box);
    if (!inst.polygon.empty()) j["segmentation"] = inst.polygon;
    if (inst.contrast) j["contrast"] = *inst.contrast;
    anns.push_back(std::move(j));
  }
  doc["images"] = std::move(imgs);
  doc["annotations"] = std::move(anns);
  return doc.dump(1) + "\n";
}

AnnotationSet AnnotationSet::from_json(std::string_view text, const std::string& origin) {
  AnnotationSet set;
  try {
    const ojson doc = ojson::parse(text);
    for (const auto& j : doc.at("images")) {
      ImageRecord img;
      img.id = j.at("id").get<int>();
      img.file_name = j.value("file_name", std::string{});
      img.width = j.at("width").get<int>();
      img.height = j.at("height").get<int>();
      if (j.contains("source_image_id")) img.source_image_id = j["source_image_id"].get<int>();
      if (j.contains("origin"))
        img.origin = std::make_pair(j["origin"].at(0).get<int>(), j["origin"].at(1).get<int>());
      if (j.contains("ignore_regions"))
        for (const auto& r : j["ignore_regions"])
          img.ignore_regions.push_back(corners_from(r, origin + ": ignore_regions"));
      set.images.push_back(std::move(img));
    }
    for (const auto& j : doc.at("annotations")) {
      Instance inst;
      inst.id = j.at("id").get<int>();
      inst.image_id = j.at("image_id").get<int>();
      inst.category = j.value("category", std::string{"lesion"});
      inst.box = corners_from(j.at("bbox"), origin + ": annotation " + std::to_string(inst.id));
      if (j.contains("segmentation")) inst.polygon = j["segmentation"].get<std::vector<double>>();
      if (j.contains("contrast")) inst.contrast = j["contrast"].get<double>();
      set.instances.push_back(std::move(inst));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(origin + ": malformed annotation document: " + e.what());
  }
  try {
    set.validate();
  } catch (const InvalidArgument& e) {
    throw IoError(origin + ": " + e.what());
  }
  return set;
}

void AnnotationSet::save(const std::filesystem::path& path) const {
  write_text_file(path, to_json());
}

AnnotationSet AnnotationSet::load(const std::filesystem::path& path) {
  return from_json(read_text_file(path), path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P5" || w <= 0 || h <= 0 || maxval != 255)
    throw IoError(path.string() + ": not an 8-bit binary PGM");
  in.get();
  GrayImage img(w, h);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
    throw IoError(path.string() + ": truncated pixel data");
  return img;
}

}  // namespace propq
