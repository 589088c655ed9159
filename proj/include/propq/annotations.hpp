#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "propq/boxgeom.hpp"

namespace propq {

struct ImageRecord {
  int id = 0;
  std::string file_name;
  int width = 0;
  int height = 0;
  // Pixel regions that must not be used as background during training.
  std::vector<Corners> ignore_regions;
  // Set on tiles: where the tile came from.
  std::optional<int> source_image_id;
  std::optional<std::pair<int, int>> origin;
};

struct Instance {
  int id = 0;
  int image_id = 0;
  std::string category = "lesion";
  Corners box;
  std::vector<double> polygon;  // flat x0,y0,x1,y1,... in image pixels
  std::optional<double> contrast;

  BoundingBox bbox() const { return BoundingBox::from_corners(box); }
};

/// Images plus ground-truth instances. Serialized as one JSON document:
///
///   {"images":      [{"id", "file_name", "width", "height",
///                     "ignore_regions"?, "source_image_id"?, "origin"?}],
///    "annotations": [{"id", "image_id", "category", "bbox": [x0,y0,x1,y1],
///                     "segmentation"?, "contrast"?}]}
struct AnnotationSet {
  std::vector<ImageRecord> images;
  std::vector<Instance> instances;

  /// Throws when an instance references a missing image or leaves its bounds.
  void validate() const;

  const ImageRecord& image(int id) const;
  std::vector<const Instance*> instances_of(int image_id) const;

  std::string to_json() const;
  static AnnotationSet from_json(std::string_view text, const std::string& origin = "<memory>");

  void save(const std::filesystem::path& path) const;
  static AnnotationSet load(const std::filesystem::path& path);
};

/// 8-bit single channel image, row-major.
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  GrayImage() = default;
  GrayImage(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill) {}

  std::uint8_t& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

/// Binary PGM (P5, maxval 255).
void write_pgm(const std::filesystem::path& path, const GrayImage& img);
GrayImage read_pgm(const std::filesystem::path& path);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

}  // namespace propq
