#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "propq/annotations.hpp"

namespace propq {

struct TileOrigin {
  int x0 = 0;
  int y0 = 0;
  friend bool operator==(const TileOrigin&, const TileOrigin&) = default;
};

/// Integer pixel rectangle, half-open [x0, x1) x [y0, y1).
struct PixelRect {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  friend bool operator==(const PixelRect&, const PixelRect&) = default;
};

/// ceil(length / tile) origins along one axis, first at 0 and last at
/// length - tile, the rest rounded from equal spacing. A single origin 0 when
/// the axis fits in one tile.
std::vector<int> plan_axis(int length, int tile_size);

/// Origins for the whole image, row by row.
std::vector<TileOrigin> plan_tiles(int width, int height, int tile_size);

struct TileDisposition {
  std::vector<std::size_t> kept;    // instance indices fully inside the tile
  std::vector<std::size_t> masked;  // instance indices only partly inside
  std::vector<PixelRect> mask_regions;  // tile coordinates, parallel to `masked`
};

/// Classifies every instance box against every tile of `plan`.
std::vector<TileDisposition> dispose_instances(std::span<const TileOrigin> plan, int tile_size,
                                               std::span<const Corners> instances);

/// Sets every pixel inside `regions` to `value`.
void apply_masks(GrayImage& tile, std::span<const PixelRect> regions, std::uint8_t value);

/// Copy of the tile at `origin`, padded with `pad` where it leaves the image.
GrayImage crop_tile(const GrayImage& src, TileOrigin origin, int tile_size, std::uint8_t pad = 0);

enum class MaskMode { Masked, KeepPartial };
std::string_view to_string(MaskMode m);
MaskMode parse_mask_mode(std::string_view name);

struct TileOptions {
  int tile_size = 1024;
  MaskMode mode = MaskMode::Masked;
  std::uint8_t mask_value = 0;

  void validate() const;
};

struct TileRecord {
  int source_image_id = 0;
  TileOrigin origin;
  std::vector<PixelRect> masks;
};

struct TiledDataset {
  AnnotationSet annotations;
  std::vector<TileRecord> tiles;  // parallel to annotations.images
};

/// Tile-level annotation set. Tiles are ordered by (source image, row, column).
/// Masked mode keeps only whole instances and records partial ones as masks
/// and ignore regions; keep-partial mode clips partial instances to the tile.
TiledDataset emit_tiled_dataset(const AnnotationSet& source, const TileOptions& opts);

/// Crops, masks and writes every tile plus `annotations.json` to `out_dir`.
/// Source pixels are read from `image_dir / file_name`.
TiledDataset write_tiled_dataset(const AnnotationSet& source, const std::filesystem::path& image_dir,
                                 const TileOptions& opts, const std::filesystem::path& out_dir);

}  // namespace propq
