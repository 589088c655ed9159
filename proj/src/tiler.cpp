#include "propq/tiler.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "propq/error.hpp"

namespace propq {

std::vector<int> plan_axis(int length, int tile_size) {
  if (length < 1 || tile_size < 1) throw InvalidArgument("tiling needs positive dimensions");
  const int n = (length + tile_size - 1) / tile_size;
  if (n == 1) return {0};
  std::vector<int> origins(static_cast<std::size_t>(n));
  const double span = static_cast<double>(length - tile_size);
  for (int i = 0; i < n; ++i)
    origins[static_cast<std::size_t>(i)] = static_cast<int>(std::lround(i * span / (n - 1)));
  return origins;
}

std::vector<TileOrigin> plan_tiles(int width, int height, int tile_size) {
  const auto xs = plan_axis(width, tile_size);
  const auto ys = plan_axis(height, tile_size);
  std::vector<TileOrigin> out;
  out.reserve(xs.size() * ys.size());
  for (int y : ys)
    for (int x : xs) out.push_back({x, y});
  return out;
}

std::vector<TileDisposition> dispose_instances(std::span<const TileOrigin> plan, int tile_size,
                                               std::span<const Corners> instances) {
  std::vector<TileDisposition> out(plan.size());
  for (std::size_t t = 0; t < plan.size(); ++t) {
    const double tx0 = plan[t].x0, ty0 = plan[t].y0;
    const double tx1 = tx0 + tile_size, ty1 = ty0 + tile_size;
    for (std::size_t i = 0; i < instances.size(); ++i) {
      const Corners& b = instances[i];
      const double ix0 = std::max(b.x0, tx0), iy0 = std::max(b.y0, ty0);
      const double ix1 = std::min(b.x1, tx1), iy1 = std::min(b.y1, ty1);
      if (!(ix1 > ix0) || !(iy1 > iy0)) continue;
      if (b.x0 >= tx0 && b.y0 >= ty0 && b.x1 <= tx1 && b.y1 <= ty1) {
        out[t].kept.push_back(i);
        continue;
      }
      out[t].masked.push_back(i);
      // every pixel the box touches, in tile coordinates
      out[t].mask_regions.push_back(
          {std::max(0, static_cast<int>(std::floor(ix0 - tx0))),
           std::max(0, static_cast<int>(std::floor(iy0 - ty0))),
           std::min(tile_size, static_cast<int>(std::ceil(ix1 - tx0))),
           std::min(tile_size, static_cast<int>(std::ceil(iy1 - ty0)))});
    }
  }
  return out;
}

void apply_masks(GrayImage& tile, std::span<const PixelRect> regions, std::uint8_t value) {
  for (const auto& r : regions) {
    if (r.x0 < 0 || r.y0 < 0 || r.x1 > tile.width || r.y1 > tile.height || r.x0 > r.x1 ||
        r.y0 > r.y1)
      throw InvalidArgument("mask region [" + std::to_string(r.x0) + "," + std::to_string(r.y0) +
                            "," + std::to_string(r.x1) + "," + std::to_string(r.y1) +
                            ") outside tile");
    for (int y = r.y0; y < r.y1; ++y)
      std::fill_n(tile.pixels.begin() + static_cast<std::ptrdiff_t>(y) * tile.width + r.x0,
                  r.x1 - r.x0, value);
  }
}

GrayImage crop_tile(const GrayImage& src, TileOrigin origin, int tile_size, std::uint8_t pad) {
  GrayImage out(tile_size, tile_size, pad);
  const int w = std::min(tile_size, src.width - origin.x0);
  const int h = std::min(tile_size, src.height - origin.y0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.at(x, y) = src.at(origin.x0 + x, origin.y0 + y);
  return out;
}

std::string_view to_string(MaskMode m) { return m == MaskMode::Masked ? "masked" : "keep-partial"; }

MaskMode parse_mask_mode(std::string_view name) {
  if (name == "masked") return MaskMode::Masked;
  if (name == "keep-partial") return MaskMode::KeepPartial;
  throw InvalidArgument("unknown mask mode '" + std::string(name) + "'");
}

void TileOptions::validate() const {
  if (tile_size < 1) throw InvalidArgument("tile size must be positive");
}

namespace {

std::string tile_name(const std::string& file_name, int image_id, std::size_t row, std::size_t col) {
  std::string stem = std::filesystem::path(file_name).stem().string();
  if (stem.empty()) stem = "image" + std::to_string(image_id);
  return stem + "_r" + std::to_string(row) + "_c" + std::to_string(col) + ".pgm";
}

}  // namespace

TiledDataset emit_tiled_dataset(const AnnotationSet& source, const TileOptions& opts) {
  opts.validate();
  source.validate();
  TiledDataset out;
  int next_image = 1;
  int next_instance = 1;
  for (const auto& img : source.images) {
    const auto xs = plan_axis(img.width, opts.tile_size);
    const auto plan = plan_tiles(img.width, img.height, opts.tile_size);
    const auto members = source.instances_of(img.id);
    std::vector<Corners> boxes;
    boxes.reserve(members.size());
    for (const auto* inst : members) boxes.push_back(inst->box);
    const auto disp = dispose_instances(plan, opts.tile_size, boxes);

    for (std::size_t t = 0; t < plan.size(); ++t) {
      const TileOrigin o = plan[t];
      ImageRecord rec;
      rec.id = next_image++;
      rec.file_name = tile_name(img.file_name, img.id, t / xs.size(), t % xs.size());
      rec.width = opts.tile_size;
      rec.height = opts.tile_size;
      rec.source_image_id = img.id;
      rec.origin = std::make_pair(o.x0, o.y0);
      TileRecord tile{img.id, o, {}};

      auto shifted = [&](const Corners& c) {
        return Corners{c.x0 - o.x0, c.y0 - o.y0, c.x1 - o.x0, c.y1 - o.y0};
      };
      auto emit = [&](const Instance& src, const Corners& box, bool with_polygon) {
        Instance inst;
        inst.id = next_instance++;
        inst.image_id = rec.id;
        inst.category = src.category;
        inst.box = box;
        inst.contrast = src.contrast;
        if (with_polygon) {
          inst.polygon = src.polygon;
          for (std::size_t k = 0; k + 1 < inst.polygon.size(); k += 2) {
            inst.polygon[k] -= o.x0;
            inst.polygon[k + 1] -= o.y0;
          }
        }
        out.annotations.instances.push_back(std::move(inst));
      };

      // kept and partial instances are emitted in source order
      std::vector<std::pair<std::size_t, bool>> order;
      for (std::size_t i : disp[t].kept) order.emplace_back(i, true);
      for (std::size_t i : disp[t].masked) order.emplace_back(i, false);
      std::sort(order.begin(), order.end());
      for (auto [i, whole] : order) {
        const Instance& src = *members[i];
        if (whole) {
          emit(src, shifted(src.box), true);
        } else if (opts.mode == MaskMode::KeepPartial) {
          Corners c = shifted(src.box);
          c.x0 = std::max(c.x0, 0.0);
          c.y0 = std::max(c.y0, 0.0);
          c.x1 = std::min(c.x1, static_cast<double>(opts.tile_size));
          c.y1 = std::min(c.y1, static_cast<double>(opts.tile_size));
          emit(src, c, false);
        }
      }
      if (opts.mode == MaskMode::Masked) {
        tile.masks = disp[t].mask_regions;
        for (const auto& m : tile.masks)
          rec.ignore_regions.push_back({static_cast<double>(m.x0), static_cast<double>(m.y0),
                                        static_cast<double>(m.x1), static_cast<double>(m.y1)});
      }
      out.annotations.images.push_back(std::move(rec));
      out.tiles.push_back(std::move(tile));
    }
  }
  return out;
}

TiledDataset write_tiled_dataset(const AnnotationSet& source, const std::filesystem::path& image_dir,
                                 const TileOptions& opts, const std::filesystem::path& out_dir) {
  TiledDataset tiled = emit_tiled_dataset(source, opts);
  std::filesystem::create_directories(out_dir / "images");
  std::size_t t = 0;
  for (const auto& img : source.images) {
    const GrayImage pixels = read_pgm(image_dir / img.file_name);
    if (pixels.width != img.width || pixels.height != img.height)
      throw IoError((image_dir / img.file_name).string() + ": pixel size " +
                    std::to_string(pixels.width) + "x" + std::to_string(pixels.height) +
                    " disagrees with annotation " + std::to_string(img.width) + "x" +
                    std::to_string(img.height));
    for (; t < tiled.tiles.size() && tiled.tiles[t].source_image_id == img.id; ++t) {
      GrayImage tile = crop_tile(pixels, tiled.tiles[t].origin, opts.tile_size, opts.mask_value);
      apply_masks(tile, tiled.tiles[t].masks, opts.mask_value);
      write_pgm(out_dir / "images" / tiled.annotations.images[t].file_name, tile);
    }
  }
  tiled.annotations.save(out_dir / "annotations.json");
  return tiled;
}

}  // namespace propq
