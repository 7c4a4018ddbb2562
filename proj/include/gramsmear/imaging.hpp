#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

namespace gramsmear {

/// 8-bit RGB raster, row-major, interleaved channels.
struct RasterImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;

  RasterImage() = default;
  RasterImage(int w, int h, std::uint8_t fill = 0);

  std::uint8_t& at(int row, int col, int ch) { return data[(static_cast<std::size_t>(row) * width + col) * 3 + ch]; }
  std::uint8_t at(int row, int col, int ch) const { return data[(static_cast<std::size_t>(row) * width + col) * 3 + ch]; }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  bool operator==(const RasterImage&) const = default;
};

/// Per-pixel instance ids; 0 is background, instances are 1..count.
struct InstanceMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint32_t> labels;

  InstanceMask() = default;
  InstanceMask(int w, int h);

  std::uint32_t& at(int row, int col) { return labels[static_cast<std::size_t>(row) * width + col]; }
  std::uint32_t at(int row, int col) const { return labels[static_cast<std::size_t>(row) * width + col]; }
  std::uint32_t instance_count() const;
  bool operator==(const InstanceMask&) const = default;
};

struct SegmenterParams {
  double chroma_threshold = 60.0;
  int min_area = 12;
  int max_area = 1 << 20;
  int connectivity = 8;
};

void validate(const SegmenterParams& p);

struct Tile {
  int row_offset = 0;
  int col_offset = 0;
  int width = 0;
  int height = 0;
  bool operator==(const Tile&) const = default;
};

struct TilePlan {
  int tile_size = 1024;
  int image_width = 0;
  int image_height = 0;
  std::vector<Tile> tiles;
};

enum class DiameterMode { feret, chord };

/// Row-major tile cover; edge tiles are clamped to the image bounds.
TilePlan tile_image(int width, int height, int tile_size = 1024);
TilePlan tile_image(const RasterImage& img, int tile_size = 1024);

RasterImage crop(const RasterImage& img, const Tile& tile);

/// Per-channel median of the image.
std::array<double, 3> estimate_background(const RasterImage& img);

InstanceMask segment_baseline(const RasterImage& img, const SegmenterParams& p);

/// Same as segment_baseline but against a supplied background colour.
InstanceMask segment_baseline(const RasterImage& img, const SegmenterParams& p,
                              const std::array<double, 3>& background);

/// Places tile masks at their offsets, unifies instances that are 8-adjacent
/// across tile borders, and relabels in raster order of first pixel.
InstanceMask merge_tile_masks(const std::vector<InstanceMask>& tile_masks, const TilePlan& plan);
/// As above with 4-adjacency when connectivity == 4.
InstanceMask merge_tile_masks(const std::vector<InstanceMask>& tile_masks, const TilePlan& plan, int connectivity);

/// Tiled segmentation: one background estimate for the whole image, per-tile
/// thresholding and labelling, merge, then the area filter on merged instances.
/// Produces the same partition as segment_baseline on the whole image.
InstanceMask segment_tiled(const RasterImage& img, const SegmenterParams& p, int tile_size = 1024);

/// Drops instances outside [min_area, max_area] and relabels contiguously.
InstanceMask filter_by_area(const InstanceMask& mask, int min_area, int max_area);

/// Linear pixel indices of every instance, indexed by id - 1, each list in raster order.
std::vector<std::vector<std::size_t>> instance_pixels(const InstanceMask& mask);

double mask_diameter(const InstanceMask& mask, std::uint32_t id, DiameterMode mode = DiameterMode::feret);

/// Diameter of a pixel set given as (row, col) coordinates.
double pixel_set_diameter(const std::vector<std::pair<int, int>>& pixels, DiameterMode mode = DiameterMode::feret);

/// Removes instances with diameter strictly greater than max_diameter.
InstanceMask filter_by_diameter(const InstanceMask& mask, double max_diameter,
                                DiameterMode mode = DiameterMode::feret);

std::pair<double, double> centroid(const InstanceMask& mask, std::uint32_t id);

/// Relabels ids to 1..N in raster order of each instance's first pixel.
InstanceMask relabel_raster_order(const InstanceMask& mask);

}  // namespace gramsmear
