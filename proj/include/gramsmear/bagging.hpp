#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gramsmear/image_io.hpp"
#include "gramsmear/imaging.hpp"

namespace gramsmear {

enum class Mode { bacteria, fungi };

std::string to_string(Mode mode);
Mode mode_from_string(const std::string& s);

inline constexpr int kBacteriaPatch = 96;
inline constexpr int kFungiCrop = 800;
inline constexpr int kFungiPatch = 224;
inline constexpr double kFungiMaxDiameter = 400.0;

inline int patch_size(Mode mode) { return mode == Mode::bacteria ? kBacteriaPatch : kFungiPatch; }

struct Patch {
  RasterImage pixels;
  int center_row = 0;
  int center_col = 0;
  std::uint32_t source_instance = 0;
  std::string patch_id;
  /// Optional larger window around the same centre, used for jittered re-crops.
  /// Side is patch side + 2 * margin; empty when not extracted.
  RasterImage context;
};

struct Bag {
  std::string bag_id;
  std::string patient_id;
  std::string image_ref;
  int label = 0;
  Mode mode = Mode::bacteria;
  std::vector<Patch> patches;
  bool empty = false;
};

struct ManifestEntry {
  std::string bag_id;
  std::string patient_id;
  int label = 0;
  std::string image;
  std::string mask;
  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  Mode mode = Mode::bacteria;
  std::vector<std::string> category_names;
  std::vector<ManifestEntry> entries;

  int category_count() const { return static_cast<int>(category_names.size()); }
  int category_index(const std::string& name) const;
  /// Throws DataError on duplicate bag ids or out-of-range labels.
  void validate() const;
};

/// Writes `path` as JSON Lines plus the `<stem>.categories.json` sidecar.
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::filesystem::path& path);
std::filesystem::path categories_path(const std::filesystem::path& manifest_path);

/// Window of the given size whose top-left is (top, left); out-of-range
/// coordinates are reflected (mirror without repeating the edge pixel).
RasterImage crop_reflect(const RasterImage& img, int top, int left, int height, int width);

/// Half-pixel-centred bilinear resampling, rounded to nearest.
RasterImage bilinear_resize(const RasterImage& img, int out_h, int out_w);

std::string make_patch_id(const std::string& bag_id, std::uint32_t instance);

/// One 96x96 patch per instance, centred at the rounded centroid, in id order.
/// context_margin > 0 also stores the (96 + 2m)-sided context window.
std::vector<Patch> extract_bacteria_patches(const RasterImage& img, const InstanceMask& mask,
                                            const std::string& bag_id = "", int context_margin = 0);

/// 800x800 reflect-padded crop per instance, downscaled to 224x224.
std::vector<Patch> extract_fungi_patches(const RasterImage& img, const InstanceMask& mask,
                                         const std::string& bag_id = "");

/// Patch ids and centres only, for frozen-embedding pipelines that never touch pixels.
std::vector<Patch> enumerate_patches(const InstanceMask& mask, const std::string& bag_id);

Bag build_bag(const ManifestEntry& entry, Mode mode, std::vector<Patch> patches);

struct LoadOptions {
  bool with_pixels = true;
  int context_margin = 0;
  /// Run segment_baseline instead of reading the entry's mask file.
  std::optional<SegmenterParams> segmenter;
  int threads = 1;
};

/// Applies the fungi diameter filter when relevant, then extracts patches
/// (or patch ids only when !options.with_pixels) and builds the bag.
Bag extract_bag(const ManifestEntry& entry, Mode mode, const RasterImage& img, InstanceMask mask,
                const LoadOptions& options);

/// Reads every entry's image and mask (relative paths resolve against base_dir)
/// and extracts the bag. Empty bags are returned flagged.
std::vector<Bag> load_bags(const DatasetManifest& manifest, const std::filesystem::path& base_dir,
                           const LoadOptions& options);

/// Directory of PNGs plus index.json mapping patch_id -> file.
void write_patch_directory(const std::filesystem::path& dir, const std::vector<Patch>& patches);
std::vector<Patch> read_patch_directory(const std::filesystem::path& dir);

/// "BAGS", u32 LE count, then (u32 LE length, PNG bytes) per patch in index order.
Bytes pack_patches(const std::vector<Patch>& patches);
std::vector<RasterImage> unpack_patches(const Bytes& blob);

}  // namespace gramsmear
