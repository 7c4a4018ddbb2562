#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gramsmear/bagging.hpp"
#include "gramsmear/model.hpp"

namespace gramsmear {

enum class CellShape { rod, coccus, pseudohypha };
enum class Arrangement { single, pair, chain, cluster };
enum class Gram { positive, negative };

struct MorphotypeSpec {
  std::string name;
  CellShape shape = CellShape::coccus;
  Arrangement arrangement = Arrangement::single;
  Gram gram = Gram::positive;
  /// Coccus diameter, rod length or pseudohypha total length (px).
  double size_mean = 9.0;
  double size_std = 0.5;
  /// Rod and pseudohypha thickness (px).
  double width = 7.0;
  int cells_min = 5;
  int cells_max = 5;
  /// Cells per chain or cluster.
  int group_min = 3;
  int group_max = 5;

  void validate() const;
};

/// A category draws each image from one of its morphotypes (one per patient).
struct CategorySpec {
  std::string name;
  std::vector<MorphotypeSpec> morphotypes;
};

struct PatientStyle {
  std::string patient_id;
  /// Added to every stained-cell channel.
  double hue_shift = 0.0;
  /// Added to the background.
  double brightness = 0.0;
  double blur_sigma = 0.5;
  double density_multiplier = 1.0;
};

/// Filled capsule: every pixel centre within `radius` of the segment (r0,c0)-(r1,c1).
struct Capsule {
  double r0 = 0, c0 = 0, r1 = 0, c1 = 0;
  double radius = 0;
  bool operator==(const Capsule&) const = default;
};

/// Annulus distractor (red-cell ghost): pixel centres with inner <= distance <= outer.
struct Ring {
  double r = 0, c = 0;
  double inner = 0, outer = 0;
};

struct CellPrimitive {
  std::vector<Capsule> parts;
  Gram gram = Gram::positive;
};

struct SceneTruth {
  RasterImage image;
  InstanceMask mask;
  int label = 0;
  /// primitives[i] generated mask instance i + 1.
  std::vector<CellPrimitive> primitives;
  std::vector<Ring> distractors;
};

struct SceneParams {
  int width = 384;
  int height = 384;
  int distractors_min = 2;
  int distractors_max = 5;
  double noise_std = 3.0;
  int gap = 3;
};

/// Union of the capsules' pixels, clipped to the image, as linear indices in raster order.
std::vector<std::size_t> rasterize(const std::vector<Capsule>& parts, int width, int height);

std::vector<std::size_t> rasterize(const Ring& ring, int width, int height);

SceneTruth generate_image(const MorphotypeSpec& spec, const PatientStyle& style, std::uint64_t seed,
                          const SceneParams& scene = {}, int label = 0);

struct DatasetSpec {
  Mode mode = Mode::bacteria;
  std::vector<CategorySpec> categories;
  int patients_per_category = 7;
  int images_per_patient = 10;
  std::uint64_t seed = 0;
  SceneParams scene;

  static DatasetSpec default_bacteria();
  static DatasetSpec default_fungi();
  void validate() const;
};

nlohmann::json to_json(const DatasetSpec& spec);
DatasetSpec dataset_spec_from_json(const nlohmann::json& j);

struct PlannedImage {
  ManifestEntry entry;
  PatientStyle style;
  MorphotypeSpec morphotype;
  std::uint64_t seed = 0;
};

/// Patients, styles and per-image seeds; image i of the plan uses stream (seed, i).
std::vector<PlannedImage> plan_dataset(const DatasetSpec& spec);
DatasetManifest plan_manifest(const DatasetSpec& spec, const std::vector<PlannedImage>& plan);
SceneTruth render(const DatasetSpec& spec, const PlannedImage& item);

/// Writes images/<bag>.png, masks/<bag>.png, manifest.jsonl (+ categories sidecar) and spec.json.
DatasetManifest generate_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir, int threads = 1);

/// Renders in memory and extracts bags directly from the generator masks.
std::pair<DatasetManifest, std::vector<Bag>> synthesize_bags(const DatasetSpec& spec, const LoadOptions& options);

/// Per-category Gaussian clusters: mean = separability * e_label, unit variance,
/// one vector per patch keyed by patch_id. Each vector depends only on
/// (seed, patch_id, label).
EmbeddingTable generate_embeddings(const std::vector<Bag>& bags, double separability, int dim, std::uint64_t seed);

}  // namespace gramsmear
