#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gramsmear/image_io.hpp"
#include "gramsmear/imaging.hpp"

namespace gramsmear {

enum class Action { ok, clear, skip };
std::string to_string(Action a);
Action action_from_string(const std::string& s);

using Clock = std::function<std::int64_t()>;  // milliseconds since epoch
Clock system_clock_ms();

inline constexpr std::int64_t kLeaseMs = 5 * 60 * 1000;

struct ReviewItem {
  std::string item_id;
  std::string source;
  Tile tile;
  std::uint32_t instances = 0;
  SegmenterParams params;
};

struct Decision {
  std::int64_t seq = 0;
  std::string item_id;
  Action action = Action::ok;
  std::string reviewer;
  std::int64_t time_ms = 0;
};

struct StoreStats {
  int pending = 0;
  int leased = 0;
  int decided = 0;
  int ok = 0;
  int clear = 0;
  int skip = 0;
};

struct LeasedItem {
  ReviewItem item;
  std::string reviewer;
  std::int64_t lease_until = 0;
};

/// Source pixels blended with yellow on instance contour pixels (cyan where
/// yellow would leave a pixel unchanged); other pixels are copied.
RasterImage render_overlay(const RasterImage& img, const InstanceMask& mask);

/// Contour pixels: labelled pixels with a 4-neighbour of another label or outside the image.
std::vector<std::uint8_t> contour_map(const InstanceMask& mask);

/// Instance-matched IoU of one image: pairs with IoU > 0.5 are matched, the
/// score is the sum of matched IoUs over max(#gt, #pred). Both empty scores 1.
double matched_iou(const InstanceMask& gt, const InstanceMask& pred);

struct ParamGrid {
  std::vector<double> thresholds{30, 40, 50, 60, 70, 80, 90, 100, 110, 120};
  std::vector<int> min_areas{4, 8, 12, 16, 24, 32};
  std::vector<int> max_areas{2000, 5000, 1 << 20};
  int connectivity = 8;
};

nlohmann::json to_json(const ParamGrid& g);
ParamGrid param_grid_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SegmenterParams& p);
SegmenterParams segmenter_params_from_json(const nlohmann::json& j);

struct GroundTruthPair {
  std::string item_id;
  RasterImage image;
  InstanceMask mask;
};

struct RefitResult {
  SegmenterParams params;
  double score = 0.0;
  SegmenterParams incumbent;
  double incumbent_score = 0.0;
  int candidates = 0;
  int images = 0;
};

/// Mean matched IoU of segment_baseline(params) over the pairs.
double score_params(const std::vector<GroundTruthPair>& gt, const SegmenterParams& params);

/// Exhaustive search over the grid plus the incumbent. Ties go to the lowest
/// threshold, then the smallest min_area, then the smallest max_area.
RefitResult refit_segmenter(const std::vector<GroundTruthPair>& gt, const ParamGrid& grid,
                            const SegmenterParams& incumbent);

/// Directory-backed review store: items.jsonl + items/<id>/{image,mask,overlay}.png,
/// append-only decisions.jsonl, and segmenter.json holding the current parameters.
/// Materialized ground truth is a fold over the decision log. All members are thread-safe.
class AnnotationStore {
 public:
  explicit AnnotationStore(std::filesystem::path dir, Clock clock = system_clock_ms());

  const std::filesystem::path& dir() const { return dir_; }

  /// Segments each image (tiled at tile_size) and queues one item per tile.
  /// Ids hash the tile pixels and parameters; already-known ids are not re-queued.
  std::vector<std::string> propose(const std::vector<std::pair<std::string, RasterImage>>& images,
                                   const SegmenterParams& params, int tile_size = 1024);

  /// The reviewer's live lease if any, else the first pending item in queue
  /// order, leased for kLeaseMs. std::nullopt when drained.
  std::optional<LeasedItem> next(const std::string& reviewer);

  /// Appends to the log unless it repeats the item's current action and reviewer.
  /// Returns whether a log line was written. Unknown item or empty reviewer -> DataError.
  bool decide(const std::string& item_id, Action action, const std::string& reviewer);

  StoreStats stats() const;
  std::optional<ReviewItem> item(const std::string& item_id) const;
  std::vector<ReviewItem> items() const;
  std::vector<Decision> log() const;
  std::optional<Action> outcome(const std::string& item_id) const;

  Bytes item_file(const std::string& item_id, const std::string& kind) const;

  /// OK and CLEAR outcomes in queue order; CLEAR pairs carry an all-zero mask.
  std::vector<GroundTruthPair> ground_truth() const;

  /// Writes images/<id>.png, masks/<id>.png and manifest.jsonl; returns the pair count.
  int export_training_set(const std::filesystem::path& out) const;

  /// Canonical dump of the materialized state (items and their outcomes).
  nlohmann::json state_json() const;

  SegmenterParams segmenter() const;
  RefitResult refit(const ParamGrid& grid);

 private:
  void apply(const Decision& d);

  std::filesystem::path dir_;
  Clock clock_;
  mutable std::mutex mu_;
  std::vector<ReviewItem> items_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, Decision> outcome_;
  std::vector<Decision> log_;
  std::map<std::string, std::pair<std::string, std::int64_t>> leases_;
  SegmenterParams segmenter_;
};

nlohmann::json to_json(const ReviewItem& item);

/// HTTP+JSON front end over an AnnotationStore.
class AlServer {
 public:
  explicit AlServer(AnnotationStore& store, std::filesystem::path static_dir = {});
  ~AlServer();
  AlServer(const AlServer&) = delete;
  AlServer& operator=(const AlServer&) = delete;

  /// Binds (port 0 picks a free port) and returns the bound port, or -1.
  int bind(const std::string& host, int port);
  /// Serves until stop(); call after bind.
  void run();
  void stop();
  bool running() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace gramsmear
