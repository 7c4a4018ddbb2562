#include "gramsmear/alserver.hpp"

#include <algorithm>
#include <climits>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <httplib.h>

#include "gramsmear/error.hpp"

namespace gramsmear {

namespace fs = std::filesystem;

std::string to_string(Action a) {
  switch (a) {
    case Action::ok: return "OK";
    case Action::clear: return "CLEAR";
    case Action::skip: return "SKIP";
  }
  return "";
}

Action action_from_string(const std::string& s) {
  if (s == "OK") return Action::ok;
  if (s == "CLEAR") return Action::clear;
  if (s == "SKIP") return Action::skip;
  throw DataError("unknown action '" + s + "' (expected OK, CLEAR or SKIP)");
}

Clock system_clock_ms() {
  return [] {
    return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
        .count();
  };
}

std::vector<std::uint8_t> contour_map(const InstanceMask& mask) {
  std::vector<std::uint8_t> out(mask.labels.size(), 0);
  for (int r = 0; r < mask.height; ++r) {
    for (int c = 0; c < mask.width; ++c) {
      const auto v = mask.at(r, c);
      if (!v) continue;
      bool edge = false;
      const int nb[4][2] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}};
      for (const auto& d : nb) {
        const int rr = r + d[0], cc = c + d[1];
        if (rr < 0 || rr >= mask.height || cc < 0 || cc >= mask.width || mask.at(rr, cc) != v) edge = true;
      }
      out[static_cast<std::size_t>(r) * mask.width + c] = edge;
    }
  }
  return out;
}

RasterImage render_overlay(const RasterImage& img, const InstanceMask& mask) {
  if (img.width != mask.width || img.height != mask.height) throw ShapeError("overlay: mask and image sizes differ");
  RasterImage out = img;
  const auto edge = contour_map(mask);
  const std::uint8_t yellow[3] = {255, 255, 0}, cyan[3] = {0, 255, 255};
  for (std::size_t i = 0; i < edge.size(); ++i) {
    if (!edge[i]) continue;
    std::uint8_t* px = &out.data[i * 3];
    const std::uint8_t* src = &img.data[i * 3];
    bool same = true;
    for (int ch = 0; ch < 3; ++ch) {
      px[ch] = static_cast<std::uint8_t>((src[ch] + yellow[ch] + 1) / 2);
      same = same && px[ch] == src[ch];
    }
    if (same) {
      for (int ch = 0; ch < 3; ++ch) px[ch] = static_cast<std::uint8_t>((src[ch] + cyan[ch] + 1) / 2);
    }
  }
  return out;
}

double matched_iou(const InstanceMask& gt, const InstanceMask& pred) {
  if (gt.width != pred.width || gt.height != pred.height) throw ShapeError("matched_iou: mask sizes differ");
  const auto ng = gt.instance_count(), np = pred.instance_count();
  if (ng == 0 && np == 0) return 1.0;
  std::vector<std::size_t> ag(ng + 1, 0), ap(np + 1, 0);
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> inter;
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    const auto g = gt.labels[i], p = pred.labels[i];
    ++ag[g];
    ++ap[p];
    if (g && p) ++inter[{g, p}];
  }
  double sum = 0.0;
  for (const auto& [key, n] : inter) {
    const double iou = static_cast<double>(n) / static_cast<double>(ag[key.first] + ap[key.second] - n);
    if (iou > 0.5) sum += iou;
  }
  return sum / static_cast<double>(std::max(ng, np));
}

nlohmann::json to_json(const ParamGrid& g) {
  return {{"thresholds", g.thresholds}, {"min_areas", g.min_areas}, {"max_areas", g.max_areas}, {"connectivity", g.connectivity}};
}

ParamGrid param_grid_from_json(const nlohmann::json& j) {
  ParamGrid g;
  try {
    if (j.contains("thresholds")) g.thresholds = j["thresholds"].get<std::vector<double>>();
    if (j.contains("min_areas")) g.min_areas = j["min_areas"].get<std::vector<int>>();
    if (j.contains("max_areas")) g.max_areas = j["max_areas"].get<std::vector<int>>();
    g.connectivity = j.value("connectivity", g.connectivity);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("invalid parameter grid: ") + e.what());
  }
  if (g.thresholds.empty() || g.min_areas.empty() || g.max_areas.empty()) throw DataError("parameter grid has an empty axis");
  return g;
}

nlohmann::json to_json(const SegmenterParams& p) {
  return {{"chroma_threshold", p.chroma_threshold},
          {"min_area", p.min_area},
          {"max_area", p.max_area},
          {"connectivity", p.connectivity}};
}

SegmenterParams segmenter_params_from_json(const nlohmann::json& j) {
  SegmenterParams p;
  try {
    p.chroma_threshold = j.value("chroma_threshold", p.chroma_threshold);
    p.min_area = j.value("min_area", p.min_area);
    p.max_area = j.value("max_area", p.max_area);
    p.connectivity = j.value("connectivity", p.connectivity);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("invalid segmenter parameters: ") + e.what());
  }
  validate(p);
  return p;
}

double score_params(const std::vector<GroundTruthPair>& gt, const SegmenterParams& params) {
  if (gt.empty()) throw DataError("no ground truth to score against");
  double s = 0.0;
  for (const auto& g : gt) s += matched_iou(g.mask, segment_baseline(g.image, params));
  return s / static_cast<double>(gt.size());
}

RefitResult refit_segmenter(const std::vector<GroundTruthPair>& gt, const ParamGrid& grid, const SegmenterParams& incumbent) {
  const bool usable = std::any_of(gt.begin(), gt.end(), [](const auto& g) { return g.mask.instance_count() > 0; });
  if (!usable) throw DataError("refit needs at least one non-empty ground-truth mask");
  validate(incumbent);

  std::vector<SegmenterParams> cands;
  for (double t : grid.thresholds) {
    for (int lo : grid.min_areas) {
      for (int hi : grid.max_areas) {
        SegmenterParams p{t, lo, hi, grid.connectivity};
        if (lo >= 1 && lo <= hi) cands.push_back(p);
      }
    }
  }
  cands.push_back(incumbent);

  // Components depend only on (threshold, connectivity); the area filter is applied per candidate.
  std::map<std::pair<double, int>, std::vector<InstanceMask>> raw;
  for (const auto& p : cands) {
    auto key = std::make_pair(p.chroma_threshold, p.connectivity);
    if (raw.count(key)) continue;
    auto& masks = raw[key];
    for (const auto& g : gt) masks.push_back(segment_baseline(g.image, {p.chroma_threshold, 1, INT_MAX, p.connectivity}));
  }
  auto score = [&](const SegmenterParams& p) {
    const auto& masks = raw.at({p.chroma_threshold, p.connectivity});
    double s = 0.0;
    for (std::size_t i = 0; i < gt.size(); ++i) s += matched_iou(gt[i].mask, filter_by_area(masks[i], p.min_area, p.max_area));
    return s / static_cast<double>(gt.size());
  };

  RefitResult out;
  out.incumbent = incumbent;
  out.incumbent_score = score(incumbent);
  out.images = static_cast<int>(gt.size());
  out.candidates = static_cast<int>(cands.size());
  bool have = false;
  for (const auto& p : cands) {
    const double s = score(p);
    const auto rank = std::make_tuple(p.chroma_threshold, p.min_area, p.max_area, p.connectivity);
    const auto best = std::make_tuple(out.params.chroma_threshold, out.params.min_area, out.params.max_area,
                                      out.params.connectivity);
    if (!have || s > out.score || (s == out.score && rank < best)) {
      out.params = p;
      out.score = s;
      have = true;
    }
  }
  return out;
}

nlohmann::json to_json(const ReviewItem& item) {
  return {{"item_id", item.item_id},
          {"source", item.source},
          {"tile", {item.tile.row_offset, item.tile.col_offset, item.tile.width, item.tile.height}},
          {"instances", item.instances},
          {"params", to_json(item.params)}};
}

namespace {

ReviewItem item_from_json(const nlohmann::json& j) {
  ReviewItem it;
  it.item_id = j.at("item_id").get<std::string>();
  it.source = j.value("source", std::string());
  const auto& t = j.at("tile");
  it.tile = {t.at(0).get<int>(), t.at(1).get<int>(), t.at(2).get<int>(), t.at(3).get<int>()};
  it.instances = j.value("instances", 0u);
  it.params = segmenter_params_from_json(j.at("params"));
  return it;
}

nlohmann::json decision_json(const Decision& d) {
  return {{"seq", d.seq}, {"item_id", d.item_id}, {"action", to_string(d.action)}, {"reviewer", d.reviewer}, {"time_ms", d.time_ms}};
}

void append_line(const fs::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::app | std::ios::binary);
  if (!out) throw DataError("cannot append to " + path.string());
  out << line << '\n';
  out.flush();
  if (!out) throw DataError("write failed: " + path.string());
}

std::vector<nlohmann::json> read_jsonl(const fs::path& path) {
  std::vector<nlohmann::json> out;
  if (!fs::exists(path)) return out;
  std::ifstream in(path, std::ios::binary);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::parse_error&) {
      if (in.peek() == std::char_traits<char>::eof()) {
        std::cerr << "warning: ignoring truncated last line of " << path << "\n";
        break;
      }
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": malformed JSON line");
    }
  }
  return out;
}

std::string content_id(const RasterImage& img, const SegmenterParams& p) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const void* data, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  const std::int32_t dims[2] = {img.width, img.height};
  feed(dims, sizeof dims);
  feed(img.data.data(), img.data.size());
  const auto params = to_json(p).dump();
  feed(params.data(), params.size());
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

AnnotationStore::AnnotationStore(fs::path dir, Clock clock) : dir_(std::move(dir)), clock_(std::move(clock)) {
  fs::create_directories(dir_ / "items");
  for (const auto& j : read_jsonl(dir_ / "items.jsonl")) {
    try {
      auto it = item_from_json(j);
      if (index_.count(it.item_id)) continue;
      index_[it.item_id] = items_.size();
      items_.push_back(std::move(it));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("items.jsonl: ") + e.what());
    }
  }
  for (const auto& j : read_jsonl(dir_ / "decisions.jsonl")) {
    Decision d;
    try {
      d.seq = j.at("seq").get<std::int64_t>();
      d.item_id = j.at("item_id").get<std::string>();
      d.action = action_from_string(j.at("action").get<std::string>());
      d.reviewer = j.at("reviewer").get<std::string>();
      d.time_ms = j.at("time_ms").get<std::int64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("decisions.jsonl: ") + e.what());
    }
    if (!index_.count(d.item_id)) throw DataError("decisions.jsonl refers to unknown item " + d.item_id);
    apply(d);
  }
  if (fs::exists(dir_ / "segmenter.json")) {
    try {
      segmenter_ = segmenter_params_from_json(nlohmann::json::parse(read_text(dir_ / "segmenter.json")));
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(std::string("segmenter.json: ") + e.what());
    }
  }
}

void AnnotationStore::apply(const Decision& d) {
  outcome_[d.item_id] = d;
  leases_.erase(d.item_id);
  log_.push_back(d);
}

std::vector<std::string> AnnotationStore::propose(const std::vector<std::pair<std::string, RasterImage>>& images,
                                                  const SegmenterParams& params, int tile_size) {
  validate(params);
  std::vector<std::string> ids;
  for (const auto& [name, img] : images) {
    const auto plan = tile_image(img, tile_size);
    for (const auto& tile : plan.tiles) {
      const auto patch = crop(img, tile);
      ReviewItem it;
      it.item_id = content_id(patch, params);
      it.source = name;
      it.tile = tile;
      it.params = params;
      ids.push_back(it.item_id);
      {
        std::lock_guard lock(mu_);
        if (index_.count(it.item_id)) continue;
      }
      const auto mask = segment_baseline(patch, params);
      it.instances = mask.instance_count();
      const auto d = dir_ / "items" / it.item_id;
      write_png(d / "image.png", patch);
      write_mask(d / "mask.png", mask);
      write_png(d / "overlay.png", render_overlay(patch, mask));
      std::lock_guard lock(mu_);
      if (index_.count(it.item_id)) continue;
      append_line(dir_ / "items.jsonl", to_json(it).dump());
      index_[it.item_id] = items_.size();
      items_.push_back(it);
    }
  }
  std::lock_guard lock(mu_);
  segmenter_ = params;
  write_text(dir_ / "segmenter.json", to_json(params).dump(2) + "\n");
  return ids;
}

std::optional<LeasedItem> AnnotationStore::next(const std::string& reviewer) {
  if (reviewer.empty()) throw DataError("reviewer id is required");
  std::lock_guard lock(mu_);
  const auto now = clock_();
  for (const auto& [id, lease] : leases_) {
    if (lease.first == reviewer && lease.second > now && !outcome_.count(id)) {
      return LeasedItem{items_[index_.at(id)], reviewer, lease.second};
    }
  }
  for (const auto& it : items_) {
    if (outcome_.count(it.item_id)) continue;
    auto l = leases_.find(it.item_id);
    if (l != leases_.end() && l->second.second > now) continue;
    leases_[it.item_id] = {reviewer, now + kLeaseMs};
    return LeasedItem{it, reviewer, now + kLeaseMs};
  }
  return std::nullopt;
}

bool AnnotationStore::decide(const std::string& item_id, Action action, const std::string& reviewer) {
  if (reviewer.empty()) throw DataError("reviewer id is required");
  std::lock_guard lock(mu_);
  if (!index_.count(item_id)) throw DataError("unknown item '" + item_id + "'");
  auto prev = outcome_.find(item_id);
  if (prev != outcome_.end() && prev->second.action == action && prev->second.reviewer == reviewer) {
    leases_.erase(item_id);
    return false;
  }
  Decision d{static_cast<std::int64_t>(log_.size()) + 1, item_id, action, reviewer, clock_()};
  append_line(dir_ / "decisions.jsonl", decision_json(d).dump());
  apply(d);
  return true;
}

StoreStats AnnotationStore::stats() const {
  std::lock_guard lock(mu_);
  const auto now = clock_();
  StoreStats s;
  for (const auto& it : items_) {
    auto o = outcome_.find(it.item_id);
    if (o != outcome_.end()) {
      ++s.decided;
      if (o->second.action == Action::ok) ++s.ok;
      if (o->second.action == Action::clear) ++s.clear;
      if (o->second.action == Action::skip) ++s.skip;
      continue;
    }
    auto l = leases_.find(it.item_id);
    if (l != leases_.end() && l->second.second > now) {
      ++s.leased;
    } else {
      ++s.pending;
    }
  }
  return s;
}

std::optional<ReviewItem> AnnotationStore::item(const std::string& item_id) const {
  std::lock_guard lock(mu_);
  auto it = index_.find(item_id);
  if (it == index_.end()) return std::nullopt;
  return items_[it->second];
}

std::vector<ReviewItem> AnnotationStore::items() const {
  std::lock_guard lock(mu_);
  return items_;
}

std::vector<Decision> AnnotationStore::log() const {
  std::lock_guard lock(mu_);
  return log_;
}

std::optional<Action> AnnotationStore::outcome(const std::string& item_id) const {
  std::lock_guard lock(mu_);
  auto it = outcome_.find(item_id);
  if (it == outcome_.end()) return std::nullopt;
  return it->second.action;
}

Bytes AnnotationStore::item_file(const std::string& item_id, const std::string& kind) const {
  if (kind != "image" && kind != "mask" && kind != "overlay") throw DataError("unknown item file '" + kind + "'");
  if (!item(item_id)) throw DataError("unknown item '" + item_id + "'");
  return read_file(dir_ / "items" / item_id / (kind + ".png"));
}

std::vector<GroundTruthPair> AnnotationStore::ground_truth() const {
  std::vector<std::pair<std::string, Action>> chosen;
  {
    std::lock_guard lock(mu_);
    for (const auto& it : items_) {
      auto o = outcome_.find(it.item_id);
      if (o != outcome_.end() && o->second.action != Action::skip) chosen.emplace_back(it.item_id, o->second.action);
    }
  }
  std::vector<GroundTruthPair> out;
  for (const auto& [id, action] : chosen) {
    GroundTruthPair g;
    g.item_id = id;
    g.image = read_png(dir_ / "items" / id / "image.png");
    g.mask = action == Action::ok ? read_mask(dir_ / "items" / id / "mask.png") : InstanceMask(g.image.width, g.image.height);
    out.push_back(std::move(g));
  }
  return out;
}

int AnnotationStore::export_training_set(const fs::path& out) const {
  const auto gt = ground_truth();
  fs::create_directories(out);
  std::string manifest;
  for (const auto& g : gt) {
    const auto image = "images/" + g.item_id + ".png";
    const auto mask = "masks/" + g.item_id + ".png";
    write_png(out / image, g.image);
    write_mask(out / mask, g.mask);
    nlohmann::json j = {{"item_id", g.item_id},
                        {"action", to_string(*outcome(g.item_id))},
                        {"image", image},
                        {"mask", mask},
                        {"instances", g.mask.instance_count()}};
    manifest += j.dump() + "\n";
  }
  write_text(out / "manifest.jsonl", manifest);
  return static_cast<int>(gt.size());
}

nlohmann::json AnnotationStore::state_json() const {
  std::lock_guard lock(mu_);
  auto items = nlohmann::json::array();
  for (const auto& it : items_) {
    nlohmann::json j = {{"item_id", it.item_id}};
    auto o = outcome_.find(it.item_id);
    if (o != outcome_.end()) {
      j["outcome"] = to_string(o->second.action);
      j["reviewer"] = o->second.reviewer;
      j["seq"] = o->second.seq;
    } else {
      j["outcome"] = nullptr;
    }
    items.push_back(j);
  }
  return {{"items", items}, {"log_length", log_.size()}, {"segmenter", to_json(segmenter_)}};
}

SegmenterParams AnnotationStore::segmenter() const {
  std::lock_guard lock(mu_);
  return segmenter_;
}

RefitResult AnnotationStore::refit(const ParamGrid& grid) {
  const auto result = refit_segmenter(ground_truth(), grid, segmenter());
  std::lock_guard lock(mu_);
  segmenter_ = result.params;
  write_text(dir_ / "segmenter.json", to_json(segmenter_).dump(2) + "\n");
  return result;
}

struct AlServer::Impl {
  AnnotationStore& store;
  httplib::Server svr;

  explicit Impl(AnnotationStore& s) : store(s) {}
};

namespace {

void send_json(httplib::Response& res, int status, const nlohmann::json& j) {
  res.status = status;
  res.set_content(j.dump(), "application/json");
}

nlohmann::json stats_json(const StoreStats& s) {
  return {{"pending", s.pending},
          {"leased", s.leased},
          {"decided", s.decided},
          {"actions", {{"OK", s.ok}, {"CLEAR", s.clear}, {"SKIP", s.skip}}}};
}

nlohmann::json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return nlohmann::json::object();
  try {
    auto j = nlohmann::json::parse(req.body);
    if (!j.is_object()) throw DataError("request body must be a JSON object");
    return j;
  } catch (const nlohmann::json::parse_error&) {
    throw DataError("request body is not valid JSON");
  }
}

}  // namespace

AlServer::AlServer(AnnotationStore& store, fs::path static_dir) : impl_(std::make_unique<Impl>(store)) {
  auto& svr = impl_->svr;
  auto& st = impl_->store;

  svr.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const DataError& e) {
      send_json(res, 400, {{"error", e.what()}});
    } catch (const nlohmann::json::exception& e) {
      send_json(res, 400, {{"error", std::string("bad request: ") + e.what()}});
    } catch (const std::exception& e) {
      send_json(res, 500, {{"error", e.what()}});
    }
  });

  svr.Get("/api/queue/next", [&st](const httplib::Request& req, httplib::Response& res) {
    const auto reviewer = req.get_param_value("reviewer");
    if (reviewer.empty()) return send_json(res, 400, {{"error", "reviewer query parameter is required"}});
    auto leased = st.next(reviewer);
    if (!leased) {
      res.status = 204;
      return;
    }
    auto j = to_json(leased->item);
    const auto base = "/api/items/" + leased->item.item_id;
    j["reviewer"] = leased->reviewer;
    j["lease_until_ms"] = leased->lease_until;
    j["image_url"] = base + "/image";
    j["mask_url"] = base + "/mask";
    j["overlay_url"] = base + "/overlay";
    send_json(res, 200, j);
  });

  svr.Post("/api/decisions", [&st](const httplib::Request& req, httplib::Response& res) {
    const auto body = parse_body(req);
    if (!body.contains("item_id") || !body.contains("action") || !body.contains("reviewer")) {
      return send_json(res, 400, {{"error", "item_id, action and reviewer are required"}});
    }
    const auto id = body["item_id"].get<std::string>();
    if (!st.item(id)) return send_json(res, 404, {{"error", "unknown item '" + id + "'"}});
    const auto action = action_from_string(body["action"].get<std::string>());
    const bool logged = st.decide(id, action, body["reviewer"].get<std::string>());
    send_json(res, 200, {{"item_id", id}, {"action", to_string(action)}, {"logged", logged}, {"stats", stats_json(st.stats())}});
  });

  svr.Get(R"(/api/items/([0-9a-f]+)/(image|mask|overlay))", [&st](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1], kind = req.matches[2];
    if (!st.item(id)) return send_json(res, 404, {{"error", "unknown item '" + id + "'"}});
    const auto bytes = st.item_file(id, kind);
    res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
  });

  svr.Get(R"(/api/items/([0-9a-f]+))", [&st](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    auto it = st.item(id);
    if (!it) return send_json(res, 404, {{"error", "unknown item '" + id + "'"}});
    auto j = to_json(*it);
    auto o = st.outcome(id);
    j["outcome"] = o ? nlohmann::json(to_string(*o)) : nlohmann::json(nullptr);
    send_json(res, 200, j);
  });

  svr.Get("/api/stats", [&st](const httplib::Request&, httplib::Response& res) { send_json(res, 200, stats_json(st.stats())); });

  svr.Post("/api/export", [&st](const httplib::Request& req, httplib::Response& res) {
    const auto body = parse_body(req);
    const fs::path out = body.contains("out") ? fs::path(body["out"].get<std::string>()) : st.dir() / "export";
    const int n = st.export_training_set(out);
    send_json(res, 200, {{"pairs", n}, {"dir", out.string()}});
  });

  svr.Post("/api/refit", [&st](const httplib::Request& req, httplib::Response& res) {
    const auto body = parse_body(req);
    const auto r = st.refit(param_grid_from_json(body.value("grid", nlohmann::json::object())));
    send_json(res, 200,
              {{"params", to_json(r.params)},
               {"score", r.score},
               {"incumbent", to_json(r.incumbent)},
               {"incumbent_score", r.incumbent_score},
               {"candidates", r.candidates},
               {"images", r.images}});
  });

  if (!static_dir.empty()) svr.set_mount_point("/", static_dir.string());
}

AlServer::~AlServer() { stop(); }

int AlServer::bind(const std::string& host, int port) {
  if (port == 0) return impl_->svr.bind_to_any_port(host);
  return impl_->svr.bind_to_port(host, port) ? port : -1;
}

void AlServer::run() { impl_->svr.listen_after_bind(); }

void AlServer::stop() {
  if (impl_->svr.is_running()) impl_->svr.stop();
}

bool AlServer::running() const { return impl_->svr.is_running(); }

}  // namespace gramsmear
