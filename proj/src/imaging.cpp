#include "gramsmear/imaging.hpp"

#include <algorithm>
#include <climits>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>

#include "gramsmear/error.hpp"

namespace gramsmear {

RasterImage::RasterImage(int w, int h, std::uint8_t fill) : width(w), height(h) {
  if (w < 1 || h < 1) throw ShapeError("RasterImage dimensions must be >= 1");
  data.assign(static_cast<std::size_t>(w) * h * 3, fill);
}

InstanceMask::InstanceMask(int w, int h) : width(w), height(h) {
  if (w < 1 || h < 1) throw ShapeError("InstanceMask dimensions must be >= 1");
  labels.assign(static_cast<std::size_t>(w) * h, 0);
}

std::uint32_t InstanceMask::instance_count() const {
  std::uint32_t n = 0;
  for (auto v : labels) n = std::max(n, v);
  return n;
}

void validate(const SegmenterParams& p) {
  if (p.min_area < 1) throw DataError("min_area must be >= 1");
  if (p.min_area > p.max_area) throw DataError("min_area must be <= max_area");
  if (p.connectivity != 4 && p.connectivity != 8) throw DataError("connectivity must be 4 or 8");
}

TilePlan tile_image(int width, int height, int tile_size) {
  if (tile_size < 1) throw DataError("tile_size must be >= 1");
  if (width < 1 || height < 1) throw ShapeError("image dimensions must be >= 1");
  TilePlan plan;
  plan.tile_size = tile_size;
  plan.image_width = width;
  plan.image_height = height;
  for (int r = 0; r < height; r += tile_size) {
    for (int c = 0; c < width; c += tile_size) {
      plan.tiles.push_back({r, c, std::min(tile_size, width - c), std::min(tile_size, height - r)});
    }
  }
  return plan;
}

TilePlan tile_image(const RasterImage& img, int tile_size) { return tile_image(img.width, img.height, tile_size); }

RasterImage crop(const RasterImage& img, const Tile& tile) {
  if (tile.row_offset < 0 || tile.col_offset < 0 || tile.row_offset + tile.height > img.height ||
      tile.col_offset + tile.width > img.width) {
    throw ShapeError("crop window outside image");
  }
  RasterImage out(tile.width, tile.height);
  for (int r = 0; r < tile.height; ++r) {
    const auto* src = &img.data[(static_cast<std::size_t>(r + tile.row_offset) * img.width + tile.col_offset) * 3];
    std::copy(src, src + static_cast<std::size_t>(tile.width) * 3, &out.data[static_cast<std::size_t>(r) * tile.width * 3]);
  }
  return out;
}

std::array<double, 3> estimate_background(const RasterImage& img) {
  std::array<double, 3> bg{};
  const std::size_t n = img.pixel_count();
  const std::size_t target = (n - 1) / 2;
  for (int ch = 0; ch < 3; ++ch) {
    std::array<std::size_t, 256> hist{};
    for (std::size_t i = 0; i < n; ++i) ++hist[img.data[i * 3 + ch]];
    std::size_t seen = 0;
    for (int v = 0; v < 256; ++v) {
      seen += hist[v];
      if (seen > target) {
        bg[ch] = v;
        break;
      }
    }
  }
  return bg;
}

namespace {

// Labels connected foreground pixels; ids follow raster order of first pixel.
InstanceMask label_components(const std::vector<std::uint8_t>& fg, int w, int h, int connectivity) {
  InstanceMask mask(w, h);
  std::vector<std::size_t> stack;
  std::uint32_t next = 0;
  const int n8[8][2] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}, {-1, -1}, {-1, 1}, {1, -1}, {1, 1}};
  const int nn = connectivity == 8 ? 8 : 4;
  for (std::size_t start = 0; start < fg.size(); ++start) {
    if (!fg[start] || mask.labels[start]) continue;
    ++next;
    mask.labels[start] = next;
    stack.assign(1, start);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const int r = static_cast<int>(i / w), c = static_cast<int>(i % w);
      for (int k = 0; k < nn; ++k) {
        const int rr = r + n8[k][0], cc = c + n8[k][1];
        if (rr < 0 || cc < 0 || rr >= h || cc >= w) continue;
        const std::size_t j = static_cast<std::size_t>(rr) * w + cc;
        if (fg[j] && !mask.labels[j]) {
          mask.labels[j] = next;
          stack.push_back(j);
        }
      }
    }
  }
  return mask;
}

struct DisjointSet {
  std::vector<std::uint32_t> parent;
  explicit DisjointSet(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0u); }
  std::uint32_t find(std::uint32_t x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  }
  void unite(std::uint32_t a, std::uint32_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

}  // namespace

InstanceMask segment_baseline(const RasterImage& img, const SegmenterParams& p) {
  return segment_baseline(img, p, estimate_background(img));
}

InstanceMask segment_baseline(const RasterImage& img, const SegmenterParams& p, const std::array<double, 3>& background) {
  validate(p);
  const std::size_t n = img.pixel_count();
  std::vector<std::uint8_t> fg(n, 0);
  const double thr2 = p.chroma_threshold * p.chroma_threshold;
  for (std::size_t i = 0; i < n; ++i) {
    double d2 = 0.0;
    for (int ch = 0; ch < 3; ++ch) {
      const double d = img.data[i * 3 + ch] - background[ch];
      d2 += d * d;
    }
    fg[i] = d2 > thr2 ? 1 : 0;
  }
  auto mask = label_components(fg, img.width, img.height, p.connectivity);
  return filter_by_area(mask, p.min_area, p.max_area);
}

InstanceMask relabel_raster_order(const InstanceMask& mask) {
  InstanceMask out = mask;
  std::vector<std::uint32_t> remap(mask.instance_count() + 1, 0);
  std::uint32_t next = 0;
  for (auto& v : out.labels) {
    if (!v) continue;
    if (!remap[v]) remap[v] = ++next;
    v = remap[v];
  }
  return out;
}

InstanceMask merge_tile_masks(const std::vector<InstanceMask>& tile_masks, const TilePlan& plan, int connectivity) {
  if (tile_masks.size() != plan.tiles.size()) throw ShapeError("merge_tile_masks: mask count does not match plan");
  if (connectivity != 4 && connectivity != 8) throw DataError("connectivity must be 4 or 8");
  InstanceMask out(plan.image_width, plan.image_height);
  std::vector<std::uint32_t> tile_of(out.labels.size(), 0);
  std::uint32_t base = 0;
  for (std::size_t t = 0; t < plan.tiles.size(); ++t) {
    const Tile& tile = plan.tiles[t];
    const InstanceMask& m = tile_masks[t];
    if (m.width != tile.width || m.height != tile.height) {
      throw ShapeError("merge_tile_masks: tile " + std::to_string(t) + " mask is " + std::to_string(m.width) + "x" +
                       std::to_string(m.height) + ", plan expects " + std::to_string(tile.width) + "x" +
                       std::to_string(tile.height));
    }
    if (tile.row_offset + tile.height > plan.image_height || tile.col_offset + tile.width > plan.image_width) {
      throw ShapeError("merge_tile_masks: tile outside image");
    }
    for (int r = 0; r < tile.height; ++r) {
      for (int c = 0; c < tile.width; ++c) {
        const std::size_t g = static_cast<std::size_t>(r + tile.row_offset) * out.width + c + tile.col_offset;
        const auto v = m.at(r, c);
        out.labels[g] = v ? base + v : 0;
        tile_of[g] = static_cast<std::uint32_t>(t);
      }
    }
    base += m.instance_count();
  }

  DisjointSet ds(static_cast<std::size_t>(base) + 1);
  const int fwd[4][2] = {{0, 1}, {1, 0}, {1, 1}, {1, -1}};
  const int nfwd = connectivity == 8 ? 4 : 2;
  for (int r = 0; r < out.height; ++r) {
    for (int c = 0; c < out.width; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * out.width + c;
      if (!out.labels[i]) continue;
      for (int k = 0; k < nfwd; ++k) {
        const int rr = r + fwd[k][0], cc = c + fwd[k][1];
        if (rr >= out.height || cc < 0 || cc >= out.width) continue;
        const std::size_t j = static_cast<std::size_t>(rr) * out.width + cc;
        if (out.labels[j] && tile_of[j] != tile_of[i]) ds.unite(out.labels[i], out.labels[j]);
      }
    }
  }
  for (auto& v : out.labels) {
    if (v) v = ds.find(v);
  }
  return relabel_raster_order(out);
}

InstanceMask merge_tile_masks(const std::vector<InstanceMask>& tile_masks, const TilePlan& plan) {
  return merge_tile_masks(tile_masks, plan, 8);
}

InstanceMask segment_tiled(const RasterImage& img, const SegmenterParams& p, int tile_size) {
  validate(p);
  const auto bg = estimate_background(img);
  const TilePlan plan = tile_image(img, tile_size);
  SegmenterParams unfiltered = p;
  unfiltered.min_area = 1;
  unfiltered.max_area = INT_MAX;
  std::vector<InstanceMask> masks;
  masks.reserve(plan.tiles.size());
  for (const auto& tile : plan.tiles) masks.push_back(segment_baseline(crop(img, tile), unfiltered, bg));
  return filter_by_area(merge_tile_masks(masks, plan, p.connectivity), p.min_area, p.max_area);
}

InstanceMask filter_by_area(const InstanceMask& mask, int min_area, int max_area) {
  const auto n = mask.instance_count();
  std::vector<std::size_t> area(n + 1, 0);
  for (auto v : mask.labels) ++area[v];
  std::vector<std::uint32_t> remap(n + 1, 0);
  std::uint32_t next = 0;
  for (std::uint32_t id = 1; id <= n; ++id) {
    if (area[id] >= static_cast<std::size_t>(min_area) && area[id] <= static_cast<std::size_t>(max_area)) {
      remap[id] = ++next;
    }
  }
  InstanceMask out = mask;
  for (auto& v : out.labels) v = remap[v];
  return out;
}

std::vector<std::vector<std::size_t>> instance_pixels(const InstanceMask& mask) {
  std::vector<std::vector<std::size_t>> out(mask.instance_count());
  for (std::size_t i = 0; i < mask.labels.size(); ++i) {
    if (mask.labels[i]) out[mask.labels[i] - 1].push_back(i);
  }
  return out;
}

namespace {

using Point = std::pair<int, int>;

std::int64_t dist2(const Point& a, const Point& b) {
  const std::int64_t dr = a.first - b.first, dc = a.second - b.second;
  return dr * dr + dc * dc;
}

std::int64_t cross(const Point& o, const Point& a, const Point& b) {
  return static_cast<std::int64_t>(a.first - o.first) * (b.second - o.second) -
         static_cast<std::int64_t>(a.second - o.second) * (b.first - o.first);
}

std::vector<Point> convex_hull(std::vector<Point> pts) {
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  if (pts.size() < 3) return pts;
  std::vector<Point> hull(2 * pts.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i > 0; --i) {
    while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i - 1]) <= 0) --k;
    hull[k++] = pts[i - 1];
  }
  hull.resize(k - 1);
  return hull;
}

std::int64_t max_pair_dist2(const std::vector<Point>& pts) {
  std::int64_t best = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    for (std::size_t j = i + 1; j < pts.size(); ++j) best = std::max(best, dist2(pts[i], pts[j]));
  }
  return best;
}

double feret(const std::vector<Point>& pts) {
  constexpr std::size_t kBruteForceLimit = 2000;
  if (pts.size() <= kBruteForceLimit) return std::sqrt(static_cast<double>(max_pair_dist2(pts)));
  return std::sqrt(static_cast<double>(max_pair_dist2(convex_hull(pts))));
}

// Longest segment between two pixel centres whose sampled points all fall on
// pixels of the set.
double longest_chord(const std::vector<Point>& pts) {
  if (pts.size() < 2) return 0.0;
  int r0 = INT_MAX, c0 = INT_MAX, r1 = INT_MIN, c1 = INT_MIN;
  for (const auto& p : pts) {
    r0 = std::min(r0, p.first);
    c0 = std::min(c0, p.second);
    r1 = std::max(r1, p.first);
    c1 = std::max(c1, p.second);
  }
  const int bw = c1 - c0 + 3, bh = r1 - r0 + 3;
  std::vector<std::uint8_t> inside(static_cast<std::size_t>(bw) * bh, 0);
  auto idx = [&](int r, int c) { return static_cast<std::size_t>(r - r0 + 1) * bw + (c - c0 + 1); };
  for (const auto& p : pts) inside[idx(p.first, p.second)] = 1;

  std::vector<Point> boundary;
  for (const auto& p : pts) {
    const auto [r, c] = p;
    if (!inside[idx(r - 1, c)] || !inside[idx(r + 1, c)] || !inside[idx(r, c - 1)] || !inside[idx(r, c + 1)]) {
      boundary.push_back(p);
    }
  }
  std::vector<std::tuple<std::int64_t, std::uint32_t, std::uint32_t>> pairs;
  pairs.reserve(boundary.size() * (boundary.size() - 1) / 2);
  for (std::uint32_t i = 0; i < boundary.size(); ++i) {
    for (std::uint32_t j = i + 1; j < boundary.size(); ++j) pairs.emplace_back(dist2(boundary[i], boundary[j]), i, j);
  }
  std::sort(pairs.begin(), pairs.end(), [](const auto& a, const auto& b) { return std::get<0>(a) > std::get<0>(b); });
  for (const auto& [d2, i, j] : pairs) {
    const auto& a = boundary[i];
    const auto& b = boundary[j];
    const double len = std::sqrt(static_cast<double>(d2));
    const int steps = static_cast<int>(std::ceil(len * 4.0));
    bool ok = true;
    for (int s = 1; s < steps && ok; ++s) {
      const double t = static_cast<double>(s) / steps;
      const int r = static_cast<int>(std::lround(a.first + t * (b.first - a.first)));
      const int c = static_cast<int>(std::lround(a.second + t * (b.second - a.second)));
      ok = inside[idx(r, c)] != 0;
    }
    if (ok) return len;
  }
  return 0.0;
}

std::vector<Point> instance_points(const InstanceMask& mask, std::uint32_t id) {
  std::vector<Point> pts;
  for (std::size_t i = 0; i < mask.labels.size(); ++i) {
    if (mask.labels[i] == id) pts.emplace_back(static_cast<int>(i / mask.width), static_cast<int>(i % mask.width));
  }
  if (pts.empty()) throw DataError("unknown instance id " + std::to_string(id));
  return pts;
}

}  // namespace

double pixel_set_diameter(const std::vector<std::pair<int, int>>& pixels, DiameterMode mode) {
  if (pixels.empty()) throw DataError("empty pixel set has no diameter");
  return mode == DiameterMode::feret ? feret(pixels) : longest_chord(pixels);
}

double mask_diameter(const InstanceMask& mask, std::uint32_t id, DiameterMode mode) {
  if (id == 0) throw DataError("instance id 0 is background");
  return pixel_set_diameter(instance_points(mask, id), mode);
}

InstanceMask filter_by_diameter(const InstanceMask& mask, double max_diameter, DiameterMode mode) {
  if (!(max_diameter > 0.0)) throw DataError("max_diameter must be > 0");
  const auto groups = instance_pixels(mask);
  std::vector<std::uint32_t> remap(groups.size() + 1, 0);
  std::uint32_t next = 0;
  for (std::size_t k = 0; k < groups.size(); ++k) {
    if (groups[k].empty()) continue;
    std::vector<Point> pts;
    pts.reserve(groups[k].size());
    for (auto i : groups[k]) pts.emplace_back(static_cast<int>(i / mask.width), static_cast<int>(i % mask.width));
    if (pixel_set_diameter(pts, mode) <= max_diameter) remap[k + 1] = ++next;
  }
  InstanceMask out = mask;
  for (auto& v : out.labels) v = remap[v];
  return out;
}

std::pair<double, double> centroid(const InstanceMask& mask, std::uint32_t id) {
  if (id == 0) throw DataError("instance id 0 is background");
  double sr = 0.0, sc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < mask.labels.size(); ++i) {
    if (mask.labels[i] != id) continue;
    sr += static_cast<double>(i / mask.width);
    sc += static_cast<double>(i % mask.width);
    ++n;
  }
  if (n == 0) throw DataError("unknown instance id " + std::to_string(id));
  return {sr / n, sc / n};
}

}  // namespace gramsmear
