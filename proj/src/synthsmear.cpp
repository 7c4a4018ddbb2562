#include "gramsmear/synthsmear.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "gramsmear/error.hpp"
#include "gramsmear/image_io.hpp"
#include "gramsmear/optimize.hpp"
#include "gramsmear/parallel.hpp"

namespace gramsmear {

namespace {

constexpr std::array<double, 3> kBackground{235, 225, 220};
constexpr std::array<double, 3> kViolet{90, 40, 140};
constexpr std::array<double, 3> kPink{205, 70, 125};
constexpr std::array<double, 3> kRedCellGhost{226, 202, 202};
constexpr double kPi = std::numbers::pi;

double segment_distance(double r, double c, const Capsule& k) {
  const double dr = k.r1 - k.r0, dc = k.c1 - k.c0;
  const double len2 = dr * dr + dc * dc;
  double t = 0.0;
  if (len2 > 0.0) t = std::clamp(((r - k.r0) * dr + (c - k.c0) * dc) / len2, 0.0, 1.0);
  const double er = r - (k.r0 + t * dr), ec = c - (k.c0 + t * dc);
  return std::sqrt(er * er + ec * ec);
}

std::string shape_name(CellShape s) {
  switch (s) {
    case CellShape::rod: return "rod";
    case CellShape::coccus: return "coccus";
    case CellShape::pseudohypha: return "pseudohypha";
  }
  return "";
}

std::string arrangement_name(Arrangement a) {
  switch (a) {
    case Arrangement::single: return "single";
    case Arrangement::pair: return "pair";
    case Arrangement::chain: return "chain";
    case Arrangement::cluster: return "cluster";
  }
  return "";
}

CellShape shape_from(const std::string& s) {
  if (s == "rod") return CellShape::rod;
  if (s == "coccus") return CellShape::coccus;
  if (s == "pseudohypha") return CellShape::pseudohypha;
  throw DataError("unknown shape '" + s + "'");
}

Arrangement arrangement_from(const std::string& s) {
  if (s == "single") return Arrangement::single;
  if (s == "pair") return Arrangement::pair;
  if (s == "chain") return Arrangement::chain;
  if (s == "cluster") return Arrangement::cluster;
  throw DataError("unknown arrangement '" + s + "'");
}

Gram gram_from(const std::string& s) {
  if (s == "positive") return Gram::positive;
  if (s == "negative") return Gram::negative;
  throw DataError("unknown gram value '" + s + "'");
}

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Candidate cell geometry centred at (r, c) with axis angle theta.
std::vector<Capsule> make_cell(const MorphotypeSpec& spec, Rng& rng, double r, double c, double theta, double size) {
  const double ur = std::sin(theta), uc = std::cos(theta);
  if (spec.shape == CellShape::coccus) return {Capsule{r, c, r, c, size / 2.0}};
  const double rad = spec.width / 2.0;
  if (spec.shape == CellShape::rod) {
    const double half = std::max(0.0, size / 2.0 - rad);
    return {Capsule{r - half * ur, c - half * uc, r + half * ur, c + half * uc, rad}};
  }
  const int segs = uniform_int(rng, 3, 5);
  const double step = size / segs;
  std::vector<Capsule> parts;
  double pr = r - size / 2.0 * ur, pc = c - size / 2.0 * uc;
  double ang = theta;
  for (int i = 0; i < segs; ++i) {
    const double nr = pr + step * std::sin(ang), nc = pc + step * std::cos(ang);
    parts.push_back({pr, pc, nr, nc, rad});
    pr = nr;
    pc = nc;
    ang += uniform(rng, -0.4, 0.4);
  }
  return parts;
}

struct Placer {
  int width, height, gap;
  std::vector<std::uint8_t> blocked;

  Placer(int w, int h, int g) : width(w), height(h), gap(g), blocked(static_cast<std::size_t>(w) * h, 0) {}

  bool inside(const std::vector<Capsule>& parts) const {
    for (const auto& k : parts) {
      const double margin = k.radius + 2.0;
      for (double rr : {k.r0, k.r1}) {
        if (rr < margin || rr > height - 1 - margin) return false;
      }
      for (double cc : {k.c0, k.c1}) {
        if (cc < margin || cc > width - 1 - margin) return false;
      }
    }
    return true;
  }

  bool free(const std::vector<std::size_t>& px) const {
    return std::none_of(px.begin(), px.end(), [&](std::size_t i) { return blocked[i] != 0; });
  }

  void occupy(const std::vector<std::size_t>& px) {
    for (auto i : px) {
      const int r = static_cast<int>(i / width), c = static_cast<int>(i % width);
      for (int dr = -gap; dr <= gap; ++dr) {
        for (int dc = -gap; dc <= gap; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if (rr >= 0 && rr < height && cc >= 0 && cc < width) blocked[static_cast<std::size_t>(rr) * width + cc] = 1;
        }
      }
    }
  }
};

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double s = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    s += k[i + radius];
  }
  for (auto& v : k) v /= s;
  return k;
}

void blur(std::vector<double>& buf, int w, int h, double sigma) {
  if (sigma <= 0.0) return;
  const auto k = gaussian_kernel(sigma);
  const int radius = static_cast<int>(k.size() / 2);
  std::vector<double> tmp(buf.size());
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      for (int ch = 0; ch < 3; ++ch) {
        double s = 0.0;
        for (int t = -radius; t <= radius; ++t) {
          const int cc = std::clamp(c + t, 0, w - 1);
          s += k[t + radius] * buf[(static_cast<std::size_t>(r) * w + cc) * 3 + ch];
        }
        tmp[(static_cast<std::size_t>(r) * w + c) * 3 + ch] = s;
      }
    }
  }
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      for (int ch = 0; ch < 3; ++ch) {
        double s = 0.0;
        for (int t = -radius; t <= radius; ++t) {
          const int rr = std::clamp(r + t, 0, h - 1);
          s += k[t + radius] * tmp[(static_cast<std::size_t>(rr) * w + c) * 3 + ch];
        }
        buf[(static_cast<std::size_t>(r) * w + c) * 3 + ch] = s;
      }
    }
  }
}

MorphotypeSpec morph(std::string name, CellShape shape, Arrangement arr, Gram gram, double size, double sd, double width,
                     int cmin, int cmax, int gmin = 3, int gmax = 5) {
  MorphotypeSpec m;
  m.name = std::move(name);
  m.shape = shape;
  m.arrangement = arr;
  m.gram = gram;
  m.size_mean = size;
  m.size_std = sd;
  m.width = width;
  m.cells_min = cmin;
  m.cells_max = cmax;
  m.group_min = gmin;
  m.group_max = gmax;
  return m;
}

nlohmann::json morph_json(const MorphotypeSpec& m) {
  return {{"name", m.name},
          {"shape", shape_name(m.shape)},
          {"arrangement", arrangement_name(m.arrangement)},
          {"gram", m.gram == Gram::positive ? "positive" : "negative"},
          {"size_mean", m.size_mean},
          {"size_std", m.size_std},
          {"width", m.width},
          {"cells_per_image", {m.cells_min, m.cells_max}},
          {"group_size", {m.group_min, m.group_max}}};
}

MorphotypeSpec morph_from(const nlohmann::json& j) {
  MorphotypeSpec m;
  m.name = j.at("name").get<std::string>();
  m.shape = shape_from(j.at("shape").get<std::string>());
  m.arrangement = arrangement_from(j.value("arrangement", std::string("single")));
  m.gram = gram_from(j.value("gram", std::string("positive")));
  m.size_mean = j.at("size_mean").get<double>();
  m.size_std = j.value("size_std", 0.0);
  m.width = j.value("width", m.width);
  if (j.contains("cells_per_image")) {
    m.cells_min = j["cells_per_image"].at(0).get<int>();
    m.cells_max = j["cells_per_image"].at(1).get<int>();
  }
  if (j.contains("group_size")) {
    m.group_min = j["group_size"].at(0).get<int>();
    m.group_max = j["group_size"].at(1).get<int>();
  }
  m.validate();
  return m;
}

}  // namespace

void MorphotypeSpec::validate() const {
  if (name.empty()) throw DataError("morphotype needs a name");
  if (!(size_mean > 0.0) || size_std < 0.0 || !(width > 0.0)) throw DataError("morphotype " + name + ": sizes must be positive");
  if (cells_min < 1 || cells_max < cells_min) throw DataError("morphotype " + name + ": bad cells_per_image range");
  if (group_min < 1 || group_max < group_min) throw DataError("morphotype " + name + ": bad group size range");
  if ((arrangement == Arrangement::chain || arrangement == Arrangement::cluster) && shape == CellShape::pseudohypha) {
    throw DataError("morphotype " + name + ": chain/cluster only with coccus or rod");
  }
}

std::vector<std::size_t> rasterize(const std::vector<Capsule>& parts, int width, int height) {
  if (parts.empty()) return {};
  double r_lo = INFINITY, r_hi = -INFINITY, c_lo = INFINITY, c_hi = -INFINITY;
  for (const auto& k : parts) {
    r_lo = std::min({r_lo, k.r0 - k.radius, k.r1 - k.radius});
    r_hi = std::max({r_hi, k.r0 + k.radius, k.r1 + k.radius});
    c_lo = std::min({c_lo, k.c0 - k.radius, k.c1 - k.radius});
    c_hi = std::max({c_hi, k.c0 + k.radius, k.c1 + k.radius});
  }
  const int r0 = std::max(0, static_cast<int>(std::floor(r_lo))), r1 = std::min(height - 1, static_cast<int>(std::ceil(r_hi)));
  const int c0 = std::max(0, static_cast<int>(std::floor(c_lo))), c1 = std::min(width - 1, static_cast<int>(std::ceil(c_hi)));
  std::vector<std::size_t> out;
  for (int r = r0; r <= r1; ++r) {
    for (int c = c0; c <= c1; ++c) {
      for (const auto& k : parts) {
        if (segment_distance(r, c, k) <= k.radius) {
          out.push_back(static_cast<std::size_t>(r) * width + c);
          break;
        }
      }
    }
  }
  return out;
}

std::vector<std::size_t> rasterize(const Ring& ring, int width, int height) {
  std::vector<std::size_t> out;
  const int r0 = std::max(0, static_cast<int>(std::floor(ring.r - ring.outer)));
  const int r1 = std::min(height - 1, static_cast<int>(std::ceil(ring.r + ring.outer)));
  const int c0 = std::max(0, static_cast<int>(std::floor(ring.c - ring.outer)));
  const int c1 = std::min(width - 1, static_cast<int>(std::ceil(ring.c + ring.outer)));
  for (int r = r0; r <= r1; ++r) {
    for (int c = c0; c <= c1; ++c) {
      const double d = std::hypot(r - ring.r, c - ring.c);
      if (d >= ring.inner && d <= ring.outer) out.push_back(static_cast<std::size_t>(r) * width + c);
    }
  }
  return out;
}

SceneTruth generate_image(const MorphotypeSpec& spec, const PatientStyle& style, std::uint64_t seed,
                          const SceneParams& scene, int label) {
  spec.validate();
  const int W = scene.width, H = scene.height;
  if (W < 16 || H < 16) throw DataError("synthetic scene must be at least 16x16");
  Rng rng(seed);

  int n = uniform_int(rng, spec.cells_min, spec.cells_max);
  n = std::clamp(static_cast<int>(std::lround(n * style.density_multiplier)), spec.cells_min, spec.cells_max);

  Placer placer(W, H, scene.gap);
  std::vector<CellPrimitive> cells;
  std::vector<std::vector<std::size_t>> cell_pixels;
  std::normal_distribution<double> size_dist(spec.size_mean, spec.size_std);
  auto draw_size = [&] { return std::max(2.0, spec.size_std > 0.0 ? size_dist(rng) : spec.size_mean); };

  auto try_place = [&](const std::vector<Capsule>& parts) {
    if (!placer.inside(parts)) return false;
    auto px = rasterize(parts, W, H);
    if (px.empty() || !placer.free(px)) return false;
    placer.occupy(px);
    cells.push_back({parts, spec.gram});
    cell_pixels.push_back(std::move(px));
    return true;
  };

  int attempts = 0;
  constexpr int kMaxAttempts = 20000;
  while (static_cast<int>(cells.size()) < n) {
    int group = 1;
    if (spec.arrangement == Arrangement::pair) group = 2;
    if (spec.arrangement == Arrangement::chain || spec.arrangement == Arrangement::cluster) {
      group = uniform_int(rng, spec.group_min, spec.group_max);
    }
    group = std::min(group, n - static_cast<int>(cells.size()));

    const double theta = uniform(rng, 0.0, 2.0 * kPi);
    const double size = draw_size();
    const double r0 = uniform(rng, 0, H - 1), c0 = uniform(rng, 0, W - 1);
    const auto first = make_cell(spec, rng, r0, c0, theta, size);
    if (++attempts > kMaxAttempts) throw DataError("could not place " + std::to_string(n) + " cells of " + spec.name);
    if (!try_place(first)) continue;

    // members: centre, axis angle and extent along the axis
    struct Member {
      double r, c, theta, size;
    };
    std::vector<Member> members{{r0, c0, theta, size}};
    for (int g = 1; g < group; ++g) {
      bool placed = false;
      for (int t = 0; t < 60 && !placed; ++t) {
        const Member& anchor = spec.arrangement == Arrangement::cluster
                                   ? members[uniform_int(rng, 0, static_cast<int>(members.size()) - 1)]
                                   : members.back();
        const double next_size = draw_size();
        double ang = anchor.theta, cell_theta = anchor.theta, dist;
        const double sep = (scene.gap + 1) * 1.5 + 0.5;
        if (spec.shape == CellShape::coccus && spec.arrangement == Arrangement::cluster) {
          // grape bunch: grow outwards from the group centroid
          double cr = 0.0, cc = 0.0;
          for (const auto& m : members) {
            cr += m.r;
            cc += m.c;
          }
          cr /= static_cast<double>(members.size());
          cc /= static_cast<double>(members.size());
          ang = uniform(rng, 0.0, 2.0 * kPi);
          dist = next_size / 2 + sep + 0.4 * t;
          const double r = cr + dist * std::sin(ang), c = cc + dist * std::cos(ang);
          if (try_place(make_cell(spec, rng, r, c, ang, next_size))) {
            members.push_back({r, c, ang, next_size});
            placed = true;
          }
          continue;
        }
        if (spec.shape == CellShape::coccus) {
          if (spec.arrangement == Arrangement::chain) ang = anchor.theta + uniform(rng, -0.2, 0.2);
          cell_theta = ang;
          dist = anchor.size / 2 + next_size / 2 + sep;
        } else if (spec.arrangement == Arrangement::cluster) {
          // palisade: side by side, perpendicular to the rod axis
          ang = anchor.theta + (uniform(rng, 0.0, 1.0) < 0.5 ? kPi / 2 : -kPi / 2);
          cell_theta = anchor.theta + uniform(rng, -0.25, 0.25);
          dist = spec.width + sep + uniform(rng, 0.0, 3.0);
        } else {
          ang = anchor.theta + (spec.arrangement == Arrangement::chain ? uniform(rng, -0.3, 0.3) : 0.0);
          cell_theta = ang;
          dist = anchor.size / 2 + next_size / 2 + sep;
        }
        const double r = anchor.r + dist * std::sin(ang), c = anchor.c + dist * std::cos(ang);
        if (try_place(make_cell(spec, rng, r, c, cell_theta, next_size))) {
          members.push_back({r, c, cell_theta, next_size});
          placed = true;
        }
      }
      if (!placed) break;
    }
  }

  std::vector<Ring> rings;
  const int nd = uniform_int(rng, scene.distractors_min, std::max(scene.distractors_min, scene.distractors_max));
  for (int d = 0, tries = 0; d < nd && tries < 200; ++tries) {
    Ring ring;
    ring.outer = uniform(rng, 11.0, 17.0);
    ring.inner = ring.outer - 3.0;
    ring.r = uniform(rng, ring.outer, H - 1 - ring.outer);
    ring.c = uniform(rng, ring.outer, W - 1 - ring.outer);
    if (!placer.free(rasterize(ring, W, H))) continue;
    rings.push_back(ring);
    ++d;
  }

  std::vector<double> buf(static_cast<std::size_t>(W) * H * 3);
  for (std::size_t i = 0; i < buf.size(); i += 3) {
    for (int ch = 0; ch < 3; ++ch) buf[i + ch] = kBackground[ch] + style.brightness;
  }
  for (const auto& ring : rings) {
    for (auto i : rasterize(ring, W, H)) {
      for (int ch = 0; ch < 3; ++ch) buf[i * 3 + ch] = kRedCellGhost[ch] + style.brightness;
    }
  }
  for (std::size_t k = 0; k < cells.size(); ++k) {
    const auto& base = cells[k].gram == Gram::positive ? kViolet : kPink;
    const double jitter = uniform(rng, -8.0, 8.0);
    const std::array<double, 3> col{base[0] + style.hue_shift + jitter, base[1] + jitter, base[2] - style.hue_shift + jitter};
    for (auto i : cell_pixels[k]) {
      for (int ch = 0; ch < 3; ++ch) buf[i * 3 + ch] = col[ch];
    }
  }
  blur(buf, W, H, style.blur_sigma);
  std::normal_distribution<double> noise(0.0, scene.noise_std);

  SceneTruth out;
  out.label = label;
  out.image = RasterImage(W, H);
  for (std::size_t i = 0; i < buf.size(); ++i) {
    const double v = buf[i] + (scene.noise_std > 0.0 ? noise(rng) : 0.0);
    out.image.data[i] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
  }

  // ids in raster order of each cell's first pixel
  std::vector<std::size_t> order(cells.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return cell_pixels[a].front() < cell_pixels[b].front(); });
  out.mask = InstanceMask(W, H);
  for (std::size_t id = 0; id < order.size(); ++id) {
    for (auto i : cell_pixels[order[id]]) out.mask.labels[i] = static_cast<std::uint32_t>(id + 1);
    out.primitives.push_back(cells[order[id]]);
  }
  out.distractors = std::move(rings);
  return out;
}

DatasetSpec DatasetSpec::default_bacteria() {
  DatasetSpec s;
  s.mode = Mode::bacteria;
  using A = Arrangement;
  using S = CellShape;
  const auto pos = Gram::positive, neg = Gram::negative;
  s.categories = {
      {"bacillus-neg", {morph("bacillus-neg", S::rod, A::single, neg, 22, 2, 6, 4, 6)}},
      {"bacillus-pos", {morph("bacillus-pos", S::rod, A::single, pos, 26, 2, 8, 4, 6)}},
      {"streptococcus", {morph("streptococcus", S::coccus, A::chain, pos, 8, 0.5, 1, 4, 6, 4, 6)}},
      {"diplococcus-neg", {morph("diplococcus-neg", S::coccus, A::pair, neg, 9, 0.5, 1, 4, 6)}},
      {"staph-uniform", {morph("staph-uniform", S::coccus, A::cluster, pos, 9, 0.5, 1, 4, 6, 4, 6)}},
      {"staph-varied", {morph("staph-varied", S::coccus, A::cluster, pos, 9, 2.0, 1, 4, 6, 4, 6)}},
      {"other",
       {morph("palisade-pos", S::rod, A::cluster, pos, 16, 1, 5, 4, 6, 3, 4),
        morph("streptobacillus-pos", S::rod, A::chain, pos, 14, 1, 5, 4, 6, 3, 4)}},
  };
  s.patients_per_category = 7;
  s.images_per_patient = 10;
  return s;
}

DatasetSpec DatasetSpec::default_fungi() {
  DatasetSpec s;
  s.mode = Mode::fungi;
  using A = Arrangement;
  using S = CellShape;
  const auto pos = Gram::positive;
  s.categories = {
      {"pseudohyphal",
       {morph("pseudohypha", S::pseudohypha, A::single, pos, 110, 15, 9, 2, 3),
        morph("budding-large", S::coccus, A::pair, pos, 20, 2, 1, 2, 4)}},
      {"small-yeast", {morph("small-yeast", S::coccus, A::single, pos, 13, 1, 1, 4, 6)}},
      {"elongated-yeast", {morph("elongated-yeast", S::rod, A::single, pos, 28, 3, 13, 3, 5)}},
      {"other", {morph("yeast-chain", S::coccus, A::chain, pos, 17, 1.5, 1, 3, 5, 3, 5)}},
  };
  s.patients_per_category = 6;
  s.images_per_patient = 5;
  return s;
}

void DatasetSpec::validate() const {
  if (categories.size() < 2) throw DataError("dataset spec needs at least two categories");
  if (patients_per_category < 1 || images_per_patient < 1) throw DataError("dataset counts must be at least 1");
  for (const auto& c : categories) {
    if (c.name.empty()) throw DataError("category needs a name");
    if (c.morphotypes.empty()) throw DataError("category " + c.name + " has no morphotypes");
    for (const auto& m : c.morphotypes) m.validate();
  }
}

nlohmann::json to_json(const DatasetSpec& spec) {
  auto cats = nlohmann::json::array();
  for (const auto& c : spec.categories) {
    auto ms = nlohmann::json::array();
    for (const auto& m : c.morphotypes) ms.push_back(morph_json(m));
    cats.push_back({{"name", c.name}, {"morphotypes", ms}});
  }
  return {{"mode", to_string(spec.mode)},
          {"seed", spec.seed},
          {"patients_per_category", spec.patients_per_category},
          {"images_per_patient", spec.images_per_patient},
          {"scene",
           {{"width", spec.scene.width},
            {"height", spec.scene.height},
            {"distractors", {spec.scene.distractors_min, spec.scene.distractors_max}},
            {"noise_std", spec.scene.noise_std},
            {"gap", spec.scene.gap}}},
          {"categories", cats}};
}

DatasetSpec dataset_spec_from_json(const nlohmann::json& j) {
  try {
    DatasetSpec s;
    s.mode = mode_from_string(j.value("mode", std::string("bacteria")));
    s.seed = j.value("seed", std::uint64_t{0});
    s.patients_per_category = j.value("patients_per_category", s.patients_per_category);
    s.images_per_patient = j.value("images_per_patient", s.images_per_patient);
    if (j.contains("scene")) {
      const auto& sc = j["scene"];
      s.scene.width = sc.value("width", s.scene.width);
      s.scene.height = sc.value("height", s.scene.height);
      if (sc.contains("distractors")) {
        s.scene.distractors_min = sc["distractors"].at(0).get<int>();
        s.scene.distractors_max = sc["distractors"].at(1).get<int>();
      }
      s.scene.noise_std = sc.value("noise_std", s.scene.noise_std);
      s.scene.gap = sc.value("gap", s.scene.gap);
    }
    for (const auto& c : j.at("categories")) {
      CategorySpec cat;
      cat.name = c.at("name").get<std::string>();
      for (const auto& m : c.at("morphotypes")) cat.morphotypes.push_back(morph_from(m));
      s.categories.push_back(std::move(cat));
    }
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("invalid dataset spec: ") + e.what());
  }
}

std::vector<PlannedImage> plan_dataset(const DatasetSpec& spec) {
  spec.validate();
  std::vector<PlannedImage> plan;
  std::uint64_t index = 0;
  for (std::size_t c = 0; c < spec.categories.size(); ++c) {
    const auto& cat = spec.categories[c];
    for (int p = 0; p < spec.patients_per_category; ++p) {
      Rng rng(derive_seed(spec.seed, {10, c, static_cast<std::uint64_t>(p)}));
      PatientStyle style;
      char id[32];
      std::snprintf(id, sizeof id, "c%02zu-p%03d", c, p);
      style.patient_id = id;
      style.hue_shift = uniform(rng, -12.0, 12.0);
      style.brightness = uniform(rng, -10.0, 10.0);
      style.blur_sigma = uniform(rng, 0.3, 0.8);
      style.density_multiplier = uniform(rng, 0.8, 1.25);
      const auto& m = cat.morphotypes[std::uniform_int_distribution<std::size_t>(0, cat.morphotypes.size() - 1)(rng)];
      for (int i = 0; i < spec.images_per_patient; ++i) {
        PlannedImage item;
        char bag[48];
        std::snprintf(bag, sizeof bag, "%s-i%02d", id, i);
        item.entry.bag_id = bag;
        item.entry.patient_id = style.patient_id;
        item.entry.label = static_cast<int>(c);
        item.entry.image = std::string("images/") + bag + ".png";
        item.entry.mask = std::string("masks/") + bag + ".png";
        item.style = style;
        item.morphotype = m;
        item.seed = derive_seed(spec.seed, {20, index++});
        plan.push_back(std::move(item));
      }
    }
  }
  return plan;
}

DatasetManifest plan_manifest(const DatasetSpec& spec, const std::vector<PlannedImage>& plan) {
  DatasetManifest m;
  m.mode = spec.mode;
  for (const auto& c : spec.categories) m.category_names.push_back(c.name);
  for (const auto& p : plan) m.entries.push_back(p.entry);
  return m;
}

SceneTruth render(const DatasetSpec& spec, const PlannedImage& item) {
  return generate_image(item.morphotype, item.style, item.seed, spec.scene, item.entry.label);
}

DatasetManifest generate_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir, int threads) {
  const auto plan = plan_dataset(spec);
  parallel_for(plan.size(), threads, [&](std::size_t i) {
    const auto scene = render(spec, plan[i]);
    write_png(out_dir / plan[i].entry.image, scene.image);
    write_mask(out_dir / plan[i].entry.mask, scene.mask);
  });
  auto manifest = plan_manifest(spec, plan);
  write_manifest(out_dir / "manifest.jsonl", manifest);
  write_text(out_dir / "spec.json", to_json(spec).dump(2) + "\n");
  return manifest;
}

std::pair<DatasetManifest, std::vector<Bag>> synthesize_bags(const DatasetSpec& spec, const LoadOptions& options) {
  const auto plan = plan_dataset(spec);
  std::vector<Bag> bags(plan.size());
  parallel_for(plan.size(), options.threads, [&](std::size_t i) {
    auto scene = render(spec, plan[i]);
    InstanceMask mask = options.segmenter ? segment_baseline(scene.image, *options.segmenter) : std::move(scene.mask);
    bags[i] = extract_bag(plan[i].entry, spec.mode, scene.image, std::move(mask), options);
  });
  return {plan_manifest(spec, plan), std::move(bags)};
}

EmbeddingTable generate_embeddings(const std::vector<Bag>& bags, double separability, int dim, std::uint64_t seed) {
  if (separability < 0.0) throw DataError("separability must be non-negative");
  if (dim < 1) throw DataError("embedding dimension must be positive");
  EmbeddingTable table(dim);
  std::vector<float> v(dim);
  for (const auto& bag : bags) {
    if (bag.label >= dim) throw DataError("embedding dimension must exceed the largest label");
    for (const auto& p : bag.patches) {
      Rng rng(derive_seed(seed, {fnv1a(p.patch_id), static_cast<std::uint64_t>(bag.label)}));
      std::normal_distribution<double> nd(0.0, 1.0);
      for (int d = 0; d < dim; ++d) v[d] = static_cast<float>(nd(rng) + (d == bag.label ? separability : 0.0));
      table.add(p.patch_id, v);
    }
  }
  return table;
}

}  // namespace gramsmear
