#include "gramsmear/bagging.hpp"

#include <cmath>
#include <cstdio>
#include <iostream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "gramsmear/error.hpp"
#include "gramsmear/parallel.hpp"

namespace gramsmear {

std::string to_string(Mode mode) { return mode == Mode::bacteria ? "bacteria" : "fungi"; }

Mode mode_from_string(const std::string& s) {
  if (s == "bacteria") return Mode::bacteria;
  if (s == "fungi") return Mode::fungi;
  throw DataError("unknown mode '" + s + "' (expected bacteria or fungi)");
}

int DatasetManifest::category_index(const std::string& name) const {
  for (std::size_t i = 0; i < category_names.size(); ++i) {
    if (category_names[i] == name) return static_cast<int>(i);
  }
  throw DataError("unknown category '" + name + "'");
}

void DatasetManifest::validate() const {
  std::set<std::string> ids;
  for (const auto& e : entries) {
    if (!ids.insert(e.bag_id).second) throw DataError("duplicate bag_id " + e.bag_id);
    if (e.label < 0 || e.label >= category_count()) {
      throw DataError("bag " + e.bag_id + " has label " + std::to_string(e.label) + " outside [0, " +
                      std::to_string(category_count()) + ")");
    }
  }
}

std::filesystem::path categories_path(const std::filesystem::path& manifest_path) {
  auto p = manifest_path;
  p.replace_filename(manifest_path.stem().string() + ".categories.json");
  return p;
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  manifest.validate();
  std::string lines;
  for (const auto& e : manifest.entries) {
    nlohmann::json j = {{"bag_id", e.bag_id},
                        {"patient_id", e.patient_id},
                        {"label", e.label},
                        {"category", manifest.category_names[e.label]},
                        {"image", e.image},
                        {"mask", e.mask}};
    lines += j.dump() + "\n";
  }
  write_text(path, lines);
  nlohmann::json cats = {{"mode", to_string(manifest.mode)}, {"categories", manifest.category_names}};
  write_text(categories_path(path), cats.dump(2) + "\n");
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  DatasetManifest m;
  try {
    const auto cats = nlohmann::json::parse(read_text(categories_path(path)));
    m.mode = mode_from_string(cats.at("mode").get<std::string>());
    m.category_names = cats.at("categories").get<std::vector<std::string>>();
    std::istringstream in(read_text(path));
    std::string line;
    while (std::getline(in, line)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      const auto j = nlohmann::json::parse(line);
      m.entries.push_back({j.at("bag_id").get<std::string>(), j.at("patient_id").get<std::string>(),
                           j.at("label").get<int>(), j.at("image").get<std::string>(),
                           j.at("mask").get<std::string>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest " + path.string() + ": " + e.what());
  }
  m.validate();
  return m;
}

namespace {

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace

RasterImage crop_reflect(const RasterImage& img, int top, int left, int height, int width) {
  RasterImage out(width, height);
  std::vector<int> cols(width);
  for (int c = 0; c < width; ++c) cols[c] = reflect_index(left + c, img.width);
  for (int r = 0; r < height; ++r) {
    const int sr = reflect_index(top + r, img.height);
    for (int c = 0; c < width; ++c) {
      for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = img.at(sr, cols[c], ch);
    }
  }
  return out;
}

RasterImage bilinear_resize(const RasterImage& img, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize: output dims must be >= 1");
  struct Tap {
    int i0, i1;
    double f;
  };
  auto taps = [](int out, int in) {
    std::vector<Tap> t(out);
    const double scale = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
      double s = (o + 0.5) * scale - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(in - 1));
      const int i0 = static_cast<int>(std::floor(s));
      t[o] = {i0, std::min(i0 + 1, in - 1), s - i0};
    }
    return t;
  };
  const auto ty = taps(out_h, img.height);
  const auto tx = taps(out_w, img.width);
  RasterImage out(out_w, out_h);
  for (int r = 0; r < out_h; ++r) {
    const auto& y = ty[r];
    for (int c = 0; c < out_w; ++c) {
      const auto& x = tx[c];
      for (int ch = 0; ch < 3; ++ch) {
        const double top = img.at(y.i0, x.i0, ch) * (1.0 - x.f) + img.at(y.i0, x.i1, ch) * x.f;
        const double bot = img.at(y.i1, x.i0, ch) * (1.0 - x.f) + img.at(y.i1, x.i1, ch) * x.f;
        const double v = top * (1.0 - y.f) + bot * y.f;
        out.at(r, c, ch) = static_cast<std::uint8_t>(std::clamp<long>(std::lround(v), 0, 255));
      }
    }
  }
  return out;
}

std::string make_patch_id(const std::string& bag_id, std::uint32_t instance) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "/p%04u", instance);
  return bag_id + buf;
}

namespace {

struct Centre {
  std::uint32_t id;
  int row, col;
};

std::vector<Centre> rounded_centroids(const InstanceMask& mask) {
  const auto n = mask.instance_count();
  std::vector<double> sr(n + 1, 0.0), sc(n + 1, 0.0);
  std::vector<std::size_t> cnt(n + 1, 0);
  for (std::size_t i = 0; i < mask.labels.size(); ++i) {
    const auto v = mask.labels[i];
    if (!v) continue;
    sr[v] += static_cast<double>(i / mask.width);
    sc[v] += static_cast<double>(i % mask.width);
    ++cnt[v];
  }
  std::vector<Centre> out;
  for (std::uint32_t id = 1; id <= n; ++id) {
    if (!cnt[id]) continue;
    out.push_back({id, static_cast<int>(std::lround(sr[id] / cnt[id])), static_cast<int>(std::lround(sc[id] / cnt[id]))});
  }
  return out;
}

void check_dims(const RasterImage& img, const InstanceMask& mask) {
  if (img.width != mask.width || img.height != mask.height) {
    throw ShapeError("mask is " + std::to_string(mask.width) + "x" + std::to_string(mask.height) + " but image is " +
                     std::to_string(img.width) + "x" + std::to_string(img.height));
  }
}

}  // namespace

std::vector<Patch> extract_bacteria_patches(const RasterImage& img, const InstanceMask& mask, const std::string& bag_id,
                                            int context_margin) {
  check_dims(img, mask);
  constexpr int half = kBacteriaPatch / 2;
  std::vector<Patch> out;
  for (const auto& c : rounded_centroids(mask)) {
    Patch p;
    p.pixels = crop_reflect(img, c.row - half, c.col - half, kBacteriaPatch, kBacteriaPatch);
    if (context_margin > 0) {
      const int side = kBacteriaPatch + 2 * context_margin;
      p.context = crop_reflect(img, c.row - half - context_margin, c.col - half - context_margin, side, side);
    }
    p.center_row = c.row;
    p.center_col = c.col;
    p.source_instance = c.id;
    p.patch_id = make_patch_id(bag_id, c.id);
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<Patch> extract_fungi_patches(const RasterImage& img, const InstanceMask& mask, const std::string& bag_id) {
  check_dims(img, mask);
  constexpr int half = kFungiCrop / 2;
  std::vector<Patch> out;
  for (const auto& c : rounded_centroids(mask)) {
    Patch p;
    p.pixels = bilinear_resize(crop_reflect(img, c.row - half, c.col - half, kFungiCrop, kFungiCrop), kFungiPatch,
                               kFungiPatch);
    p.center_row = c.row;
    p.center_col = c.col;
    p.source_instance = c.id;
    p.patch_id = make_patch_id(bag_id, c.id);
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<Patch> enumerate_patches(const InstanceMask& mask, const std::string& bag_id) {
  std::vector<Patch> out;
  for (const auto& c : rounded_centroids(mask)) {
    Patch p;
    p.center_row = c.row;
    p.center_col = c.col;
    p.source_instance = c.id;
    p.patch_id = make_patch_id(bag_id, c.id);
    out.push_back(std::move(p));
  }
  return out;
}

Bag build_bag(const ManifestEntry& entry, Mode mode, std::vector<Patch> patches) {
  Bag bag;
  bag.bag_id = entry.bag_id;
  bag.patient_id = entry.patient_id;
  bag.image_ref = entry.image;
  bag.label = entry.label;
  bag.mode = mode;
  std::stable_sort(patches.begin(), patches.end(),
                   [](const Patch& a, const Patch& b) { return a.source_instance < b.source_instance; });
  bag.patches = std::move(patches);
  if (bag.patches.empty()) {
    bag.empty = true;
    std::cerr << "warning: bag " << bag.bag_id << " has no detected cells; excluded from training\n";
  }
  return bag;
}

Bag extract_bag(const ManifestEntry& entry, Mode mode, const RasterImage& img, InstanceMask mask,
                const LoadOptions& options) {
  if (mode == Mode::fungi) mask = filter_by_diameter(mask, kFungiMaxDiameter);
  std::vector<Patch> patches;
  if (!options.with_pixels) {
    patches = enumerate_patches(mask, entry.bag_id);
  } else if (mode == Mode::bacteria) {
    patches = extract_bacteria_patches(img, mask, entry.bag_id, options.context_margin);
  } else {
    patches = extract_fungi_patches(img, mask, entry.bag_id);
  }
  return build_bag(entry, mode, std::move(patches));
}

std::vector<Bag> load_bags(const DatasetManifest& manifest, const std::filesystem::path& base_dir,
                           const LoadOptions& options) {
  std::vector<Bag> bags(manifest.entries.size());
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  };
  parallel_for(bags.size(), options.threads, [&](std::size_t i) {
    const auto& e = manifest.entries[i];
    InstanceMask mask;
    RasterImage img;
    if (options.with_pixels || options.segmenter) img = read_png(resolve(e.image));
    if (options.segmenter) {
      mask = segment_baseline(img, *options.segmenter);
    } else {
      mask = read_mask(resolve(e.mask));
    }
    bags[i] = extract_bag(e, manifest.mode, img, std::move(mask), options);
  });
  return bags;
}

namespace {

std::string patch_file_name(const std::string& patch_id) {
  std::string s = patch_id;
  for (auto& ch : s) {
    if (ch == '/' || ch == '\\' || ch == ':') ch = '_';
  }
  return s + ".png";
}

}  // namespace

void write_patch_directory(const std::filesystem::path& dir, const std::vector<Patch>& patches) {
  std::filesystem::create_directories(dir);
  nlohmann::json index = nlohmann::json::array();
  for (const auto& p : patches) {
    const auto name = patch_file_name(p.patch_id);
    write_png(dir / name, p.pixels);
    index.push_back({{"patch_id", p.patch_id},
                     {"file", name},
                     {"center", {p.center_row, p.center_col}},
                     {"source_instance", p.source_instance}});
  }
  write_text(dir / "index.json", index.dump(2) + "\n");
}

std::vector<Patch> read_patch_directory(const std::filesystem::path& dir) {
  std::vector<Patch> out;
  try {
    const auto index = nlohmann::json::parse(read_text(dir / "index.json"));
    for (const auto& j : index) {
      Patch p;
      p.patch_id = j.at("patch_id").get<std::string>();
      p.center_row = j.at("center").at(0).get<int>();
      p.center_col = j.at("center").at(1).get<int>();
      p.source_instance = j.at("source_instance").get<std::uint32_t>();
      p.pixels = read_png(dir / j.at("file").get<std::string>());
      out.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed patch index in " + dir.string() + ": " + e.what());
  }
  return out;
}

Bytes pack_patches(const std::vector<Patch>& patches) {
  Bytes out = {'B', 'A', 'G', 'S'};
  put_u32(out, static_cast<std::uint32_t>(patches.size()));
  for (const auto& p : patches) {
    const Bytes png = encode_png(p.pixels);
    put_u32(out, static_cast<std::uint32_t>(png.size()));
    out.insert(out.end(), png.begin(), png.end());
  }
  return out;
}

std::vector<RasterImage> unpack_patches(const Bytes& blob) {
  if (blob.size() < 8 || std::string(blob.begin(), blob.begin() + 4) != "BAGS") throw DataError("not a BAGS container");
  const auto count = get_u32(blob.data() + 4);
  std::size_t pos = 8;
  std::vector<RasterImage> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    if (pos + 4 > blob.size()) throw DataError("truncated BAGS container");
    const auto len = get_u32(blob.data() + pos);
    pos += 4;
    if (pos + len > blob.size()) throw DataError("truncated BAGS container");
    out.push_back(decode_png(Bytes(blob.begin() + static_cast<std::ptrdiff_t>(pos),
                                   blob.begin() + static_cast<std::ptrdiff_t>(pos + len))));
    pos += len;
  }
  if (pos != blob.size()) throw DataError("trailing bytes in BAGS container");
  return out;
}

}  // namespace gramsmear
