#include "gramsmear/image_io.hpp"

#include <png.h>
#include <zlib.h>

#include <cstring>
#include <fstream>
#include <sstream>

#include "gramsmear/error.hpp"

namespace gramsmear {

namespace {

struct ReadCursor {
  const Bytes* src;
  std::size_t pos;
};

void on_png_error(png_structp png, png_const_charp msg) {
  auto* what = static_cast<std::string*>(png_get_error_ptr(png));
  *what = msg;
  png_longjmp(png, 1);
}

void on_png_warning(png_structp, png_const_charp) {}

void write_to_bytes(png_structp png, png_bytep data, png_size_t len) {
  auto* out = static_cast<Bytes*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + len);
}

void read_from_bytes(png_structp png, png_bytep data, png_size_t len) {
  auto* cur = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cur->pos + len > cur->src->size()) png_error(png, "truncated PNG data");
  std::memcpy(data, cur->src->data() + cur->pos, len);
  cur->pos += len;
}

// rows: one pointer per row, already in PNG byte order.
Bytes encode_raw(int width, int height, int bit_depth, int color_type, std::vector<png_bytep>& rows) {
  Bytes out;
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, on_png_error, on_png_warning);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("PNG encode failed: " + err);
  }
  png_set_write_fn(png, &out, write_to_bytes, nullptr);
  png_set_IHDR(png, info, width, height, bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 6);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

struct Decoded {
  int width = 0, height = 0, bit_depth = 0, color_type = 0, channels = 0;
  std::vector<std::uint8_t> pixels;
  std::size_t rowbytes = 0;
};

Decoded decode_raw(const Bytes& bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw DataError("not a PNG file");
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, on_png_error, on_png_warning);
  png_infop info = png_create_info_struct(png);
  ReadCursor cur{&bytes, 0};
  Decoded d;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("PNG decode failed: " + err);
  }
  png_set_read_fn(png, &cur, read_from_bytes);
  png_read_info(png, info);
  d.width = static_cast<int>(png_get_image_width(png, info));
  d.height = static_cast<int>(png_get_image_height(png, info));
  d.bit_depth = png_get_bit_depth(png, info);
  d.color_type = png_get_color_type(png, info);
  if (d.color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (d.color_type == PNG_COLOR_TYPE_GRAY && d.bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);
  d.bit_depth = png_get_bit_depth(png, info);
  d.color_type = png_get_color_type(png, info);
  d.channels = png_get_channels(png, info);
  d.rowbytes = png_get_rowbytes(png, info);
  d.pixels.resize(d.rowbytes * d.height);
  std::vector<png_bytep> rows(d.height);
  for (int r = 0; r < d.height; ++r) rows[r] = d.pixels.data() + r * d.rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return d;
}

}  // namespace

Bytes encode_png(const RasterImage& img) {
  std::vector<png_bytep> rows(img.height);
  auto* base = const_cast<std::uint8_t*>(img.data.data());
  for (int r = 0; r < img.height; ++r) rows[r] = base + static_cast<std::size_t>(r) * img.width * 3;
  return encode_raw(img.width, img.height, 8, PNG_COLOR_TYPE_RGB, rows);
}

RasterImage decode_png(const Bytes& png) {
  Decoded d = decode_raw(png);
  if (d.bit_depth != 8) throw DataError("expected an 8-bit PNG image");
  RasterImage img(d.width, d.height);
  for (int r = 0; r < d.height; ++r) {
    const auto* row = d.pixels.data() + r * d.rowbytes;
    for (int c = 0; c < d.width; ++c) {
      for (int ch = 0; ch < 3; ++ch) {
        // grey and grey+alpha replicate the first channel
        const int src = d.channels >= 3 ? ch : 0;
        img.at(r, c, ch) = row[c * d.channels + src];
      }
    }
  }
  return img;
}

Bytes encode_mask_png(const InstanceMask& mask) {
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(mask.width) * mask.height * 2);
  for (std::size_t i = 0; i < mask.labels.size(); ++i) {
    const auto v = mask.labels[i];
    if (v > 0xFFFF) throw DataError("instance id exceeds 16-bit PNG range");
    buf[2 * i] = static_cast<std::uint8_t>(v >> 8);  // PNG is big-endian
    buf[2 * i + 1] = static_cast<std::uint8_t>(v & 0xFF);
  }
  std::vector<png_bytep> rows(mask.height);
  for (int r = 0; r < mask.height; ++r) rows[r] = buf.data() + static_cast<std::size_t>(r) * mask.width * 2;
  return encode_raw(mask.width, mask.height, 16, PNG_COLOR_TYPE_GRAY, rows);
}

InstanceMask decode_mask_png(const Bytes& png) {
  Decoded d = decode_raw(png);
  if (d.channels != 1 || d.bit_depth != 16) throw DataError("instance mask PNG must be 16-bit single channel");
  InstanceMask mask(d.width, d.height);
  for (int r = 0; r < d.height; ++r) {
    const auto* row = d.pixels.data() + r * d.rowbytes;
    for (int c = 0; c < d.width; ++c) mask.at(r, c) = (static_cast<std::uint32_t>(row[2 * c]) << 8) | row[2 * c + 1];
  }
  return mask;
}

nlohmann::json mask_to_json(const InstanceMask& mask) {
  const auto n = mask.instance_count();
  std::vector<nlohmann::json> runs(n, nlohmann::json::array());
  std::size_t i = 0;
  while (i < mask.labels.size()) {
    const auto v = mask.labels[i];
    std::size_t j = i + 1;
    while (j < mask.labels.size() && mask.labels[j] == v) ++j;
    if (v) {
      runs[v - 1].push_back(i);
      runs[v - 1].push_back(j - i);
    }
    i = j;
  }
  nlohmann::json instances = nlohmann::json::array();
  for (std::uint32_t id = 1; id <= n; ++id) {
    if (runs[id - 1].empty()) continue;
    instances.push_back({{"id", id}, {"rle", std::move(runs[id - 1])}});
  }
  return {{"width", mask.width}, {"height", mask.height}, {"instances", std::move(instances)}};
}

InstanceMask mask_from_json(const nlohmann::json& j) {
  try {
    InstanceMask mask(j.at("width").get<int>(), j.at("height").get<int>());
    for (const auto& inst : j.at("instances")) {
      const auto id = inst.at("id").get<std::uint32_t>();
      const auto& rle = inst.at("rle");
      if (id == 0 || rle.size() % 2 != 0) throw DataError("malformed RLE instance");
      for (std::size_t k = 0; k < rle.size(); k += 2) {
        const auto start = rle[k].get<std::size_t>();
        const auto run = rle[k + 1].get<std::size_t>();
        if (start + run > mask.labels.size()) throw DataError("RLE run outside mask");
        std::fill_n(mask.labels.begin() + static_cast<std::ptrdiff_t>(start), run, id);
      }
    }
    return mask;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed mask JSON: ") + e.what());
  }
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, const Bytes& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, Bytes(text.begin(), text.end()));
}

std::string read_text(const std::filesystem::path& path) {
  const Bytes b = read_file(path);
  return std::string(b.begin(), b.end());
}

RasterImage read_png(const std::filesystem::path& path) { return decode_png(read_file(path)); }

void write_png(const std::filesystem::path& path, const RasterImage& img) { write_file(path, encode_png(img)); }

InstanceMask read_mask(const std::filesystem::path& path) {
  if (path.extension() == ".json") {
    try {
      return mask_from_json(nlohmann::json::parse(read_text(path)));
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(path.string() + ": " + e.what());
    }
  }
  return decode_mask_png(read_file(path));
}

void write_mask(const std::filesystem::path& path, const InstanceMask& mask) {
  if (path.extension() == ".json") {
    write_text(path, mask_to_json(mask).dump());
  } else {
    write_file(path, encode_mask_png(mask));
  }
}

std::uint32_t crc32(const std::uint8_t* data, std::size_t size) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace gramsmear
