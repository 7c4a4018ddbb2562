#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gramsmear/imaging.hpp"

namespace gramsmear {

using Bytes = std::vector<std::uint8_t>;

Bytes encode_png(const RasterImage& img);
RasterImage decode_png(const Bytes& png);

/// 16-bit greyscale PNG of instance ids (ids above 65535 are rejected).
Bytes encode_mask_png(const InstanceMask& mask);
InstanceMask decode_mask_png(const Bytes& png);

/// {"width", "height", "instances": [{"id", "rle": [start, run, ...]}]}
nlohmann::json mask_to_json(const InstanceMask& mask);
InstanceMask mask_from_json(const nlohmann::json& j);

Bytes read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const Bytes& bytes);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

RasterImage read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const RasterImage& img);

/// Chooses PNG or JSON by extension (".json" means the RLE sidecar).
InstanceMask read_mask(const std::filesystem::path& path);
void write_mask(const std::filesystem::path& path, const InstanceMask& mask);

std::uint32_t crc32(const std::uint8_t* data, std::size_t size);

inline void put_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace gramsmear
