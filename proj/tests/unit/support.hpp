#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <algorithm>

#include <unistd.h>

#include "gramsmear/imaging.hpp"

namespace testutil {

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("gramsmear-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline gramsmear::RasterImage blank(int w, int h) {
  gramsmear::RasterImage img(w, h);
  for (std::size_t i = 0; i < img.pixel_count(); ++i) {
    img.data[i * 3] = 235;
    img.data[i * 3 + 1] = 225;
    img.data[i * 3 + 2] = 220;
  }
  return img;
}

inline void paint_disk(gramsmear::RasterImage& img, double r, double c, double radius) {
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      if ((y - r) * (y - r) + (x - c) * (x - c) > radius * radius) continue;
      img.at(y, x, 0) = 90;
      img.at(y, x, 1) = 40;
      img.at(y, x, 2) = 140;
    }
  }
}

inline void paint_rect(gramsmear::RasterImage& img, int r0, int c0, int h, int w) {
  for (int y = r0; y < r0 + h; ++y) {
    for (int x = c0; x < c0 + w; ++x) {
      img.at(y, x, 0) = 90;
      img.at(y, x, 1) = 40;
      img.at(y, x, 2) = 140;
    }
  }
}

/// Background plus random stained disks and bars.
inline gramsmear::RasterImage random_smear(int w, int h, int cells, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto img = blank(w, h);
  std::uniform_real_distribution<double> ur(0, h), uc(0, w), rad(2.0, 14.0);
  std::uniform_int_distribution<int> kind(0, 2);
  for (int i = 0; i < cells; ++i) {
    const double r = ur(rng), c = uc(rng);
    if (kind(rng) == 0) {
      const int len = static_cast<int>(rad(rng) * 4);
      const int r0 = std::clamp(static_cast<int>(r), 0, h - 3), c0 = std::clamp(static_cast<int>(c), 0, w - 1);
      paint_rect(img, r0, c0, 3, std::min(len, w - c0));
    } else {
      paint_disk(img, r, c, rad(rng));
    }
  }
  return img;
}

}  // namespace testutil
