#pragma once

#include <filesystem>

#include "gramsmear/image_io.hpp"
#include "gramsmear/tensor.hpp"

namespace gramsmear {

// Layout: one line of JSON {"version", "names", "shapes", "dtype"} ending in
// '\n', the tensors' little-endian raw data concatenated in name order, then a
// little-endian CRC32 of every preceding byte.

Bytes encode_checkpoint(const ParamStore<float>& params);
Bytes encode_checkpoint(const ParamStore<double>& params);

/// Decodes either dtype into single precision.
ParamStore<float> decode_checkpoint(const Bytes& bytes);

void save_checkpoint(const std::filesystem::path& path, const ParamStore<float>& params);
ParamStore<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace gramsmear
