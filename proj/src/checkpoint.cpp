#include "gramsmear/checkpoint.hpp"

#include <bit>
#include <cstring>

#include <nlohmann/json.hpp>

#include "gramsmear/error.hpp"

namespace gramsmear {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr int kCheckpointVersion = 1;

template <class T>
Bytes encode(const ParamStore<T>& params, const char* dtype) {
  nlohmann::json shapes = nlohmann::json::array();
  for (std::size_t i = 0; i < params.size(); ++i) shapes.push_back(params.value(i).shape());
  const nlohmann::json header = {
      {"version", kCheckpointVersion}, {"names", params.names()}, {"shapes", shapes}, {"dtype", dtype}};
  const std::string head = header.dump() + "\n";
  Bytes out(head.begin(), head.end());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& v = params.value(i);
    const auto* p = reinterpret_cast<const std::uint8_t*>(v.data());
    out.insert(out.end(), p, p + v.size() * sizeof(T));
  }
  put_u32(out, crc32(out.data(), out.size()));
  return out;
}

}  // namespace

Bytes encode_checkpoint(const ParamStore<float>& params) { return encode(params, "float32"); }
Bytes encode_checkpoint(const ParamStore<double>& params) { return encode(params, "float64"); }

ParamStore<float> decode_checkpoint(const Bytes& bytes) {
  if (bytes.size() < 4) throw DataError("checkpoint too short");
  const std::size_t body = bytes.size() - 4;
  if (crc32(bytes.data(), body) != get_u32(bytes.data() + body)) throw DataError("checkpoint CRC32 mismatch");
  const auto nl = std::find(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(body), '\n');
  if (nl == bytes.begin() + static_cast<std::ptrdiff_t>(body)) throw DataError("checkpoint header missing");
  ParamStore<float> out;
  try {
    const auto header = nlohmann::json::parse(bytes.begin(), nl);
    if (header.at("version").get<int>() != kCheckpointVersion) throw DataError("unsupported checkpoint version");
    const auto dtype = header.at("dtype").get<std::string>();
    if (dtype != "float32" && dtype != "float64") throw DataError("unsupported checkpoint dtype " + dtype);
    const std::size_t width = dtype == "float32" ? 4 : 8;
    const auto names = header.at("names").get<std::vector<std::string>>();
    const auto shapes = header.at("shapes").get<std::vector<Shape>>();
    if (names.size() != shapes.size()) throw DataError("checkpoint names/shapes length mismatch");
    std::size_t pos = static_cast<std::size_t>(nl - bytes.begin()) + 1;
    for (std::size_t i = 0; i < names.size(); ++i) {
      const std::size_t n = shape_size(shapes[i]);
      if (pos + n * width > body) throw DataError("checkpoint data truncated at " + names[i]);
      std::vector<float> data(n);
      for (std::size_t k = 0; k < n; ++k) {
        if (width == 4) {
          std::memcpy(&data[k], bytes.data() + pos + 4 * k, 4);
        } else {
          double d;
          std::memcpy(&d, bytes.data() + pos + 8 * k, 8);
          data[k] = static_cast<float>(d);
        }
      }
      pos += n * width;
      out.add(names[i], Tensor<float>(shapes[i], std::move(data)));
    }
    if (pos != body) throw DataError("checkpoint has trailing data");
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed checkpoint header: ") + e.what());
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const ParamStore<float>& params) {
  write_file(path, encode_checkpoint(params));
}

ParamStore<float> load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("checkpoint not found: " + path.string());
  return decode_checkpoint(read_file(path));
}

}  // namespace gramsmear
