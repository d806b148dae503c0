#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "cpae/errors.hpp"
#include "cpae/tensor.hpp"

namespace cpae {

// Parameter checkpoint container.
//
// Layout (all integers little-endian u32):
//   magic "CPAE" | version | tensor_count
//   per tensor: name_len | name bytes | ndims | dims... | f32 payload
//
// Payload is always f32 regardless of the in-memory scalar type.
struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

inline std::uint32_t read_u32(std::istream& is, const std::string& path) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (!is) throw ParseError("truncated checkpoint at byte " + std::to_string(is.tellg()) + " in " + path);
  return v;
}

}  // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::filesystem::path& path,
                            const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  os.write("CPAE", 4);
  detail::write_u32(os, kCheckpointVersion);
  detail::write_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    detail::write_u32(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::write_u32(os, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) detail::write_u32(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  }
  if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

inline std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "CPAE", 4) != 0)
    throw FormatError("bad magic bytes in checkpoint: " + path.string());
  const auto version = detail::read_u32(is, path.string());
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto count = detail::read_u32(is, path.string());
  std::vector<NamedTensor> out(count);
  for (auto& t : out) {
    const auto name_len = detail::read_u32(is, path.string());
    t.name.resize(name_len);
    is.read(t.name.data(), name_len);
    const auto ndims = detail::read_u32(is, path.string());
    t.shape.resize(ndims);
    std::int64_t n = 1;
    for (auto& d : t.shape) {
      d = static_cast<int>(detail::read_u32(is, path.string()));
      n *= d;
    }
    t.data.resize(static_cast<std::size_t>(n));
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!is)
      throw ParseError("truncated checkpoint payload for tensor '" + t.name + "' in " +
                       path.string());
  }
  return out;
}

}  // namespace cpae
