#pragma once

// Flat name -> tensor container in the "TAMO" binary layout:
//
//   magic   4 bytes  "TAMO"
//   version 1 byte   (1)
//   entries until EOF, each:
//     u32    name length, then the name bytes (UTF-8, no terminator)
//     u32    rank, then rank × u64 extents
//     f64 ×  product(extents) values, row-major
//
// All integers and floats are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>

#include "utamoe/tensor.hpp"

namespace utamoe {

using TensorDict = std::map<std::string, Tensor>;

inline constexpr char kCheckpointMagic[4] = {'T', 'A', 'M', 'O'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
bool read_pod(std::istream& is, T& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return static_cast<std::size_t>(is.gcount()) == sizeof(T);
}

}  // namespace detail

inline void write_checkpoint(const TensorDict& dict, std::ostream& os) {
  os.write(kCheckpointMagic, 4);
  detail::write_pod<std::uint8_t>(os, kCheckpointVersion);
  for (const auto& [name, t] : dict) {
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) detail::write_pod<std::uint64_t>(os, e);
    os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("write_checkpoint: stream failure");
}

inline TensorDict read_checkpoint(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw std::runtime_error("read_checkpoint: bad magic");
  std::uint8_t version = 0;
  if (!detail::read_pod(is, version) || version != kCheckpointVersion)
    throw std::runtime_error("read_checkpoint: unsupported version " + std::to_string(version));
  TensorDict dict;
  std::uint32_t name_len;
  while (detail::read_pod(is, name_len)) {
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    std::uint32_t rank = 0;
    if (static_cast<std::uint32_t>(is.gcount()) != name_len || !detail::read_pod(is, rank))
      throw std::runtime_error("read_checkpoint: truncated entry header");
    Shape shape(rank);
    for (auto& e : shape) {
      std::uint64_t v;
      if (!detail::read_pod(is, v)) throw std::runtime_error("read_checkpoint: truncated shape of " + name);
      e = static_cast<std::size_t>(v);
    }
    std::vector<double> values(shape_numel(shape));
    is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (static_cast<std::size_t>(is.gcount()) != values.size() * sizeof(double))
      throw std::runtime_error("read_checkpoint: truncated payload of " + name);
    dict.emplace(std::move(name), Tensor::from_data(std::move(shape), std::move(values)));
  }
  return dict;
}

inline void save_checkpoint(const TensorDict& dict, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_checkpoint(dict, os);
}

inline TensorDict load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("missing checkpoint " + path);
  return read_checkpoint(is);
}

}  // namespace utamoe
