#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "scd/errors.hpp"
#include "scd/params.hpp"
#include "scd/tensor.hpp"

namespace scd {

// Flat binary parameter archive. Layout:
//   magic "SCDCKPT1", u32 version, u32 entry count
//   per entry (canonical name order): u32 name length, name bytes,
//     u8 dtype (0 = f64), u8 ndim, u64 extents
//   payloads (raw little-endian f64) in the same order
//   trailing u64 FNV-1a checksum over all payload bytes
namespace detail {

constexpr char kCkptMagic[8] = {'S', 'C', 'D', 'C', 'K', 'P', 'T', '1'};

inline std::uint64_t fnv1a64(const unsigned char* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError("checkpoint: unexpected end of file");
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path,
                            const std::map<std::string, Tensor>& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  os.write(detail::kCkptMagic, 8);
  detail::write_pod<std::uint32_t>(os, 1);
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod<std::uint8_t>(os, 0);  // f64
    detail::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(t.ndim()));
    for (auto d : t.shape()) detail::write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(d));
  }
  std::uint64_t checksum = 0xcbf29ce484222325ull;
  for (const auto& [name, t] : entries) {
    const auto& v = t.values();
    const auto* bytes = reinterpret_cast<const unsigned char*>(v.data());
    const std::size_t nbytes = v.size() * sizeof(double);
    os.write(reinterpret_cast<const char*>(bytes), static_cast<std::streamsize>(nbytes));
    checksum = detail::fnv1a64(bytes, nbytes, checksum);
  }
  detail::write_pod<std::uint64_t>(os, checksum);
  if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

inline std::map<std::string, Tensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
    throw FormatError("not a checkpoint file: " + path.string());
  const auto version = detail::read_pod<std::uint32_t>(is);
  if (version != 1)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto count = detail::read_pod<std::uint32_t>(is);

  struct Entry {
    std::string name;
    Shape shape;
  };
  std::vector<Entry> manifest;
  manifest.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::read_pod<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw FormatError("checkpoint: truncated manifest");
    const auto dtype = detail::read_pod<std::uint8_t>(is);
    if (dtype != 0) throw FormatError("checkpoint: unknown dtype tag");
    const auto ndim = detail::read_pod<std::uint8_t>(is);
    Shape shape(ndim);
    for (auto& d : shape) d = static_cast<std::int64_t>(detail::read_pod<std::uint64_t>(is));
    manifest.push_back({std::move(name), std::move(shape)});
  }

  std::map<std::string, Tensor> out;
  std::uint64_t checksum = 0xcbf29ce484222325ull;
  for (auto& e : manifest) {
    std::vector<double> vals(static_cast<std::size_t>(numel(e.shape)));
    const std::size_t nbytes = vals.size() * sizeof(double);
    is.read(reinterpret_cast<char*>(vals.data()), static_cast<std::streamsize>(nbytes));
    if (!is) throw FormatError("checkpoint: truncated payload for " + e.name);
    checksum = detail::fnv1a64(reinterpret_cast<const unsigned char*>(vals.data()),
                               nbytes, checksum);
    out.emplace(e.name, Tensor::from_values(e.shape, std::move(vals)));
  }
  const auto stored = detail::read_pod<std::uint64_t>(is);
  if (stored != checksum) throw FormatError("checkpoint: payload checksum mismatch");
  return out;
}

// Parameter tensors plus momentum buffers ("<name>.m" entries).
inline void save_params(const std::filesystem::path& path, const ParamRegistry& params) {
  std::map<std::string, Tensor> entries;
  for (const auto& [name, p] : params.all()) {
    entries.emplace(name, p.tensor);
    entries.emplace(name + ".m",
                    Tensor::from_values(p.tensor.shape(), p.momentum));
  }
  save_checkpoint(path, entries);
}

inline void load_params(const std::filesystem::path& path, ParamRegistry& params) {
  auto entries = load_checkpoint(path);
  for (auto& [name, p] : params.all()) {
    auto it = entries.find(name);
    if (it == entries.end())
      throw FormatError("checkpoint missing parameter: " + name);
    if (it->second.shape() != p.tensor.shape())
      throw FormatError("checkpoint shape mismatch for " + name + ": stored " +
                        shape_str(it->second.shape()) + " vs model " +
                        shape_str(p.tensor.shape()));
    p.tensor.values() = it->second.values();
    auto mit = entries.find(name + ".m");
    if (mit != entries.end())
      p.momentum = mit->second.values();
    else
      std::fill(p.momentum.begin(), p.momentum.end(), 0.0);
  }
}

}  // namespace scd
