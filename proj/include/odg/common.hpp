#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace odg {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InvalidInput : Error {
  using Error::Error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};

inline void log_warn(const std::string& msg) {
  std::fprintf(stderr, "[odg] warning: %s\n", msg.c_str());
}

// SplitMix64 step; used to derive independent seed streams from one master seed.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index = 0) {
  return splitmix64(splitmix64(master ^ (0xabcd0123ull + stream)) ^ index);
}

// CRC-32 (IEEE, reflected 0xEDB88320), table built on first use.
inline std::uint32_t crc32(const void* data, std::size_t len, std::uint32_t seed = 0) {
  static const auto table = [] {
    std::vector<std::uint32_t> t(256);
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint32_t c = seed ^ 0xFFFFFFFFu;
  for (std::size_t i = 0; i < len; ++i) c = table[(c ^ p[i]) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

// Raw little-endian float64 blobs back several on-disk formats (datasets,
// checkpoints, style banks). Explicit byte packing keeps them portable.
inline void write_f64_blob(const std::filesystem::path& path, const std::vector<double>& values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  std::vector<unsigned char> buf(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, &values[i], 8);
    for (int b = 0; b < 8; ++b) buf[i * 8 + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("short write: " + path.string());
}

inline std::vector<double> read_f64_blob(const std::filesystem::path& path, std::size_t expected_count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  std::vector<unsigned char> buf(expected_count * 8);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(in.gcount()) != buf.size())
    throw IoError("truncated blob: " + path.string());
  std::vector<double> values(expected_count);
  for (std::size_t i = 0; i < expected_count; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[i * 8 + b]) << (8 * b);
    std::memcpy(&values[i], &bits, 8);
  }
  return values;
}

inline std::uint32_t blob_crc32(const std::vector<double>& values) {
  std::vector<unsigned char> buf(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, &values[i], 8);
    for (int b = 0; b < 8; ++b) buf[i * 8 + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  return crc32(buf.data(), buf.size());
}

}  // namespace odg
