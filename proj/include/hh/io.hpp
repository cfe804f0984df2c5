#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hh {

inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

// All file writes go through a temp-file-plus-rename so readers never see a
// half-written artifact.
inline void atomic_write_file(const std::string& path, const std::string& contents) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("atomic_write_file: cannot open " + tmp);
    f.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!f) throw std::runtime_error("atomic_write_file: short write to " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw std::runtime_error("atomic_write_file: rename failed: " + ec.message());
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_file: cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Little-endian binary buffer builder. The host is little-endian on every
// target this project supports; memcpy keeps it alias-safe.
struct BinWriter {
  std::string buf;

  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    char tmp[sizeof(T)];
    std::memcpy(tmp, &v, sizeof(T));
    buf.append(tmp, sizeof(T));
  }

  void put_f32s(const float* p, std::size_t n) {
    buf.append(reinterpret_cast<const char*>(p), n * sizeof(float));
  }
};

struct BinReader {
  const std::string& buf;
  std::size_t pos = 0;

  explicit BinReader(const std::string& b) : buf(b) {}

  template <typename T>
  T get() {
    static_assert(std::is_trivially_copyable_v<T>);
    if (pos + sizeof(T) > buf.size()) throw std::runtime_error("BinReader: truncated input");
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }

  void get_f32s(float* p, std::size_t n) {
    if (pos + n * sizeof(float) > buf.size())
      throw std::runtime_error("BinReader: truncated input");
    std::memcpy(p, buf.data() + pos, n * sizeof(float));
    pos += n * sizeof(float);
  }
};

}  // namespace hh
