#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace opes {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <class T>
T byteswap_value(T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
  std::memcpy(&v, b, sizeof(T));
  return v;
}

}  // namespace detail

/// Writes `values` as a packed little-endian array.
template <class T>
void write_le_array(const std::filesystem::path& path, std::span<const T> values) {
  static_assert(std::is_arithmetic_v<T>);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (T v : values) {
      T s = detail::byteswap_value(v);
      out.write(reinterpret_cast<const char*>(&s), sizeof(T));
    }
  }
  if (!out) throw IoError("write failed: " + path.string());
}

/// Reads exactly `count` little-endian values; a size mismatch is an error.
template <class T>
std::vector<T> read_le_array(const std::filesystem::path& path, std::uint64_t count) {
  static_assert(std::is_arithmetic_v<T>);
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) throw IoError("missing file: " + path.string());
  const auto bytes = std::filesystem::file_size(path, ec);
  if (ec) throw IoError("cannot stat: " + path.string());
  if (bytes != count * sizeof(T)) {
    throw IoError("size mismatch in " + path.filename().string() + ": expected " +
                  std::to_string(count * sizeof(T)) + " bytes, found " + std::to_string(bytes));
  }
  std::vector<T> values(count);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(bytes));
  if (!in && count != 0) throw IoError("read failed: " + path.string());
  if constexpr (std::endian::native != std::endian::little && sizeof(T) > 1) {
    for (auto& v : values) v = detail::byteswap_value(v);
  }
  return values;
}

using KeyValueText = std::map<std::string, std::string>;

inline KeyValueText read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("missing file: " + path.string());
  KeyValueText kv;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError("malformed line in " + path.filename().string() + ": " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

inline std::uint64_t require_u64(const KeyValueText& kv, const std::string& key, const std::string& where) {
  auto it = kv.find(key);
  if (it == kv.end()) throw IoError(where + ": missing key '" + key + "'");
  try {
    std::size_t pos = 0;
    const auto v = std::stoull(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument(it->second);
    return v;
  } catch (const std::logic_error&) {
    throw IoError(where + ": bad value for '" + key + "': " + it->second);
  }
}

}  // namespace opes
