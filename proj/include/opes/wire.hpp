#pragma once

// Length-prefixed binary framing shared by the embedding and aggregation
// services. A frame on the wire is u32 payload_len | u8 opcode | payload,
// little-endian; payload_len counts the payload bytes only.

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace opes::wire {

inline constexpr std::size_t header_size = 5;
inline constexpr std::uint32_t max_payload = 256u << 20;

enum Opcode : std::uint8_t {
  hello = 0x01,
  get_neighbors = 0x02,
  batch_get = 0x03,
  batch_set = 0x04,
  stats = 0x05,
  reg = 0x10,
  get_model = 0x11,
  put_model = 0x12,
  round_done = 0x13,
  pull_done = 0x14,
  error = 0x7f,
};

inline constexpr std::uint8_t response_bit = 0x80;
inline constexpr std::uint8_t response_to(std::uint8_t op) noexcept { return op | response_bit; }

enum class ErrorCode : std::uint16_t {
  malformed = 1,
  bad_opcode = 2,
  dim_mismatch = 3,
  layer_out_of_range = 4,
  missing_key = 5,
  unknown_client = 6,
  not_registered = 7,
  frame_too_large = 8,
  bad_round = 9,
  shape_mismatch = 10,
  aborted = 11,
};

struct Frame {
  std::uint8_t opcode = 0;
  std::vector<std::uint8_t> payload;
  bool operator==(const Frame&) const = default;
};

class WireError : public std::runtime_error {
 public:
  WireError(ErrorCode code, const std::string& msg) : std::runtime_error(msg), code(code) {}
  ErrorCode code;
};

/// Appends little-endian scalars to a byte buffer.
class Writer {
 public:
  Writer& u8(std::uint8_t v) {
    buf_.push_back(v);
    return *this;
  }
  Writer& u16(std::uint16_t v) { return put(v); }
  Writer& u32(std::uint32_t v) { return put(v); }
  Writer& u64(std::uint64_t v) { return put(v); }
  Writer& f32(float v) { return put(std::bit_cast<std::uint32_t>(v)); }
  Writer& f64(double v) { return put(std::bit_cast<std::uint64_t>(v)); }
  Writer& f32s(std::span<const float> v) {
    for (float x : v) f32(x);
    return *this;
  }
  Writer& bytes(std::string_view s) {
    buf_.insert(buf_.end(), s.begin(), s.end());
    return *this;
  }
  void reserve(std::size_t n) { buf_.reserve(n); }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  template <class U>
  Writer& put(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    return *this;
  }
  std::vector<std::uint8_t> buf_;
};

/// Bounds-checked little-endian reader; running past the end is a malformed
/// frame.
class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint16_t u16() { return get<std::uint16_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
  void f32s(std::span<float> out) {
    need(out.size() * 4);
    for (auto& x : out) x = f32();
  }
  std::string rest_as_string() {
    std::string s(data_.begin() + static_cast<std::ptrdiff_t>(pos_), data_.end());
    pos_ = data_.size();
    return s;
  }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  void need(std::size_t n) const {
    if (remaining() < n) throw WireError(ErrorCode::malformed, "truncated payload");
  }
  void expect_end() const {
    if (remaining() != 0) throw WireError(ErrorCode::malformed, "trailing bytes in payload");
  }

 private:
  template <class U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(data_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> encode(const Frame& f) {
  if (f.payload.size() > max_payload) throw WireError(ErrorCode::frame_too_large, "payload exceeds frame limit");
  Writer w;
  w.reserve(header_size + f.payload.size());
  w.u32(static_cast<std::uint32_t>(f.payload.size())).u8(f.opcode);
  auto out = w.take();
  out.insert(out.end(), f.payload.begin(), f.payload.end());
  return out;
}

/// Parses the 5-byte header; returns the payload length.
inline std::uint32_t decode_header(std::span<const std::uint8_t, header_size> h, std::uint8_t& opcode) {
  Reader r(h);
  const auto len = r.u32();
  opcode = r.u8();
  return len;
}

/// Decodes one complete frame from a buffer holding exactly one frame.
inline Frame decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < header_size) throw WireError(ErrorCode::malformed, "frame shorter than header");
  Frame f;
  const auto len = decode_header(bytes.first<header_size>(), f.opcode);
  if (len > max_payload) throw WireError(ErrorCode::frame_too_large, "declared payload exceeds frame limit");
  if (bytes.size() - header_size != len) throw WireError(ErrorCode::malformed, "payload length mismatch");
  f.payload.assign(bytes.begin() + header_size, bytes.end());
  return f;
}

inline Frame error_frame(ErrorCode code, std::string_view msg) {
  Writer w;
  w.u16(static_cast<std::uint16_t>(code)).bytes(msg);
  return {error, w.take()};
}

/// Throws the WireError carried by an ERROR frame; otherwise checks that the
/// frame answers `request_op`.
inline void expect_response(const Frame& f, std::uint8_t request_op) {
  if (f.opcode == error) {
    Reader r(f.payload);
    const auto code = static_cast<ErrorCode>(r.u16());
    throw WireError(code, "server error: " + r.rest_as_string());
  }
  if (f.opcode != response_to(request_op)) throw WireError(ErrorCode::bad_opcode, "unexpected response opcode");
}

}  // namespace opes::wire
