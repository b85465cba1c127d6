#pragma once

// Little-endian float32 blobs and a JSON header line, shared by the
// dataset and checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "pvae/error.hpp"

namespace pvae::io {

inline std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
}

inline void write_f32(std::ostream& out, std::span<const double> values) {
  std::vector<char> buf(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const float f = static_cast<float>(values[i]);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    bits = to_little(bits);
    std::memcpy(buf.data() + 4 * i, &bits, 4);
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline std::vector<double> read_f32(std::istream& in, std::size_t count, const std::string& what) {
  std::vector<char> buf(count * 4);
  in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(in.gcount()) != buf.size())
    throw TruncatedError(what + ": expected " + std::to_string(count) + " float32 values, file ends early");
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, buf.data() + 4 * i, 4);
    bits = to_little(bits);
    float f;
    std::memcpy(&f, &bits, 4);
    out[i] = f;
  }
  return out;
}

inline double round_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace pvae::io
