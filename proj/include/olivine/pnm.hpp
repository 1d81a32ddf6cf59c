#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "olivine/error.hpp"
#include "olivine/image.hpp"

namespace olivine {

using Bytes = std::vector<std::uint8_t>;

namespace pnm_detail {

struct Header {
  std::string magic;
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t maxval = 0;
  std::size_t body_offset = 0;
};

inline bool is_space(std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

// Parses "Px <w> <h> <maxval>" with PNM whitespace and '#' comments; exactly
// one whitespace byte separates maxval from the body.
inline Header parse_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P') throw DataError("pnm: unsupported magic");
  Header h;
  h.magic = std::string{static_cast<char>(bytes[0]), static_cast<char>(bytes[1])};
  if (h.magic != "P5" && h.magic != "P6") throw DataError("pnm: unsupported magic '" + h.magic + "'");
  std::size_t pos = 2;
  auto next_number = [&](const char* what) -> std::size_t {
    for (;;) {
      while (pos < bytes.size() && is_space(bytes[pos])) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n' && bytes[pos] != '\r') ++pos;
        continue;
      }
      break;
    }
    if (pos >= bytes.size()) throw DataError(std::string("pnm: truncated header before ") + what);
    if (bytes[pos] == '-') throw DataError(std::string("pnm: ") + what + " must be positive");
    if (bytes[pos] < '0' || bytes[pos] > '9') throw DataError(std::string("pnm: malformed ") + what);
    std::size_t value = 0;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
      value = value * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (value > (std::size_t{1} << 31)) throw DataError(std::string("pnm: ") + what + " too large");
      ++pos;
    }
    return value;
  };
  h.width = next_number("width");
  h.height = next_number("height");
  h.maxval = next_number("maxval");
  if (pos >= bytes.size() || !is_space(bytes[pos])) throw DataError("pnm: truncated header after maxval");
  h.body_offset = pos + 1;
  if (h.width == 0 || h.height == 0) throw DataError("pnm: dimensions must be positive");
  return h;
}

inline Bytes header_bytes(const char* magic, std::size_t w, std::size_t h, std::size_t maxval) {
  const std::string s = std::string(magic) + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n" +
                        std::to_string(maxval) + "\n";
  return Bytes(s.begin(), s.end());
}

}  // namespace pnm_detail

inline Image read_pnm(std::span<const std::uint8_t> bytes) {
  const auto h = pnm_detail::parse_header(bytes);
  if (h.maxval != 255) throw DataError("pnm: maxval must be 255, got " + std::to_string(h.maxval));
  const std::size_t channels = h.magic == "P6" ? 3 : 1;
  const std::size_t body = h.width * h.height * channels;
  if (bytes.size() - h.body_offset < body) throw DataError("pnm: truncated body");
  std::vector<std::uint8_t> px(bytes.begin() + static_cast<std::ptrdiff_t>(h.body_offset),
                               bytes.begin() + static_cast<std::ptrdiff_t>(h.body_offset + body));
  return Image(h.width, h.height, channels, std::move(px));
}

inline Bytes write_pnm(const Image& img) {
  img.validate();
  Bytes out = pnm_detail::header_bytes(img.channels == 3 ? "P6" : "P5", img.width, img.height, 255);
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

inline DepthMap read_depth(std::span<const std::uint8_t> bytes) {
  const auto h = pnm_detail::parse_header(bytes);
  if (h.magic != "P5") throw DataError("depth: expected P5 magic, got " + h.magic);
  if (h.maxval != 65535) throw DataError("depth: expected 16-bit depth (maxval 65535), got maxval " + std::to_string(h.maxval));
  const std::size_t count = h.width * h.height;
  if (bytes.size() - h.body_offset < 2 * count) throw DataError("depth: truncated body");
  std::vector<std::uint16_t> d(count);
  const std::uint8_t* p = bytes.data() + h.body_offset;
  for (std::size_t i = 0; i < count; ++i) d[i] = static_cast<std::uint16_t>((p[2 * i] << 8) | p[2 * i + 1]);
  return DepthMap(h.width, h.height, std::move(d));
}

inline Bytes write_depth(const DepthMap& depth) {
  Bytes out = pnm_detail::header_bytes("P5", depth.width, depth.height, 65535);
  for (std::uint16_t v : depth.depths) {
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  }
  return out;
}

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline Image load_image(const std::filesystem::path& path) {
  try {
    return read_pnm(read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

inline void save_image(const std::filesystem::path& path, const Image& img) { write_file(path, write_pnm(img)); }

}  // namespace olivine
