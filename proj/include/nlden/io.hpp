#pragma once

#include <cmath>
#include <cstdint>
#include <algorithm>
#include <cctype>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "nlden/tensor.hpp"

namespace nlden {

// NLT1 tensor encoding: "NLT1", u8 rank, rank x u32 LE dims, f32 LE payload.
namespace nlt1 {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back((v >> (8 * i)) & 0xff);
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}

inline void encode(const Tensor& t, std::vector<unsigned char>& out) {
  if (t.rank() > 255) throw FormatError("rank too large for NLT1");
  out.insert(out.end(), {'N', 'L', 'T', '1'});
  out.push_back(static_cast<unsigned char>(t.rank()));
  for (auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  for (float f : t.data()) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
  }
}

// Decodes one tensor starting at offset; advances offset past it.
inline Tensor decode(const std::vector<unsigned char>& buf, std::size_t& offset) {
  auto need = [&](std::size_t n, const char* what) {
    if (buf.size() - offset < n)
      throw FormatError(std::string("truncated ") + what + " at byte " + std::to_string(offset) + ": expected " +
                        std::to_string(n) + " bytes, have " + std::to_string(buf.size() - offset));
  };
  need(5, "header");
  if (std::memcmp(buf.data() + offset, "NLT1", 4) != 0)
    throw FormatError("bad magic at byte " + std::to_string(offset) + " (expected NLT1)");
  const std::size_t rank = buf[offset + 4];
  offset += 5;
  need(4 * rank, "dims");
  Shape shape(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    shape[i] = get_u32(buf.data() + offset);
    if (shape[i] == 0) throw FormatError("zero dimension at byte " + std::to_string(offset));
    offset += 4;
  }
  const std::size_t count = shape_size(shape);
  need(4 * count, "payload");
  std::vector<float> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t bits = get_u32(buf.data() + offset + 4 * i);
    std::memcpy(&data[i], &bits, 4);
  }
  offset += 4 * count;
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace nlt1

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::vector<unsigned char> buf;
  nlt1::encode(t, buf);
  write_bytes(path, buf);
}

inline Tensor read_tensor(const std::filesystem::path& path) {
  const auto buf = read_bytes(path);
  std::size_t off = 0;
  Tensor t = nlt1::decode(buf, off);
  if (off != buf.size())
    throw FormatError(path.string() + ": trailing bytes after tensor at byte " + std::to_string(off));
  return t;
}

// Binary 8-bit PGM of the last two dimensions; values in [0,1] map to round(255 v).
inline void write_pgm(const std::filesystem::path& path, const Tensor& img) {
  if (img.rank() < 2) throw DimensionError("write_pgm needs at least 2 dimensions");
  const std::size_t h = img.dim(img.rank() - 2), w = img.dim(img.rank() - 1);
  std::string header = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<unsigned char> bytes(header.begin(), header.end());
  for (std::size_t i = 0; i < h * w; ++i) {
    const double v = std::clamp(double(img[i]), 0.0, 1.0);
    bytes.push_back(static_cast<unsigned char>(std::lround(255.0 * v)));
  }
  write_bytes(path, bytes);
}

// Reads a binary PGM (P5, maxval <= 255) as [H,W] with values pixel/maxval.
inline Tensor read_pgm(const std::filesystem::path& path) {
  const auto buf = read_bytes(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < buf.size()) {
      if (buf[pos] == '#') {
        while (pos < buf.size() && buf[pos] != '\n') ++pos;
      } else if (std::isspace(buf[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string t;
    while (pos < buf.size() && !std::isspace(buf[pos])) t.push_back(char(buf[pos++]));
    return t;
  };
  if (token() != "P5") throw FormatError(path.string() + ": not a binary PGM at byte 0");
  const std::size_t w = std::stoul(token()), h = std::stoul(token()), maxv = std::stoul(token());
  ++pos;
  if (maxv == 0 || maxv > 255) throw FormatError(path.string() + ": unsupported maxval");
  if (buf.size() - pos < w * h)
    throw FormatError(path.string() + ": truncated pixel data at byte " + std::to_string(pos) + ": expected " +
                      std::to_string(w * h) + " bytes, have " + std::to_string(buf.size() - pos));
  Tensor t({h, w});
  for (std::size_t i = 0; i < w * h; ++i) t[i] = float(buf[pos + i]) / float(maxv);
  return t;
}

}  // namespace nlden
