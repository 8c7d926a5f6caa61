#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "carvemap/core.hpp"

namespace carvemap {

// ---------------------------------------------------------------------------
// PGM (binary P5, 8-bit)

inline void write_pgm(const std::string& path, const GrayImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("write_pgm: cannot open " + path);
  out << "P5\n" << img.width << " " << img.height << "\n255\n";
  std::vector<uint8_t> row(img.width);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double v = std::clamp(img.at(x, y), 0.0, 1.0);
      row[x] = static_cast<uint8_t>(std::lround(v * 255.0));
    }
    out.write(reinterpret_cast<const char*>(row.data()), row.size());
  }
}

inline GrayImage read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("read_pgm: cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5") throw Error("read_pgm: not a binary PGM: " + path);
  auto next_token = [&in, &path]() {
    std::string tok;
    while (in >> tok) {
      if (tok[0] == '#') {
        std::string rest;
        std::getline(in, rest);
        continue;
      }
      return tok;
    }
    throw Error("read_pgm: truncated header: " + path);
  };
  const int w = std::stoi(next_token());
  const int h = std::stoi(next_token());
  const int maxval = std::stoi(next_token());
  if (maxval <= 0 || maxval > 255) throw Error("read_pgm: unsupported maxval");
  in.get();  // single whitespace after header
  std::vector<uint8_t> buf(static_cast<size_t>(w) * h);
  in.read(reinterpret_cast<char*>(buf.data()), buf.size());
  if (!in) throw Error("read_pgm: truncated data: " + path);
  GrayImage img(w, h);
  for (size_t i = 0; i < buf.size(); ++i) img.data[i] = buf[i] / static_cast<double>(maxval);
  return img;
}

// ---------------------------------------------------------------------------
// PNG, non-interlaced, 8-bit. Written as grayscale; reading supports
// grayscale / RGB / RGBA sources (color converted with BT.601 luma) and all
// five scanline filters. Compression via zlib.

namespace png_detail {

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v >> 24));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v));
}

inline uint32_t get_u32(const uint8_t* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

inline void append_chunk(std::vector<uint8_t>& out, const char type[4],
                         const std::vector<uint8_t>& payload) {
  put_u32(out, static_cast<uint32_t>(payload.size()));
  const size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const uint32_t crc = static_cast<uint32_t>(
      crc32(0L, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start)));
  put_u32(out, crc);
}

inline uint8_t paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return static_cast<uint8_t>(a);
  if (pb <= pc) return static_cast<uint8_t>(b);
  return static_cast<uint8_t>(c);
}

}  // namespace png_detail

inline std::vector<uint8_t> encode_png_gray(const GrayImage& img) {
  using namespace png_detail;
  std::vector<uint8_t> raw;
  raw.reserve(static_cast<size_t>(img.height) * (img.width + 1));
  for (int y = 0; y < img.height; ++y) {
    raw.push_back(0);  // filter: none
    for (int x = 0; x < img.width; ++x) {
      const double v = std::clamp(img.at(x, y), 0.0, 1.0);
      raw.push_back(static_cast<uint8_t>(std::lround(v * 255.0)));
    }
  }
  uLongf comp_size = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> comp(comp_size);
  if (compress2(comp.data(), &comp_size, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw Error("encode_png_gray: deflate failed");
  comp.resize(comp_size);

  std::vector<uint8_t> out;
  const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  out.insert(out.end(), sig, sig + 8);
  std::vector<uint8_t> ihdr;
  put_u32(ihdr, static_cast<uint32_t>(img.width));
  put_u32(ihdr, static_cast<uint32_t>(img.height));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(0);  // grayscale
  ihdr.push_back(0);  // deflate
  ihdr.push_back(0);  // default filtering
  ihdr.push_back(0);  // no interlace
  append_chunk(out, "IHDR", ihdr);
  append_chunk(out, "IDAT", comp);
  append_chunk(out, "IEND", {});
  return out;
}

inline void write_png(const std::string& path, const GrayImage& img) {
  const auto bytes = encode_png_gray(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("write_png: cannot open " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

inline GrayImage decode_png_gray(const std::vector<uint8_t>& bytes) {
  using namespace png_detail;
  static const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
    throw Error("decode_png_gray: not a PNG");
  size_t pos = 8;
  int width = 0, height = 0, bit_depth = 0, color_type = 0;
  std::vector<uint8_t> idat;
  bool done = false;
  while (pos + 8 <= bytes.size() && !done) {
    const uint32_t len = get_u32(&bytes[pos]);
    const char* type = reinterpret_cast<const char*>(&bytes[pos + 4]);
    if (pos + 12 + len > bytes.size()) throw Error("decode_png_gray: truncated chunk");
    const uint8_t* payload = &bytes[pos + 8];
    if (std::memcmp(type, "IHDR", 4) == 0) {
      width = static_cast<int>(get_u32(payload));
      height = static_cast<int>(get_u32(payload + 4));
      bit_depth = payload[8];
      color_type = payload[9];
      if (payload[12] != 0) throw Error("decode_png_gray: interlaced PNG unsupported");
      if (bit_depth != 8) throw Error("decode_png_gray: only 8-bit PNGs supported");
      if (color_type != 0 && color_type != 2 && color_type != 6)
        throw Error("decode_png_gray: unsupported color type");
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), payload, payload + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      done = true;
    }
    pos += 12 + len;
  }
  if (width <= 0 || height <= 0 || idat.empty()) throw Error("decode_png_gray: missing data");

  const int channels = color_type == 0 ? 1 : (color_type == 2 ? 3 : 4);
  const size_t stride = static_cast<size_t>(width) * channels;
  std::vector<uint8_t> raw(static_cast<size_t>(height) * (stride + 1));
  uLongf raw_size = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &raw_size, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
      raw_size != raw.size())
    throw Error("decode_png_gray: inflate failed");

  // Undo per-scanline filters in place.
  std::vector<uint8_t> prev(stride, 0);
  GrayImage img(width, height);
  for (int y = 0; y < height; ++y) {
    uint8_t* row = &raw[static_cast<size_t>(y) * (stride + 1)];
    const uint8_t filter = row[0];
    uint8_t* cur = row + 1;
    for (size_t i = 0; i < stride; ++i) {
      const int a = i >= static_cast<size_t>(channels) ? cur[i - channels] : 0;
      const int b = prev[i];
      const int c = i >= static_cast<size_t>(channels) ? prev[i - channels] : 0;
      int add = 0;
      switch (filter) {
        case 0: add = 0; break;
        case 1: add = a; break;
        case 2: add = b; break;
        case 3: add = (a + b) / 2; break;
        case 4: add = paeth(a, b, c); break;
        default: throw Error("decode_png_gray: bad filter byte");
      }
      cur[i] = static_cast<uint8_t>((cur[i] + add) & 0xff);
    }
    std::memcpy(prev.data(), cur, stride);
    for (int x = 0; x < width; ++x) {
      double v;
      if (channels == 1) {
        v = cur[x] / 255.0;
      } else {
        const uint8_t* px = cur + static_cast<size_t>(x) * channels;
        v = (0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]) / 255.0;
      }
      img.at(x, y) = v;
    }
  }
  return img;
}

inline GrayImage read_png(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("read_png: cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  return decode_png_gray(bytes);
}

/// Load a grayscale image by extension (.png or .pgm).
inline GrayImage read_gray_image(const std::string& path) {
  if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".png") == 0) return read_png(path);
  if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".pgm") == 0) return read_pgm(path);
  throw Error("read_gray_image: unsupported image format: " + path);
}

}  // namespace carvemap
