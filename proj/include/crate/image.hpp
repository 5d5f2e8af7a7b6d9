#pragma once

#include "crate/common.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace crate {

// Planar C x H x W image with values in [0,1]. Plane index c is slowest,
// then row, then column, matching the patch flattening order.
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<Scalar> data;

  Image() = default;
  Image(int c, int h, int w, Scalar fill = 0.0)
      : channels(c), height(h), width(w), data(static_cast<size_t>(c) * h * w, fill) {}

  Scalar& at(int c, int y, int x) {
    return data[(static_cast<size_t>(c) * height + y) * width + x];
  }
  Scalar at(int c, int y, int x) const {
    return data[(static_cast<size_t>(c) * height + y) * width + x];
  }
  size_t pixel_count() const { return static_cast<size_t>(height) * width; }
};

namespace detail {

inline uint8_t quantize8(Scalar v) {
  Scalar s = std::clamp(v, 0.0, 1.0) * 255.0;
  // round half up
  return static_cast<uint8_t>(std::floor(s + 0.5));
}

// Skips PNM whitespace/comments, tracking the byte offset for error messages.
inline int pnm_next_token(std::istream& in, long& offset, std::string& tok) {
  tok.clear();
  int ch = in.get();
  while (ch != EOF) {
    ++offset;
    if (ch == '#') {
      while (ch != EOF && ch != '\n') {
        ch = in.get();
        ++offset;
      }
    } else if (!std::isspace(ch)) {
      break;
    }
    ch = in.get();
  }
  while (ch != EOF && !std::isspace(ch)) {
    tok.push_back(static_cast<char>(ch));
    ch = in.get();
    ++offset;
  }
  return ch;
}

}  // namespace detail

// Reads a binary PGM (P5) or PPM (P6) with maxval 255 into [0,1] planes.
inline Image read_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image file: " + path);
  long offset = 0;
  std::string magic, wtok, htok, maxtok;
  detail::pnm_next_token(in, offset, magic);
  if (magic != "P5" && magic != "P6")
    throw IoError("unsupported image magic '" + magic + "' in " + path + " at byte 0" +
                  " (expected binary P5/P6)");
  detail::pnm_next_token(in, offset, wtok);
  detail::pnm_next_token(in, offset, htok);
  detail::pnm_next_token(in, offset, maxtok);
  int w = 0, h = 0;
  long maxval = 0;
  try {
    w = std::stoi(wtok);
    h = std::stoi(htok);
    maxval = std::stol(maxtok);
  } catch (const std::exception&) {
    throw IoError("malformed PNM header in " + path + " near byte " + std::to_string(offset));
  }
  if (w <= 0 || h <= 0)
    throw IoError("malformed PNM dimensions in " + path + " near byte " + std::to_string(offset));
  if (maxval != 255)
    throw IoError("unsupported maxval " + std::to_string(maxval) + " in " + path +
                  " (only 255 is supported)");
  const int channels = (magic == "P6") ? 3 : 1;
  Image img(channels, h, w);
  std::vector<unsigned char> row(static_cast<size_t>(w) * channels);
  for (int y = 0; y < h; ++y) {
    in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!in)
      throw IoError("truncated pixel data in " + path + " near byte " +
                    std::to_string(offset + static_cast<long>(y) * w * channels));
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c)
        img.at(c, y, x) = row[static_cast<size_t>(x) * channels + c] / 255.0;
  }
  return img;
}

// Writes PGM for 1-channel images, PPM for 3-channel images.
inline void write_pnm(const Image& img, const std::string& path) {
  if (img.channels != 1 && img.channels != 3)
    throw ConfigError("write_pnm supports 1 or 3 channels, got " +
                      std::to_string(img.channels));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open file for writing: " + path);
  out << (img.channels == 1 ? "P5" : "P6") << "\n"
      << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(img.width) * img.channels);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c)
        row[static_cast<size_t>(x) * img.channels + c] = detail::quantize8(img.at(c, y, x));
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw IoError("failed writing image: " + path);
}

namespace detail {

inline uint32_t crc32_ieee(const unsigned char* data, size_t len, uint32_t crc = 0) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  crc ^= 0xFFFFFFFFu;
  for (size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

inline uint32_t adler32(const unsigned char* data, size_t len) {
  uint32_t a = 1, b = 0;
  for (size_t i = 0; i < len; ++i) {
    a = (a + data[i]) % 65521u;
    b = (b + a) % 65521u;
  }
  return (b << 16) | a;
}

inline void put_be32(std::vector<unsigned char>& out, uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

inline void png_chunk(std::vector<unsigned char>& out, const char type[4],
                      const std::vector<unsigned char>& payload) {
  put_be32(out, static_cast<uint32_t>(payload.size()));
  std::vector<unsigned char> body(type, type + 4);
  body.insert(body.end(), payload.begin(), payload.end());
  out.insert(out.end(), body.begin(), body.end());
  put_be32(out, crc32_ieee(body.data(), body.size()));
}

}  // namespace detail

// Minimal PNG writer (8-bit gray or RGB). The zlib stream uses stored
// deflate blocks, so no compression library is required.
inline void write_png(const Image& img, const std::string& path) {
  if (img.channels != 1 && img.channels != 3)
    throw ConfigError("write_png supports 1 or 3 channels, got " +
                      std::to_string(img.channels));
  // raw scanlines, each prefixed with filter type 0
  std::vector<unsigned char> raw;
  raw.reserve((static_cast<size_t>(img.width) * img.channels + 1) * img.height);
  for (int y = 0; y < img.height; ++y) {
    raw.push_back(0);
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) raw.push_back(detail::quantize8(img.at(c, y, x)));
  }

  std::vector<unsigned char> idat;
  idat.push_back(0x78);  // zlib header, 32K window
  idat.push_back(0x01);
  size_t pos = 0;
  while (pos < raw.size() || raw.empty()) {
    size_t n = std::min<size_t>(raw.size() - pos, 65535);
    bool final = (pos + n == raw.size());
    idat.push_back(final ? 1 : 0);
    idat.push_back(static_cast<unsigned char>(n & 0xFF));
    idat.push_back(static_cast<unsigned char>(n >> 8));
    idat.push_back(static_cast<unsigned char>(~n & 0xFF));
    idat.push_back(static_cast<unsigned char>((~n >> 8) & 0xFF));
    idat.insert(idat.end(), raw.begin() + pos, raw.begin() + pos + n);
    pos += n;
    if (raw.empty()) break;
  }
  detail::put_be32(idat, detail::adler32(raw.data(), raw.size()));

  std::vector<unsigned char> out;
  const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  out.insert(out.end(), sig, sig + 8);
  std::vector<unsigned char> ihdr;
  detail::put_be32(ihdr, static_cast<uint32_t>(img.width));
  detail::put_be32(ihdr, static_cast<uint32_t>(img.height));
  ihdr.push_back(8);                                   // bit depth
  ihdr.push_back(img.channels == 3 ? 2 : 0);           // color type
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  detail::png_chunk(out, "IHDR", ihdr);
  detail::png_chunk(out, "IDAT", idat);
  detail::png_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open file for writing: " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("failed writing image: " + path);
}

// Writes .png when the path ends in .png, otherwise PGM/PPM.
inline void write_image(const Image& img, const std::string& path) {
  if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".png") == 0)
    write_png(img, path);
  else
    write_pnm(img, path);
}

// Piecewise-linear blue -> cyan -> green -> yellow -> red colormap.
inline std::array<Scalar, 3> colormap_value(Scalar t) {
  t = std::clamp(t, 0.0, 1.0);
  static const std::array<std::array<Scalar, 3>, 5> anchors = {{{0.0, 0.0, 0.55},
                                                                {0.0, 0.75, 1.0},
                                                                {0.1, 0.9, 0.1},
                                                                {1.0, 0.85, 0.0},
                                                                {0.85, 0.05, 0.0}}};
  Scalar s = t * 4.0;
  int i = std::min(3, static_cast<int>(s));
  Scalar f = s - i;
  std::array<Scalar, 3> rgb;
  for (int c = 0; c < 3; ++c) rgb[c] = anchors[i][c] * (1 - f) + anchors[i + 1][c] * f;
  return rgb;
}

// Renders a vector of per-patch values laid out on a gh x gw grid as an RGB
// heatmap, min-max normalized and upsampled nearest-neighbor by `scale`.
// A constant input renders as the uniform mid-color.
inline Image render_heatmap(const Vec& values, int gh, int gw, int scale = 8) {
  if (values.size() != static_cast<Index>(gh) * gw)
    throw ConfigError("render_heatmap: value count does not match grid");
  if (!values.allFinite()) throw NumericError("render_heatmap: non-finite values");
  Scalar lo = values.minCoeff(), hi = values.maxCoeff();
  const bool constant = (hi - lo) < 1e-300;
  Image img(3, gh * scale, gw * scale);
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      Scalar t = constant ? 0.5 : (values[static_cast<Index>(gy) * gw + gx] - lo) / (hi - lo);
      auto rgb = colormap_value(t);
      for (int y = gy * scale; y < (gy + 1) * scale; ++y)
        for (int x = gx * scale; x < (gx + 1) * scale; ++x)
          for (int c = 0; c < 3; ++c) img.at(c, y, x) = rgb[c];
    }
  return img;
}

// Alpha-blends a patch-grid mask over an image; mask cells are upsampled
// nearest-neighbor to pixels. `color` is the overlay color.
inline Image overlay_mask(const Image& base, const std::vector<uint8_t>& mask_bits, int gh,
                          int gw, Scalar alpha, std::array<Scalar, 3> color = {1.0, 0.1, 0.1}) {
  if (mask_bits.size() != static_cast<size_t>(gh) * gw)
    throw ConfigError("overlay_mask: mask size does not match grid");
  if (alpha < 0.0 || alpha > 1.0) throw ConfigError("overlay_mask: alpha must be in [0,1]");
  Image out(3, base.height, base.width);
  const int cell_h = base.height / gh, cell_w = base.width / gw;
  for (int y = 0; y < base.height; ++y)
    for (int x = 0; x < base.width; ++x) {
      const bool on = mask_bits[static_cast<size_t>(std::min(y / cell_h, gh - 1)) * gw +
                                std::min(x / cell_w, gw - 1)] != 0;
      for (int c = 0; c < 3; ++c) {
        Scalar v = base.channels == 3 ? base.at(c, y, x) : base.at(0, y, x);
        out.at(c, y, x) = on ? (1 - alpha) * v + alpha * color[c] : v;
      }
    }
  return out;
}

}  // namespace crate
