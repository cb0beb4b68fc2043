#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "grappa/common.hpp"

namespace grappa {

// Dense HWC float image with values nominally in [0, 1]. Per-channel
// standardization happens at the model boundary, not here, so augmentation
// code can reason in display space.
struct Image {
  int h = 0, w = 0, c = 0;
  std::vector<float> pix;  // h*w*c, row-major, channel-interleaved

  Image() = default;
  Image(int h_, int w_, int c_) : h(h_), w(w_), c(c_), pix(static_cast<size_t>(h_) * w_ * c_, 0.f) {}

  float& at(int y, int x, int ch) {
    return pix[(static_cast<size_t>(y) * w + x) * c + ch];
  }
  float at(int y, int x, int ch) const {
    return pix[(static_cast<size_t>(y) * w + x) * c + ch];
  }
};

// ------------------------------------------------------------------- PPM

// Binary PPM (P6, 8-bit). Kept dependency-free so the synthetic benchmark
// and tests can round-trip images anywhere.
inline void write_ppm(const std::string& path, const Image& img) {
  if (img.c != 3) throw IoError("write_ppm: only 3-channel images");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_ppm: cannot open " + path);
  f << "P6\n" << img.w << " " << img.h << "\n255\n";
  std::vector<unsigned char> buf(img.pix.size());
  for (size_t i = 0; i < img.pix.size(); ++i) {
    float v = std::clamp(img.pix[i], 0.f, 1.f);
    buf[i] = static_cast<unsigned char>(std::lround(v * 255.f));
  }
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError("write_ppm: short write to " + path);
}

inline Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_ppm: cannot open " + path);
  std::string magic;
  f >> magic;
  if (magic != "P6") throw IoError("read_ppm: not a P6 file: " + path);
  auto next_int = [&f, &path]() {
    // Skip whitespace and '#' comment lines between header fields.
    int ch = f.get();
    while (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r' || ch == '#') {
      if (ch == '#')
        while (ch != '\n' && ch != EOF) ch = f.get();
      ch = f.get();
    }
    int value = 0;
    bool any = false;
    while (ch >= '0' && ch <= '9') {
      value = value * 10 + (ch - '0');
      any = true;
      ch = f.get();
    }
    if (!any) throw IoError("read_ppm: malformed header in " + path);
    return value;
  };
  const int w = next_int(), h = next_int(), maxv = next_int();
  if (maxv != 255) throw IoError("read_ppm: only 8-bit PPM supported");
  Image img(h, w, 3);
  std::vector<unsigned char> buf(img.pix.size());
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (f.gcount() != static_cast<std::streamsize>(buf.size()))
    throw IoError("read_ppm: truncated pixel data in " + path);
  for (size_t i = 0; i < buf.size(); ++i) img.pix[i] = buf[i] / 255.f;
  return img;
}

// ------------------------------------------------------------ geometry ops

// Bilinear resize; pixel centers at (i + 0.5) so scaling is symmetric.
inline Image resize_bilinear(const Image& src, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0) throw ConfigError("resize: output size must be positive");
  Image dst(out_h, out_w, src.c);
  const float sy = static_cast<float>(src.h) / out_h;
  const float sx = static_cast<float>(src.w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    float fy = (y + 0.5f) * sy - 0.5f;
    fy = std::clamp(fy, 0.f, static_cast<float>(src.h - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.h - 1);
    const float wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      float fx = (x + 0.5f) * sx - 0.5f;
      fx = std::clamp(fx, 0.f, static_cast<float>(src.w - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.w - 1);
      const float wx = fx - x0;
      for (int ch = 0; ch < src.c; ++ch) {
        const float top = src.at(y0, x0, ch) * (1 - wx) + src.at(y0, x1, ch) * wx;
        const float bot = src.at(y1, x0, ch) * (1 - wx) + src.at(y1, x1, ch) * wx;
        dst.at(y, x, ch) = top * (1 - wy) + bot * wy;
      }
    }
  }
  return dst;
}

inline Image crop(const Image& src, int top, int left, int ch_, int cw) {
  if (top < 0 || left < 0 || top + ch_ > src.h || left + cw > src.w)
    throw ShapeError("crop: window out of bounds");
  Image dst(ch_, cw, src.c);
  for (int y = 0; y < ch_; ++y)
    for (int x = 0; x < cw; ++x)
      for (int k = 0; k < src.c; ++k) dst.at(y, x, k) = src.at(top + y, left + x, k);
  return dst;
}

// Resize the shorter side to `size`, then take the central size x size crop.
inline Image resize_center_crop(const Image& src, int size) {
  int rh, rw;
  if (src.h <= src.w) {
    rh = size;
    rw = std::max(size, static_cast<int>(std::lround(static_cast<double>(src.w) * size / src.h)));
  } else {
    rw = size;
    rh = std::max(size, static_cast<int>(std::lround(static_cast<double>(src.h) * size / src.w)));
  }
  Image r = resize_bilinear(src, rh, rw);
  return crop(r, (rh - size) / 2, (rw - size) / 2, size, size);
}

inline Image hflip(const Image& src) {
  Image dst(src.h, src.w, src.c);
  for (int y = 0; y < src.h; ++y)
    for (int x = 0; x < src.w; ++x)
      for (int k = 0; k < src.c; ++k) dst.at(y, x, k) = src.at(y, src.w - 1 - x, k);
  return dst;
}

}  // namespace grappa
