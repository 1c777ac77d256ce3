#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "pef/tensor.hpp"

namespace pef {

// 8-bit-backed RGB image held as floats in [0,1], row-major H x W x 3.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> pixels;  // h * w * 3

  Image() = default;
  Image(int w, int h, float fill = 0.f)
      : width(w), height(h),
        pixels(static_cast<std::size_t>(w) * h * 3, fill) {}

  float& at(int x, int y, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  float at(int x, int y, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }

  // bilinear sample with edge clamp; (x, y) in pixel coordinates where
  // integer coordinates hit pixel centers
  float sample(double x, double y, int c) const {
    const double fx = std::clamp(x, 0.0, static_cast<double>(width - 1));
    const double fy = std::clamp(y, 0.0, static_cast<double>(height - 1));
    const int x0 = static_cast<int>(std::floor(fx));
    const int y0 = static_cast<int>(std::floor(fy));
    const int x1 = std::min(x0 + 1, width - 1);
    const int y1 = std::min(y0 + 1, height - 1);
    const double ax = fx - x0, ay = fy - y0;
    const double top = at(x0, y0, c) * (1 - ax) + at(x1, y0, c) * ax;
    const double bot = at(x0, y1, c) * (1 - ax) + at(x1, y1, c) * ax;
    return static_cast<float>(top * (1 - ay) + bot * ay);
  }
};

// 2-d affine map (x, y) -> (a x + b y + c, d x + e y + f)
struct Affine2 {
  double a = 1, b = 0, c = 0;
  double d = 0, e = 1, f = 0;

  void apply(double x, double y, double& ox, double& oy) const {
    ox = a * x + b * y + c;
    oy = d * x + e * y + f;
  }

  Affine2 then(const Affine2& o) const {  // o after this
    Affine2 r;
    r.a = o.a * a + o.b * d;
    r.b = o.a * b + o.b * e;
    r.c = o.a * c + o.b * f + o.c;
    r.d = o.d * a + o.e * d;
    r.e = o.d * b + o.e * e;
    r.f = o.d * c + o.e * f + o.f;
    return r;
  }

  Affine2 inverse() const {
    const double det = a * e - b * d;
    if (std::abs(det) < 1e-30) throw ValueError("affine: singular");
    Affine2 r;
    r.a = e / det;
    r.b = -b / det;
    r.d = -d / det;
    r.e = a / det;
    r.c = -(r.a * c + r.b * f);
    r.f = -(r.d * c + r.e * f);
    return r;
  }

  bool is_identity() const {
    return a == 1 && b == 0 && c == 0 && d == 0 && e == 1 && f == 0;
  }

  static Affine2 translation(double tx, double ty) {
    return {1, 0, tx, 0, 1, ty};
  }
  static Affine2 scaling(double sx, double sy) { return {sx, 0, 0, 0, sy, 0}; }
  static Affine2 rotation(double radians) {
    const double cs = std::cos(radians), sn = std::sin(radians);
    return {cs, -sn, 0, sn, cs, 0};
  }
};

// Resample src through the inverse of `fwd` (fwd maps src -> dst pixels).
inline Image warp(const Image& src, const Affine2& fwd, int out_w, int out_h) {
  const Affine2 inv = fwd.inverse();
  Image out(out_w, out_h);
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      double sx, sy;
      inv.apply(x, y, sx, sy);
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = src.sample(sx, sy, c);
    }
  return out;
}

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValueError("cannot write image: " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<std::uint8_t> bytes(img.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = static_cast<std::uint8_t>(
        std::clamp(std::lround(img.pixels[i] * 255.f), 0l, 255l));
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

inline Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValueError("cannot open image: " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw ValueError("unsupported image format (want P6 PPM)");
  auto next_int = [&]() {
    int v;
    // skip whitespace and '#' comment lines
    for (;;) {
      in >> std::ws;
      if (in.peek() == '#') {
        std::string line;
        std::getline(in, line);
      } else {
        break;
      }
    }
    if (!(in >> v)) throw ValueError("malformed PPM header");
    return v;
  };
  const int w = next_int(), h = next_int(), maxval = next_int();
  if (maxval != 255) throw ValueError("unsupported PPM maxval");
  in.get();  // single whitespace after header
  Image img(w, h);
  std::vector<std::uint8_t> bytes(img.pixels.size());
  in.read(reinterpret_cast<char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!in) throw ValueError("truncated PPM: " + path);
  for (std::size_t i = 0; i < bytes.size(); ++i)
    img.pixels[i] = static_cast<float>(bytes[i]) / 255.f;
  return img;
}

inline void draw_disc(Image& img, double cx, double cy, double radius,
                      float r, float g, float b) {
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - radius)));
  const int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(cx + radius)));
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - radius)));
  const int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(cy + radius)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double dx = x - cx, dy = y - cy;
      if (dx * dx + dy * dy <= radius * radius) {
        img.at(x, y, 0) = r;
        img.at(x, y, 1) = g;
        img.at(x, y, 2) = b;
      }
    }
}

inline void draw_line(Image& img, double x0, double y0, double x1, double y1,
                      double radius, float r, float g, float b) {
  const double len = std::hypot(x1 - x0, y1 - y0);
  const int steps = std::max(1, static_cast<int>(std::ceil(len * 2)));
  for (int i = 0; i <= steps; ++i) {
    const double t = static_cast<double>(i) / steps;
    draw_disc(img, x0 + t * (x1 - x0), y0 + t * (y1 - y0), radius, r, g, b);
  }
}

// Convert [0,1] pixels to a model input tensor, channel-standardized.
template <class Real>
Tensor<Real> image_to_tensor(const Image& img, double mean = 0.5,
                             double stddev = 0.5) {
  std::vector<Real> data(img.pixels.size());
  for (std::size_t i = 0; i < data.size(); ++i)
    data[i] = static_cast<Real>((img.pixels[i] - mean) / stddev);
  return Tensor<Real>({img.height, img.width, 3}, std::move(data));
}

}  // namespace pef
