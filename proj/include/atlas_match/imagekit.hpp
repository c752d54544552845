#pragma once

// Grayscale images, PGM I/O, CLAHE, resizing and affine warping.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "atlas_match/error.hpp"

namespace atlas_match {

// Row-major grayscale raster with intensities in [0, 1].
class GrayImage {
 public:
  GrayImage() : GrayImage(1, 1) {}

  GrayImage(int width, int height, float fill = 0.0f) : width_(width), height_(height) {
    require(width >= 1 && height >= 1, ErrorCode::InvalidArgument, "image dimensions must be >= 1");
    require(std::isfinite(fill) && fill >= 0.0f && fill <= 1.0f, ErrorCode::InvalidArgument,
            "fill intensity outside [0,1]");
    pixels_.assign(static_cast<std::size_t>(width) * height, fill);
  }

  GrayImage(int width, int height, std::vector<float> pixels)
      : width_(width), height_(height), pixels_(std::move(pixels)) {
    require(width >= 1 && height >= 1, ErrorCode::InvalidArgument, "image dimensions must be >= 1");
    require(pixels_.size() == static_cast<std::size_t>(width) * height, ErrorCode::InvalidArgument,
            "pixel count does not match width*height");
    for (float p : pixels_) {
      require(std::isfinite(p) && p >= 0.0f && p <= 1.0f, ErrorCode::InvalidArgument,
              "pixel intensity outside [0,1]");
    }
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  std::size_t size() const noexcept { return pixels_.size(); }
  std::span<const float> pixels() const noexcept { return pixels_; }
  float at(int x, int y) const { return pixels_[static_cast<std::size_t>(y) * width_ + x]; }

  friend bool operator==(const GrayImage&, const GrayImage&) = default;

 private:
  int width_;
  int height_;
  std::vector<float> pixels_;
};

inline float clamp01(float v) { return v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v); }

inline double mean_abs_diff(const GrayImage& a, const GrayImage& b) {
  require(a.width() == b.width() && a.height() == b.height(), ErrorCode::DimensionMismatch,
          "mean_abs_diff needs equal dimensions");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(double(a.pixels()[i]) - b.pixels()[i]);
  return acc / static_cast<double>(a.size());
}

// ---------------------------------------------------------------------------
// Affine transforms
// ---------------------------------------------------------------------------

// 2x3 affine map. The linear part acts about the image center; tx and ty are
// fractions of the output width and height (tx = 0.5 shifts by half the width).
struct AffineTransform {
  double a11 = 1.0, a12 = 0.0, a21 = 0.0, a22 = 1.0, tx = 0.0, ty = 0.0;

  static AffineTransform identity() { return {}; }

  static AffineTransform from_params(std::span<const double, 6> p) {
    return {p[0], p[1], p[2], p[3], p[4], p[5]};
  }

  // Rotation by `degrees` (counter-clockwise in image coordinates with y down
  // displayed as clockwise), isotropic `scale`, then translation.
  static AffineTransform similarity(double degrees, double scale, double tx, double ty) {
    const double r = degrees * std::numbers::pi / 180.0;
    const double c = std::cos(r) * scale, s = std::sin(r) * scale;
    return {c, -s, s, c, tx, ty};
  }

  std::array<double, 6> params() const { return {a11, a12, a21, a22, tx, ty}; }
  double det() const { return a11 * a22 - a12 * a21; }

  bool finite() const {
    for (double v : params()) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const AffineTransform&, const AffineTransform&) = default;
};

// Applying `first` then `second` to a width x height image. Translations are
// axis fractions, so mixing axes needs the aspect ratio.
inline AffineTransform compose(const AffineTransform& second, const AffineTransform& first,
                               int width = 1, int height = 1) {
  AffineTransform r;
  r.a11 = second.a11 * first.a11 + second.a12 * first.a21;
  r.a12 = second.a11 * first.a12 + second.a12 * first.a22;
  r.a21 = second.a21 * first.a11 + second.a22 * first.a21;
  r.a22 = second.a21 * first.a12 + second.a22 * first.a22;
  const double aspect = static_cast<double>(height) / width;
  r.tx = second.a11 * first.tx + second.a12 * first.ty * aspect + second.tx;
  r.ty = second.a21 * first.tx / aspect + second.a22 * first.ty + second.ty;
  return r;
}

// Maps a point of the moving image (pixel coordinates) into the output frame.
inline std::array<double, 2> apply_point(const AffineTransform& t, double x, double y, int in_w,
                                         int in_h, int out_w, int out_h) {
  const double cx = (in_w - 1) * 0.5, cy = (in_h - 1) * 0.5;
  const double ox = (out_w - 1) * 0.5, oy = (out_h - 1) * 0.5;
  const double dx = x - cx, dy = y - cy;
  return {t.a11 * dx + t.a12 * dy + ox + t.tx * out_w, t.a21 * dx + t.a22 * dy + oy + t.ty * out_h};
}

constexpr double kSingularDet = 1e-8;

// Inverse mapping from output pixel to moving-image coordinates.
class InverseMap {
 public:
  InverseMap(const AffineTransform& t, int in_w, int in_h, int out_w, int out_h) {
    require(t.finite(), ErrorCode::InvalidArgument, "transform parameters must be finite");
    const double d = t.det();
    require(std::abs(d) >= kSingularDet, ErrorCode::SingularTransform, "affine determinant below 1e-8");
    i11_ = t.a22 / d;
    i12_ = -t.a12 / d;
    i21_ = -t.a21 / d;
    i22_ = t.a11 / d;
    cx_ = (in_w - 1) * 0.5;
    cy_ = (in_h - 1) * 0.5;
    ox_ = (out_w - 1) * 0.5 + t.tx * out_w;
    oy_ = (out_h - 1) * 0.5 + t.ty * out_h;
  }

  std::array<double, 2> operator()(double x, double y) const {
    const double dx = x - ox_, dy = y - oy_;
    return {i11_ * dx + i12_ * dy + cx_, i21_ * dx + i22_ * dy + cy_};
  }

  // Moving-image coordinate of output pixel (0, y) and its per-column step.
  void row(double y, double& sx, double& sy, double& stepx, double& stepy) const {
    auto p = (*this)(0.0, y);
    sx = p[0];
    sy = p[1];
    stepx = i11_;
    stepy = i21_;
  }

 private:
  double i11_, i12_, i21_, i22_, cx_, cy_, ox_, oy_;
};

// Bilinear sample with zero outside the raster.
inline float sample_bilinear_zero(std::span<const float> px, int w, int h, double x, double y) {
  if (x <= -1.0 || y <= -1.0 || x >= w || y >= h) return 0.0f;
  const double fx0 = std::floor(x), fy0 = std::floor(y);
  const int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0);
  const double fx = x - fx0, fy = y - fy0;
  auto get = [&](int xx, int yy) -> double {
    if (xx < 0 || yy < 0 || xx >= w || yy >= h) return 0.0;
    return px[static_cast<std::size_t>(yy) * w + xx];
  };
  if (fx == 0.0 && fy == 0.0) return static_cast<float>(get(x0, y0));
  const double top = get(x0, y0) * (1.0 - fx) + get(x0 + 1, y0) * fx;
  const double bot = get(x0, y0 + 1) * (1.0 - fx) + get(x0 + 1, y0 + 1) * fx;
  return static_cast<float>(top * (1.0 - fy) + bot * fy);
}

// Inverse-mapping warp: each output pixel samples the input at T^-1(x, y).
inline GrayImage warp_affine(const GrayImage& img, const AffineTransform& t, int out_w, int out_h) {
  require(out_w >= 1 && out_h >= 1, ErrorCode::InvalidArgument, "output dimensions must be >= 1");
  const InverseMap inv(t, img.width(), img.height(), out_w, out_h);
  std::vector<float> out(static_cast<std::size_t>(out_w) * out_h);
  const auto px = img.pixels();
  for (int y = 0; y < out_h; ++y) {
    double sx, sy, stepx, stepy;
    inv.row(y, sx, sy, stepx, stepy);
    for (int x = 0; x < out_w; ++x) {
      out[static_cast<std::size_t>(y) * out_w + x] =
          clamp01(sample_bilinear_zero(px, img.width(), img.height(), sx + stepx * x, sy + stepy * x));
    }
  }
  return GrayImage(out_w, out_h, std::move(out));
}

inline GrayImage warp_affine(const GrayImage& img, const AffineTransform& t) {
  return warp_affine(img, t, img.width(), img.height());
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

// Half-pixel-centered bilinear resize with edge replication.
inline GrayImage resize_bilinear(const GrayImage& img, int out_w, int out_h) {
  require(out_w >= 1 && out_h >= 1, ErrorCode::InvalidArgument, "output dimensions must be >= 1");
  if (out_w == img.width() && out_h == img.height()) return img;
  const int w = img.width(), h = img.height();
  const double scx = static_cast<double>(w) / out_w, scy = static_cast<double>(h) / out_h;
  std::vector<float> out(static_cast<std::size_t>(out_w) * out_h);
  for (int y = 0; y < out_h; ++y) {
    const double sy = std::clamp((y + 0.5) * scy - 0.5, 0.0, h - 1.0);
    const int y0 = static_cast<int>(sy);
    const int y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double sx = std::clamp((x + 0.5) * scx - 0.5, 0.0, w - 1.0);
      const int x0 = static_cast<int>(sx);
      const int x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - x0;
      const double p00 = img.at(x0, y0), p01 = img.at(x1, y0);
      const double p10 = img.at(x0, y1), p11 = img.at(x1, y1);
      const double top = p00 + (p01 - p00) * fx;
      const double bot = p10 + (p11 - p10) * fx;
      out[static_cast<std::size_t>(y) * out_w + x] = clamp01(static_cast<float>(top + (bot - top) * fy));
    }
  }
  return GrayImage(out_w, out_h, std::move(out));
}

// Separable 5-tap binomial blur (1 4 6 4 1)/16 with edge replication.
inline GrayImage binomial_blur5(const GrayImage& img) {
  static constexpr std::array<float, 5> k{1.0f / 16, 4.0f / 16, 6.0f / 16, 4.0f / 16, 1.0f / 16};
  const int w = img.width(), h = img.height();
  std::vector<float> tmp(img.size()), out(img.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      float acc = 0.0f;
      for (int i = -2; i <= 2; ++i) acc += k[i + 2] * img.at(std::clamp(x + i, 0, w - 1), y);
      tmp[static_cast<std::size_t>(y) * w + x] = acc;
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      float acc = 0.0f;
      for (int i = -2; i <= 2; ++i) acc += k[i + 2] * tmp[static_cast<std::size_t>(std::clamp(y + i, 0, h - 1)) * w + x];
      out[static_cast<std::size_t>(y) * w + x] = clamp01(acc);
    }
  }
  return GrayImage(w, h, std::move(out));
}

// Keeps every second pixel (the caller decides whether to blur first).
inline GrayImage decimate2(const GrayImage& img) {
  const int w = std::max(1, img.width() / 2), h = std::max(1, img.height() / 2);
  std::vector<float> out(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      out[static_cast<std::size_t>(y) * w + x] =
          img.at(std::min(2 * x, img.width() - 1), std::min(2 * y, img.height() - 1));
    }
  }
  return GrayImage(w, h, std::move(out));
}

// ---------------------------------------------------------------------------
// CLAHE
// ---------------------------------------------------------------------------

struct ClaheConfig {
  int tiles_x = 8;
  int tiles_y = 8;
  double clip_limit = 2.0;  // multiple of the uniform bin height
  int bins = 256;
};

inline int intensity_bin(float v, int bins) {
  return std::min(bins - 1, static_cast<int>(v * static_cast<float>(bins)));
}

// Contrast-limited adaptive histogram equalization. Each tile's clipped
// histogram defines a lookup table; pixels blend the four nearest tile tables
// bilinearly. A tile whose histogram occupies a single bin has no contrast to
// stretch and maps intensities to themselves.
inline GrayImage clahe(const GrayImage& img, const ClaheConfig& cfg = {}) {
  require(cfg.tiles_x >= 1 && cfg.tiles_y >= 1, ErrorCode::InvalidArgument, "tile grid must be >= 1");
  require(cfg.clip_limit >= 1.0, ErrorCode::InvalidArgument, "clip_limit must be >= 1");
  require(cfg.bins >= 2, ErrorCode::InvalidArgument, "bins must be >= 2");
  const int w = img.width(), h = img.height();
  if (cfg.tiles_x > w || cfg.tiles_y > h) {
    fail(ErrorCode::TileLargerThanImage, "tile grid yields empty tiles");
  }
  const int gx = cfg.tiles_x, gy = cfg.tiles_y, bins = cfg.bins;
  auto tile_start = [](int i, int n, int g) { return static_cast<int>(static_cast<long>(i) * n / g); };

  // lut[(ty * gx + tx) * bins + b]; an empty table marks an identity tile.
  std::vector<std::vector<float>> luts(static_cast<std::size_t>(gx) * gy);
  std::vector<double> centers_x(gx), centers_y(gy);
  for (int i = 0; i < gx; ++i) centers_x[i] = 0.5 * (tile_start(i, w, gx) + tile_start(i + 1, w, gx) - 1);
  for (int i = 0; i < gy; ++i) centers_y[i] = 0.5 * (tile_start(i, h, gy) + tile_start(i + 1, h, gy) - 1);

  std::vector<double> hist(bins);
  for (int ty = 0; ty < gy; ++ty) {
    for (int tx = 0; tx < gx; ++tx) {
      std::fill(hist.begin(), hist.end(), 0.0);
      const int x0 = tile_start(tx, w, gx), x1 = tile_start(tx + 1, w, gx);
      const int y0 = tile_start(ty, h, gy), y1 = tile_start(ty + 1, h, gy);
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) hist[intensity_bin(img.at(x, y), bins)] += 1.0;
      const double n = static_cast<double>(x1 - x0) * (y1 - y0);
      const auto occupied = std::count_if(hist.begin(), hist.end(), [](double c) { return c > 0.0; });
      auto& lut = luts[static_cast<std::size_t>(ty) * gx + tx];
      if (occupied <= 1) continue;
      const double clip = cfg.clip_limit * n / bins;
      double excess = 0.0;
      for (double& c : hist) {
        if (c > clip) {
          excess += c - clip;
          c = clip;
        }
      }
      const double share = excess / bins;
      lut.resize(bins);
      double cdf = 0.0;
      for (int b = 0; b < bins; ++b) {
        cdf += hist[b] + share;
        lut[b] = static_cast<float>(std::min(1.0, cdf / n));
      }
    }
  }

  auto map = [&](int tx, int ty, float v) {
    const auto& lut = luts[static_cast<std::size_t>(ty) * gx + tx];
    return lut.empty() ? v : lut[intensity_bin(v, bins)];
  };
  auto locate = [](const std::vector<double>& centers, double p, int& i0, int& i1, double& f) {
    const int g = static_cast<int>(centers.size());
    if (p <= centers.front()) {
      i0 = i1 = 0;
      f = 0.0;
    } else if (p >= centers.back()) {
      i0 = i1 = g - 1;
      f = 0.0;
    } else {
      i0 = 0;
      while (i0 + 1 < g && centers[i0 + 1] <= p) ++i0;
      i1 = std::min(i0 + 1, g - 1);
      f = i1 == i0 ? 0.0 : (p - centers[i0]) / (centers[i1] - centers[i0]);
    }
  };

  std::vector<float> out(img.size());
  for (int y = 0; y < h; ++y) {
    int ty0, ty1;
    double fy;
    locate(centers_y, y, ty0, ty1, fy);
    for (int x = 0; x < w; ++x) {
      int tx0, tx1;
      double fx;
      locate(centers_x, x, tx0, tx1, fx);
      const float v = img.at(x, y);
      const double top = map(tx0, ty0, v) * (1.0 - fx) + map(tx1, ty0, v) * fx;
      const double bot = map(tx0, ty1, v) * (1.0 - fx) + map(tx1, ty1, v) * fx;
      out[static_cast<std::size_t>(y) * w + x] = clamp01(static_cast<float>(top * (1.0 - fy) + bot * fy));
    }
  }
  return GrayImage(w, h, std::move(out));
}

// ---------------------------------------------------------------------------
// PGM I/O
// ---------------------------------------------------------------------------

namespace detail {

inline void skip_pgm_space(const std::string& s, std::size_t& pos) {
  while (pos < s.size()) {
    if (s[pos] == '#') {
      while (pos < s.size() && s[pos] != '\n') ++pos;
    } else if (std::isspace(static_cast<unsigned char>(s[pos]))) {
      ++pos;
    } else {
      break;
    }
  }
}

inline long read_pgm_int(const std::string& s, std::size_t& pos) {
  skip_pgm_space(s, pos);
  const std::size_t start = pos;
  long v = 0;
  while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) {
    v = v * 10 + (s[pos] - '0');
    if (v > 1'000'000'000L) fail(ErrorCode::MalformedHeader, "PGM header value too large");
    ++pos;
  }
  if (pos == start) fail(ErrorCode::MalformedHeader, "expected an integer in PGM header");
  return v;
}

}  // namespace detail

inline GrayImage decode_pgm(const std::string& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
    fail(ErrorCode::MalformedHeader, "not a binary PGM (expected magic P5)");
  }
  std::size_t pos = 2;
  const long w = detail::read_pgm_int(bytes, pos);
  const long h = detail::read_pgm_int(bytes, pos);
  const long maxval = detail::read_pgm_int(bytes, pos);
  if (w < 1 || h < 1) fail(ErrorCode::MalformedHeader, "PGM dimensions must be >= 1");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    fail(ErrorCode::MalformedHeader, "missing whitespace after maxval");
  }
  ++pos;
  if (maxval != 255) fail(ErrorCode::UnsupportedMaxval, "only maxval 255 is supported");
  const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  if (bytes.size() - pos < n) fail(ErrorCode::TruncatedPayload, "PGM payload shorter than width*height");
  std::vector<float> px(n);
  for (std::size_t i = 0; i < n; ++i) {
    px[i] = static_cast<float>(static_cast<unsigned char>(bytes[pos + i])) / 255.0f;
  }
  return GrayImage(static_cast<int>(w), static_cast<int>(h), std::move(px));
}

inline std::uint8_t quantize_u8(float p) {
  return static_cast<std::uint8_t>(std::floor(static_cast<double>(p) * 255.0 + 0.5));
}

inline std::string encode_pgm(const GrayImage& img) {
  std::string out = "P5\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n255\n";
  out.reserve(out.size() + img.size());
  for (float p : img.pixels()) out.push_back(static_cast<char>(quantize_u8(p)));
  return out;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoFailure, "cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoFailure, "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::IoFailure, "write failed for " + path.string());
}

inline GrayImage load_pgm(const std::filesystem::path& path) { return decode_pgm(read_file_bytes(path)); }

inline void save_pgm(const GrayImage& img, const std::filesystem::path& path) {
  write_file_bytes(path, encode_pgm(img));
}

}  // namespace atlas_match
