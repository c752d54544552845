#pragma once

// Deterministic synthetic atlas: an ordered stack of plates whose anatomy
// drifts smoothly with the plate index, plus partial, augmented slices cut
// from it with known ground truth.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "atlas_match/error.hpp"
#include "atlas_match/imagekit.hpp"
#include "atlas_match/random.hpp"

namespace atlas_match {

struct AtlasSpec {
  int num_plates = 132;
  int image_size = 128;
  std::uint64_t seed = 0;
  double morph_rate = 1.0;

  void validate() const {
    require(num_plates >= 2, ErrorCode::InvalidArgument, "num_plates must be >= 2");
    require(image_size >= 32, ErrorCode::InvalidArgument, "image_size must be >= 32");
    require(std::isfinite(morph_rate) && morph_rate > 0.0, ErrorCode::InvalidArgument,
            "morph_rate must be > 0");
  }
};

struct SliceAugmentation {
  AffineTransform affine;
  double crop_fraction = 0.0;   // [0, 0.3]
  double pepper_density = 0.0;  // [0, 0.05]
  double neighbor_blend = 0.0;  // [0, 0.5]
  int neighbor_side = 1;        // +1 mixes the next plate, -1 the previous (clamped at the ends)

  void validate() const {
    require(affine.finite(), ErrorCode::InvalidArgument, "augmentation affine must be finite");
    require(crop_fraction >= 0.0 && crop_fraction <= 0.3, ErrorCode::InvalidArgument,
            "crop_fraction outside [0, 0.3]");
    require(pepper_density >= 0.0 && pepper_density <= 0.05, ErrorCode::InvalidArgument,
            "pepper_density outside [0, 0.05]");
    require(neighbor_blend >= 0.0 && neighbor_blend <= 0.5, ErrorCode::InvalidArgument,
            "neighbor_blend outside [0, 0.5]");
    require(neighbor_side == 1 || neighbor_side == -1, ErrorCode::InvalidArgument,
            "neighbor_side must be +1 or -1");
  }
};

// Sampling ranges for random augmentations.
struct AugmentationRanges {
  double max_rotation_deg = 15.0;
  double min_scale = 0.85;
  double max_scale = 1.15;
  double max_translation = 0.1;
  double max_crop = 0.2;
  double max_pepper = 0.05;
  double max_blend = 0.3;
};

inline SliceAugmentation random_augmentation(const AugmentationRanges& r, Rng& rng) {
  const double angle = rng.uniform(-r.max_rotation_deg, r.max_rotation_deg) * std::numbers::pi / 180.0;
  const double sx = rng.uniform(r.min_scale, r.max_scale);
  const double sy = rng.uniform(r.min_scale, r.max_scale);
  const double tx = rng.uniform(-r.max_translation, r.max_translation);
  const double ty = rng.uniform(-r.max_translation, r.max_translation);
  const double c = std::cos(angle), s = std::sin(angle);
  SliceAugmentation aug;
  aug.affine = {c * sx, -s * sy, s * sx, c * sy, tx, ty};
  aug.crop_fraction = rng.uniform(0.0, r.max_crop);
  aug.pepper_density = rng.uniform(0.0, r.max_pepper);
  aug.neighbor_blend = rng.uniform(0.0, r.max_blend);
  aug.neighbor_side = rng.bernoulli(0.5) ? 1 : -1;
  return aug;
}

// ---------------------------------------------------------------------------
// Plate generation
// ---------------------------------------------------------------------------

namespace detail {

struct Blob {
  double cx, cy, dx, dy;  // center and its drift over the atlas
  double rx, ry, dr;      // radii and their growth
  double angle;
  double v0, v1;  // intensity at the first and last plate
};

struct AtlasLayout {
  std::vector<Blob> blobs;
  double outline_rx, outline_ry, outline_drx, outline_dry;
};

inline AtlasLayout make_layout(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xA71A5ULL));
  AtlasLayout layout;
  layout.outline_rx = 0.66;
  layout.outline_ry = 0.74;
  layout.outline_drx = 0.16;
  layout.outline_dry = -0.12;
  constexpr int kBlobs = 6;
  for (int k = 0; k < kBlobs; ++k) {
    Blob b;
    const double a = 2.0 * std::numbers::pi * (k + rng.uniform(0.0, 0.5)) / kBlobs;
    const double rad = k == 0 ? 0.0 : rng.uniform(0.22, 0.42);
    b.cx = rad * std::cos(a);
    b.cy = rad * std::sin(a);
    b.dx = rng.uniform(-0.12, 0.12);
    b.dy = rng.uniform(-0.12, 0.12);
    b.rx = rng.uniform(0.09, 0.17);
    b.ry = rng.uniform(0.09, 0.17);
    b.dr = rng.uniform(-0.05, 0.07);
    b.angle = rng.uniform(0.0, std::numbers::pi);
    b.v0 = rng.uniform(0.5, 1.0);
    do {
      b.v1 = rng.uniform(0.5, 1.0);
    } while (std::abs(b.v1 - b.v0) < 0.25);
    layout.blobs.push_back(b);
  }
  return layout;
}

// 1 inside, 0 outside, linear ramp across `soft` normalized units.
inline double soft_inside(double r, double soft) { return std::clamp((1.0 - r) / soft + 0.5, 0.0, 1.0); }

}  // namespace detail

// Plate `index` of the atlas described by `spec`.
inline GrayImage generate_plate(const AtlasSpec& spec, int index) {
  spec.validate();
  require(index >= 0 && index < spec.num_plates, ErrorCode::InvalidArgument, "plate index out of range");
  const auto layout = detail::make_layout(spec.seed);
  const int n = spec.image_size;
  const double t = static_cast<double>(index) / (spec.num_plates - 1);
  const double m = std::min(spec.morph_rate, 2.0);
  const double soft = 3.0 / n;

  // Per-plate texture: smooth value noise on an 8x8 lattice.
  constexpr int kLattice = 9;
  std::array<double, kLattice * kLattice> lattice{};
  Rng tex(derive_seed(spec.seed, 0x7E47000ULL + static_cast<std::uint64_t>(index)));
  for (double& v : lattice) v = tex.uniform(-0.04, 0.04);

  const double orx = layout.outline_rx + m * layout.outline_drx * t;
  const double ory = layout.outline_ry + m * layout.outline_dry * t;
  const double base = 0.28 + 0.14 * t;

  std::vector<float> px(static_cast<std::size_t>(n) * n);
  for (int y = 0; y < n; ++y) {
    const double v = (2.0 * y + 1.0) / n - 1.0;
    for (int x = 0; x < n; ++x) {
      const double u = (2.0 * x + 1.0) / n - 1.0;
      const double section = detail::soft_inside(std::hypot(u / orx, v / ory), soft / std::min(orx, ory));
      if (section <= 0.0) continue;
      double val = base;
      for (const auto& b : layout.blobs) {
        const double cx = b.cx + m * b.dx * t, cy = b.cy + m * b.dy * t;
        const double rx = b.rx + m * b.dr * t, ry = b.ry + m * b.dr * t;
        const double ca = std::cos(b.angle), sa = std::sin(b.angle);
        const double du = u - cx, dv = v - cy;
        const double ru = (ca * du + sa * dv) / rx, rv = (-sa * du + ca * dv) / ry;
        const double inside = detail::soft_inside(std::hypot(ru, rv), soft / std::min(rx, ry));
        const double level = b.v0 + (b.v1 - b.v0) * t;
        val += (level - val) * inside;
      }
      const double gx = (u + 1.0) * 0.5 * (kLattice - 1), gy = (v + 1.0) * 0.5 * (kLattice - 1);
      const int ix = std::clamp(static_cast<int>(gx), 0, kLattice - 2);
      const int iy = std::clamp(static_cast<int>(gy), 0, kLattice - 2);
      const double fx = gx - ix, fy = gy - iy;
      const double noise = (lattice[iy * kLattice + ix] * (1 - fx) + lattice[iy * kLattice + ix + 1] * fx) * (1 - fy) +
                           (lattice[(iy + 1) * kLattice + ix] * (1 - fx) + lattice[(iy + 1) * kLattice + ix + 1] * fx) * fy;
      px[static_cast<std::size_t>(y) * n + x] = clamp01(static_cast<float>((val + noise) * section));
    }
  }
  return GrayImage(n, n, std::move(px));
}

inline std::vector<GrayImage> generate_atlas(const AtlasSpec& spec) {
  spec.validate();
  std::vector<GrayImage> plates;
  plates.reserve(spec.num_plates);
  for (int i = 0; i < spec.num_plates; ++i) plates.push_back(generate_plate(spec, i));
  return plates;
}

// ---------------------------------------------------------------------------
// Slices
// ---------------------------------------------------------------------------

// Zeroes floor(fraction * size) pixels along every border.
inline GrayImage crop_and_pad(const GrayImage& img, double fraction) {
  const int bx = static_cast<int>(std::floor(fraction * img.width()));
  const int by = static_cast<int>(std::floor(fraction * img.height()));
  if (bx == 0 && by == 0) return img;
  std::vector<float> px(img.pixels().begin(), img.pixels().end());
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      if (x < bx || x >= img.width() - bx || y < by || y >= img.height() - by) {
        px[static_cast<std::size_t>(y) * img.width() + x] = 0.0f;
      }
    }
  }
  return GrayImage(img.width(), img.height(), std::move(px));
}

// Visits pixels row-major and zeroes each with probability `density`.
inline GrayImage pepper_noise(const GrayImage& img, double density, std::uint64_t seed) {
  if (density <= 0.0) return img;
  Rng rng(seed);
  std::vector<float> px(img.pixels().begin(), img.pixels().end());
  for (float& p : px) {
    if (rng.bernoulli(density)) p = 0.0f;
  }
  return GrayImage(img.width(), img.height(), std::move(px));
}

inline GrayImage blend(const GrayImage& a, const GrayImage& b, double weight_b) {
  require(a.width() == b.width() && a.height() == b.height(), ErrorCode::DimensionMismatch,
          "blend needs equal dimensions");
  std::vector<float> px(a.size());
  const float wb = static_cast<float>(weight_b), wa = 1.0f - wb;
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = clamp01(wa * a.pixels()[i] + wb * b.pixels()[i]);
  return GrayImage(a.width(), a.height(), std::move(px));
}

// Applies affine, crop-and-pad and pepper noise (in that order) to any image.
inline GrayImage augment_image(const GrayImage& img, const SliceAugmentation& aug, std::uint64_t seed) {
  aug.validate();
  GrayImage out = aug.affine == AffineTransform::identity() ? img : warp_affine(img, aug.affine);
  out = crop_and_pad(out, aug.crop_fraction);
  return pepper_noise(out, aug.pepper_density, seed);
}

inline int blend_neighbor(int plate_idx, int side, int num_plates) {
  const int n = plate_idx + side;
  if (n < 0 || n >= num_plates) return plate_idx - side;
  return n;
}

inline GrayImage synthesize_slice(const std::vector<GrayImage>& atlas, int plate_idx,
                                  const SliceAugmentation& aug, std::uint64_t seed) {
  require(plate_idx >= 0 && plate_idx < static_cast<int>(atlas.size()), ErrorCode::InvalidArgument,
          "plate index out of range");
  aug.validate();
  GrayImage img = atlas[plate_idx];
  if (aug.neighbor_blend > 0.0 && atlas.size() >= 2) {
    img = blend(img, atlas[blend_neighbor(plate_idx, aug.neighbor_side, static_cast<int>(atlas.size()))],
                aug.neighbor_blend);
  }
  return augment_image(img, aug, seed);
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

enum class Split { Train, Val1, Val2, Test };

inline constexpr std::array<Split, 4> kAllSplits{Split::Train, Split::Val1, Split::Val2, Split::Test};

constexpr std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val1: return "val1";
    case Split::Val2: return "val2";
    case Split::Test: return "test";
  }
  return "train";
}

inline Split parse_split(std::string_view s) {
  for (Split sp : kAllSplits) {
    if (to_string(sp) == s) return sp;
  }
  fail(ErrorCode::InvalidArgument, "unknown split '" + std::string(s) + "'");
}

struct ManifestEntry {
  std::string path;  // relative to the manifest directory
  int plate = 0;
  Split split = Split::Train;
  SliceAugmentation aug;
  std::uint64_t seed = 0;
};

inline constexpr std::string_view kManifestMagic = "#atlas-match-manifest v1";

struct DatasetManifest {
  AtlasSpec atlas;
  std::string atlas_dir = "plates";
  std::vector<ManifestEntry> entries;

  std::vector<ManifestEntry> split(Split s) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries) {
      if (e.split == s) out.push_back(e);
    }
    return out;
  }
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) parts.push_back(cur);
  if (!s.empty() && s.back() == sep) parts.emplace_back();
  return parts;
}

inline double parse_double(const std::string& s) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    fail(ErrorCode::InvalidArgument, "not a number: '" + s + "'");
  }
  require(used == s.size(), ErrorCode::InvalidArgument, "not a number: '" + s + "'");
  return v;
}

inline std::uint64_t parse_u64(const std::string& s) {
  std::size_t used = 0;
  std::uint64_t v = 0;
  try {
    v = std::stoull(s, &used);
  } catch (const std::exception&) {
    fail(ErrorCode::InvalidArgument, "not an integer: '" + s + "'");
  }
  require(used == s.size(), ErrorCode::InvalidArgument, "not an integer: '" + s + "'");
  return v;
}

}  // namespace detail

inline std::string format_aug_record(const SliceAugmentation& a, std::uint64_t seed) {
  using detail::fmt_double;
  return "a11=" + fmt_double(a.affine.a11) + ";a12=" + fmt_double(a.affine.a12) +
         ";a21=" + fmt_double(a.affine.a21) + ";a22=" + fmt_double(a.affine.a22) +
         ";tx=" + fmt_double(a.affine.tx) + ";ty=" + fmt_double(a.affine.ty) +
         ";crop=" + fmt_double(a.crop_fraction) + ";pepper=" + fmt_double(a.pepper_density) +
         ";blend=" + fmt_double(a.neighbor_blend) + ";side=" + std::to_string(a.neighbor_side) +
         ";seed=" + std::to_string(seed);
}

inline std::string format_manifest(const DatasetManifest& m) {
  std::string out(kManifestMagic);
  out += "\tplates=" + std::to_string(m.atlas.num_plates) + "\tsize=" + std::to_string(m.atlas.image_size) +
         "\tseed=" + std::to_string(m.atlas.seed) + "\tmorph=" + detail::fmt_double(m.atlas.morph_rate) +
         "\tatlas=" + m.atlas_dir + "\n";
  for (const auto& e : m.entries) {
    out += e.path + "\t" + std::to_string(e.plate) + "\t" + std::string(to_string(e.split)) + "\t" +
           format_aug_record(e.aug, e.seed) + "\n";
  }
  return out;
}

inline DatasetManifest parse_manifest(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind(kManifestMagic, 0) != 0) {
    fail(ErrorCode::MalformedHeader, "manifest must start with '" + std::string(kManifestMagic) + "'");
  }
  DatasetManifest m;
  for (const auto& field : detail::split_on(line.substr(kManifestMagic.size()), '\t')) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = field.substr(0, eq), val = field.substr(eq + 1);
    if (key == "plates") m.atlas.num_plates = static_cast<int>(detail::parse_u64(val));
    else if (key == "size") m.atlas.image_size = static_cast<int>(detail::parse_u64(val));
    else if (key == "seed") m.atlas.seed = detail::parse_u64(val);
    else if (key == "morph") m.atlas.morph_rate = detail::parse_double(val);
    else if (key == "atlas") m.atlas_dir = val;
  }
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto cols = detail::split_on(line, '\t');
    require(cols.size() == 4, ErrorCode::MalformedHeader, "manifest record needs 4 tab-separated fields");
    ManifestEntry e;
    e.path = cols[0];
    e.plate = static_cast<int>(detail::parse_u64(cols[1]));
    e.split = parse_split(cols[2]);
    require(e.plate < m.atlas.num_plates, ErrorCode::InvalidArgument, "manifest plate index out of range");
    std::map<std::string, std::string> kv;
    for (const auto& item : detail::split_on(cols[3], ';')) {
      const auto eq = item.find('=');
      if (eq != std::string::npos) kv[item.substr(0, eq)] = item.substr(eq + 1);
    }
    auto num = [&](const char* k, double def) { return kv.count(k) ? detail::parse_double(kv[k]) : def; };
    e.aug.affine = {num("a11", 1), num("a12", 0), num("a21", 0), num("a22", 1), num("tx", 0), num("ty", 0)};
    e.aug.crop_fraction = num("crop", 0);
    e.aug.pepper_density = num("pepper", 0);
    e.aug.neighbor_blend = num("blend", 0);
    e.aug.neighbor_side = static_cast<int>(num("side", 1));
    e.seed = kv.count("seed") ? detail::parse_u64(kv["seed"]) : 0;
    m.entries.push_back(std::move(e));
  }
  return m;
}

struct SplitCounts {
  int train = 50, val1 = 12, val2 = 10, test = 12;

  int of(Split s) const {
    switch (s) {
      case Split::Train: return train;
      case Split::Val1: return val1;
      case Split::Val2: return val2;
      case Split::Test: return test;
    }
    return 0;
  }
};

inline std::filesystem::path plate_path(const std::string& atlas_dir, int index) {
  char name[32];
  std::snprintf(name, sizeof name, "plate_%03d.pgm", index);
  return std::filesystem::path(atlas_dir) / name;
}

// Builds the manifest (and, when `out_dir` is given, writes plates, slices and
// manifest.tsv under it). Every slice draws its plate, augmentation and noise
// from an RNG stream derived from (seed, entry index).
inline DatasetManifest build_dataset(const AtlasSpec& spec, const SplitCounts& counts,
                                     const AugmentationRanges& ranges, std::uint64_t seed,
                                     const std::optional<std::filesystem::path>& out_dir = std::nullopt) {
  spec.validate();
  for (Split s : kAllSplits) require(counts.of(s) >= 0, ErrorCode::InvalidArgument, "split counts must be >= 0");
  const auto plates = generate_atlas(spec);
  DatasetManifest m;
  m.atlas = spec;
  namespace fs = std::filesystem;
  if (out_dir) {
    std::error_code ec;
    fs::create_directories(*out_dir / m.atlas_dir, ec);
    fs::create_directories(*out_dir / "slices", ec);
    if (ec) fail(ErrorCode::IoFailure, "cannot create dataset directories under " + out_dir->string());
    for (int i = 0; i < spec.num_plates; ++i) save_pgm(plates[i], *out_dir / plate_path(m.atlas_dir, i));
  }
  std::uint64_t index = 0;
  for (Split s : kAllSplits) {
    for (int k = 0; k < counts.of(s); ++k, ++index) {
      Rng rng(derive_seed(seed, index));
      ManifestEntry e;
      e.plate = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.num_plates)));
      e.split = s;
      e.aug = random_augmentation(ranges, rng);
      e.seed = rng.next();
      char name[48];
      std::snprintf(name, sizeof name, "slices/%s_%04d.pgm", std::string(to_string(s)).c_str(), k);
      e.path = name;
      if (out_dir) save_pgm(synthesize_slice(plates, e.plate, e.aug, e.seed), *out_dir / e.path);
      m.entries.push_back(std::move(e));
    }
  }
  if (out_dir) write_file_bytes(*out_dir / "manifest.tsv", format_manifest(m));
  return m;
}

// A manifest with its plate and slice images loaded from disk.
struct Dataset {
  DatasetManifest manifest;
  std::vector<GrayImage> plates;
  std::vector<GrayImage> slices;  // parallel to manifest.entries

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
      if (manifest.entries[i].split == s) out.push_back(i);
    }
    return out;
  }
};

inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
  Dataset d;
  d.manifest = parse_manifest(read_file_bytes(manifest_path));
  const auto root = manifest_path.parent_path();
  for (int i = 0; i < d.manifest.atlas.num_plates; ++i) {
    d.plates.push_back(load_pgm(root / plate_path(d.manifest.atlas_dir, i)));
  }
  for (const auto& e : d.manifest.entries) d.slices.push_back(load_pgm(root / e.path));
  return d;
}

}  // namespace atlas_match
