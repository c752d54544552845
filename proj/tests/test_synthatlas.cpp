#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <vector>

#include "atlas_match/synthatlas.hpp"

using namespace atlas_match;
namespace fs = std::filesystem;

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * (i + j);
    i = j + 1;
  }
  return r;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / a.size();
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / b.size();
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

fs::path temp_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  return d;
}

}  // namespace

TEST(Atlas, DeterministicInSeed) {
  AtlasSpec s;
  s.num_plates = 6;
  s.image_size = 48;
  s.seed = 11;
  EXPECT_EQ(generate_atlas(s), generate_atlas(s));
  AtlasSpec other = s;
  other.seed = 12;
  EXPECT_NE(generate_atlas(s), generate_atlas(other));
}

TEST(Atlas, TwoPlatesAreDistinct) {
  AtlasSpec s;
  s.num_plates = 2;
  s.image_size = 64;
  const auto plates = generate_atlas(s);
  ASSERT_EQ(plates.size(), 2u);
  EXPECT_NE(plates[0], plates[1]);
}

TEST(Atlas, NeighborsCloserThanTenApart) {
  AtlasSpec s;
  s.num_plates = 32;
  s.image_size = 128;
  const auto plates = generate_atlas(s);
  for (int i = 0; i + 10 < s.num_plates; ++i) {
    EXPECT_LT(mean_abs_diff(plates[i], plates[i + 1]), mean_abs_diff(plates[i], plates[i + 10])) << i;
  }
}

TEST(Atlas, DissimilarityRanksFollowIndexDistance) {
  AtlasSpec s;
  s.num_plates = 32;
  s.image_size = 128;
  const auto plates = generate_atlas(s);
  std::vector<double> gap, diff;
  for (int i = 0; i < s.num_plates; ++i)
    for (int j = i + 1; j < s.num_plates; ++j) {
      gap.push_back(j - i);
      diff.push_back(mean_abs_diff(plates[i], plates[j]));
    }
  EXPECT_GT(pearson(average_ranks(gap), average_ranks(diff)), 0.9);
}

TEST(Atlas, RejectsBadSpec) {
  AtlasSpec s;
  s.num_plates = 1;
  EXPECT_THROW(s.validate(), Error);
  s.num_plates = 4;
  s.morph_rate = 0.0;
  EXPECT_THROW(s.validate(), Error);
}

TEST(Slice, ZeroAugmentationReturnsPlate) {
  AtlasSpec s;
  s.num_plates = 4;
  s.image_size = 64;
  const auto plates = generate_atlas(s);
  EXPECT_EQ(synthesize_slice(plates, 2, SliceAugmentation{}, 99), plates[2]);
}

TEST(Slice, PepperCountMatchesRngReplay) {
  const GrayImage img(128, 128, 0.7f);
  const std::uint64_t seed = 1234;
  const auto out = pepper_noise(img, 0.05, seed);
  Rng replay(seed);
  std::size_t expected = 0;
  for (std::size_t i = 0; i < img.size(); ++i) {
    const bool hit = replay.bernoulli(0.05);
    expected += hit ? 1 : 0;
    ASSERT_EQ(out.pixels()[i], hit ? 0.0f : 0.7f) << i;
  }
  EXPECT_GE(expected, 500u);
  EXPECT_LE(expected, 1200u);
}

TEST(Slice, CropZeroesBorder) {
  const GrayImage img(50, 40, 0.9f);
  SliceAugmentation aug;
  aug.crop_fraction = 0.2;
  const auto out = augment_image(img, aug, 0);
  for (int y = 0; y < 40; ++y)
    for (int x = 0; x < 50; ++x) {
      const bool border = x < 10 || x >= 40 || y < 8 || y >= 32;
      EXPECT_EQ(out.at(x, y), border ? 0.0f : 0.9f) << x << "," << y;
    }
}

TEST(Slice, NeighborBlendClampsAtEnds) {
  EXPECT_EQ(blend_neighbor(0, -1, 5), 1);
  EXPECT_EQ(blend_neighbor(4, 1, 5), 3);
  EXPECT_EQ(blend_neighbor(2, 1, 5), 3);
  AtlasSpec s;
  s.num_plates = 3;
  s.image_size = 32;
  const auto plates = generate_atlas(s);
  SliceAugmentation aug;
  aug.neighbor_blend = 0.5;
  aug.neighbor_side = -1;
  EXPECT_EQ(synthesize_slice(plates, 0, aug, 0), blend(plates[0], plates[1], 0.5));
}

TEST(Slice, RejectsOutOfRangeAugmentation) {
  SliceAugmentation aug;
  aug.pepper_density = 0.2;
  EXPECT_THROW(aug.validate(), Error);
  aug = {};
  aug.crop_fraction = 0.31;
  EXPECT_THROW(aug.validate(), Error);
}

TEST(Slice, RandomAugmentationWithinRanges) {
  Rng rng(3);
  AugmentationRanges r;
  for (int i = 0; i < 200; ++i) {
    const auto a = random_augmentation(r, rng);
    EXPECT_NO_THROW(a.validate());
    EXPECT_LE(std::abs(a.affine.tx), r.max_translation);
    EXPECT_LE(a.crop_fraction, r.max_crop);
    const double sx = std::hypot(a.affine.a11, a.affine.a21);
    EXPECT_GE(sx, r.min_scale - 1e-12);
    EXPECT_LE(sx, r.max_scale + 1e-12);
  }
}

TEST(Manifest, FormatParseRoundtrip) {
  AtlasSpec s;
  s.num_plates = 10;
  s.image_size = 32;
  s.seed = 5;
  s.morph_rate = 1.5;
  const auto m = build_dataset(s, {3, 2, 0, 1}, {}, 42);
  const auto text = format_manifest(m);
  const auto back = parse_manifest(text);
  EXPECT_EQ(format_manifest(back), text);
  EXPECT_EQ(back.atlas.morph_rate, 1.5);
  ASSERT_EQ(back.entries.size(), 6u);
  EXPECT_EQ(back.entries[0].aug.affine, m.entries[0].aug.affine);
  EXPECT_THROW(parse_manifest("nope\n"), Error);
}

TEST(Dataset, DefaultSplitCountsGive84Entries) {
  AtlasSpec s;
  s.num_plates = 132;
  s.image_size = 32;
  const auto m = build_dataset(s, {50, 12, 10, 12}, {}, 0);
  EXPECT_EQ(m.entries.size(), 84u);
  EXPECT_EQ(m.split(Split::Train).size(), 50u);
  EXPECT_EQ(m.split(Split::Val2).size(), 10u);
  for (const auto& e : m.entries) {
    EXPECT_GE(e.plate, 0);
    EXPECT_LT(e.plate, 132);
  }
}

TEST(Dataset, EmptySplitIsAbsent) {
  AtlasSpec s;
  s.num_plates = 8;
  s.image_size = 32;
  const auto m = build_dataset(s, {4, 0, 0, 2}, {}, 1);
  EXPECT_TRUE(m.split(Split::Val1).empty());
  EXPECT_EQ(format_manifest(m).find("\tval1\t"), std::string::npos);
}

TEST(Dataset, WrittenTreeIsDeterministicAndLoadable) {
  AtlasSpec s;
  s.num_plates = 8;
  s.image_size = 32;
  const auto a = temp_dir("atlas_match_ds_a"), b = temp_dir("atlas_match_ds_b");
  build_dataset(s, {4, 2, 1, 2}, {}, 7, a);
  build_dataset(s, {4, 2, 1, 2}, {}, 7, b);
  std::size_t files = 0;
  for (const auto& f : fs::recursive_directory_iterator(a)) {
    if (!f.is_regular_file()) continue;
    ++files;
    const auto rel = fs::relative(f.path(), a);
    EXPECT_EQ(read_file_bytes(f.path()), read_file_bytes(b / rel)) << rel;
  }
  EXPECT_EQ(files, 8u + 9u + 1u);

  const auto d = load_dataset(a / "manifest.tsv");
  ASSERT_EQ(d.slices.size(), 9u);
  ASSERT_EQ(d.plates.size(), 8u);
  // Stored slices are the synthesized images up to 8-bit quantization.
  const auto& e = d.manifest.entries[3];
  const auto again = synthesize_slice(generate_atlas(s), e.plate, e.aug, e.seed);
  EXPECT_EQ(encode_pgm(again), encode_pgm(d.slices[3]));
  fs::remove_all(a);
  fs::remove_all(b);
}
