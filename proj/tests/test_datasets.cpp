#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "jea/datasets.hpp"

using namespace jea;

namespace {

std::vector<std::uint8_t> cifar_record(std::uint8_t label, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  std::vector<std::uint8_t> rec(kCifarRecordBytes);
  rec[0] = label;
  std::fill(rec.begin() + 1, rec.begin() + 1025, r);
  std::fill(rec.begin() + 1025, rec.begin() + 2049, g);
  std::fill(rec.begin() + 2049, rec.end(), b);
  return rec;
}

}  // namespace

TEST(Cifar, SingleRecordAllWhite) {
  const auto ds = parse_cifar_binary(cifar_record(7, 255, 255, 255));
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds.labels[0], 7);
  const Image img = ds.image(0);
  EXPECT_EQ(img.channels, 3u);
  EXPECT_EQ(img.height, 32u);
  EXPECT_EQ(img.width, 32u);
  for (float v : img.pixels) ASSERT_EQ(v, 1.0f);
}

TEST(Cifar, BitLayoutRoundTrip) {
  // Every byte distinct within a plane so a transposed or shifted read is caught.
  std::vector<std::uint8_t> bytes;
  for (std::uint8_t label : {3, 9}) {
    bytes.push_back(label);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < 32; ++y)
        for (std::size_t x = 0; x < 32; ++x) bytes.push_back(static_cast<std::uint8_t>((c * 97 + y * 32 + x + label) & 0xff));
  }
  const auto ds = parse_cifar_binary(bytes);
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.labels, (std::vector<int>{3, 9}));
  for (std::size_t i = 0; i < 2; ++i) {
    const Image img = ds.image(i);
    const int label = ds.labels[i];
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < 32; ++y)
        for (std::size_t x = 0; x < 32; ++x) {
          const auto byte = static_cast<std::uint8_t>((c * 97 + y * 32 + x + static_cast<std::size_t>(label)) & 0xff);
          ASSERT_EQ(img.at(c, y, x), static_cast<float>(byte) / 255.0f);
        }
  }
  // Re-encoding the decoded pixels reproduces the file bytes.
  std::vector<std::uint8_t> again;
  for (std::size_t i = 0; i < 2; ++i) {
    again.push_back(static_cast<std::uint8_t>(ds.labels[i]));
    for (float v : ds.image(i).pixels) again.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
  }
  EXPECT_EQ(again, bytes);
}

TEST(Cifar, TruncatedFileErrorsAtFileSize) {
  std::vector<std::uint8_t> bytes(3072, 0);
  try {
    parse_cifar_binary(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 3072u);
    EXPECT_NE(std::string(e.what()).find("offset 3072"), std::string::npos);
  }
  auto two = cifar_record(1, 0, 0, 0);
  const auto second = cifar_record(2, 0, 0, 0);
  two.insert(two.end(), second.begin(), second.end() - 5);
  try {
    parse_cifar_binary(two);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 2 * kCifarRecordBytes - 5);
  }
}

TEST(Cifar, BadLabelErrorsAtRecordOffset) {
  auto bytes = cifar_record(0, 1, 2, 3);
  const auto bad = cifar_record(10, 1, 2, 3);
  bytes.insert(bytes.end(), bad.begin(), bad.end());
  try {
    parse_cifar_binary(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), kCifarRecordBytes);
  }
}

TEST(Cifar, LoadsAndConcatenatesFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "jea_cifar_test";
  std::filesystem::create_directories(dir);
  auto write = [&](const std::string& name, std::vector<std::uint8_t> bytes) {
    std::ofstream(dir / name, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                                      static_cast<std::streamsize>(bytes.size()));
    return (dir / name).string();
  };
  const auto a = write("a.bin", cifar_record(4, 10, 20, 30));
  const auto b = write("b.bin", cifar_record(5, 40, 50, 60));
  const auto ds = load_cifar_binary(std::vector<std::string>{a, b});
  EXPECT_EQ(ds.labels, (std::vector<int>{4, 5}));
  EXPECT_EQ(ds.image(1).at(2, 31, 31), 60.0f / 255.0f);
  EXPECT_THROW(load_cifar_binary((dir / "missing.bin").string()), Error);
  std::filesystem::remove_all(dir);
}

TEST(Synthetic, SameSpecSameChecksum) {
  SyntheticSpec s;
  s.n_samples = 200;
  EXPECT_EQ(synth_generate(s).checksum(), synth_generate(s).checksum());
  EXPECT_NE(synth_generate(s, 1).checksum(), synth_generate(s, 2).checksum());
}

TEST(Synthetic, NoiselessSameClassSameLatentIsIdentical) {
  SyntheticSpec s;
  s.noise_std = 0.0;
  Rng rng(3);
  const auto z = sample_synth_latent(rng);
  EXPECT_EQ(render_synthetic(s, 2, z).pixels, render_synthetic(s, 2, z).pixels);
  Rng n1(1), n2(1);
  EXPECT_EQ(render_synthetic(s, 2, z, &n1).pixels, render_synthetic(s, 2, z).pixels);
}

TEST(Synthetic, HueClassesDifferOnlyInHue) {
  SyntheticSpec s;
  s.noise_std = 0.0;
  Rng rng(4);
  const auto z = sample_synth_latent(rng);
  const int first_color = static_cast<int>(s.shape_classes());
  ASSERT_EQ(class_shape(s, first_color), class_shape(s, first_color + 1));
  const Image a = render_synthetic(s, first_color, z), b = render_synthetic(s, first_color + 1, z);
  // Grayscale-equal background, different foreground colors.
  EXPECT_NE(a.pixels, b.pixels);
  std::size_t same_pixels = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) same_pixels += a.pixels[i] == b.pixels[i];
  EXPECT_GT(same_pixels, a.pixels.size() / 3);
}

TEST(Synthetic, LabelsCycleAndShapeMatchesSpec) {
  SyntheticSpec s;
  s.n_samples = 30;
  const auto ds = synth_generate(s);
  EXPECT_EQ(ds.height, 40u);
  for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_EQ(ds.labels[i], static_cast<int>(i % 10));
  EXPECT_EQ(ds.provenance, s.describe());
}

TEST(Synthetic, InvalidSpecsThrow) {
  SyntheticSpec s;
  s.n_classes = 1;
  EXPECT_THROW(s.validate(), ConfigError);
  s = SyntheticSpec{};
  s.shape_fraction = 0.5;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Subsample, SmallerSetsAreNestedPrefixes) {
  const auto big = nested_subsample_indices(1000, 500, 9);
  const auto small = nested_subsample_indices(1000, 50, 9);
  EXPECT_TRUE(std::equal(small.begin(), small.end(), big.begin()));
  EXPECT_EQ(std::set<std::size_t>(big.begin(), big.end()).size(), 500u);
  EXPECT_THROW(nested_subsample_indices(10, 11, 0), ParameterError);
}

TEST(BatchIter, PureFunctionOfSeedAndEpoch) {
  EXPECT_EQ(batch_iter(100, 8, 3, 1), batch_iter(100, 8, 3, 1));
  EXPECT_NE(batch_iter(100, 8, 0, 1), batch_iter(100, 8, 1, 1));
}

TEST(BatchIter, UnionIsDatasetMinusTailWithoutDuplicates) {
  const auto batches = batch_iter(103, 10, 0, 5);
  ASSERT_EQ(batches.size(), 10u);
  std::multiset<std::size_t> seen;
  for (const auto& b : batches) {
    ASSERT_EQ(b.size(), 10u);
    seen.insert(b.begin(), b.end());
  }
  EXPECT_EQ(seen.size(), 100u);
  EXPECT_EQ(std::set<std::size_t>(seen.begin(), seen.end()).size(), 100u);
  for (auto i : seen) EXPECT_LT(i, 103u);
  EXPECT_THROW(batch_iter(10, 0, 0, 0), ParameterError);
}

TEST(BatchIter, StepBatcherWalksEpochsInOrder) {
  StepBatcher sb(25, 10, 2);
  EXPECT_EQ(sb.batches_per_epoch(), 2u);
  const auto e0 = batch_iter(25, 10, 0, 2), e1 = batch_iter(25, 10, 1, 2);
  EXPECT_EQ(sb.at(0), e0[0]);
  EXPECT_EQ(sb.at(3), e1[1]);
  EXPECT_EQ(sb.at(1), e0[1]);
  EXPECT_THROW(StepBatcher(5, 10, 0), ConfigError);
}
