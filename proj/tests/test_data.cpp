// Copyright 2026 The ibq Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "ibq/data.hpp"

namespace ibq {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("ibq_test_" + name);
  fs::create_directories(dir);
  return dir;
}

TEST(Synthetic, EnumeratesEveryPatternOnceWithBalancedLabels) {
  const auto d = gen_synthetic(0);
  ASSERT_EQ(d.inputs.rows(), 4096);
  ASSERT_EQ(d.inputs.cols(), 12);
  EXPECT_EQ(d.num_classes, 2);
  EXPECT_EQ(std::count(d.labels.begin(), d.labels.end(), 1), 2048);
  std::set<int> patterns;
  for (Eigen::Index r = 0; r < d.inputs.rows(); ++r) {
    int v = 0;
    for (Eigen::Index c = 0; c < 12; ++c) {
      const double b = d.inputs(r, c);
      ASSERT_TRUE(b == 0.0 || b == 1.0);
      v = 2 * v + static_cast<int>(b);
    }
    patterns.insert(v);
  }
  EXPECT_EQ(patterns.size(), 4096u);
  d.validate();
}

TEST(Synthetic, DeterministicPerSeed) {
  const auto a = gen_synthetic(0), b = gen_synthetic(0);
  EXPECT_EQ(a.inputs, b.inputs);
  EXPECT_EQ(a.labels, b.labels);
  const auto c = gen_synthetic(1);
  EXPECT_NE(a.labels, c.labels);
  EXPECT_EQ(std::count(c.labels.begin(), c.labels.end(), 1), 2048);
}

TEST(Synthetic, TextRoundTrip) {
  const auto d = gen_synthetic(3);
  std::stringstream ss;
  write_synthetic_text(ss, d);
  const auto back = read_synthetic_text(ss);
  EXPECT_EQ(back.inputs, d.inputs);
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_EQ(back.num_classes, 2);
}

TEST(Synthetic, TextRejectsGarbage) {
  std::stringstream ss("010101010101 1\n0101x1010101 0\n");
  EXPECT_THROW(read_synthetic_text(ss), DataError);
}

IdxImages tiny_images(std::uint32_t count) {
  IdxImages img;
  img.count = count;
  img.rows = 3;
  img.cols = 2;
  for (std::uint32_t i = 0; i < count * 6; ++i)
    img.pixels.push_back(static_cast<unsigned char>((i * 37) % 256));
  return img;
}

TEST(Idx, RoundTripIsBitExact) {
  const auto dir = temp_dir("idx_rt");
  const auto img = tiny_images(5);
  const std::vector<unsigned char> labels = {0, 9, 3, 3, 7};
  write_idx_images(dir / "img", img);
  write_idx_labels(dir / "lab", labels);
  const auto raw = read_idx_images(dir / "img");
  EXPECT_EQ(raw.pixels, img.pixels);
  EXPECT_EQ(read_idx_labels(dir / "lab"), labels);

  const auto d = load_idx(dir / "img", dir / "lab");
  EXPECT_EQ(d.inputs.rows(), 5);
  EXPECT_EQ(d.inputs.cols(), 6);
  EXPECT_EQ(d.num_classes, 10);
  EXPECT_EQ(d.sample_shape, (std::vector<int>{1, 3, 2}));
  for (Eigen::Index r = 0; r < 5; ++r)
    for (Eigen::Index c = 0; c < 6; ++c)
      EXPECT_EQ(d.inputs(r, c), img.pixels[static_cast<std::size_t>(r * 6 + c)] / 255.0);
  EXPECT_EQ(d.labels, (std::vector<int>{0, 9, 3, 3, 7}));
}

TEST(Idx, WrongMagicNumber) {
  const auto dir = temp_dir("idx_magic");
  write_idx_images(dir / "img", tiny_images(2));
  // An image file where a label file is expected.
  try {
    load_idx(dir / "img", dir / "img");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("wrong magic number"), std::string::npos);
  }
}

TEST(Idx, CountMismatch) {
  const auto dir = temp_dir("idx_count");
  write_idx_images(dir / "img", tiny_images(100));
  write_idx_labels(dir / "lab", std::vector<unsigned char>(99, 1));
  try {
    load_idx(dir / "img", dir / "lab");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("count mismatch"), std::string::npos);
  }
}

TEST(Idx, TruncatedFile) {
  const auto dir = temp_dir("idx_trunc");
  write_idx_images(dir / "img", tiny_images(4));
  fs::resize_file(dir / "img", 16 + 10);
  try {
    read_idx_images(dir / "img");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }
  std::ofstream(dir / "short", std::ios::binary) << "ab";
  EXPECT_THROW(read_idx_labels(dir / "short"), DataError);
  EXPECT_THROW(read_idx_labels(dir / "missing"), DataError);
}

TEST(Split, SizesFollowFloor) {
  const auto d = gen_synthetic(0);
  const auto s = split(d, 0.8, 7);
  EXPECT_EQ(s.train.size(), 3276u);
  EXPECT_EQ(s.test.size(), 820u);
  const auto again = split(d, 0.8, 7);
  EXPECT_EQ(s.train_indices, again.train_indices);
  EXPECT_EQ(s.train.inputs, again.train.inputs);
  EXPECT_NE(split(d, 0.8, 8).train_indices, s.train_indices);
}

TEST(Split, RejectsBadFraction) {
  const auto d = gen_synthetic(0);
  EXPECT_THROW(split(d, 1.5, 0), std::invalid_argument);
  EXPECT_THROW(split(d, 0.0, 0), std::invalid_argument);
  EXPECT_THROW(split(d, 1.0, 0), std::invalid_argument);
}

TEST(Split, DisjointAndExhaustiveSweep) {
  for (std::size_t n = 1; n <= 1000; ++n) {
    Dataset d;
    d.num_classes = 2;
    d.inputs = Matrix::Zero(static_cast<Eigen::Index>(n), 1);
    d.labels.assign(n, 0);
    for (double f : {0.5, 0.8}) {
      const auto s = split(d, f, n);
      ASSERT_EQ(s.train_indices.size(),
                static_cast<std::size_t>(std::floor(static_cast<double>(n) * f)));
      std::vector<std::size_t> all = s.train_indices;
      all.insert(all.end(), s.test_indices.begin(), s.test_indices.end());
      std::sort(all.begin(), all.end());
      for (std::size_t i = 0; i < n; ++i) ASSERT_EQ(all[i], i);
    }
  }
}

TEST(ShuffleLabels, PreservesMultisetAndInputs) {
  const auto d = gen_synthetic(0);
  const auto s = shuffle_labels(d, 11);
  EXPECT_EQ(std::count(s.labels.begin(), s.labels.end(), 1), 2048);
  EXPECT_EQ(std::count(s.labels.begin(), s.labels.end(), 0), 2048);
  EXPECT_EQ(s.inputs, d.inputs);
  EXPECT_NE(s.labels, d.labels);
  EXPECT_EQ(shuffle_labels(d, 11).labels, s.labels);
}

TEST(ShuffleLabels, InversePermutationRestoresLabels) {
  const auto d = gen_synthetic(5);
  const auto s = shuffle_labels(d, 99);
  const auto perm = label_permutation(d.size(), 99);
  std::vector<int> restored(d.size());
  for (std::size_t i = 0; i < perm.size(); ++i) restored[perm[i]] = s.labels[i];
  EXPECT_EQ(restored, d.labels);
}

TEST(Dataset, ValidateCatchesInconsistency) {
  Dataset d;
  d.num_classes = 2;
  d.inputs = Matrix::Zero(3, 2);
  d.labels = {0, 1};
  EXPECT_THROW(d.validate(), DataError);
  d.labels = {0, 1, 2};
  EXPECT_THROW(d.validate(), DataError);
}

}  // namespace
}  // namespace ibq
