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

// Datasets: the 12-bit synthetic task, MNIST in IDX format, seeded splits and
// label shuffling.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ibq/rng.hpp"

namespace ibq {

using Matrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Raised for malformed or inconsistent data files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dataset {
  Matrix inputs;  // one row per sample
  std::vector<int> labels;
  int num_classes = 0;
  std::string name;
  // Per-sample shape, e.g. {12} or {1, 28, 28}. Rows of `inputs` are the
  // row-major flattening of this shape.
  std::vector<int> sample_shape;

  std::size_t size() const { return labels.size(); }

  void validate() const {
    if (static_cast<std::size_t>(inputs.rows()) != labels.size())
      throw DataError("dataset '" + name + "': " +
                      std::to_string(inputs.rows()) + " input rows but " +
                      std::to_string(labels.size()) + " labels");
    if (num_classes <= 0) throw DataError("dataset '" + name + "': no classes");
    for (int y : labels)
      if (y < 0 || y >= num_classes)
        throw DataError("dataset '" + name + "': label " + std::to_string(y) +
                        " outside [0, " + std::to_string(num_classes) + ")");
  }

  /// Subset in the order given by `indices`.
  Dataset select(const std::vector<std::size_t>& indices,
                 const std::string& subset_name) const {
    Dataset out;
    out.name = subset_name;
    out.num_classes = num_classes;
    out.sample_shape = sample_shape;
    out.inputs.resize(static_cast<Eigen::Index>(indices.size()), inputs.cols());
    out.labels.resize(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      out.inputs.row(static_cast<Eigen::Index>(i)) =
          inputs.row(static_cast<Eigen::Index>(indices[i]));
      out.labels[i] = labels[indices[i]];
    }
    return out;
  }

  /// Rows [0, n) (all rows when n >= size()).
  Dataset head(std::size_t n) const {
    n = std::min(n, size());
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return select(idx, name);
  }
};

struct SplitDataset {
  Dataset train;
  Dataset test;
  std::uint64_t seed = 0;
  std::vector<std::size_t> train_indices;  // into the parent dataset
  std::vector<std::size_t> test_indices;
};

inline constexpr int kSyntheticBits = 12;
inline constexpr std::size_t kSyntheticSize = std::size_t{1} << kSyntheticBits;

/// All 4096 12-bit patterns (row r holds the bits of r, most significant
/// first) with a seeded balanced binary label.
///
/// The label is 1 for the 2048 patterns with the largest score
///   s(x) = sum_i w_i x_i + sum_{i<j} v_ij x_i x_j,
/// w_i ~ N(0, 1), v_ij ~ N(0, 0.25^2), all drawn from `seed`. Ties in s are
/// broken by pattern index, so the split is always exactly balanced.
inline Dataset gen_synthetic(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x5EED5E7ULL));
  std::array<double, kSyntheticBits> w{};
  for (auto& wi : w) wi = rng.normal();
  std::array<std::array<double, kSyntheticBits>, kSyntheticBits> v{};
  for (int i = 0; i < kSyntheticBits; ++i)
    for (int j = i + 1; j < kSyntheticBits; ++j) v[i][j] = 0.25 * rng.normal();

  Dataset d;
  d.name = "synthetic";
  d.num_classes = 2;
  d.sample_shape = {kSyntheticBits};
  d.inputs.resize(kSyntheticSize, kSyntheticBits);
  d.labels.assign(kSyntheticSize, 0);
  std::vector<double> score(kSyntheticSize, 0.0);
  for (std::size_t r = 0; r < kSyntheticSize; ++r) {
    std::array<int, kSyntheticBits> x{};
    for (int b = 0; b < kSyntheticBits; ++b) {
      x[b] = static_cast<int>((r >> (kSyntheticBits - 1 - b)) & 1U);
      d.inputs(static_cast<Eigen::Index>(r), b) = x[b];
    }
    double s = 0.0;
    for (int i = 0; i < kSyntheticBits; ++i) {
      if (!x[i]) continue;
      s += w[i];
      for (int j = i + 1; j < kSyntheticBits; ++j)
        if (x[j]) s += v[i][j];
    }
    score[r] = s;
  }
  std::vector<std::size_t> order(kSyntheticSize);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return score[a] > score[b];
  });
  for (std::size_t i = 0; i < kSyntheticSize / 2; ++i) d.labels[order[i]] = 1;
  return d;
}

// ---------------------------------------------------------------------------
// IDX files (big-endian): magic 0x00000801 for labels, 0x00000803 for images.

inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open '" + p.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<unsigned char>& b,
                          std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

inline void put_be32(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                         static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(bytes, 4);
}

}  // namespace detail

/// Raw IDX contents before scaling: pixel bytes and label bytes.
struct IdxImages {
  std::uint32_t count = 0, rows = 0, cols = 0;
  std::vector<unsigned char> pixels;
};

inline IdxImages read_idx_images(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  if (bytes.size() < 16)
    throw DataError("truncated file '" + path.string() + "': missing header");
  const auto magic = detail::be32(bytes, 0);
  if (magic != kIdxImageMagic)
    throw DataError("wrong magic number in '" + path.string() +
                    "': expected 0x00000803 (images)");
  IdxImages img;
  img.count = detail::be32(bytes, 4);
  img.rows = detail::be32(bytes, 8);
  img.cols = detail::be32(bytes, 12);
  const std::uint64_t need = std::uint64_t{img.count} * img.rows * img.cols;
  if (bytes.size() - 16 < need)
    throw DataError("truncated file '" + path.string() + "': expected " +
                    std::to_string(need) + " pixel bytes, found " +
                    std::to_string(bytes.size() - 16));
  img.pixels.assign(bytes.begin() + 16,
                    bytes.begin() + 16 + static_cast<std::ptrdiff_t>(need));
  return img;
}

inline std::vector<unsigned char> read_idx_labels(
    const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  if (bytes.size() < 8)
    throw DataError("truncated file '" + path.string() + "': missing header");
  if (detail::be32(bytes, 0) != kIdxLabelMagic)
    throw DataError("wrong magic number in '" + path.string() +
                    "': expected 0x00000801 (labels)");
  const auto count = detail::be32(bytes, 4);
  if (bytes.size() - 8 < count)
    throw DataError("truncated file '" + path.string() + "': expected " +
                    std::to_string(count) + " labels, found " +
                    std::to_string(bytes.size() - 8));
  return {bytes.begin() + 8, bytes.begin() + 8 + count};
}

inline void write_idx_images(const std::filesystem::path& path,
                             const IdxImages& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  detail::put_be32(out, kIdxImageMagic);
  detail::put_be32(out, img.count);
  detail::put_be32(out, img.rows);
  detail::put_be32(out, img.cols);
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
}

inline void write_idx_labels(const std::filesystem::path& path,
                             const std::vector<unsigned char>& labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  detail::put_be32(out, kIdxLabelMagic);
  detail::put_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()),
            static_cast<std::streamsize>(labels.size()));
}

/// Loads an IDX image/label pair as a 10-class dataset with pixels / 255.
/// Rows are the flattened images; sample_shape is {1, rows, cols}.
inline Dataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path) {
  const auto img = read_idx_images(images_path);
  const auto lab = read_idx_labels(labels_path);
  if (lab.size() != img.count)
    throw DataError("count mismatch: " + std::to_string(img.count) +
                    " images in '" + images_path.string() + "' but " +
                    std::to_string(lab.size()) + " labels in '" +
                    labels_path.string() + "'");
  Dataset d;
  d.name = "mnist";
  d.num_classes = 10;
  d.sample_shape = {1, static_cast<int>(img.rows), static_cast<int>(img.cols)};
  const auto dim = static_cast<Eigen::Index>(img.rows) * img.cols;
  d.inputs.resize(img.count, dim);
  for (Eigen::Index r = 0; r < static_cast<Eigen::Index>(img.count); ++r)
    for (Eigen::Index c = 0; c < dim; ++c)
      d.inputs(r, c) = img.pixels[static_cast<std::size_t>(r * dim + c)] / 255.0;
  d.labels.assign(lab.begin(), lab.end());
  d.validate();
  return d;
}

/// Row-wise concatenation of datasets with equal width and class count.
inline Dataset concat(const std::vector<Dataset>& parts) {
  if (parts.empty()) throw DataError("concat: no datasets");
  Dataset out;
  out.name = parts.front().name;
  out.num_classes = parts.front().num_classes;
  out.sample_shape = parts.front().sample_shape;
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.inputs.cols() != parts.front().inputs.cols() ||
        p.num_classes != out.num_classes)
      throw DataError("concat: incompatible datasets");
    rows += p.inputs.rows();
  }
  out.inputs.resize(rows, parts.front().inputs.cols());
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.inputs.middleRows(at, p.inputs.rows()) = p.inputs;
    at += p.inputs.rows();
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  return out;
}

// ---------------------------------------------------------------------------

/// Seeded permutation of [0, n).
inline std::vector<std::size_t> seeded_permutation(std::size_t n,
                                                   std::uint64_t seed) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(perm));
  return perm;
}

inline SplitDataset split(const Dataset& dataset, double train_fraction,
                          std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw std::invalid_argument("split: train fraction must lie in (0, 1), got " +
                                std::to_string(train_fraction));
  const auto perm = seeded_permutation(dataset.size(), mix_seed(seed, 0x5B117));
  const auto n_train = static_cast<std::size_t>(
      std::floor(static_cast<double>(dataset.size()) * train_fraction));
  SplitDataset s;
  s.seed = seed;
  s.train_indices.assign(perm.begin(), perm.begin() + n_train);
  s.test_indices.assign(perm.begin() + n_train, perm.end());
  s.train = dataset.select(s.train_indices, dataset.name + "/train");
  s.test = dataset.select(s.test_indices, dataset.name + "/test");
  return s;
}

/// The permutation used by shuffle_labels: output label i is input label
/// perm[i].
inline std::vector<std::size_t> label_permutation(std::size_t n,
                                                  std::uint64_t seed) {
  return seeded_permutation(n, mix_seed(seed, 0x1ABE1));
}

inline Dataset shuffle_labels(const Dataset& dataset, std::uint64_t seed) {
  const auto perm = label_permutation(dataset.size(), seed);
  Dataset out = dataset;
  out.name = dataset.name + "/shuffled";
  for (std::size_t i = 0; i < perm.size(); ++i)
    out.labels[i] = dataset.labels[perm[i]];
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic text format: one sample per line, the 12 input bits as a digit
// string, whitespace, then the label digit.

inline void write_synthetic_text(std::ostream& out, const Dataset& d) {
  for (std::size_t r = 0; r < d.size(); ++r) {
    for (Eigen::Index c = 0; c < d.inputs.cols(); ++c)
      out << (d.inputs(static_cast<Eigen::Index>(r), c) != 0.0 ? '1' : '0');
    out << ' ' << d.labels[r] << '\n';
  }
}

inline Dataset read_synthetic_text(std::istream& in,
                                   const std::string& name = "synthetic") {
  std::vector<std::string> rows;
  std::vector<int> labels;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::string bits;
    int label = -1;
    if (!(ls >> bits >> label) ||
        bits.find_first_not_of("01") != std::string::npos || label < 0)
      throw DataError("synthetic file line " + std::to_string(lineno) +
                      ": expected '<bits> <label>'");
    if (!rows.empty() && bits.size() != rows.front().size())
      throw DataError("synthetic file line " + std::to_string(lineno) +
                      ": inconsistent pattern width");
    rows.push_back(bits);
    labels.push_back(label);
  }
  if (rows.empty()) throw DataError("synthetic file is empty");
  Dataset d;
  d.name = name;
  const auto width = static_cast<Eigen::Index>(rows.front().size());
  d.sample_shape = {static_cast<int>(width)};
  d.inputs.resize(static_cast<Eigen::Index>(rows.size()), width);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (Eigen::Index c = 0; c < width; ++c)
      d.inputs(static_cast<Eigen::Index>(r), c) =
          rows[r][static_cast<std::size_t>(c)] == '1' ? 1.0 : 0.0;
  d.labels = std::move(labels);
  d.num_classes = *std::max_element(d.labels.begin(), d.labels.end()) + 1;
  d.num_classes = std::max(d.num_classes, 2);
  d.validate();
  return d;
}

}  // namespace ibq
