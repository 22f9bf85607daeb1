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

// Discrete information measures over the empirical distribution of a dataset.
//
// A layer T is a deterministic function of the input X, so over a dataset D
//   I(X;T) = H(T)
//   I(T;Y) = H(T) - sum_y P(y) H(T | Y = y).
// A layer's state for a sample is its whole row of codes; states are
// identified by exact equality of rows. All quantities are in bits.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ibq/network.hpp"

namespace ibq {

/// Shannon entropy in bits of the distribution given by `counts`.
inline double entropy(std::span<const std::uint64_t> counts) {
  std::uint64_t n = 0;
  for (auto c : counts) n += c;
  if (n == 0) throw std::invalid_argument("entropy: all counts are zero");
  const double total = static_cast<double>(n);
  double h = 0.0;
  for (auto c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / total;
    h -= p * std::log2(p);
  }
  return h;
}

using CountMatrix = std::vector<std::vector<std::uint64_t>>;

/// H(R | C) in bits for a joint count table whose rows index R and columns
/// index C: sum_c P(c) H(R | C = c).
inline double conditional_entropy(const CountMatrix& joint) {
  std::size_t cols = 0;
  for (const auto& row : joint) cols = std::max(cols, row.size());
  std::uint64_t n = 0;
  for (const auto& row : joint)
    for (auto c : row) n += c;
  if (n == 0) throw std::invalid_argument("conditional_entropy: zero total");
  double h = 0.0;
  std::vector<std::uint64_t> column;
  for (std::size_t c = 0; c < cols; ++c) {
    column.clear();
    std::uint64_t nc = 0;
    for (const auto& row : joint) {
      const auto v = c < row.size() ? row[c] : 0;
      column.push_back(v);
      nc += v;
    }
    if (nc == 0) continue;
    h += static_cast<double>(nc) / static_cast<double>(n) * entropy(column);
  }
  return h;
}

/// Dense state ids for the rows of a row-major code matrix. Rows with equal
/// contents get equal ids, numbered in order of first appearance.
struct StatePartition {
  std::vector<std::uint32_t> ids;
  std::size_t num_states = 0;
};

template <typename Code>
StatePartition partition_rows(std::span<const Code> codes, std::size_t rows,
                              std::size_t width) {
  if (codes.size() != rows * width)
    throw std::invalid_argument("partition_rows: code matrix size mismatch");
  StatePartition p;
  p.ids.resize(rows);
  // Keys view the raw bytes of each row: equality of keys is equality of rows,
  // so hash collisions only cost time, never correctness.
  std::unordered_map<std::string_view, std::uint32_t> index;
  index.reserve(rows * 2);
  const auto row_bytes = width * sizeof(Code);
  const char* base = reinterpret_cast<const char*>(codes.data());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::string_view key(base + r * row_bytes, row_bytes);
    auto [it, inserted] =
        index.try_emplace(key, static_cast<std::uint32_t>(index.size()));
    p.ids[r] = it->second;
  }
  p.num_states = index.size();
  return p;
}

struct MiPair {
  double i_xt = 0.0;  // bits
  double i_ty = 0.0;  // bits
};

/// I(X;T) and I(T;Y) from per-sample state ids and labels.
inline MiPair mi_from_states(const StatePartition& states,
                             std::span<const int> labels) {
  if (states.ids.size() != labels.size())
    throw std::invalid_argument("mi: " + std::to_string(states.ids.size()) +
                                " state rows but " +
                                std::to_string(labels.size()) + " labels");
  if (labels.empty()) throw std::invalid_argument("mi: empty dataset");
  const int classes = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<std::uint64_t> state_counts(states.num_states, 0);
  std::vector<std::uint64_t> label_counts(static_cast<std::size_t>(classes), 0);
  std::vector<std::unordered_map<std::uint32_t, std::uint64_t>> per_label(
      static_cast<std::size_t>(classes));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) throw std::invalid_argument("mi: negative label");
    ++state_counts[states.ids[i]];
    ++label_counts[static_cast<std::size_t>(labels[i])];
    ++per_label[static_cast<std::size_t>(labels[i])][states.ids[i]];
  }
  const double h_t = entropy(state_counts);
  const double n = static_cast<double>(labels.size());
  double h_t_given_y = 0.0;
  std::vector<std::uint64_t> counts;
  for (std::size_t y = 0; y < per_label.size(); ++y) {
    if (label_counts[y] == 0) continue;
    counts.clear();
    // Sorted order makes the floating-point sum independent of hashing.
    for (const auto& [state, c] : per_label[y]) counts.push_back(c);
    std::sort(counts.begin(), counts.end());
    h_t_given_y += static_cast<double>(label_counts[y]) / n * entropy(counts);
  }
  return {h_t, std::max(0.0, h_t - h_t_given_y)};
}

/// Exact MI of every recorded layer from its quantization codes.
inline std::vector<MiPair> mi_exact(const StateRecord& record,
                                    std::span<const int> labels) {
  if (record.rows != labels.size())
    throw std::invalid_argument("mi_exact: record has " +
                                std::to_string(record.rows) + " rows but " +
                                std::to_string(labels.size()) + " labels");
  std::vector<MiPair> out;
  for (const auto& ls : record.layers) {
    if (!ls.quantized)
      throw std::invalid_argument(
          "mi_exact: layer is not quantized; use mi_binned");
    const auto states = partition_rows<std::uint32_t>(
        ls.codes, record.rows, static_cast<std::size_t>(ls.width));
    out.push_back(mi_from_states(states, labels));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binning estimator.

/// Bin index of each value among m uniform bins over [lower, upper]; values
/// outside are clamped and `upper` itself falls in bin m - 1.
inline std::vector<std::uint32_t> bin_activations(std::span<const double> values,
                                                  int m, double lower,
                                                  double upper) {
  if (m < 1) throw std::invalid_argument("bin_activations: need m >= 1");
  if (!(lower < upper))
    throw std::invalid_argument("bin_activations: need lower < upper");
  std::vector<std::uint32_t> bins;
  bins.reserve(values.size());
  const double width = upper - lower;
  for (double x : values) {
    const double t = (std::clamp(x, lower, upper) - lower) / width;
    const auto b = static_cast<std::int64_t>(std::floor(t * m));
    bins.push_back(static_cast<std::uint32_t>(std::clamp<std::int64_t>(b, 0, m - 1)));
  }
  return bins;
}

struct BinBounds {
  double lower = 0.0;
  double upper = 1.0;
};

/// MI of every recorded layer after binning its continuous activations with
/// the given per-layer bounds.
inline std::vector<MiPair> mi_binned(const StateRecord& record,
                                     std::span<const int> labels, int m,
                                     std::span<const BinBounds> bounds) {
  if (bounds.size() != record.layers.size())
    throw std::invalid_argument("mi_binned: need bounds for each of the " +
                                std::to_string(record.layers.size()) +
                                " layers, got " + std::to_string(bounds.size()));
  if (record.rows != labels.size())
    throw std::invalid_argument("mi_binned: row/label count mismatch");
  std::vector<MiPair> out;
  for (std::size_t k = 0; k < record.layers.size(); ++k) {
    const auto& ls = record.layers[k];
    if (static_cast<std::size_t>(ls.continuous.rows()) != record.rows)
      throw std::invalid_argument(
          "mi_binned: continuous activations were not recorded");
    const auto bins = bin_activations(
        std::span<const double>(ls.continuous.data(),
                                static_cast<std::size_t>(ls.continuous.size())),
        m, bounds[k].lower, bounds[k].upper);
    const auto states = partition_rows<std::uint32_t>(
        bins, record.rows, static_cast<std::size_t>(ls.width));
    out.push_back(mi_from_states(states, labels));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trajectories.

struct InfoPoint {
  std::int64_t epoch = 0;
  std::size_t layer = 0;
  double i_xt = 0.0;
  double i_ty = 0.0;
};

struct EpochMetrics {
  std::int64_t epoch = 0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double loss = 0.0;  // training loss, nats
};

struct InfoTrajectory {
  int run_id = 0;
  std::vector<std::vector<InfoPoint>> layers;  // [layer][logged epoch]
  std::vector<EpochMetrics> metrics;           // one per logged epoch
  std::map<std::string, std::string> metadata;

  std::size_t num_layers() const { return layers.size(); }
  std::size_t num_epochs() const {
    return layers.empty() ? 0 : layers.front().size();
  }

  /// Appends one logged epoch: a point per layer plus its metrics.
  void append(std::int64_t epoch, std::span<const MiPair> mi,
              const EpochMetrics& m) {
    if (layers.empty()) layers.resize(mi.size());
    if (layers.size() != mi.size())
      throw std::invalid_argument("trajectory: layer count changed");
    if (!layers.front().empty() && layers.front().back().epoch >= epoch)
      throw std::invalid_argument("trajectory: epochs must strictly increase");
    for (std::size_t k = 0; k < mi.size(); ++k)
      layers[k].push_back({epoch, k, mi[k].i_xt, mi[k].i_ty});
    metrics.push_back(m);
    metrics.back().epoch = epoch;
  }

  /// All layers' points at logged position `e`.
  std::vector<InfoPoint> at(std::size_t e) const {
    std::vector<InfoPoint> pts;
    for (const auto& l : layers) pts.push_back(l.at(e));
    return pts;
  }
};

// ---------------------------------------------------------------------------
// DPI audit.

enum class InfoQuantity { i_xt, i_ty };

struct DpiViolation {
  std::size_t layer = 0;  // the later layer of the offending pair
  InfoQuantity quantity = InfoQuantity::i_ty;
  double increase = 0.0;
};

inline constexpr double kDpiTolerance = 1e-9;

/// Adjacent layer pairs (input to output) along which I(X;T) or I(T;Y)
/// increases by more than `tolerance`.
inline std::vector<DpiViolation> check_dpi(std::span<const InfoPoint> points,
                                           double tolerance = kDpiTolerance) {
  std::vector<DpiViolation> v;
  for (std::size_t k = 1; k < points.size(); ++k) {
    const double dxt = points[k].i_xt - points[k - 1].i_xt;
    const double dty = points[k].i_ty - points[k - 1].i_ty;
    if (dxt > tolerance) v.push_back({k, InfoQuantity::i_xt, dxt});
    if (dty > tolerance) v.push_back({k, InfoQuantity::i_ty, dty});
  }
  return v;
}

// ---------------------------------------------------------------------------
// Phase detection.

struct PhaseThresholds {
  double fit_bits = 0.05;       // minimum rise of I(T;Y) above its start
  double compression = 0.05;    // minimum drop of I(X;T), fraction of its peak
};

struct PhaseSummary {
  bool fitting = false;
  bool compression = false;
  std::int64_t peak_epoch = 0;  // argmax I(X;T), earliest on ties
};

inline PhaseSummary detect_phases(std::span<const InfoPoint> curve,
                                  const PhaseThresholds& th = {}) {
  if (curve.empty()) throw std::invalid_argument("detect_phases: empty curve");
  PhaseSummary s;
  double max_ty = curve.front().i_ty;
  double max_xt = curve.front().i_xt;
  s.peak_epoch = curve.front().epoch;
  for (const auto& p : curve) {
    max_ty = std::max(max_ty, p.i_ty);
    if (p.i_xt > max_xt) {
      max_xt = p.i_xt;
      s.peak_epoch = p.epoch;
    }
  }
  s.fitting = max_ty - curve.front().i_ty >= th.fit_bits;
  s.compression = max_xt > 0.0 &&
                  max_xt - curve.back().i_xt >= th.compression * max_xt;
  return s;
}

/// Per-run detection followed by a strict-majority vote per flag; the peak
/// epoch is the median of the runs' peaks.
inline PhaseSummary detect_phases_vote(
    std::span<const InfoTrajectory> runs, std::size_t layer,
    const PhaseThresholds& th = {}) {
  if (runs.empty()) throw std::invalid_argument("detect_phases_vote: no runs");
  std::size_t fit = 0, comp = 0;
  std::vector<std::int64_t> peaks;
  for (const auto& r : runs) {
    const auto s = detect_phases(r.layers.at(layer), th);
    fit += s.fitting;
    comp += s.compression;
    peaks.push_back(s.peak_epoch);
  }
  std::sort(peaks.begin(), peaks.end());
  return {.fitting = 2 * fit > runs.size(),
          .compression = 2 * comp > runs.size(),
          .peak_epoch = peaks[(peaks.size() - 1) / 2]};
}

// ---------------------------------------------------------------------------
// Aggregation across repetitions.

struct PointStats {
  std::int64_t epoch = 0;
  std::size_t layer = 0;
  double mean_i_xt = 0.0, var_i_xt = 0.0;
  double mean_i_ty = 0.0, var_i_ty = 0.0;
};

struct MetricStats {
  std::int64_t epoch = 0;
  double mean_train_acc = 0.0, ci_train_acc = 0.0;  // ci: 95% half-width
  double mean_test_acc = 0.0, ci_test_acc = 0.0;
  double mean_loss = 0.0, ci_loss = 0.0;
};

struct Aggregate {
  InfoTrajectory mean;                        // pointwise mean curves
  std::vector<std::vector<PointStats>> stats; // [layer][epoch]
  std::vector<MetricStats> metrics;           // [epoch]
  std::vector<double> distances;              // per run, L2 from the mean
  int median_run_id = 0;
  std::size_t median_index = 0;               // position in the input list
};

namespace detail {

struct Moments {
  double mean = 0.0;
  double var = 0.0;  // unbiased; 0 for a single sample
};

// The mean is clamped to [min, max] so identical samples give exactly their
// common value and zero variance.
inline Moments moments(std::span<const double> xs) {
  Moments m;
  const auto [lo, hi] = std::minmax_element(xs.begin(), xs.end());
  double sum = 0.0;
  for (double x : xs) sum += x;
  m.mean = std::clamp(sum / static_cast<double>(xs.size()), *lo, *hi);
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - m.mean) * (x - m.mean);
    m.var = ss / static_cast<double>(xs.size() - 1);
  }
  return m;
}

inline double ci95(const Moments& m, std::size_t n) {
  return n > 1 ? 1.96 * std::sqrt(m.var) / std::sqrt(static_cast<double>(n))
               : 0.0;
}

}  // namespace detail

inline Aggregate aggregate_runs(std::span<const InfoTrajectory> runs) {
  if (runs.empty()) throw std::invalid_argument("aggregate_runs: no runs");
  const auto& first = runs.front();
  const auto L = first.num_layers();
  const auto E = first.num_epochs();
  for (const auto& r : runs) {
    if (r.num_layers() != L || r.metrics.size() != first.metrics.size())
      throw std::invalid_argument("aggregate_runs: mismatched shapes");
    for (std::size_t k = 0; k < L; ++k) {
      if (r.layers[k].size() != E)
        throw std::invalid_argument("aggregate_runs: mismatched shapes");
      for (std::size_t e = 0; e < E; ++e)
        if (r.layers[k][e].epoch != first.layers[k][e].epoch)
          throw std::invalid_argument("aggregate_runs: mismatched epochs");
    }
  }
  const auto n = runs.size();
  Aggregate agg;
  agg.mean.run_id = -1;
  agg.mean.metadata = first.metadata;
  agg.mean.layers.resize(L);
  agg.stats.resize(L);
  std::vector<double> xt(n), ty(n);
  for (std::size_t k = 0; k < L; ++k) {
    for (std::size_t e = 0; e < E; ++e) {
      for (std::size_t r = 0; r < n; ++r) {
        xt[r] = runs[r].layers[k][e].i_xt;
        ty[r] = runs[r].layers[k][e].i_ty;
      }
      const auto mx = detail::moments(xt);
      const auto my = detail::moments(ty);
      const auto epoch = first.layers[k][e].epoch;
      agg.mean.layers[k].push_back({epoch, k, mx.mean, my.mean});
      agg.stats[k].push_back({epoch, k, mx.mean, mx.var, my.mean, my.var});
    }
  }
  std::vector<double> tr(n), te(n), lo(n);
  for (std::size_t e = 0; e < first.metrics.size(); ++e) {
    for (std::size_t r = 0; r < n; ++r) {
      tr[r] = runs[r].metrics[e].train_acc;
      te[r] = runs[r].metrics[e].test_acc;
      lo[r] = runs[r].metrics[e].loss;
    }
    const auto mtr = detail::moments(tr), mte = detail::moments(te),
               mlo = detail::moments(lo);
    const auto epoch = first.metrics[e].epoch;
    agg.metrics.push_back({epoch, mtr.mean, detail::ci95(mtr, n), mte.mean,
                           detail::ci95(mte, n), mlo.mean, detail::ci95(mlo, n)});
    agg.mean.metrics.push_back({epoch, mtr.mean, mte.mean, mlo.mean});
  }
  for (const auto& r : runs) {
    double ss = 0.0;
    for (std::size_t k = 0; k < L; ++k)
      for (std::size_t e = 0; e < E; ++e) {
        const double dx = r.layers[k][e].i_xt - agg.mean.layers[k][e].i_xt;
        const double dy = r.layers[k][e].i_ty - agg.mean.layers[k][e].i_ty;
        ss += dx * dx + dy * dy;
      }
    agg.distances.push_back(std::sqrt(ss));
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (agg.distances[a] != agg.distances[b])
      return agg.distances[a] < agg.distances[b];
    return runs[a].run_id < runs[b].run_id;
  });
  // Lower median of the distances; among runs at exactly that distance the
  // lowest id wins, so identical runs resolve to the first id.
  const double median = agg.distances[order[(n - 1) / 2]];
  agg.median_index = *std::find_if(order.begin(), order.end(), [&](std::size_t i) {
    return agg.distances[i] == median;
  });
  agg.median_run_id = runs[agg.median_index].run_id;
  return agg;
}

}  // namespace ibq
