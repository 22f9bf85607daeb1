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

// Uniform k-bit fake quantization of activations.
//
// A value x is clamped to [lo, hi] and mapped to the nearest of the 2^k
// levels lo + i * (hi - lo) / (2^k - 1), i = 0 .. 2^k - 1. The integer i is
// the activation's code; the level is its dequantized value. A degenerate
// range (lo == hi) maps everything to code 0 / value lo.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

namespace ibq {

inline constexpr int kMaxQuantBits = 32;

/// Largest code for k bits, 2^k - 1.
constexpr std::uint64_t top_code(int bits) noexcept {
  return (std::uint64_t{1} << bits) - 1;
}

/// Quantizer for one fixed range.
class Quantizer {
 public:
  Quantizer(int bits, double lo, double hi) : lo_(lo), hi_(hi) {
    if (bits < 1 || bits > kMaxQuantBits)
      throw std::invalid_argument("quantizer bits must lie in [1, 32]");
    if (!(lo <= hi)) throw std::invalid_argument("quantizer range lo > hi");
    top_ = top_code(bits);
    step_ = (hi - lo) / static_cast<double>(top_);
  }

  std::uint64_t code(double x) const noexcept {
    if (hi_ == lo_) return 0;
    const double c = std::clamp(x, lo_, hi_);
    const double t = (c - lo_) / (hi_ - lo_) * static_cast<double>(top_);
    // Round half away from zero; t >= 0 and t < 2^33, so t - floor(t) is exact.
    auto i = static_cast<std::uint64_t>(t);
    if (t - static_cast<double>(i) >= 0.5) ++i;
    return std::min(i, top_);
  }

  double value(std::uint64_t code) const noexcept {
    if (hi_ == lo_) return lo_;
    if (code >= top_) return hi_;
    return lo_ + static_cast<double>(code) * step_;
  }

  double lo() const noexcept { return lo_; }
  double hi() const noexcept { return hi_; }
  std::uint64_t top() const noexcept { return top_; }

 private:
  double lo_, hi_;
  std::uint64_t top_ = 0;
  double step_ = 0.0;
};

struct QuantizeResult {
  std::vector<std::uint64_t> codes;
  std::vector<double> dequantized;
};

inline QuantizeResult quantize(std::span<const double> values, int bits,
                               double lo, double hi) {
  const Quantizer q(bits, lo, hi);
  QuantizeResult r;
  r.codes.reserve(values.size());
  r.dequantized.reserve(values.size());
  for (double x : values) {
    const auto c = q.code(x);
    r.codes.push_back(c);
    r.dequantized.push_back(q.value(c));
  }
  return r;
}

/// Running activation range of one layer within an epoch.
struct LayerRange {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  bool seen = false;

  void observe(double batch_lo, double batch_hi) noexcept {
    lo = seen ? std::min(lo, batch_lo) : batch_lo;
    hi = seen ? std::max(hi, batch_hi) : batch_hi;
    seen = true;
  }
};

/// Per-layer ranges (a_l, a_u) governing fake quantization, plus the bit
/// width. `bits == 0` disables quantization.
struct QuantState {
  int bits = 8;
  std::vector<LayerRange> ranges;  // indexed by network layer

  bool enabled() const noexcept { return bits > 0; }

  void reset(std::size_t layers) {
    ranges.assign(layers, LayerRange{});
  }
};

}  // namespace ibq
