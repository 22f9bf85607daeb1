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

// Test-only reference computations. Nothing here calls into the library's
// information code; these are the independent routes the tests compare
// against.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <utility>
#include <vector>

namespace ibq::oracle {

struct Mi {
  double i_xt = 0.0;
  double i_ty = 0.0;
};

/// Materializes the joint distribution P(t, y) over distinct state rows and
/// labels, then evaluates I(T;Y) = sum P(t,y) log2 P(t,y) / (P(t) P(y)) and
/// I(X;T) = -sum P(t) log2 P(t).
inline Mi brute_force_mi(const std::vector<std::vector<std::uint64_t>>& states,
                         const std::vector<int>& labels) {
  const double n = static_cast<double>(labels.size());
  std::map<std::pair<std::vector<std::uint64_t>, int>, double> joint;
  std::map<std::vector<std::uint64_t>, double> pt;
  std::map<int, double> py;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    joint[{states[i], labels[i]}] += 1.0 / n;
    pt[states[i]] += 1.0 / n;
    py[labels[i]] += 1.0 / n;
  }
  Mi r;
  for (const auto& [t, p] : pt) r.i_xt -= p * std::log2(p);
  for (const auto& [key, p] : joint)
    r.i_ty += p * std::log2(p / (pt[key.first] * py[key.second]));
  return r;
}

}  // namespace ibq::oracle
