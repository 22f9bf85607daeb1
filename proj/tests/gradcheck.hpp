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

// Central finite differences against the analytic backward pass.
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "ibq/network.hpp"

namespace ibq::testing_util {

inline double batch_loss(const Network& net, const Matrix& batch,
                         const std::vector<int>& labels) {
  auto q = make_quant_state(net);
  const auto fp = forward(net, batch, q, PassMode::train);
  return cross_entropy(fp.logits(), one_hot(labels, net.spec.num_classes()));
}

/// Largest |g - fd| / max(|g| + |fd|, 1e-6) over every parameter, with
/// step 1e-5. The floor keeps gradients that are zero up to rounding from
/// dominating.
inline double max_gradient_error(const Network& net, const Matrix& batch,
                                 const std::vector<int>& labels) {
  auto q = make_quant_state(net);
  const auto fp = forward(net, batch, q, PassMode::train);
  const auto grads = backward(net, fp, labels);
  constexpr double h = 1e-5;
  double worst = 0.0;
  Network probe = net;
  for (std::size_t li = 0; li < net.params.size(); ++li) {
    auto check = [&](double& slot, double analytic) {
      const double saved = slot;
      slot = saved + h;
      const double up = batch_loss(probe, batch, labels);
      slot = saved - h;
      const double down = batch_loss(probe, batch, labels);
      slot = saved;
      const double fd = (up - down) / (2 * h);
      const double err =
          std::abs(fd - analytic) / std::max(std::abs(fd) + std::abs(analytic), 1e-6);
      worst = std::max(worst, err);
    };
    auto& p = probe.params[li];
    for (Eigen::Index i = 0; i < p.weights.size(); ++i)
      check(p.weights.data()[i], grads[li].weights.data()[i]);
    for (Eigen::Index i = 0; i < p.bias.size(); ++i)
      check(p.bias.data()[i], grads[li].bias.data()[i]);
  }
  return worst;
}

/// First seed whose relu pre-activations on `batch` all stay at least 1e-3
/// away from zero, so finite differences never straddle a kink.
inline Network relu_net_away_from_kinks(const NetworkSpec& spec,
                                        const Matrix& batch) {
  for (std::uint64_t seed = 0;; ++seed) {
    auto net = init_network(spec, seed);
    for (auto& p : net.params) p.bias.setConstant(0.01);
    auto q = make_quant_state(net);
    const auto fp = forward(net, batch, q, PassMode::train);
    bool ok = true;
    for (std::size_t i = 0; i + 1 < fp.layers.size(); ++i)
      if ((fp.layers[i].pre.array().abs() < 1e-3).any()) ok = false;
    if (ok) return net;
  }
}

}  // namespace ibq::testing_util
