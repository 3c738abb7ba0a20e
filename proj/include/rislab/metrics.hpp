// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>

#include "rislab/error.hpp"
#include "rislab/wavesim.hpp"

namespace rislab {

inline double squared_error(Vec2 a, Vec2 b) {
  const double dx = a.x - b.x;
  const double dy = a.y - b.y;
  return dx * dx + dy * dy;
}

// Mean squared localization error in lambda^2.
inline double mse(std::span<const Vec2> predicted, std::span<const Vec2> truth) {
  if (predicted.size() != truth.size())
    throw ValidationError("mse: " + std::to_string(predicted.size()) + " predictions for " +
                          std::to_string(truth.size()) + " targets");
  if (predicted.empty()) throw ValidationError("mse: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) s += squared_error(predicted[i], truth[i]);
  return s / static_cast<double>(predicted.size());
}

}  // namespace rislab
