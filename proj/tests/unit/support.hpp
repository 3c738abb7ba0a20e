// SPDX-License-Identifier: Apache-2.0
#pragma once

// Shared fixtures and independent reference computations for the tests.

#include <array>
#include <cmath>
#include <complex>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "rislab/random.hpp"
#include "rislab/scene.hpp"
#include "rislab/wavesim.hpp"

namespace rislab::testing {

inline std::string data_path(const std::string& name) { return std::string(RISLAB_TEST_DATA) + "/" + name; }

struct BesselPoint {
  double x, j0, y0;
};

// Frozen high-precision values produced by tests/oracles/bessel_oracle.py.
inline std::vector<BesselPoint> bessel_oracle() {
  std::ifstream in(data_path("bessel_oracle.csv"));
  std::string line;
  std::getline(in, line);
  std::vector<BesselPoint> pts;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    BesselPoint p{};
    char c;
    ss >> p.x >> c >> p.j0 >> c >> p.y0;
    pts.push_back(p);
  }
  return pts;
}

// Gauss-Jordan inverse with full pivoting; deliberately shares nothing with
// the simulator's solver.
inline std::vector<std::vector<cdouble>> invert(std::vector<std::vector<cdouble>> a) {
  const std::size_t n = a.size();
  std::vector<std::vector<cdouble>> inv(n, std::vector<cdouble>(n));
  for (std::size_t i = 0; i < n; ++i) inv[i][i] = 1.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t p = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r][c]) > std::abs(a[p][c])) p = r;
    std::swap(a[p], a[c]);
    std::swap(inv[p], inv[c]);
    const cdouble d = a[c][c];
    for (std::size_t j = 0; j < n; ++j) {
      a[c][j] /= d;
      inv[c][j] /= d;
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == c) continue;
      const cdouble m = a[r][c];
      for (std::size_t j = 0; j < n; ++j) {
        a[r][j] -= m * a[c][j];
        inv[r][j] -= m * inv[c][j];
      }
    }
  }
  return inv;
}

inline cdouble hankel0_std(double x) { return {std::cyl_bessel_j(0.0, x), std::cyl_neumann(0.0, x)}; }

// Interaction matrix written out from the model definition. The Hankel
// function defaults to the standard library's Bessel functions.
inline std::vector<std::vector<cdouble>> reference_w(const SceneInstance& s, double f,
                                                     cdouble (*hankel0)(double) = hankel0_std) {
  const double k = 2.0 * std::numbers::pi * f;
  const std::size_t n = s.size();
  std::vector<std::vector<cdouble>> w(n, std::vector<cdouble>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) {
        const auto& p = s.props[i];
        w[i][i] = cdouble((p.f_res * p.f_res - f * f) / p.chi, -(k * k / 4.0 + p.gamma_l));
      } else {
        const double d = std::hypot(s.positions[i].x - s.positions[j].x, s.positions[i].y - s.positions[j].y);
        const double kd = k * d;
        const cdouble h0 = hankel0(kd);
        w[i][j] = -k * k * cdouble(0.0, 0.25) * h0;
      }
    }
  return w;
}

// Scene of n dipoles scattered in a box, with one BS and one UE and the rest
// split between walls and RIS elements. Positions keep at least 0.05 apart.
inline SceneInstance random_scene(std::uint64_t seed, std::size_t n, std::size_t n_bs = 1, std::size_t n_ue = 1) {
  Rng rng(seed);
  SceneInstance s;
  std::vector<Vec2> pts;
  while (pts.size() < n) {
    Vec2 p{rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)};
    bool ok = true;
    for (const auto& q : pts) ok = ok && distance(p, q) > 0.05;
    if (ok) pts.push_back(p);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (i < n_bs) {
      s.add(pts[i], kTransceiverProps, Role::kBS);
    } else if (i < n_bs + n_ue) {
      s.add(pts[i], kTransceiverProps, Role::kUE);
    } else if (i % 2 == 0) {
      s.add(pts[i], kEnvironmentProps, Role::kWall);
    } else {
      s.add(pts[i], ris_props(static_cast<std::uint8_t>(rng.below(2))), Role::kRIS);
    }
  }
  return s;
}

inline double rel_diff(cdouble a, cdouble b) { return std::abs(a - b) / std::max(std::abs(a), std::abs(b)); }

}  // namespace rislab::testing
