// SPDX-License-Identifier: Apache-2.0
#pragma once

// Zeroth-order Bessel functions of the first and second kind.
//
// Below kAsymptoticSwitch both come from the ascending power series; above
// it from the Hankel asymptotic expansion, truncated at its smallest term.

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <utility>

namespace rislab {

namespace bessel_detail {

inline constexpr double kAsymptoticSwitch = 8.0;
inline constexpr double kEulerGamma = 0.57721566490153286061;

// Returns (J0, S) where S = sum_{k>=1} (-1)^{k+1} H_k (x^2/4)^k / (k!)^2,
// the non-logarithmic part of Y0.
inline std::pair<double, double> ascending_series(double x) {
  const double q = 0.25 * x * x;
  double term = 1.0;
  double j0 = 1.0;
  double tail = 0.0;
  double harmonic = 0.0;
  for (int k = 1; k < 200; ++k) {
    term *= -q / (static_cast<double>(k) * k);
    harmonic += 1.0 / k;
    j0 += term;
    tail -= term * harmonic;
    if (std::abs(term) * (1.0 + harmonic) < 1e-18 * (1.0 + std::abs(j0)) && k > q) break;
  }
  return {j0, tail};
}

// P0 and Q0 of the Hankel expansion.
inline std::pair<double, double> hankel_pq(double x) {
  const double z = 8.0 * x;
  double p = 1.0;
  double q = 0.0;
  double a = 1.0;  // a_k / (8x)^k with a_k = prod (2j-1)^2 / k!
  double prev = 1.0;
  for (int k = 1; k < 100; ++k) {
    const double m = 2.0 * k - 1.0;
    a *= m * m / (k * z);
    if (std::abs(a) > prev) break;  // series starts to diverge
    prev = std::abs(a);
    switch (k % 4) {
      case 1: q -= a; break;
      case 2: p -= a; break;
      case 3: q += a; break;
      case 0: p += a; break;
    }
    if (prev < 1e-17) break;
  }
  return {p, q};
}

}  // namespace bessel_detail

inline double bessel_j0(double x) {
  x = std::abs(x);
  if (x < bessel_detail::kAsymptoticSwitch) return bessel_detail::ascending_series(x).first;
  const auto [p, q] = bessel_detail::hankel_pq(x);
  const double chi = x - 0.25 * std::numbers::pi;
  return std::sqrt(2.0 / (std::numbers::pi * x)) * (p * std::cos(chi) - q * std::sin(chi));
}

// (J0(x), Y0(x)); Y0 is only defined for x > 0.
inline std::pair<double, double> bessel_j0_y0(double x) {
  if (!(x > 0.0)) throw std::domain_error("bessel_j0_y0: Y0 requires x > 0");
  if (x < bessel_detail::kAsymptoticSwitch) {
    const auto [j0, tail] = bessel_detail::ascending_series(x);
    const double y0 =
        2.0 / std::numbers::pi * ((std::log(0.5 * x) + bessel_detail::kEulerGamma) * j0 + tail);
    return {j0, y0};
  }
  const auto [p, q] = bessel_detail::hankel_pq(x);
  const double chi = x - 0.25 * std::numbers::pi;
  const double amp = std::sqrt(2.0 / (std::numbers::pi * x));
  const double c = std::cos(chi);
  const double s = std::sin(chi);
  return {amp * (p * c - q * s), amp * (p * s + q * c)};
}

}  // namespace rislab
