// SPDX-License-Identifier: Apache-2.0
#pragma once

// Coupled-dipole wave simulator in two dimensions.
//
// Every entity (antenna, wall segment, RIS element, scatterer) is a point
// dipole with a z-oriented moment. Units: propagation speed 1, so the
// wavenumber is k = 2*pi*f and the wavelength at f = 1 is 1.
//
// The interaction matrix W has the inverse polarizabilities on its diagonal
// and -k^2 G(r_i, r_j) off the diagonal, G being the 2D free-space Green's
// function (i/4) H0^(1)(k d). Channels between dipole groups are blocks of
// W^{-1}.

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "rislab/bessel.hpp"
#include "rislab/error.hpp"
#include "rislab/parallel.hpp"

namespace rislab {

using cdouble = std::complex<double>;

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend bool operator==(Vec2 a, Vec2 b) = default;
};

inline double distance(Vec2 a, Vec2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

inline double wavenumber(double f) { return 2.0 * std::numbers::pi * f; }

struct DipoleProperties {
  double f_res = 1.0;
  double chi = 1.0;
  double gamma_l = 0.0;

  void validate() const {
    if (!(f_res > 0.0) || !std::isfinite(f_res))
      throw ValidationError("dipole: resonance frequency must be positive");
    if (!(chi > 0.0) || !std::isfinite(chi))
      throw ValidationError("dipole: charge term must be positive");
    if (!(gamma_l >= 0.0) || !std::isfinite(gamma_l))
      throw ValidationError("dipole: absorptive damping must be non-negative");
  }

  friend bool operator==(const DipoleProperties&, const DipoleProperties&) = default;
};

// Equispaced samples over [f_center (1 - half_band), f_center (1 + half_band)].
struct FrequencyGrid {
  double f_center = 1.0;
  double half_band = 0.1;
  int n_points = 64;

  void validate() const {
    if (!(f_center > 0.0)) throw ValidationError("frequency grid: center must be positive");
    if (!(half_band > 0.0 && half_band < 1.0))
      throw ValidationError("frequency grid: half_band must lie in (0, 1)");
    if (n_points < 2) throw ValidationError("frequency grid: need at least 2 points");
  }

  double frequency(int i) const {
    const double lo = f_center * (1.0 - half_band);
    const double step = 2.0 * f_center * half_band / (n_points - 1);
    return lo + step * i;
  }

  std::vector<double> frequencies() const {
    std::vector<double> f(static_cast<std::size_t>(n_points));
    for (int i = 0; i < n_points; ++i) f[static_cast<std::size_t>(i)] = frequency(i);
    return f;
  }

  friend bool operator==(const FrequencyGrid&, const FrequencyGrid&) = default;
};

// Closest allowed approach of two dipoles (units of the center wavelength).
inline constexpr double kMinSeparation = 1e-6;

enum class Role { kBS, kUE, kRIS, kSense, kWall, kObject };

inline const char* role_name(Role r) {
  switch (r) {
    case Role::kBS: return "BS";
    case Role::kUE: return "UE";
    case Role::kRIS: return "RIS";
    case Role::kSense: return "SENSE";
    case Role::kWall: return "WALL";
    case Role::kObject: return "OBJECT";
  }
  return "?";
}

// Flat dipole list. SENSE dipoles are RIS elements tagged for sensing.
struct SceneInstance {
  std::vector<Vec2> positions;
  std::vector<DipoleProperties> props;
  std::vector<Role> roles;

  std::size_t size() const { return positions.size(); }

  void add(Vec2 r, const DipoleProperties& p, Role role) {
    positions.push_back(r);
    props.push_back(p);
    roles.push_back(role);
  }

  std::vector<std::size_t> indices_of(Role role) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < roles.size(); ++i)
      if (roles[i] == role) out.push_back(i);
    return out;
  }

  // Throws if two dipoles are closer than tol.
  void check_separation(double tol) const {
    for (std::size_t i = 0; i < size(); ++i)
      for (std::size_t j = i + 1; j < size(); ++j)
        if (distance(positions[i], positions[j]) < tol)
          throw ValidationError("scene: dipoles " + std::to_string(i) + " (" +
                                role_name(roles[i]) + ") and " + std::to_string(j) + " (" +
                                role_name(roles[j]) + ") coincide");
  }

  void validate() const {
    if (props.size() != size() || roles.size() != size())
      throw ValidationError("scene: inconsistent dipole list lengths");
    for (const auto& p : props) p.validate();
    if (indices_of(Role::kBS).empty()) throw ValidationError("scene: no BS dipole");
    if (indices_of(Role::kUE).empty()) throw ValidationError("scene: no UE dipole");
    check_separation(kMinSeparation);
  }
};

// Complex amplitudes indexed (rx, tx, frequency).
struct ChannelResponse {
  std::size_t n_rx = 0;
  std::size_t n_tx = 0;
  FrequencyGrid grid;
  std::vector<cdouble> values;

  std::size_t n_freq() const { return static_cast<std::size_t>(grid.n_points); }
  std::size_t index(std::size_t rx, std::size_t tx, std::size_t f) const {
    return (rx * n_tx + tx) * n_freq() + f;
  }
  cdouble& at(std::size_t rx, std::size_t tx, std::size_t f) { return values[index(rx, tx, f)]; }
  cdouble at(std::size_t rx, std::size_t tx, std::size_t f) const {
    return values[index(rx, tx, f)];
  }
};

inline cdouble greens_2d(Vec2 r1, Vec2 r2, double f) {
  const double d = distance(r1, r2);
  if (!(d > 0.0)) throw ValidationError("greens_2d: coincident points");
  const auto [j0, y0] = bessel_j0_y0(wavenumber(f) * d);
  return cdouble(0.0, 0.25) * cdouble(j0, y0);
}

inline cdouble inv_polarizability(const DipoleProperties& p, double f) {
  const double k = wavenumber(f);
  return {(p.f_res * p.f_res - f * f) / p.chi, -(0.25 * k * k + p.gamma_l)};
}

inline Eigen::MatrixXcd assemble_interaction(const SceneInstance& scene, double f) {
  const auto n = static_cast<Eigen::Index>(scene.size());
  const double k2 = wavenumber(f) * wavenumber(f);
  Eigen::MatrixXcd w(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    w(i, i) = inv_polarizability(scene.props[ui], f);
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const cdouble c = -k2 * greens_2d(scene.positions[ui], scene.positions[static_cast<std::size_t>(j)], f);
      w(i, j) = c;
      w(j, i) = c;
    }
  }
  return w;
}

inline constexpr double kMaxConditionNumber = 1e12;

namespace wavesim_detail {

inline Eigen::PartialPivLU<Eigen::MatrixXcd> factor(const Eigen::MatrixXcd& w, double f) {
  Eigen::PartialPivLU<Eigen::MatrixXcd> lu(w);
  const double rcond = lu.rcond();
  if (!(rcond * kMaxConditionNumber >= 1.0))
    throw NumericalError("interaction matrix near-singular at f = " + std::to_string(f) +
                         " (rcond " + std::to_string(rcond) + ")");
  return lu;
}

}  // namespace wavesim_detail

// Solves W X = E once per frequency, E holding unit columns at the tx
// dipoles, and keeps the rx rows of X.
inline ChannelResponse channel(const SceneInstance& scene, Role tx_role, Role rx_role,
                               const FrequencyGrid& grid, unsigned workers = 1) {
  grid.validate();
  const auto tx = scene.indices_of(tx_role);
  const auto rx = scene.indices_of(rx_role);
  if (tx.empty()) throw ValidationError(std::string("channel: scene has no ") + role_name(tx_role));
  if (rx.empty()) throw ValidationError(std::string("channel: scene has no ") + role_name(rx_role));

  ChannelResponse out;
  out.n_rx = rx.size();
  out.n_tx = tx.size();
  out.grid = grid;
  out.values.assign(out.n_rx * out.n_tx * out.n_freq(), cdouble{});

  const auto n = static_cast<Eigen::Index>(scene.size());
  parallel_for(out.n_freq(), workers, [&](std::size_t fi) {
    const double f = grid.frequency(static_cast<int>(fi));
    const auto lu = wavesim_detail::factor(assemble_interaction(scene, f), f);
    Eigen::MatrixXcd rhs = Eigen::MatrixXcd::Zero(n, static_cast<Eigen::Index>(tx.size()));
    for (std::size_t t = 0; t < tx.size(); ++t)
      rhs(static_cast<Eigen::Index>(tx[t]), static_cast<Eigen::Index>(t)) = 1.0;
    const Eigen::MatrixXcd x = lu.solve(rhs);
    for (std::size_t r = 0; r < rx.size(); ++r)
      for (std::size_t t = 0; t < tx.size(); ++t)
        out.at(r, t, fi) = x(static_cast<Eigen::Index>(rx[r]), static_cast<Eigen::Index>(t));
  });
  for (const auto& v : out.values)
    if (!std::isfinite(v.real()) || !std::isfinite(v.imag()))
      throw NumericalError("channel: non-finite response");
  return out;
}

enum class Window { kRectangular, kRaisedCosine };

inline std::vector<double> taper(Window w, std::size_t n) {
  std::vector<double> out(n, 1.0);
  if (w == Window::kRaisedCosine && n > 1)
    for (std::size_t i = 0; i < n; ++i)
      out[i] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                     static_cast<double>(n - 1)));
  return out;
}

// Inverse DFT over the frequency axis, h[n] = (1/N) sum_k w_k H_k e^{+2 pi i k n / N},
// stored with the same (rx, tx, bin) layout as the input.
inline ChannelResponse impulse_response(const ChannelResponse& h, Window window) {
  const std::size_t nf = h.n_freq();
  if (nf < 2) throw ValidationError("impulse_response: need at least 2 frequency points");
  const auto w = taper(window, nf);
  ChannelResponse out = h;
  std::vector<cdouble> twiddle(nf);
  for (std::size_t m = 0; m < nf; ++m)
    twiddle[m] = std::polar(1.0, 2.0 * std::numbers::pi * static_cast<double>(m) /
                                     static_cast<double>(nf));
  for (std::size_t r = 0; r < h.n_rx; ++r)
    for (std::size_t t = 0; t < h.n_tx; ++t)
      for (std::size_t n = 0; n < nf; ++n) {
        cdouble acc{};
        for (std::size_t k = 0; k < nf; ++k) acc += w[k] * h.at(r, t, k) * twiddle[(k * n) % nf];
        out.at(r, t, n) = acc / static_cast<double>(nf);
      }
  return out;
}

// Channels from the single BS dipole of `base` to a UE placed at each of
// `ue_sites` in turn, and to the SENSE dipoles. `base` holds every dipole
// except the UE. Adding the UE borders W0 with one row/column, so one
// factorization of W0 per frequency serves all sites through the Schur
// complement s = d - w^T W0^{-1} w.
struct SiteChannels {
  std::vector<cdouble> h_ue;     // n_freq
  std::vector<cdouble> h_sense;  // n_sense x n_freq, row-major
};

inline std::vector<SiteChannels> sweep_sites(const SceneInstance& base,
                                             std::span<const Vec2> ue_sites,
                                             const DipoleProperties& ue_props,
                                             const FrequencyGrid& grid, double min_separation,
                                             unsigned workers = 1) {
  grid.validate();
  ue_props.validate();
  const auto bs = base.indices_of(Role::kBS);
  if (bs.size() != 1) throw ValidationError("sweep_sites: base scene needs exactly one BS");
  if (!base.indices_of(Role::kUE).empty())
    throw ValidationError("sweep_sites: base scene must not contain a UE");
  const auto sense = base.indices_of(Role::kSense);
  for (std::size_t s = 0; s < ue_sites.size(); ++s)
    for (std::size_t j = 0; j < base.size(); ++j)
      if (distance(ue_sites[s], base.positions[j]) < min_separation)
        throw ValidationError("sweep_sites: UE site " + std::to_string(s) + " coincides with " +
                              role_name(base.roles[j]) + " dipole " + std::to_string(j));

  const std::size_t nf = static_cast<std::size_t>(grid.n_points);
  const auto n = static_cast<Eigen::Index>(base.size());
  const auto n_sites = static_cast<Eigen::Index>(ue_sites.size());
  std::vector<SiteChannels> out(ue_sites.size());
  for (auto& sc : out) {
    sc.h_ue.assign(nf, cdouble{});
    sc.h_sense.assign(sense.size() * nf, cdouble{});
  }

  parallel_for(nf, workers, [&](std::size_t fi) {
    const double f = grid.frequency(static_cast<int>(fi));
    const double k2 = wavenumber(f) * wavenumber(f);
    const auto lu = wavesim_detail::factor(assemble_interaction(base, f), f);
    const Eigen::VectorXcd y = lu.solve(Eigen::VectorXcd::Unit(n, static_cast<Eigen::Index>(bs[0])));
    Eigen::MatrixXcd border(n, n_sites);
    for (Eigen::Index s = 0; s < n_sites; ++s)
      for (Eigen::Index j = 0; j < n; ++j)
        border(j, s) = -k2 * greens_2d(base.positions[static_cast<std::size_t>(j)],
                                       ue_sites[static_cast<std::size_t>(s)], f);
    const Eigen::MatrixXcd z = lu.solve(border);
    const cdouble d = inv_polarizability(ue_props, f);
    for (Eigen::Index s = 0; s < n_sites; ++s) {
      const cdouble schur = d - border.col(s).cwiseProduct(z.col(s)).sum();
      if (!(std::abs(schur) > 1e-14 * std::abs(d)))
        throw NumericalError("sweep_sites: singular UE border at f = " + std::to_string(f));
      const cdouble x_ue = -border.col(s).cwiseProduct(y).sum() / schur;
      auto& sc = out[static_cast<std::size_t>(s)];
      sc.h_ue[fi] = x_ue;
      for (std::size_t m = 0; m < sense.size(); ++m) {
        const auto row = static_cast<Eigen::Index>(sense[m]);
        sc.h_sense[m * nf + fi] = y(row) - z(row, s) * x_ue;
      }
    }
  });
  for (const auto& sc : out) {
    for (const auto& v : sc.h_ue)
      if (!std::isfinite(v.real()) || !std::isfinite(v.imag()))
        throw NumericalError("sweep_sites: non-finite response");
  }
  return out;
}

}  // namespace rislab
