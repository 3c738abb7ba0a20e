// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>

#include "rislab/bessel.hpp"
#include "rislab/scene.hpp"
#include "rislab/wavesim.hpp"
#include "support.hpp"

using namespace rislab;
using rislab::testing::rel_diff;

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

SceneInstance pair_scene(double d) {
  SceneInstance s;
  s.add({0.0, 0.0}, kTransceiverProps, Role::kBS);
  s.add({d, 0.0}, kTransceiverProps, Role::kUE);
  return s;
}

}  // namespace

TEST(Bessel, J0AtZeroIsOne) { EXPECT_EQ(bessel_j0(0.0), 1.0); }

TEST(Bessel, ValuesAtOne) {
  const auto [j0, y0] = bessel_j0_y0(1.0);
  EXPECT_NEAR(j0, 0.76519769, 5e-9);
  EXPECT_NEAR(y0, 0.08825696, 5e-9);
}

TEST(Bessel, FirstZero) {
  EXPECT_NEAR(bessel_j0(2.40482556), 0.0, 1e-7);
  EXPECT_NEAR(bessel_j0(2.4048255576957727686), 0.0, 1e-12);
}

TEST(Bessel, MatchesFrozenOracle) {
  const auto pts = rislab::testing::bessel_oracle();
  ASSERT_EQ(pts.size(), 1000u);
  double worst = 0.0;
  for (const auto& p : pts) {
    const auto [j0, y0] = bessel_j0_y0(p.x);
    worst = std::max({worst, std::abs(j0 - p.j0), std::abs(y0 - p.y0)});
  }
  EXPECT_LT(worst, 1e-8);
}

TEST(Bessel, BothBranchesAgreeNearSwitch) {
  for (double x : {7.5, 7.99, 8.0, 8.01, 8.5}) {
    const auto [j0, y0] = bessel_j0_y0(x);
    EXPECT_NEAR(j0, std::cyl_bessel_j(0.0, x), 1e-8) << x;
    EXPECT_NEAR(y0, std::cyl_neumann(0.0, x), 1e-8) << x;
  }
}

TEST(Bessel, RejectsNonPositiveArgument) {
  EXPECT_THROW(bessel_j0_y0(0.0), std::domain_error);
  EXPECT_THROW(bessel_j0_y0(-1.0), std::domain_error);
}

TEST(Greens, CoincidentPointsRejected) {
  EXPECT_THROW(greens_2d({1.0, 2.0}, {1.0, 2.0}, 1.0), ValidationError);
}

TEST(Greens, UnitArgument) {
  const cdouble g = greens_2d({0.0, 0.0}, {1.0 / kTwoPi, 0.0}, 1.0);
  EXPECT_NEAR(g.real(), -0.02206424, 1e-8);
  EXPECT_NEAR(g.imag(), 0.19129942, 1e-8);
}

TEST(Greens, Symmetric) {
  Rng rng(7);
  for (int i = 0; i < 200; ++i) {
    const Vec2 a{rng.uniform(-5, 5), rng.uniform(-5, 5)};
    const Vec2 b{rng.uniform(-5, 5), rng.uniform(-5, 5)};
    const double f = rng.uniform(0.5, 1.5);
    EXPECT_EQ(greens_2d(a, b, f), greens_2d(b, a, f));
  }
}

TEST(Polarizability, Transceiver) {
  const cdouble a = inv_polarizability(kTransceiverProps, 1.0);
  EXPECT_EQ(a.real(), 0.0);
  EXPECT_NEAR(a.imag(), -9.8696044, 1e-7);
}

TEST(Polarizability, Environment) {
  const cdouble a = inv_polarizability(kEnvironmentProps, 1.0);
  EXPECT_NEAR(a.real(), 1.98, 1e-12);
  EXPECT_NEAR(a.imag(), -10009.8696044, 1e-7);
}

TEST(Polarizability, RealPartVanishesAtResonance) {
  for (double fr : {0.3, 1.0, 5.0}) EXPECT_EQ(inv_polarizability({fr, 0.2, 0.03}, fr).real(), 0.0);
}

TEST(Polarizability, Passive) {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const DipoleProperties p{rng.uniform(0.1, 10), rng.uniform(0.01, 100), rng.uniform(0, 1e4)};
    const double f = rng.uniform(0.01, 3);
    const double k = kTwoPi * f;
    EXPECT_LE(inv_polarizability(p, f).imag(), -k * k / 4);
  }
}

TEST(Interaction, SingleDipole) {
  SceneInstance s;
  s.add({0, 0}, kTransceiverProps, Role::kBS);
  const auto w = assemble_interaction(s, 1.0);
  ASSERT_EQ(w.rows(), 1);
  EXPECT_EQ(w(0, 0), inv_polarizability(kTransceiverProps, 1.0));
}

TEST(Interaction, ExactlySymmetric) {
  const auto s = rislab::testing::random_scene(11, 40);
  const auto w = assemble_interaction(s, 1.03);
  EXPECT_EQ((w - w.transpose()).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Interaction, TwoTransceivers) {
  const auto w = assemble_interaction(pair_scene(1.0 / kTwoPi), 1.0);
  EXPECT_NEAR(w(0, 0).imag(), -9.8696044, 1e-7);
  const cdouble off = -kTwoPi * kTwoPi * cdouble(-0.02206424, 0.19129942);
  EXPECT_NEAR(w(0, 1).real(), off.real(), 1e-6);
  EXPECT_NEAR(w(0, 1).imag(), off.imag(), 1e-6);
}

TEST(Interaction, CoincidentDipolesRejected) {
  SceneInstance s = pair_scene(1.0);
  s.add({1.0, 0.0}, kEnvironmentProps, Role::kWall);
  EXPECT_THROW(assemble_interaction(s, 1.0), ValidationError);
}

TEST(Channel, TwoDipoleClosedForm) {
  const FrequencyGrid grid{1.0, 0.1, 64};
  const auto s = pair_scene(0.37);
  const auto h = channel(s, Role::kBS, Role::kUE, grid);
  for (int i = 0; i < grid.n_points; ++i) {
    const double f = grid.frequency(i);
    const auto w = rislab::testing::reference_w(s, f);
    const cdouble expected = -w[0][1] / (w[0][0] * w[1][1] - w[0][1] * w[0][1]);
    EXPECT_LT(rel_diff(h.at(0, 0, static_cast<std::size_t>(i)), expected), 1e-10) << f;
  }
}

// Same Hankel values on both sides, so only assembly and solve are compared.
TEST(Channel, DenseOracleSmallScenes) {
  const FrequencyGrid grid{1.0, 0.1, 8};
  auto lib_h0 = [](double x) {
    const auto [j0, y0] = bessel_j0_y0(x);
    return cdouble(j0, y0);
  };
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const std::size_t n = 2 + seed % 3;
    const auto s = rislab::testing::random_scene(seed, n);
    const auto h = channel(s, Role::kBS, Role::kUE, grid);
    for (int i = 0; i < grid.n_points; ++i) {
      const auto inv = rislab::testing::invert(rislab::testing::reference_w(s, grid.frequency(i), +lib_h0));
      EXPECT_LT(rel_diff(h.at(0, 0, static_cast<std::size_t>(i)), inv[1][0]), 1e-10);
    }
  }
}

// Against exact Bessel functions the J0/Y0 error (about 4e-9 absolute past
// the asymptotic switch) carries through W into the channel.
TEST(Channel, DenseOracleExactBessel) {
  const FrequencyGrid grid{1.0, 0.1, 8};
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto s = rislab::testing::random_scene(seed, 2 + seed % 3);
    const auto h = channel(s, Role::kBS, Role::kUE, grid);
    for (int i = 0; i < grid.n_points; ++i) {
      const auto inv = rislab::testing::invert(rislab::testing::reference_w(s, grid.frequency(i)));
      worst = std::max(worst, rel_diff(h.at(0, 0, static_cast<std::size_t>(i)), inv[1][0]));
    }
  }
  EXPECT_LT(worst, 1e-7);
}

TEST(Channel, Reciprocity) {
  const FrequencyGrid grid{1.0, 0.1, 16};
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto s = rislab::testing::random_scene(100 + seed, 30, 2, 3);
    const auto fwd = channel(s, Role::kBS, Role::kUE, grid);
    const auto rev = channel(s, Role::kUE, Role::kBS, grid);
    for (std::size_t r = 0; r < fwd.n_rx; ++r)
      for (std::size_t t = 0; t < fwd.n_tx; ++t)
        for (std::size_t f = 0; f < fwd.n_freq(); ++f)
          EXPECT_LT(std::abs(fwd.at(r, t, f) - rev.at(t, r, f)), 1e-9 * std::abs(fwd.at(r, t, f)) + 1e-15);
  }
}

TEST(Channel, DetunedFarDipoleBarelyMatters) {
  const FrequencyGrid grid{1.0, 0.1, 16};
  const auto s = rislab::testing::random_scene(5, 12);
  auto t = s;
  t.add({40.0, 40.0}, kEnvironmentProps, Role::kWall);
  const auto a = channel(s, Role::kBS, Role::kUE, grid);
  const auto b = channel(t, Role::kBS, Role::kUE, grid);
  for (std::size_t f = 0; f < a.n_freq(); ++f) EXPECT_LT(rel_diff(a.at(0, 0, f), b.at(0, 0, f)), 0.01);
}

TEST(Channel, MissingRoleRejected) {
  SceneInstance s;
  s.add({0, 0}, kTransceiverProps, Role::kBS);
  EXPECT_THROW(channel(s, Role::kBS, Role::kUE, FrequencyGrid{}), ValidationError);
}

TEST(Channel, NearSingularReported) {
  // Two nearly coincident dipoles whose diagonal matches the coupling term
  // make W numerically rank one at the middle grid frequency.
  const FrequencyGrid grid{1.0, 0.1, 3};
  const double f = grid.frequency(1);
  const double d = 1e-7;
  const double k2 = wavenumber(f) * wavenumber(f);
  const double re_b = (-k2 * greens_2d({0, 0}, {d, 0}, f)).real();
  ASSERT_LT(re_b, 0.0);
  const double f_res = 0.5;
  const DipoleProperties p{f_res, (f_res * f_res - f * f) / re_b, 0.0};
  SceneInstance s;
  s.add({0, 0}, p, Role::kBS);
  s.add({d, 0}, p, Role::kUE);
  try {
    channel(s, Role::kBS, Role::kUE, grid);
    FAIL() << "expected a numerical error";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("f = 1"), std::string::npos) << e.what();
  }
}

TEST(Channel, WorkerCountDoesNotChangeBits) {
  const FrequencyGrid grid{1.0, 0.1, 12};
  const auto s = rislab::testing::random_scene(9, 25);
  const auto a = channel(s, Role::kBS, Role::kUE, grid, 1);
  const auto b = channel(s, Role::kBS, Role::kUE, grid, 4);
  EXPECT_EQ(a.values, b.values);
}

TEST(ImpulseResponse, ConstantGivesImpulse) {
  ChannelResponse h;
  h.n_rx = h.n_tx = 1;
  h.grid = {1.0, 0.1, 32};
  h.values.assign(32, cdouble(0.7, -0.2));
  const auto g = impulse_response(h, Window::kRectangular);
  EXPECT_LT(std::abs(g.values[0] - cdouble(0.7, -0.2)), 1e-14);
  for (std::size_t n = 1; n < 32; ++n) EXPECT_LT(std::abs(g.values[n]), 1e-14);
}

TEST(ImpulseResponse, Parseval) {
  Rng rng(21);
  for (auto win : {Window::kRectangular, Window::kRaisedCosine}) {
    ChannelResponse h;
    h.n_rx = 2;
    h.n_tx = 1;
    h.grid = {1.0, 0.1, 40};
    for (int i = 0; i < 80; ++i) h.values.emplace_back(rng.normal(), rng.normal());
    const auto g = impulse_response(h, win);
    const auto w = taper(win, 40);
    for (std::size_t r = 0; r < 2; ++r) {
      double e_in = 0.0, e_out = 0.0;
      for (std::size_t k = 0; k < 40; ++k) {
        e_in += std::norm(w[k] * h.at(r, 0, k));
        e_out += std::norm(g.at(r, 0, k));
      }
      EXPECT_NEAR(e_out, e_in / 40.0, 1e-10);
    }
  }
}

TEST(ImpulseResponse, LinearPhasePeaksAtDelay) {
  const FrequencyGrid grid{1.0, 0.1, 64};
  const double df = grid.frequency(1) - grid.frequency(0);
  const double tau = 9.3 / (64 * df);
  ChannelResponse h;
  h.n_rx = h.n_tx = 1;
  h.grid = grid;
  for (double f : grid.frequencies()) h.values.push_back(std::polar(1.0, -kTwoPi * f * tau));
  const auto g = impulse_response(h, Window::kRectangular);
  std::size_t peak = 0;
  for (std::size_t n = 1; n < 64; ++n)
    if (std::abs(g.values[n]) > std::abs(g.values[peak])) peak = n;
  EXPECT_EQ(peak, 9u);
}

TEST(SweepSites, MatchesFullSolve) {
  const auto tpl = make_enclosure({.side = 6, .ris_per_wall = 4, .ris_pitch = 0.25, .sense_per_wall = 2,
                                   .bs = {-2.6, -2.6}, .ue_half_extent = 1.5, .ue_per_axis = 3,
                                   .loop_half_extent = 2.2, .grid = {1.0, 0.1, 6}});
  const RISConfig k = RISConfig::from_string("0110100111000101");
  const SOState p{{0.1, 0.5, 0.7, 0.95}};
  const auto sites = tpl.ue_sites();
  const auto swept = sweep_sites(realize_base(tpl, k, p), sites, kTransceiverProps, tpl.grid, kMinSeparation);
  for (std::size_t s = 0; s < sites.size(); ++s) {
    const auto full = realize(tpl, k, p, s);
    const auto hu = channel(full, Role::kBS, Role::kUE, tpl.grid);
    const auto hs = channel(full, Role::kBS, Role::kSense, tpl.grid);
    for (std::size_t f = 0; f < 6; ++f) {
      EXPECT_LT(rel_diff(swept[s].h_ue[f], hu.at(0, 0, f)), 1e-9);
      for (std::size_t m = 0; m < tpl.n_sense(); ++m)
        EXPECT_LT(rel_diff(swept[s].h_sense[m * 6 + f], hs.at(m, 0, f)), 1e-9);
    }
  }
}

TEST(DefaultScene, FrequencySelective) {
  const auto tpl = default_template();
  const auto s = realize(tpl, RISConfig::zeros(tpl.n_ris()), SOState{{0.1, 0.3, 0.6, 0.8}}, 12);
  const auto h = channel(s, Role::kBS, Role::kUE, tpl.grid);
  double mean = 0.0, sq = 0.0;
  for (const auto& v : h.values) mean += std::abs(v);
  mean /= static_cast<double>(h.values.size());
  for (const auto& v : h.values) sq += (std::abs(v) - mean) * (std::abs(v) - mean);
  const double cv = std::sqrt(sq / static_cast<double>(h.values.size())) / mean;
  EXPECT_GT(cv, 0.05);
}

TEST(DefaultScene, RisElementsMatter) {
  const auto tpl = default_template();
  const FrequencyGrid grid{1.0, 0.1, 8};
  auto t = tpl;
  t.grid = grid;
  Rng rng(17);
  const SOState p{{0.2, 0.4, 0.6, 0.8}};
  const Vec2 ue = tpl.ue_sites()[7];
  int sensitive = 0, total = 0;
  for (int trial = 0; trial < 2; ++trial) {
    RISConfig k;
    for (std::size_t i = 0; i < tpl.n_ris(); ++i) k.bits.push_back(static_cast<std::uint8_t>(rng.below(2)));
    auto norm_of = [&](const RISConfig& c) {
      const auto sc = sweep_sites(realize_base(t, c, p), std::span<const Vec2>(&ue, 1), kTransceiverProps, grid,
                                  kMinSeparation);
      double n2 = 0.0;
      for (const auto& v : sc[0].h_ue) n2 += std::norm(v);
      return std::sqrt(n2);
    };
    const double ref = norm_of(k);
    for (std::size_t e = 0; e < tpl.n_ris(); ++e) {
      auto flipped = k;
      flipped.bits[e] ^= 1;
      ++total;
      if (std::abs(norm_of(flipped) - ref) > 1e-6 * ref) ++sensitive;
    }
  }
  EXPECT_GE(sensitive, (9 * total + 9) / 10);
}
