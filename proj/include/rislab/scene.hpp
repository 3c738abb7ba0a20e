// SPDX-License-Identifier: Apache-2.0
#pragma once

// Enclosure templates and their realization into dipole lists.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "rislab/error.hpp"
#include "rislab/random.hpp"
#include "rislab/wavesim.hpp"

namespace rislab {

inline constexpr DipoleProperties kTransceiverProps{1.0, 0.5, 0.0};
inline constexpr DipoleProperties kEnvironmentProps{10.0, 50.0, 1e4};
inline constexpr double kRisChi = 0.2;
inline constexpr double kRisGammaL = 0.03;
inline constexpr std::array<double, 2> kRisStateFres{1.0, 5.0};
inline constexpr double kFenceSpacing = 0.25;

inline DipoleProperties ris_props(std::uint8_t bit) {
  return {kRisStateFres[bit ? 1 : 0], kRisChi, kRisGammaL};
}

// Binary RIS state word; bit i drives RIS element i.
struct RISConfig {
  std::vector<std::uint8_t> bits;

  std::size_t size() const { return bits.size(); }

  std::string to_string() const {
    std::string s(bits.size(), '0');
    for (std::size_t i = 0; i < bits.size(); ++i) s[i] = bits[i] ? '1' : '0';
    return s;
  }

  static RISConfig from_string(std::string_view s) {
    RISConfig c;
    c.bits.reserve(s.size());
    for (char ch : s) {
      if (ch != '0' && ch != '1')
        throw ValidationError("RIS configuration must be a string of 0/1, got '" +
                              std::string(s) + "'");
      c.bits.push_back(ch == '1' ? 1 : 0);
    }
    return c;
  }

  static RISConfig zeros(std::size_t n) { return RISConfig{std::vector<std::uint8_t>(n, 0)}; }

  friend auto operator<=>(const RISConfig&, const RISConfig&) = default;
};

// One path parameter in [0, 1) per scattering object.
struct SOState {
  std::vector<double> t;

  friend bool operator==(const SOState&, const SOState&) = default;
};

struct UeGrid {
  Vec2 lo;
  Vec2 hi;
  int nx = 1;
  int ny = 1;

  // Row-major over y, then x.
  std::vector<Vec2> sites() const {
    std::vector<Vec2> out;
    out.reserve(static_cast<std::size_t>(nx * ny));
    for (int j = 0; j < ny; ++j)
      for (int i = 0; i < nx; ++i) {
        const double fx = nx > 1 ? static_cast<double>(i) / (nx - 1) : 0.0;
        const double fy = ny > 1 ? static_cast<double>(j) / (ny - 1) : 0.0;
        out.push_back({lo.x + fx * (hi.x - lo.x), lo.y + fy * (hi.y - lo.y)});
      }
    return out;
  }

  friend bool operator==(const UeGrid&, const UeGrid&) = default;
};

struct Segment {
  Vec2 a;
  Vec2 b;
  friend bool operator==(const Segment&, const Segment&) = default;
};

// A rigid dipole cluster riding the shared trajectory.
struct ObjectSpec {
  DipoleProperties props;
  std::vector<Vec2> offsets;
  double phase = 0.0;  // added to the object's path parameter

  friend bool operator==(const ObjectSpec&, const ObjectSpec&) = default;
};

struct SceneTemplate {
  FrequencyGrid grid;
  Vec2 bs;
  UeGrid ue;
  std::vector<Segment> walls;
  std::vector<Vec2> ris_sites;
  std::vector<int> sense_idx;  // ascending
  std::vector<ObjectSpec> objects;
  std::vector<Vec2> trajectory;  // closed polyline

  std::size_t n_ris() const { return ris_sites.size(); }
  std::size_t n_sense() const { return sense_idx.size(); }
  std::size_t n_objects() const { return objects.size(); }
  std::vector<Vec2> ue_sites() const { return ue.sites(); }

  double perimeter() const {
    double len = 0.0;
    for (std::size_t i = 0; i < trajectory.size(); ++i)
      len += distance(trajectory[i], trajectory[(i + 1) % trajectory.size()]);
    return len;
  }

  void validate() const;

  friend bool operator==(const SceneTemplate&, const SceneTemplate&) = default;
};

// Dipoles at a, then every `spacing` towards b, with b appended when the
// last step does not land on it.
inline std::vector<Vec2> build_fence(Vec2 a, Vec2 b, double spacing) {
  const double len = distance(a, b);
  if (!(len > 0.0)) throw ValidationError("build_fence: degenerate segment");
  if (!(spacing > 0.0)) throw ValidationError("build_fence: spacing must be positive");
  const auto steps = static_cast<std::size_t>(std::floor(len / spacing + 1e-9));
  const Vec2 dir = (1.0 / len) * (b - a);
  std::vector<Vec2> pts;
  pts.reserve(steps + 2);
  for (std::size_t i = 0; i <= steps; ++i) pts.push_back(a + (static_cast<double>(i) * spacing) * dir);
  if (distance(pts.back(), b) >= kMinSeparation) {
    pts.push_back(b);
  } else {
    pts.back() = b;
  }
  return pts;
}

inline void SceneTemplate::validate() const {
  grid.validate();
  if (ue.nx < 1 || ue.ny < 1) throw ValidationError("scene: UE grid needs nx, ny >= 1");
  if (ris_sites.empty()) throw ValidationError("scene: no RIS elements");
  for (std::size_t i = 0; i < sense_idx.size(); ++i) {
    if (sense_idx[i] < 0 || static_cast<std::size_t>(sense_idx[i]) >= n_ris())
      throw ValidationError("scene: sense index " + std::to_string(sense_idx[i]) +
                            " out of range for " + std::to_string(n_ris()) + " RIS elements");
    if (i > 0 && sense_idx[i] <= sense_idx[i - 1])
      throw ValidationError("scene: sense indices must be distinct");
  }
  for (const auto& w : walls)
    if (!(distance(w.a, w.b) > 0.0)) throw ValidationError("scene: degenerate wall segment");
  for (std::size_t j = 0; j < objects.size(); ++j) {
    objects[j].props.validate();
    if (objects[j].offsets.empty())
      throw ValidationError("scene: object " + std::to_string(j) + " has no dipoles");
  }
  if (!objects.empty() && (trajectory.size() < 2 || !(perimeter() > 0.0)))
    throw ValidationError("scene: objects need a trajectory with at least 2 distinct vertices");

  if (!walls.empty()) {
    Vec2 lo{walls[0].a}, hi{walls[0].a};
    for (const auto& w : walls)
      for (Vec2 p : {w.a, w.b}) {
        lo = {std::min(lo.x, p.x), std::min(lo.y, p.y)};
        hi = {std::max(hi.x, p.x), std::max(hi.y, p.y)};
      }
    auto inside = [&](Vec2 p) {
      return p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y;
    };
    std::vector<Vec2> pts{bs};
    for (auto s : ue_sites()) pts.push_back(s);
    for (auto s : ris_sites) pts.push_back(s);
    for (auto s : trajectory) pts.push_back(s);
    for (auto p : pts)
      if (!inside(p)) throw ValidationError("scene: entity outside the walled enclosure");
  }

  // Static dipoles must be well separated.
  SceneInstance fixed;
  fixed.add(bs, kTransceiverProps, Role::kBS);
  for (auto s : ue_sites()) fixed.add(s, kTransceiverProps, Role::kUE);
  for (const auto& w : walls)
    for (auto p : build_fence(w.a, w.b, kFenceSpacing)) fixed.add(p, kEnvironmentProps, Role::kWall);
  for (auto s : ris_sites) fixed.add(s, ris_props(0), Role::kRIS);
  fixed.check_separation(kMinSeparation);
}

// Point at arc-length fraction u of the closed trajectory.
inline Vec2 trajectory_point(const SceneTemplate& tpl, double u) {
  u -= std::floor(u);
  double target = u * tpl.perimeter();
  const std::size_t m = tpl.trajectory.size();
  for (std::size_t i = 0; i < m; ++i) {
    const Vec2 a = tpl.trajectory[i];
    const Vec2 b = tpl.trajectory[(i + 1) % m];
    const double len = distance(a, b);
    if (target <= len || i + 1 == m) {
      const double s = len > 0.0 ? std::min(target / len, 1.0) : 0.0;
      return a + s * (b - a);
    }
    target -= len;
  }
  return tpl.trajectory.front();
}

namespace scene_detail {

inline void check_shapes(const SceneTemplate& tpl, const RISConfig& k, const SOState& p) {
  if (k.size() != tpl.n_ris())
    throw ValidationError("realize: configuration has " + std::to_string(k.size()) +
                          " bits, template has " + std::to_string(tpl.n_ris()) + " RIS elements");
  if (p.t.size() != tpl.n_objects())
    throw ValidationError("realize: SO state has " + std::to_string(p.t.size()) +
                          " entries, template has " + std::to_string(tpl.n_objects()) + " objects");
}

inline void append_environment(SceneInstance& out, const SceneTemplate& tpl, const RISConfig& k,
                               const SOState& p) {
  for (const auto& w : tpl.walls)
    for (auto pt : build_fence(w.a, w.b, kFenceSpacing)) out.add(pt, kEnvironmentProps, Role::kWall);
  std::size_t next_sense = 0;
  for (std::size_t i = 0; i < tpl.n_ris(); ++i) {
    const bool sensing = next_sense < tpl.sense_idx.size() &&
                         static_cast<std::size_t>(tpl.sense_idx[next_sense]) == i;
    if (sensing) ++next_sense;
    out.add(tpl.ris_sites[i], ris_props(k.bits[i]), sensing ? Role::kSense : Role::kRIS);
  }
  for (std::size_t j = 0; j < tpl.n_objects(); ++j) {
    const auto& obj = tpl.objects[j];
    const Vec2 anchor = trajectory_point(tpl, (p.t[j] - std::floor(p.t[j])) + obj.phase);
    for (auto off : obj.offsets) out.add(anchor + off, obj.props, Role::kObject);
  }
}

}  // namespace scene_detail

// Every dipole except the UE: BS, walls, RIS (bit order), objects.
inline SceneInstance realize_base(const SceneTemplate& tpl, const RISConfig& k, const SOState& p) {
  scene_detail::check_shapes(tpl, k, p);
  SceneInstance out;
  out.add(tpl.bs, kTransceiverProps, Role::kBS);
  scene_detail::append_environment(out, tpl, k, p);
  out.check_separation(kMinSeparation);
  return out;
}

// Full dipole list: BS, UE, walls, RIS (bit order), objects.
inline SceneInstance realize(const SceneTemplate& tpl, const RISConfig& k, const SOState& p,
                             std::size_t ue_site) {
  scene_detail::check_shapes(tpl, k, p);
  const auto sites = tpl.ue_sites();
  if (ue_site >= sites.size())
    throw ValidationError("realize: UE site " + std::to_string(ue_site) + " out of range");
  SceneInstance out;
  out.add(tpl.bs, kTransceiverProps, Role::kBS);
  out.add(sites[ue_site], kTransceiverProps, Role::kUE);
  scene_detail::append_environment(out, tpl, k, p);
  out.check_separation(kMinSeparation);
  return out;
}

inline SOState sample_so_state(Rng& rng, const SceneTemplate& tpl) {
  if (tpl.n_objects() == 0) throw ValidationError("sample_so_state: template has no objects");
  SOState s;
  s.t.reserve(tpl.n_objects());
  for (std::size_t j = 0; j < tpl.n_objects(); ++j) s.t.push_back(rng.uniform());
  return s;
}

// ---------------------------------------------------------------------------
// Scene file format.

namespace scene_detail {

inline std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t' || s[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < s.size() && s[j] != ' ' && s[j] != '\t' && s[j] != '\r') ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

class LineError {
 public:
  explicit LineError(int line) : line_(line) {}
  [[noreturn]] void fail(const std::string& msg) const {
    throw ValidationError("scene line " + std::to_string(line_) + ": " + msg);
  }

 private:
  int line_;
};

inline double to_double(std::string_view tok, const LineError& at) {
  double v = 0.0;
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size() || !std::isfinite(v))
    at.fail("expected a number, got '" + std::string(tok) + "'");
  return v;
}

inline int to_int(std::string_view tok, const LineError& at) {
  int v = 0;
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
    at.fail("expected an integer, got '" + std::string(tok) + "'");
  return v;
}

inline std::vector<double> numbers(std::span<const std::string_view> toks, std::size_t want,
                                   const LineError& at, const std::string& what) {
  if (toks.size() != want)
    at.fail(what + " expects " + std::to_string(want) + " fields, got " +
            std::to_string(toks.size()));
  std::vector<double> v;
  for (auto t : toks) v.push_back(to_double(t, at));
  return v;
}

}  // namespace scene_detail

inline SceneTemplate parse_scene(std::string_view text) {
  using namespace scene_detail;
  SceneTemplate tpl;
  std::map<std::string, int> seen;
  std::string section;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t eol = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, eol - pos);
    pos = eol + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    auto toks = split_ws(line);
    if (toks.empty()) {
      if (eol == text.size()) break;
      continue;
    }
    const LineError at(line_no);
    std::span<const std::string_view> fields(toks);
    if (toks[0].front() == '[') {
      if (toks[0].back() != ']') at.fail("malformed section header '" + std::string(toks[0]) + "'");
      section = std::string(toks[0].substr(1, toks[0].size() - 2));
      fields = fields.subspan(1);
      ++seen[section];
      if (section == "object") {
        const auto v = numbers(fields, 3, at, "[object]");
        tpl.objects.push_back(ObjectSpec{{v[0], v[1], v[2]}, {}, 0.0});
        try {
          tpl.objects.back().props.validate();
        } catch (const ValidationError& e) {
          at.fail(e.what());
        }
        continue;
      }
      if (section == "sense" || section == "trajectory" || section == "ris" || section == "wall") {
        if (fields.empty()) continue;  // entities may follow on their own lines
      } else if (section != "frequency" && section != "bs" && section != "ue_grid") {
        at.fail("unknown section [" + section + "]");
      } else if (seen[section] > 1) {
        at.fail("duplicate section [" + section + "]");
      }
    }
    if (section.empty()) at.fail("entity line outside any section");

    if (section == "frequency") {
      if (fields.size() != 3) at.fail("[frequency] expects f_center half_band n_points");
      tpl.grid = {to_double(fields[0], at), to_double(fields[1], at), to_int(fields[2], at)};
      try {
        tpl.grid.validate();
      } catch (const ValidationError& e) {
        at.fail(e.what());
      }
    } else if (section == "bs") {
      const auto v = numbers(fields, 2, at, "[bs]");
      tpl.bs = {v[0], v[1]};
    } else if (section == "ue_grid") {
      if (fields.size() != 6) at.fail("[ue_grid] expects x0 y0 x1 y1 nx ny");
      tpl.ue = {{to_double(fields[0], at), to_double(fields[1], at)},
                {to_double(fields[2], at), to_double(fields[3], at)},
                to_int(fields[4], at),
                to_int(fields[5], at)};
      if (tpl.ue.nx < 1 || tpl.ue.ny < 1) at.fail("[ue_grid] needs nx, ny >= 1");
    } else if (section == "wall") {
      const auto v = numbers(fields, 4, at, "[wall]");
      tpl.walls.push_back({{v[0], v[1]}, {v[2], v[3]}});
    } else if (section == "ris") {
      const auto v = numbers(fields, 2, at, "[ris]");
      tpl.ris_sites.push_back({v[0], v[1]});
    } else if (section == "sense") {
      for (auto f : fields) tpl.sense_idx.push_back(to_int(f, at));
    } else if (section == "trajectory") {
      const auto v = numbers(fields, 2, at, "[trajectory]");
      tpl.trajectory.push_back({v[0], v[1]});
    } else if (section == "object") {
      if (fields[0] == "offset") {
        const auto v = numbers(fields.subspan(1), 2, at, "offset");
        tpl.objects.back().offsets.push_back({v[0], v[1]});
      } else if (fields[0] == "phase") {
        tpl.objects.back().phase = numbers(fields.subspan(1), 1, at, "phase")[0];
      } else {
        at.fail("expected 'offset dx dy' or 'phase v' inside [object]");
      }
    }
  }
  for (const char* required : {"frequency", "bs", "ue_grid", "ris"})
    if (!seen.count(required))
      throw ValidationError(std::string("scene: missing [") + required + "] section");
  std::sort(tpl.sense_idx.begin(), tpl.sense_idx.end());
  tpl.validate();
  return tpl;
}

// Canonical form: one entity per line, shortest round-trip decimals.
inline std::string write_scene(const SceneTemplate& tpl) {
  using scene_detail::fmt;
  std::ostringstream os;
  os << "# rislab scene v1 (lengths in center wavelengths)\n";
  os << "[frequency] " << fmt(tpl.grid.f_center) << ' ' << fmt(tpl.grid.half_band) << ' '
     << tpl.grid.n_points << '\n';
  os << "[bs] " << fmt(tpl.bs.x) << ' ' << fmt(tpl.bs.y) << '\n';
  os << "[ue_grid] " << fmt(tpl.ue.lo.x) << ' ' << fmt(tpl.ue.lo.y) << ' ' << fmt(tpl.ue.hi.x)
     << ' ' << fmt(tpl.ue.hi.y) << ' ' << tpl.ue.nx << ' ' << tpl.ue.ny << '\n';
  for (const auto& w : tpl.walls)
    os << "[wall] " << fmt(w.a.x) << ' ' << fmt(w.a.y) << ' ' << fmt(w.b.x) << ' ' << fmt(w.b.y)
       << '\n';
  for (const auto& r : tpl.ris_sites) os << "[ris] " << fmt(r.x) << ' ' << fmt(r.y) << '\n';
  if (!tpl.sense_idx.empty()) {
    os << "[sense]";
    for (int i : tpl.sense_idx) os << ' ' << i;
    os << '\n';
  }
  for (const auto& o : tpl.objects) {
    os << "[object] " << fmt(o.props.f_res) << ' ' << fmt(o.props.chi) << ' '
       << fmt(o.props.gamma_l) << '\n';
    for (const auto& off : o.offsets) os << "offset " << fmt(off.x) << ' ' << fmt(off.y) << '\n';
    if (o.phase != 0.0) os << "phase " << fmt(o.phase) << '\n';
  }
  for (const auto& v : tpl.trajectory) os << "[trajectory] " << fmt(v.x) << ' ' << fmt(v.y) << '\n';
  return os.str();
}

// Square enclosure centred on the origin. Each wall carries a fence over
// 80% of its length, starting at one corner (pinwheel), and an RIS group
// on the remaining stretch. Objects are 2x2 clusters of side lambda/4 on a
// square loop, with phase steps of 0.22 so that no two objects land on the
// same point when every path parameter sits at a bucket centre.
struct EnclosureLayout {
  double side = 15.0;
  int ris_per_wall = 5;
  double ris_pitch = 0.5;
  int sense_per_wall = 2;
  Vec2 bs{-6.0, -6.0};
  double ue_half_extent = 3.0;
  int ue_per_axis = 5;
  double loop_half_extent = 5.0;
  int n_objects = 4;
  double phase_step = 0.22;
  DipoleProperties object_props{1.0, 0.5, 0.5};
  FrequencyGrid grid{};
};

inline SceneTemplate make_enclosure(const EnclosureLayout& L) {
  SceneTemplate tpl;
  tpl.grid = L.grid;
  tpl.bs = L.bs;
  tpl.ue = {{-L.ue_half_extent, -L.ue_half_extent}, {L.ue_half_extent, L.ue_half_extent},
            L.ue_per_axis, L.ue_per_axis};
  const double h = 0.5 * L.side;
  const double fence = 0.8 * L.side;
  // Corners counter-clockwise, each wall runs from its corner along +direction.
  const std::array<Vec2, 4> corner{{{-h, -h}, {h, -h}, {h, h}, {-h, h}}};
  const std::array<Vec2, 4> dir{{{1, 0}, {0, 1}, {-1, 0}, {0, -1}}};
  for (int w = 0; w < 4; ++w) {
    tpl.walls.push_back({corner[w], corner[w] + fence * dir[w]});
    // RIS group on the open stretch, ending half a pitch before the next corner.
    const double gap = L.side - fence;
    const double start = fence + 0.5 * (gap - (L.ris_per_wall - 1) * L.ris_pitch);
    for (int e = 0; e < L.ris_per_wall; ++e) {
      tpl.ris_sites.push_back(corner[w] + (start + e * L.ris_pitch) * dir[w]);
      const bool first = e < (L.sense_per_wall + 1) / 2;
      const bool last = e >= L.ris_per_wall - L.sense_per_wall / 2;
      if (first || last) tpl.sense_idx.push_back(w * L.ris_per_wall + e);
    }
  }
  const double q = L.loop_half_extent;
  tpl.trajectory = {{-q, -q}, {q, -q}, {q, q}, {-q, q}};
  for (int j = 0; j < L.n_objects; ++j) {
    ObjectSpec o;
    o.props = L.object_props;
    o.offsets = {{0.0, 0.0}, {0.25, 0.0}, {0.0, 0.25}, {0.25, 0.25}};
    o.phase = std::fmod(j * L.phase_step, 1.0);
    tpl.objects.push_back(o);
  }
  tpl.validate();
  return tpl;
}

inline SceneTemplate default_template() { return make_enclosure(EnclosureLayout{}); }

}  // namespace rislab
