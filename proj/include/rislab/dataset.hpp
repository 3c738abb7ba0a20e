// SPDX-License-Identifier: Apache-2.0
#pragma once

// Supervised records {h_ue, h_sense, p, k, u}: generation, splits,
// feature sequences and the line-oriented file format.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "rislab/error.hpp"
#include "rislab/parallel.hpp"
#include "rislab/provenance.hpp"
#include "rislab/random.hpp"
#include "rislab/scene.hpp"
#include "rislab/wavesim.hpp"

namespace rislab {

inline constexpr int kDatasetVersion = 1;

struct DatasetRecord {
  std::vector<cdouble> h_ue;     // F
  std::vector<cdouble> h_sense;  // S_RIS x F, row-major
  SOState p;
  int k_index = 0;
  std::vector<std::uint8_t> k_onehot;
  Vec2 u;

  friend bool operator==(const DatasetRecord&, const DatasetRecord&) = default;
};

struct DatasetMeta {
  int version = kDatasetVersion;
  int n_freq = 0;
  int n_sense = 0;
  int n_ris = 0;
  int n_configs = 0;
  int n_obj = 0;
  std::uint64_t seed = 0;
  std::string scene_hash;
  int n_so_samples = 0;
  int n_sites = 0;
  std::vector<std::string> configs;  // bit strings, index = k
  std::optional<double> snr_db;
  std::string producer;

  friend bool operator==(const DatasetMeta&, const DatasetMeta&) = default;
};

struct Dataset {
  DatasetMeta meta;
  std::vector<DatasetRecord> records;

  std::size_t size() const { return records.size(); }
  RISConfig config(int k) const {
    return RISConfig::from_string(meta.configs.at(static_cast<std::size_t>(k)));
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline std::vector<std::uint8_t> one_hot(int k_index, int n_classes) {
  if (n_classes < 1 || k_index < 0 || k_index >= n_classes)
    throw ValidationError("one_hot: index " + std::to_string(k_index) + " out of range for " +
                          std::to_string(n_classes) + " classes");
  std::vector<std::uint8_t> v(static_cast<std::size_t>(n_classes), 0);
  v[static_cast<std::size_t>(k_index)] = 1;
  return v;
}

inline int arg_of(std::span<const std::uint8_t> onehot) {
  int found = -1;
  for (std::size_t i = 0; i < onehot.size(); ++i) {
    if (onehot[i] > 1) throw ValidationError("arg_of: entries must be 0 or 1");
    if (onehot[i] == 1) {
      if (found >= 0) throw ValidationError("arg_of: more than one hot entry");
      found = static_cast<int>(i);
    }
  }
  if (found < 0) throw ValidationError("arg_of: no hot entry");
  return found;
}

// Noise with per-record variance set from the record's own mean power;
// h_ue and h_sense are scaled separately. Non-finite snr_db disables it.
inline void add_noise(DatasetRecord& rec, double snr_db, Rng& rng) {
  if (!std::isfinite(snr_db)) return;
  const double ratio = std::pow(10.0, snr_db / 10.0);
  auto perturb = [&](std::vector<cdouble>& h) {
    if (h.empty()) return;
    double power = 0.0;
    for (const auto& v : h) power += std::norm(v);
    power /= static_cast<double>(h.size());
    const double sigma = std::sqrt(power / ratio / 2.0);
    for (auto& v : h) {
      const double re = rng.normal();
      const double im = rng.normal();
      v += cdouble(sigma * re, sigma * im);
    }
  };
  perturb(rec.h_ue);
  perturb(rec.h_sense);
}

struct GenerateOptions {
  std::optional<double> snr_db;
  std::string scene_hash;
  unsigned workers = 1;
};

// K distinct configurations drawn by rejection, then n_so_samples SO states
// per configuration, each simulated at every UE site. Record order is
// (config, SO sample, site); all randomness is keyed by seed and position.
inline Dataset generate(const SceneTemplate& tpl, int n_configs, int n_so_samples,
                        std::uint64_t seed, const GenerateOptions& opts = {}) {
  tpl.validate();
  if (n_configs < 1) throw ValidationError("generate: need at least one configuration");
  if (n_so_samples < 1) throw ValidationError("generate: need at least one SO sample");
  const std::size_t n_ris = tpl.n_ris();
  if (n_ris < 63 && static_cast<std::uint64_t>(n_configs) > (std::uint64_t{1} << n_ris))
    throw ValidationError("generate: " + std::to_string(n_configs) +
                          " distinct configurations requested but only 2^" +
                          std::to_string(n_ris) + " exist");

  std::vector<RISConfig> configs;
  {
    Rng rng = derive_stream(seed, {stream::kConfigs});
    std::set<RISConfig> seen;
    while (configs.size() < static_cast<std::size_t>(n_configs)) {
      RISConfig c;
      c.bits.resize(n_ris);
      for (auto& b : c.bits) b = static_cast<std::uint8_t>(rng.below(2));
      if (seen.insert(c).second) configs.push_back(std::move(c));
    }
  }

  const auto sites = tpl.ue_sites();
  const std::size_t n_sites = sites.size();
  const std::size_t n_pairs = static_cast<std::size_t>(n_configs) * static_cast<std::size_t>(n_so_samples);

  Dataset ds;
  ds.meta.n_freq = tpl.grid.n_points;
  ds.meta.n_sense = static_cast<int>(tpl.n_sense());
  ds.meta.n_ris = static_cast<int>(n_ris);
  ds.meta.n_configs = n_configs;
  ds.meta.n_obj = static_cast<int>(tpl.n_objects());
  ds.meta.seed = seed;
  ds.meta.scene_hash = opts.scene_hash;
  ds.meta.n_so_samples = n_so_samples;
  ds.meta.n_sites = static_cast<int>(n_sites);
  ds.meta.snr_db = opts.snr_db;
  for (const auto& c : configs) ds.meta.configs.push_back(c.to_string());
  ds.records.resize(n_pairs * n_sites);

  parallel_for(n_pairs, opts.workers, [&](std::size_t pair) {
    const auto c = static_cast<int>(pair / static_cast<std::size_t>(n_so_samples));
    Rng rng = derive_stream(seed, {stream::kSoState, pair});
    const SOState p = tpl.n_objects() > 0 ? sample_so_state(rng, tpl) : SOState{};
    std::vector<SiteChannels> chans;
    try {
      chans = sweep_sites(realize_base(tpl, configs[static_cast<std::size_t>(c)], p), sites,
                          kTransceiverProps, tpl.grid, kMinSeparation);
    } catch (const Error& e) {
      throw NumericalError("generate: config " + std::to_string(c) + ", SO sample " +
                           std::to_string(pair % static_cast<std::size_t>(n_so_samples)) + ": " +
                           e.what());
    }
    for (std::size_t s = 0; s < n_sites; ++s) {
      const std::size_t l = pair * n_sites + s;
      auto& rec = ds.records[l];
      rec.h_ue = std::move(chans[s].h_ue);
      rec.h_sense = std::move(chans[s].h_sense);
      rec.p = p;
      rec.k_index = c;
      rec.k_onehot = one_hot(c, n_configs);
      rec.u = sites[s];
      if (opts.snr_db && std::isfinite(*opts.snr_db)) {
        Rng noise = derive_stream(seed, {stream::kNoise, l});
        add_noise(rec, *opts.snr_db, noise);
      }
    }
  });
  return ds;
}

// ---------------------------------------------------------------------------
// Splits.

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

// Seeded shuffle; the last floor(L/5) indices are the test set and the rest
// is cut again into floor(4R/5) training and the remainder validation.
inline Split split(std::size_t n_records, std::uint64_t seed) {
  if (n_records < 5) throw ValidationError("split: need at least 5 records");
  std::vector<std::size_t> perm(n_records);
  for (std::size_t i = 0; i < n_records; ++i) perm[i] = i;
  Rng rng = derive_stream(seed, {stream::kSplit});
  rng.shuffle(perm);
  const std::size_t n_test = n_records / 5;
  const std::size_t rest = n_records - n_test;
  const std::size_t n_train = (4 * rest) / 5;
  Split s;
  s.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train),
               perm.begin() + static_cast<std::ptrdiff_t>(rest));
  s.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(rest), perm.end());
  return s;
}

inline Split split(const Dataset& ds, std::uint64_t seed) { return split(ds.size(), seed); }

// ---------------------------------------------------------------------------
// Features. A sequence has one column per frequency step with rows
// [Re h_ue, Im h_ue, Re h_sense(1..S), Im h_sense(1..S), p(1..n_obj)].

using FeatureSequence = Eigen::MatrixXd;  // D x F

inline int feature_width(int n_sense, int n_obj) { return 2 + 2 * n_sense + n_obj; }

inline FeatureSequence raw_features(const DatasetRecord& rec, int n_freq, int n_sense) {
  const int n_obj = static_cast<int>(rec.p.t.size());
  if (static_cast<int>(rec.h_ue.size()) != n_freq ||
      static_cast<int>(rec.h_sense.size()) != n_sense * n_freq)
    throw ValidationError("featurize: record shape does not match F/S_RIS");
  FeatureSequence x(feature_width(n_sense, n_obj), n_freq);
  for (int f = 0; f < n_freq; ++f) {
    x(0, f) = rec.h_ue[static_cast<std::size_t>(f)].real();
    x(1, f) = rec.h_ue[static_cast<std::size_t>(f)].imag();
    for (int s = 0; s < n_sense; ++s) {
      const auto v = rec.h_sense[static_cast<std::size_t>(s * n_freq + f)];
      x(2 + s, f) = v.real();
      x(2 + n_sense + s, f) = v.imag();
    }
    for (int j = 0; j < n_obj; ++j) x(2 + 2 * n_sense + j, f) = rec.p.t[static_cast<std::size_t>(j)];
  }
  return x;
}

struct NormStats {
  int n_freq = 0;
  int n_sense = 0;
  std::vector<double> mean;
  std::vector<double> stddev;  // already floored

  int width() const { return static_cast<int>(mean.size()); }
  friend bool operator==(const NormStats&, const NormStats&) = default;
};

inline constexpr double kStdFloor = 1e-8;

// Per-feature mean and population standard deviation over every step of
// every listed record. Columns that never vary keep their value as the mean
// so they standardize to exact zeros.
inline NormStats fit_norm(const Dataset& ds, std::span<const std::size_t> train) {
  if (train.empty()) throw ValidationError("fit_norm: empty training split");
  const int nf = ds.meta.n_freq;
  const int ns = ds.meta.n_sense;
  const int d = feature_width(ns, ds.meta.n_obj);
  Eigen::ArrayXd sum = Eigen::ArrayXd::Zero(d);
  Eigen::ArrayXd lo = Eigen::ArrayXd::Constant(d, std::numeric_limits<double>::infinity());
  Eigen::ArrayXd hi = -lo;
  for (auto i : train) {
    const auto x = raw_features(ds.records[i], nf, ns);
    sum += x.rowwise().sum().array();
    lo = lo.min(x.rowwise().minCoeff().array());
    hi = hi.max(x.rowwise().maxCoeff().array());
  }
  const double count = static_cast<double>(train.size()) * nf;
  Eigen::ArrayXd mean = sum / count;
  for (int j = 0; j < d; ++j)
    if (lo(j) == hi(j)) mean(j) = lo(j);
  Eigen::ArrayXd sq = Eigen::ArrayXd::Zero(d);
  for (auto i : train) {
    const auto x = raw_features(ds.records[i], nf, ns);
    sq += (x.array().colwise() - mean).square().rowwise().sum();
  }
  NormStats st;
  st.n_freq = nf;
  st.n_sense = ns;
  st.mean.assign(mean.begin(), mean.end());
  st.stddev.resize(static_cast<std::size_t>(d));
  for (int j = 0; j < d; ++j) st.stddev[static_cast<std::size_t>(j)] = std::max(std::sqrt(sq(j) / count), kStdFloor);
  return st;
}

inline FeatureSequence featurize(const DatasetRecord& rec, const NormStats& st) {
  auto x = raw_features(rec, st.n_freq, st.n_sense);
  if (x.rows() != st.width())
    throw ValidationError("featurize: record width " + std::to_string(x.rows()) +
                          " does not match normalization width " + std::to_string(st.width()));
  for (Eigen::Index j = 0; j < x.rows(); ++j)
    x.row(j) = (x.row(j).array() - st.mean[static_cast<std::size_t>(j)]) / st.stddev[static_cast<std::size_t>(j)];
  return x;
}

// ---------------------------------------------------------------------------
// File format: line 1 is a JSON metadata object, then one JSON object per
// record. Reals are printed with 17 significant digits.

namespace dataset_detail {

inline void put(std::string& out, double v) {
  char buf[40];
  const int n = std::snprintf(buf, sizeof(buf), "%.17g", v);
  out.append(buf, static_cast<std::size_t>(n));
}

inline void put(std::string& out, cdouble v) {
  out.push_back('[');
  put(out, v.real());
  out.push_back(',');
  put(out, v.imag());
  out.push_back(']');
}

inline nlohmann::json meta_to_json(const DatasetMeta& m) {
  nlohmann::json j;
  j["version"] = m.version;
  j["F"] = m.n_freq;
  j["S_RIS"] = m.n_sense;
  j["N_RIS"] = m.n_ris;
  j["K"] = m.n_configs;
  j["n_obj"] = m.n_obj;
  j["seed"] = m.seed;
  j["scene_hash"] = m.scene_hash;
  j["n_so_samples"] = m.n_so_samples;
  j["n_sites"] = m.n_sites;
  j["configs"] = m.configs;
  j["snr_db"] = m.snr_db ? nlohmann::json(*m.snr_db) : nlohmann::json(nullptr);
  j["producer"] = m.producer;
  return j;
}

}  // namespace dataset_detail

inline std::string dataset_to_string(const Dataset& ds) {
  using dataset_detail::put;
  std::string out = dataset_detail::meta_to_json(ds.meta).dump();
  out.push_back('\n');
  for (const auto& r : ds.records) {
    out += "{\"h_ue\":[";
    for (std::size_t f = 0; f < r.h_ue.size(); ++f) {
      if (f) out.push_back(',');
      put(out, r.h_ue[f]);
    }
    out += "],\"h_sense\":[";
    const std::size_t nf = r.h_ue.size();
    const std::size_t ns = nf ? r.h_sense.size() / nf : 0;
    for (std::size_t s = 0; s < ns; ++s) {
      if (s) out.push_back(',');
      out.push_back('[');
      for (std::size_t f = 0; f < nf; ++f) {
        if (f) out.push_back(',');
        put(out, r.h_sense[s * nf + f]);
      }
      out.push_back(']');
    }
    out += "],\"p\":[";
    for (std::size_t j = 0; j < r.p.t.size(); ++j) {
      if (j) out.push_back(',');
      put(out, r.p.t[j]);
    }
    out += "],\"k_index\":" + std::to_string(r.k_index) + ",\"k_onehot\":[";
    for (std::size_t j = 0; j < r.k_onehot.size(); ++j) {
      if (j) out.push_back(',');
      out.push_back(r.k_onehot[j] ? '1' : '0');
    }
    out += "],\"u\":[";
    put(out, r.u.x);
    out.push_back(',');
    put(out, r.u.y);
    out += "]}\n";
  }
  return out;
}

inline Dataset dataset_from_string(std::string_view text) {
  using nlohmann::json;
  Dataset ds;
  std::size_t pos = 0;
  int line_no = 0;
  auto fail = [&](const std::string& msg) -> void {
    throw ValidationError("dataset line " + std::to_string(line_no) + ": " + msg);
  };
  auto next_line = [&](std::string_view& line) {
    if (pos >= text.size()) return false;
    const std::size_t eol = std::min(text.find('\n', pos), text.size());
    line = text.substr(pos, eol - pos);
    pos = eol + 1;
    ++line_no;
    return true;
  };
  std::string_view line;
  if (!next_line(line)) throw ValidationError("dataset: empty file");
  try {
    const json m = json::parse(line);
    ds.meta.version = m.at("version").get<int>();
    if (ds.meta.version != kDatasetVersion)
      fail("unsupported dataset version " + std::to_string(ds.meta.version));
    ds.meta.n_freq = m.at("F").get<int>();
    ds.meta.n_sense = m.at("S_RIS").get<int>();
    ds.meta.n_ris = m.at("N_RIS").get<int>();
    ds.meta.n_configs = m.at("K").get<int>();
    ds.meta.n_obj = m.at("n_obj").get<int>();
    ds.meta.seed = m.at("seed").get<std::uint64_t>();
    ds.meta.scene_hash = m.at("scene_hash").get<std::string>();
    ds.meta.n_so_samples = m.at("n_so_samples").get<int>();
    ds.meta.n_sites = m.at("n_sites").get<int>();
    ds.meta.configs = m.at("configs").get<std::vector<std::string>>();
    if (!m.at("snr_db").is_null()) ds.meta.snr_db = m.at("snr_db").get<double>();
    ds.meta.producer = m.value("producer", std::string());
  } catch (const json::exception& e) {
    fail(std::string("bad metadata: ") + e.what());
  }
  const auto& meta = ds.meta;
  if (static_cast<int>(meta.configs.size()) != meta.n_configs)
    fail("metadata lists " + std::to_string(meta.configs.size()) + " configs, K = " +
         std::to_string(meta.n_configs));
  for (const auto& c : meta.configs)
    if (static_cast<int>(c.size()) != meta.n_ris) fail("config length differs from N_RIS");

  const auto nf = static_cast<std::size_t>(meta.n_freq);
  const auto ns = static_cast<std::size_t>(meta.n_sense);
  auto as_complex = [&](const json& v) {
    if (!v.is_array() || v.size() != 2) fail("complex values must be [re, im] pairs");
    return cdouble(v[0].get<double>(), v[1].get<double>());
  };
  while (next_line(line)) {
    if (line.empty() && pos >= text.size()) break;
    DatasetRecord r;
    try {
      const json j = json::parse(line);
      const auto& hu = j.at("h_ue");
      if (hu.size() != nf)
        fail("h_ue has " + std::to_string(hu.size()) + " entries, header F = " + std::to_string(nf));
      for (const auto& v : hu) r.h_ue.push_back(as_complex(v));
      const auto& hs = j.at("h_sense");
      if (hs.size() != ns) fail("h_sense has " + std::to_string(hs.size()) + " rows, header S_RIS = " + std::to_string(ns));
      r.h_sense.reserve(ns * nf);
      for (const auto& row : hs) {
        if (row.size() != nf) fail("h_sense row length differs from header F");
        for (const auto& v : row) r.h_sense.push_back(as_complex(v));
      }
      r.p.t = j.at("p").get<std::vector<double>>();
      if (static_cast<int>(r.p.t.size()) != meta.n_obj) fail("p length differs from n_obj");
      r.k_index = j.at("k_index").get<int>();
      r.k_onehot = j.at("k_onehot").get<std::vector<std::uint8_t>>();
      if (static_cast<int>(r.k_onehot.size()) != meta.n_configs) fail("k_onehot length differs from K");
      if (arg_of(r.k_onehot) != r.k_index) fail("k_onehot disagrees with k_index");
      const auto u = j.at("u").get<std::vector<double>>();
      if (u.size() != 2) fail("u must have 2 coordinates");
      r.u = {u[0], u[1]};
    } catch (const json::exception& e) {
      fail(std::string("malformed record: ") + e.what());
    } catch (const ValidationError& e) {
      if (std::string_view(e.what()).starts_with("dataset line")) throw;
      fail(e.what());
    }
    ds.records.push_back(std::move(r));
  }
  const std::size_t expected = static_cast<std::size_t>(meta.n_configs) *
                               static_cast<std::size_t>(meta.n_so_samples) *
                               static_cast<std::size_t>(meta.n_sites);
  if (expected != 0 && ds.records.size() != expected)
    throw ValidationError("dataset: expected " + std::to_string(expected) + " records, found " +
                          std::to_string(ds.records.size()));
  return ds;
}

inline void save(const Dataset& ds, const std::string& path) { write_file(path, dataset_to_string(ds)); }

inline Dataset load_dataset(const std::string& path) { return dataset_from_string(read_file(path)); }

}  // namespace rislab
