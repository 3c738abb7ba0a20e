// SPDX-License-Identifier: Apache-2.0
#pragma once

// Offline calibration of SO-state buckets to RIS configurations, sensing
// fingerprints, and the closed-loop runtime step.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rislab/dataset.hpp"
#include "rislab/error.hpp"
#include "rislab/metrics.hpp"
#include "rislab/neural.hpp"
#include "rislab/parallel.hpp"
#include "rislab/provenance.hpp"
#include "rislab/scene.hpp"
#include "rislab/wavesim.hpp"

namespace rislab {

using BucketKey = std::vector<int>;

inline BucketKey quantize_so(const SOState& p, int resolution) {
  if (resolution < 1) throw ValidationError("quantize_so: resolution must be >= 1");
  BucketKey key;
  key.reserve(p.t.size());
  for (double t : p.t) {
    const int b = static_cast<int>(std::floor(t * resolution));
    key.push_back(std::clamp(b, 0, resolution - 1));
  }
  return key;
}

inline std::size_t bucket_count(int resolution, std::size_t n_obj) {
  std::size_t n = 1;
  for (std::size_t j = 0; j < n_obj; ++j) n *= static_cast<std::size_t>(resolution);
  return n;
}

// Lexicographic order, object 0 most significant.
inline std::size_t bucket_index(const BucketKey& key, int resolution) {
  std::size_t idx = 0;
  for (int b : key) {
    if (b < 0 || b >= resolution) throw ValidationError("bucket key entry out of range");
    idx = idx * static_cast<std::size_t>(resolution) + static_cast<std::size_t>(b);
  }
  return idx;
}

inline BucketKey bucket_key(std::size_t index, int resolution, std::size_t n_obj) {
  BucketKey key(n_obj);
  for (std::size_t j = n_obj; j-- > 0;) {
    key[j] = static_cast<int>(index % static_cast<std::size_t>(resolution));
    index /= static_cast<std::size_t>(resolution);
  }
  return key;
}

inline SOState cell_center(const BucketKey& key, int resolution) {
  SOState p;
  for (int b : key) p.t.push_back((b + 0.5) / resolution);
  return p;
}

struct CodebookEntry {
  int k = 0;  // candidate index
  double mse = 0.0;
};

// Sensed h_sense stacked as [Re(row-major S x F), Im(row-major S x F)].
struct Fingerprint {
  std::size_t probe = 0;  // index into Codebook::probes
  std::size_t bucket = 0;
  std::size_t site = 0;
  std::vector<double> values;
};

struct Codebook {
  int resolution = 1;
  int n_obj = 0;
  int n_freq = 0;
  int n_sense = 0;
  std::string scene_hash;
  std::string checkpoint_hash;
  std::string dataset_hash;
  std::string scene_text;               // the calibrated scene, for runtime replay
  std::vector<std::string> candidates;  // bit strings, index = k
  std::vector<CodebookEntry> entries;   // bucket order
  std::vector<std::string> probes;      // sensing configurations with fingerprints
  std::vector<Fingerprint> fingerprints;
  std::string producer;

  std::size_t n_buckets() const { return entries.size(); }
  const CodebookEntry& lookup(const BucketKey& key) const { return entries.at(bucket_index(key, resolution)); }
  std::optional<std::size_t> probe_index(const std::string& bits) const {
    for (std::size_t i = 0; i < probes.size(); ++i)
      if (probes[i] == bits) return i;
    return std::nullopt;
  }

  friend bool operator==(const Codebook&, const Codebook&) = default;
};

inline bool operator==(const CodebookEntry& a, const CodebookEntry& b) { return a.k == b.k && a.mse == b.mse; }
inline bool operator==(const Fingerprint& a, const Fingerprint& b) {
  return a.probe == b.probe && a.bucket == b.bucket && a.site == b.site && a.values == b.values;
}

inline std::vector<double> stack_sense(std::span<const cdouble> h_sense) {
  std::vector<double> v(2 * h_sense.size());
  for (std::size_t i = 0; i < h_sense.size(); ++i) {
    v[i] = h_sense[i].real();
    v[h_sense.size() + i] = h_sense[i].imag();
  }
  return v;
}

// The trained localizer plus the statistics its inputs were standardized with.
struct Localizer {
  BiLstmModel model;
  NormStats norm;
};

// Predicted coordinates for every site from simulated channels, with the
// SO features set to p.
inline std::vector<Vec2> localize_sites(const Localizer& loc, const std::vector<SiteChannels>& chans,
                                        const SOState& p, int k) {
  std::vector<FeatureSequence> xs;
  xs.reserve(chans.size());
  for (const auto& c : chans) {
    DatasetRecord r;
    r.h_ue = c.h_ue;
    r.h_sense = c.h_sense;
    r.p = p;
    xs.push_back(featurize(r, loc.norm));
  }
  const std::vector<int> ks(chans.size(), k);
  return predict_coords(loc.model, xs, ks);
}

// Localizer MSE over all UE sites for one (config, SO state).
inline double expected_mse(const SceneTemplate& tpl, const Localizer& loc, const RISConfig& config,
                           int k, const SOState& p) {
  const auto sites = tpl.ue_sites();
  const auto chans = sweep_sites(realize_base(tpl, config, p), sites, kTransceiverProps, tpl.grid, kMinSeparation);
  return mse(localize_sites(loc, chans, p, k), sites);
}

struct CalibrateOptions {
  unsigned workers = 1;
};

// Every bucket is represented by its cell centre. The stored configuration
// minimizes the localizer's MSE over all UE sites (ties to the lowest k).
// Fingerprints are recorded at every site for the all-zeros probe and for
// each configuration some bucket selects, since sensing happens under the
// configuration applied at the previous step.
inline Codebook calibrate(const Localizer& loc, const SceneTemplate& tpl,
                          std::span<const RISConfig> candidates, int resolution,
                          const CalibrateOptions& opts = {}) {
  tpl.validate();
  if (candidates.empty()) throw ValidationError("calibrate: no candidate configurations");
  if (resolution < 1) throw ValidationError("calibrate: resolution must be >= 1");
  if (loc.model.dims.n_classes != static_cast<int>(candidates.size()))
    throw ValidationError("calibrate: model has " + std::to_string(loc.model.dims.n_classes) +
                          " classes but " + std::to_string(candidates.size()) + " candidates were given");
  for (const auto& c : candidates)
    if (c.bits.size() != tpl.n_ris()) throw ValidationError("calibrate: candidate length differs from N_RIS");

  Codebook cb;
  cb.resolution = resolution;
  cb.n_obj = static_cast<int>(tpl.n_objects());
  cb.n_freq = tpl.grid.n_points;
  cb.n_sense = static_cast<int>(tpl.n_sense());
  for (const auto& c : candidates) cb.candidates.push_back(c.to_string());

  const std::size_t nb = bucket_count(resolution, tpl.n_objects());
  cb.entries.resize(nb);
  std::vector<std::string> gaps(nb);
  parallel_for(nb, opts.workers, [&](std::size_t b) {
    const SOState p = cell_center(bucket_key(b, resolution, tpl.n_objects()), resolution);
    CodebookEntry best{-1, std::numeric_limits<double>::infinity()};
    try {
      for (std::size_t k = 0; k < candidates.size(); ++k) {
        const double e = expected_mse(tpl, loc, candidates[k], static_cast<int>(k), p);
        if (e < best.mse) best = {static_cast<int>(k), e};
      }
    } catch (const Error& e) {
      gaps[b] = e.what();
      return;
    }
    cb.entries[b] = best;
  });
  std::string gap_report;
  std::size_t n_gaps = 0;
  for (std::size_t b = 0; b < nb; ++b)
    if (!gaps[b].empty()) {
      if (n_gaps++ < 5) gap_report += "\n  bucket " + std::to_string(b) + ": " + gaps[b];
    }
  if (n_gaps) throw NumericalError("calibrate: " + std::to_string(n_gaps) + " bucket(s) left uncalibrated" + gap_report);

  cb.probes.push_back(RISConfig::zeros(tpl.n_ris()).to_string());
  std::vector<bool> chosen(candidates.size(), false);
  for (const auto& e : cb.entries) chosen[static_cast<std::size_t>(e.k)] = true;
  for (std::size_t k = 0; k < candidates.size(); ++k)
    if (chosen[k] && !cb.probe_index(cb.candidates[k])) cb.probes.push_back(cb.candidates[k]);

  const auto sites = tpl.ue_sites();
  std::vector<std::vector<Fingerprint>> per_bucket(nb);
  parallel_for(nb, opts.workers, [&](std::size_t b) {
    const SOState p = cell_center(bucket_key(b, resolution, tpl.n_objects()), resolution);
    for (std::size_t q = 0; q < cb.probes.size(); ++q) {
      const auto chans = sweep_sites(realize_base(tpl, RISConfig::from_string(cb.probes[q]), p), sites,
                                     kTransceiverProps, tpl.grid, kMinSeparation);
      for (std::size_t s = 0; s < sites.size(); ++s)
        per_bucket[b].push_back({q, b, s, stack_sense(chans[s].h_sense)});
    }
  });
  // Probe-major, then bucket, then site.
  for (std::size_t q = 0; q < cb.probes.size(); ++q)
    for (auto& fps : per_bucket)
      for (auto& fp : fps)
        if (fp.probe == q) cb.fingerprints.push_back(std::move(fp));
  return cb;
}

struct SoEstimate {
  BucketKey key;
  std::size_t bucket = 0;
  double distance = 0.0;
};

// Nearest stored fingerprint for the given probe configuration; ties go to
// the lowest bucket.
inline SoEstimate estimate_so(std::span<const cdouble> sensed, const Codebook& cb, const std::string& probe) {
  const auto q = cb.probe_index(probe);
  if (!q) throw ValidationError("estimate_so: no fingerprints for probe configuration " + probe);
  const std::size_t want = static_cast<std::size_t>(cb.n_sense) * static_cast<std::size_t>(cb.n_freq);
  if (sensed.size() != want)
    throw ValidationError("estimate_so: sensed response has " + std::to_string(sensed.size()) +
                          " entries, codebook expects " + std::to_string(want));
  const auto v = stack_sense(sensed);
  SoEstimate best;
  best.distance = std::numeric_limits<double>::infinity();
  bool found = false;
  for (const auto& fp : cb.fingerprints) {
    if (fp.probe != *q) continue;
    double d2 = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double d = v[i] - fp.values[i];
      d2 += d * d;
    }
    const double d = std::sqrt(d2);
    if (!found || d < best.distance || (d == best.distance && fp.bucket < best.bucket)) {
      best.bucket = fp.bucket;
      best.distance = d;
      found = true;
    }
  }
  if (!found) throw ValidationError("estimate_so: codebook has no fingerprints");
  best.key = bucket_key(best.bucket, cb.resolution, static_cast<std::size_t>(cb.n_obj));
  return best;
}

struct RuntimeStep {
  std::string probe;     // configuration active while sensing
  SoEstimate estimate;
  int k = 0;             // applied candidate
  std::string config;
  Vec2 u_hat;
  DatasetRecord observed;  // measurements the localizer consumed
};

// Optional measurement noise, applied to the sensing probe and to the
// localization measurement separately.
struct RuntimeNoise {
  double snr_db = std::numeric_limits<double>::infinity();
  Rng* rng = nullptr;
};

// One closed-loop step: sense under `probe`, match the SO state, apply the
// codebook configuration, measure again and localize. The hidden state is
// (p, UE site); the localizer only sees the estimated cell centre.
inline RuntimeStep runtime_step(const SceneTemplate& tpl, const SOState& p, std::size_t site,
                                const Codebook& cb, const Localizer& loc, const std::string& probe,
                                RuntimeNoise noise = {}) {
  const auto sites = tpl.ue_sites();
  if (site >= sites.size()) throw ValidationError("runtime_step: UE site out of range");
  const std::span<const Vec2> one(&sites[site], 1);
  RuntimeStep out;
  out.probe = probe;

  auto sensed = sweep_sites(realize_base(tpl, RISConfig::from_string(probe), p), one, kTransceiverProps,
                            tpl.grid, kMinSeparation);
  if (noise.rng && std::isfinite(noise.snr_db)) {
    DatasetRecord tmp;
    tmp.h_sense = sensed[0].h_sense;
    add_noise(tmp, noise.snr_db, *noise.rng);
    sensed[0].h_sense = tmp.h_sense;
  }
  out.estimate = estimate_so(sensed[0].h_sense, cb, probe);
  out.k = cb.entries.at(out.estimate.bucket).k;
  out.config = cb.candidates.at(static_cast<std::size_t>(out.k));

  auto meas = sweep_sites(realize_base(tpl, RISConfig::from_string(out.config), p), one, kTransceiverProps,
                          tpl.grid, kMinSeparation);
  out.observed.h_ue = std::move(meas[0].h_ue);
  out.observed.h_sense = std::move(meas[0].h_sense);
  if (noise.rng && std::isfinite(noise.snr_db)) add_noise(out.observed, noise.snr_db, *noise.rng);
  out.observed.p = cell_center(out.estimate.key, cb.resolution);
  out.observed.k_index = out.k;
  out.observed.u = sites[site];
  out.u_hat = model_forward(featurize(out.observed, loc.norm), out.k, loc.model).u_hat;
  return out;
}

// ---------------------------------------------------------------------------
// Codebook file: a JSON object.

inline std::string codebook_to_string(const Codebook& cb) {
  nlohmann::json j;
  j["resolution"] = cb.resolution;
  j["n_obj"] = cb.n_obj;
  j["F"] = cb.n_freq;
  j["S_RIS"] = cb.n_sense;
  j["scene_hash"] = cb.scene_hash;
  j["checkpoint_hash"] = cb.checkpoint_hash;
  j["dataset_hash"] = cb.dataset_hash;
  j["candidates"] = cb.candidates;
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t b = 0; b < cb.entries.size(); ++b) {
    const auto& e = cb.entries[b];
    entries.push_back({{"bucket", bucket_key(b, cb.resolution, static_cast<std::size_t>(cb.n_obj))},
                       {"k", e.k},
                       {"config", cb.candidates.at(static_cast<std::size_t>(e.k))},
                       {"mse", e.mse}});
  }
  j["entries"] = entries;
  j["probes"] = cb.probes;
  nlohmann::json fps = nlohmann::json::array();
  for (const auto& fp : cb.fingerprints)
    fps.push_back({{"probe", fp.probe}, {"bucket", fp.bucket}, {"site", fp.site}, {"h_sense", fp.values}});
  j["fingerprints"] = fps;
  j["scene"] = cb.scene_text;
  j["producer"] = cb.producer;
  return j.dump() + "\n";
}

inline Codebook codebook_from_string(std::string_view text) {
  Codebook cb;
  try {
    const auto j = nlohmann::json::parse(text);
    cb.resolution = j.at("resolution").get<int>();
    cb.n_obj = j.at("n_obj").get<int>();
    cb.n_freq = j.at("F").get<int>();
    cb.n_sense = j.at("S_RIS").get<int>();
    cb.scene_hash = j.at("scene_hash").get<std::string>();
    cb.checkpoint_hash = j.at("checkpoint_hash").get<std::string>();
    cb.dataset_hash = j.at("dataset_hash").get<std::string>();
    cb.candidates = j.at("candidates").get<std::vector<std::string>>();
    const auto& entries = j.at("entries");
    if (entries.size() != bucket_count(cb.resolution, static_cast<std::size_t>(cb.n_obj)))
      throw ValidationError("codebook: entry count does not cover the bucket lattice");
    for (std::size_t b = 0; b < entries.size(); ++b) {
      const auto& e = entries[b];
      if (bucket_index(e.at("bucket").get<BucketKey>(), cb.resolution) != b)
        throw ValidationError("codebook: entries out of bucket order at " + std::to_string(b));
      CodebookEntry ce{e.at("k").get<int>(), e.at("mse").get<double>()};
      if (ce.k < 0 || ce.k >= static_cast<int>(cb.candidates.size()) ||
          e.at("config").get<std::string>() != cb.candidates[static_cast<std::size_t>(ce.k)])
        throw ValidationError("codebook: entry " + std::to_string(b) + " names an unknown configuration");
      cb.entries.push_back(ce);
    }
    cb.probes = j.at("probes").get<std::vector<std::string>>();
    const std::size_t width = 2 * static_cast<std::size_t>(cb.n_sense) * static_cast<std::size_t>(cb.n_freq);
    for (const auto& f : j.at("fingerprints")) {
      Fingerprint fp{f.at("probe").get<std::size_t>(), f.at("bucket").get<std::size_t>(),
                     f.at("site").get<std::size_t>(), f.at("h_sense").get<std::vector<double>>()};
      if (fp.probe >= cb.probes.size() || fp.bucket >= cb.entries.size() || fp.values.size() != width)
        throw ValidationError("codebook: malformed fingerprint");
      cb.fingerprints.push_back(std::move(fp));
    }
    cb.scene_text = j.at("scene").get<std::string>();
    cb.producer = j.value("producer", std::string());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("codebook: ") + e.what());
  }
  return cb;
}

inline void save_codebook(const Codebook& cb, const std::string& path) { write_file(path, codebook_to_string(cb)); }
inline Codebook load_codebook(const std::string& path) { return codebook_from_string(read_file(path)); }

}  // namespace rislab
