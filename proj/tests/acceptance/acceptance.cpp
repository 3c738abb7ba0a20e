// SPDX-License-Identifier: Apache-2.0
// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
// Usage: rislab_acceptance [criterion ...]   (default: all)

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "../unit/support.hpp"
#include "rislab/bessel.hpp"
#include "rislab/checkpoint.hpp"
#include "rislab/codebook.hpp"
#include "rislab/dataset.hpp"
#include "rislab/eval.hpp"
#include "rislab/metrics.hpp"
#include "rislab/neural.hpp"
#include "rislab/provenance.hpp"
#include "rislab/wavesim.hpp"

namespace fs = std::filesystem;
using namespace rislab;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

const fs::path& work_dir() {
  static const fs::path d = [] {
    auto p = fs::temp_directory_path() / ("rislab_acceptance_" + std::to_string(getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return d;
}

void cli(const std::string& args) {
  const std::string cmd = std::string(RISLAB_CLI) + " " + args + " > /dev/null 2>&1";
  const int st = std::system(cmd.c_str());
  if (st == -1 || !WIFEXITED(st) || WEXITSTATUS(st) != 0)
    throw std::runtime_error("rislab " + args.substr(0, args.find(' ')) + " failed (status " +
                             std::to_string(WIFEXITED(st) ? WEXITSTATUS(st) : -1) + ")");
}

// ---------------------------------------------------------------------------

Outcome physics_oracle() {
  const auto t0 = Clock::now();
  SceneInstance s;
  s.add({0.0, 0.0}, kTransceiverProps, Role::kBS);
  s.add({0.37, 0.21}, kTransceiverProps, Role::kUE);
  const FrequencyGrid grid{1.0, 0.1, 64};
  const auto h = channel(s, Role::kBS, Role::kUE, grid);
  double worst = 0.0;
  for (int i = 0; i < grid.n_points; ++i) {
    const auto w = rislab::testing::reference_w(s, grid.frequency(i));
    const cdouble expected = -w[0][1] / (w[0][0] * w[1][1] - w[0][1] * w[0][1]);
    worst = std::max(worst, rislab::testing::rel_diff(h.at(0, 0, static_cast<std::size_t>(i)), expected));
  }
  const double t = seconds_since(t0);
  return {worst < 1e-10 && t < 1.0, "max rel err " + fmt("%.2e", worst) + ", " + fmt("%.3f", t) + " s"};
}

Outcome reciprocity() {
  const FrequencyGrid grid{1.0, 0.1, 16};
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto s = rislab::testing::random_scene(seed, 30, 3, 4);
    const auto fwd = channel(s, Role::kBS, Role::kUE, grid);
    const auto rev = channel(s, Role::kUE, Role::kBS, grid);
    for (std::size_t r = 0; r < fwd.n_rx; ++r)
      for (std::size_t t = 0; t < fwd.n_tx; ++t)
        for (std::size_t f = 0; f < fwd.n_freq(); ++f) worst = std::max(worst, std::abs(fwd.at(r, t, f) - rev.at(t, r, f)));
  }
  return {worst < 1e-9, "max |H_ij - H_ji| " + fmt("%.2e", worst) + " over 10 scenes of 30 dipoles"};
}

Outcome special_functions() {
  const auto pts = rislab::testing::bessel_oracle();
  double worst = 0.0;
  for (const auto& p : pts) {
    const auto [j0, y0] = bessel_j0_y0(p.x);
    worst = std::max({worst, std::abs(j0 - p.j0), std::abs(y0 - p.y0)});
  }
  return {pts.size() == 1000 && worst < 1e-8,
          std::to_string(pts.size()) + " points, max abs err " + fmt("%.2e", worst)};
}

Outcome gradient_check() {
  const auto t0 = Clock::now();
  const ModelDims d{6, 4, 4, 3, 4};
  BiLstmModel m(d);
  Rng rng(2024);
  init_params(m, rng);
  for (auto& v : m.theta) v += 0.1 * rng.uniform(-1, 1);
  std::vector<FeatureSequence> xs;
  Batch b;
  for (int i = 0; i < 4; ++i) {
    FeatureSequence x(d.input, 5);
    for (Eigen::Index j = 0; j < x.size(); ++j) x.data()[j] = rng.normal();
    xs.push_back(x);
  }
  for (int i = 0; i < 4; ++i) {
    b.x.push_back(&xs[static_cast<std::size_t>(i)]);
    b.k.push_back(i % 3);
    b.u.push_back({rng.normal(), rng.normal()});
  }
  const LossSpec ls{0.01, 3};
  const auto g = backward(m, b, ls);
  auto loss_at = [&](const BiLstmModel& mm) {
    std::vector<Vec2> uh;
    std::vector<std::vector<double>> probs;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const auto p = model_forward(xs[i], b.k[i], mm);
      uh.push_back(p.u_hat);
      probs.push_back(p.probs);
    }
    return hybrid_loss(uh, probs, b.u, b.k, mm.theta, ls).total();
  };
  const double h = 1e-5;
  double worst = 0.0;
  std::string worst_group;
  for (const auto& grp : m.layout().groups()) {
    for (std::size_t i = grp.offset; i < grp.offset + grp.size; ++i) {
      auto mp = m, mm = m;
      mp.theta[i] += h;
      mm.theta[i] -= h;
      const double fd = (loss_at(mp) - loss_at(mm)) / (2 * h);
      const double scale = std::max(std::abs(fd), std::abs(g[i]));
      const double err = scale < 1e-8 ? std::abs(fd - g[i]) : std::abs(fd - g[i]) / scale;
      if (err > worst) {
        worst = err;
        worst_group = grp.name;
      }
    }
  }
  const double t = seconds_since(t0);
  return {worst < 1e-4 && t < 30.0, "max rel err " + fmt("%.2e", worst) + " (" + worst_group + "), " +
                                        std::to_string(m.theta.size()) + " params, " + fmt("%.2f", t) + " s"};
}

Outcome loss_oracles() {
  Rng rng(55);
  double worst_mse = 0.0, worst_loss = 0.0;
  for (int batch = 0; batch < 100; ++batch) {
    const std::size_t n = 1 + rng.below(64);
    const int K = 2 + static_cast<int>(rng.below(9));
    std::vector<Vec2> uh(n), u(n);
    std::vector<std::vector<double>> probs(n);
    std::vector<int> k(n);
    std::vector<double> theta(1 + rng.below(50));
    for (auto& t : theta) t = rng.normal();
    for (std::size_t i = 0; i < n; ++i) {
      uh[i] = {rng.uniform(-3, 3), rng.uniform(-3, 3)};
      u[i] = {rng.uniform(-3, 3), rng.uniform(-3, 3)};
      double s = 0.0;
      for (int c = 0; c < K; ++c) s += probs[i].emplace_back(rng.uniform(0, 1));
      for (auto& p : probs[i]) p /= s;
      k[i] = static_cast<int>(rng.below(static_cast<std::uint64_t>(K)));
    }
    const double alpha = rng.uniform(0, 1e-2);
    long double se = 0, ce = 0, reg = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const long double dx = static_cast<long double>(u[i].x) - uh[i].x;
      const long double dy = static_cast<long double>(u[i].y) - uh[i].y;
      se += dx * dx + dy * dy;
      ce -= std::log(std::max(static_cast<long double>(probs[i][static_cast<std::size_t>(k[i])]), 1e-12L));
    }
    for (double t : theta) reg += static_cast<long double>(t) * t;
    const long double mse_ref = se / n;
    const long double loss_ref = mse_ref + ce / n + alpha * reg;
    worst_mse = std::max(worst_mse, static_cast<double>(std::abs(mse(uh, u) - mse_ref)));
    const auto parts = hybrid_loss(uh, probs, u, k, theta, {alpha, K});
    worst_loss = std::max(worst_loss, static_cast<double>(std::abs(parts.total() - loss_ref)));
  }
  return {worst_mse < 1e-12 && worst_loss < 1e-12,
          "100 batches, mse err " + fmt("%.2e", worst_mse) + ", loss err " + fmt("%.2e", worst_loss)};
}

// ---------------------------------------------------------------------------

struct RunPaths {
  fs::path dir;
  std::string p(const std::string& n) const { return (dir / n).string(); }
};

RunPaths run_pipeline(const std::string& tag, const std::string& scene, int K, int so, std::uint64_t seed,
                      int epochs, double lr, int resolution, int instances) {
  RunPaths r{work_dir() / tag};
  fs::create_directories(r.dir);
  const std::string lr_s = fmt("%.17g", lr);
  cli("generate --scene " + scene + " --configs " + std::to_string(K) + " --so-samples " + std::to_string(so) +
      " --seed " + std::to_string(seed) + " --out " + r.p("d.jsonl"));
  const std::string train = " --dataset " + r.p("d.jsonl") + " --epochs " + std::to_string(epochs) + " --lr " + lr_s +
                            " --seed " + std::to_string(seed);
  cli("train" + train + " --out " + r.p("m.ckpt"));
  cli("baseline" + train + " --out " + r.p("b.ckpt"));
  cli("calibrate --checkpoint " + r.p("m.ckpt") + " --scene " + scene + " --dataset " + r.p("d.jsonl") +
      " --resolution " + std::to_string(resolution) + " --out " + r.p("cb.json"));
  cli("evaluate --checkpoint " + r.p("m.ckpt") + " --codebook " + r.p("cb.json") + " --dataset " + r.p("d.jsonl") +
      " --baseline " + r.p("b.ckpt") + " --instances " + std::to_string(instances) + " --out " + r.p("ev"));
  return r;
}

std::string desk_scene() { return rislab::testing::data_path("desk.scene"); }

Outcome determinism() {
  const auto a = run_pipeline("det_a", desk_scene(), 4, 4, 7, 3, 1e-3, 4, 40);
  const auto b = run_pipeline("det_b", desk_scene(), 4, 4, 7, 3, 1e-3, 4, 40);
  const std::vector<std::string> files = {"d.jsonl",     "m.ckpt",         "b.ckpt",          "cb.json",
                                          "ev/series.csv", "ev/summary.csv", "ev/episode.csv", "m.ckpt.history.csv"};
  std::string diff;
  for (const auto& f : files)
    if (read_file(a.p(f)) != read_file(b.p(f))) diff += " " + f;
  if (!diff.empty()) return {false, "differs:" + diff};
  return {true, std::to_string(files.size()) + " artifacts byte-identical across two runs"};
}

Outcome round_trips() {
  const RunPaths r{work_dir() / "det_a"};
  if (!fs::exists(r.p("m.ckpt"))) run_pipeline("det_a", desk_scene(), 4, 4, 7, 3, 1e-3, 4, 40);
  const std::string ds_bytes = read_file(r.p("d.jsonl"));
  const Dataset ds = dataset_from_string(ds_bytes);
  const std::string ds_again = r.p("d_again.jsonl");
  save(ds, ds_again);
  bool ok = read_file(ds_again) == ds_bytes && load_dataset(ds_again) == ds;

  std::size_t n_params = 0;
  for (const char* name : {"m.ckpt", "b.ckpt"}) {
    const std::string bytes = read_file(r.p(name));
    const auto ck = checkpoint_from_string(bytes);
    ok = ok && checkpoint_to_string(ck) == bytes;
    const auto back = checkpoint_from_string(checkpoint_to_string(ck));
    ok = ok && back.theta.size() == ck.theta.size() &&
         std::equal(ck.theta.begin(), ck.theta.end(), back.theta.begin(),
                    [](double x, double y) { return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y); });
    n_params += ck.theta.size();
  }
  // Values with awkward bit patterns survive too.
  auto ck = load_checkpoint(r.p("m.ckpt"));
  const double odd[] = {-0.0, 5e-324, 1.0 / 3.0, std::nextafter(1.0, 2.0), -1.7976931348623157e308};
  for (std::size_t i = 0; i < std::size(odd); ++i) ck.theta[i] = odd[i];
  const auto back = checkpoint_from_string(checkpoint_to_string(ck));
  for (std::size_t i = 0; i < std::size(odd); ++i)
    ok = ok && std::bit_cast<std::uint64_t>(back.theta[i]) == std::bit_cast<std::uint64_t>(odd[i]);
  return {ok, std::to_string(ds.size()) + " records and " + std::to_string(n_params) + " parameters bit-exact"};
}

// ---------------------------------------------------------------------------

constexpr int kSoSamples = 10;
constexpr int kEpochs = 60;
constexpr double kLr = 1e-3;
constexpr int kResolution = 8;
constexpr int kInstances = 100;
const std::uint64_t kSeeds[] = {1, 2, 3};

struct TrendRun {
  ReportRow row;
  double seconds = 0.0;
  RunPaths paths;
};

std::map<std::pair<int, std::uint64_t>, TrendRun>& trend_cache() {
  static std::map<std::pair<int, std::uint64_t>, TrendRun> c;
  return c;
}

const TrendRun& trend_run(int K, std::uint64_t seed) {
  auto& c = trend_cache();
  const auto key = std::make_pair(K, seed);
  if (auto it = c.find(key); it != c.end()) return it->second;
  const auto t0 = Clock::now();
  const auto paths = run_pipeline("k" + std::to_string(K) + "_s" + std::to_string(seed), desk_scene(), K, kSoSamples,
                                  seed, kEpochs, kLr, kResolution, kInstances);
  TrendRun r{parse_summary_csv(read_file(paths.p("ev/summary.csv"))).at(0), seconds_since(t0), paths};
  std::cerr << "  K=" << K << " seed=" << seed << ": baseline " << r.row.baseline_mse << ", optimized "
            << r.row.optimized_mse << " (" << fmt("%.1f", r.row.pct_error_reduction) << "%), "
            << fmt("%.0f", r.seconds) << " s\n";
  return c.emplace(key, r).first->second;
}

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

Outcome desk_trend() {
  std::vector<double> ratio;
  double total = 0.0;
  std::string per_seed;
  for (auto s : kSeeds) {
    const auto& r = trend_run(32, s);
    ratio.push_back(r.row.optimized_mse / r.row.baseline_mse);
    total += r.seconds;
    per_seed += (per_seed.empty() ? "" : "/") + fmt("%.1f%%", r.row.pct_error_reduction);
  }
  const double med = median3(ratio);
  return {med <= 0.6 && total < 15 * 60,
          "median optimized/baseline " + fmt("%.3f", med) + " (reduction " + fmt("%.1f%%", 100 * (1 - med)) +
              "; seeds " + per_seed + "), " + fmt("%.0f", total) + " s"};
}

Outcome k_scaling() {
  const int ks[] = {8, 16, 32, 64};
  std::vector<double> med;
  std::string detail;
  std::vector<ReportRow> rows;
  for (int K : ks) {
    std::vector<double> v;
    for (auto s : kSeeds) {
      const auto& r = trend_run(K, s);
      v.push_back(r.row.optimized_mse);
    }
    med.push_back(median3(v));
    detail += (detail.empty() ? "" : ", ") + ("K=" + std::to_string(K) + " ") + fmt("%.4g", med.back());
  }
  bool ok = true;
  for (std::size_t i = 1; i < med.size(); ++i) ok = ok && med[i] <= med[i - 1];
  return {ok, "median optimized MSE " + detail};
}

// Independent recomputation of every (bucket, candidate) error with per-site
// forward passes and long-double accumulation.
Outcome codebook_optimality() {
  const auto& run = trend_run(32, kSeeds[0]);
  const auto cb = load_codebook(run.paths.p("cb.json"));
  const auto ck = load_checkpoint(run.paths.p("m.ckpt"));
  const auto model = model_from_checkpoint(ck);
  const auto tpl = parse_scene(cb.scene_text);
  const auto sites = tpl.ue_sites();
  double worst_gap = 0.0, worst_stored = 0.0;
  std::size_t checked = 0;
  for (std::size_t b = 0; b < cb.n_buckets(); ++b) {
    const SOState p = cell_center(bucket_key(b, cb.resolution, tpl.n_objects()), cb.resolution);
    std::vector<double> err(cb.candidates.size());
    for (std::size_t k = 0; k < cb.candidates.size(); ++k) {
      const auto scene = realize_base(tpl, RISConfig::from_string(cb.candidates[k]), p);
      const auto chans = sweep_sites(scene, sites, kTransceiverProps, tpl.grid, kMinSeparation);
      long double se = 0;
      for (std::size_t s = 0; s < sites.size(); ++s) {
        DatasetRecord r;
        r.h_ue = chans[s].h_ue;
        r.h_sense = chans[s].h_sense;
        r.p = p;
        const auto u = model_forward(featurize(r, ck.norm), static_cast<int>(k), model).u_hat;
        const long double dx = static_cast<long double>(u.x) - sites[s].x;
        const long double dy = static_cast<long double>(u.y) - sites[s].y;
        se += dx * dx + dy * dy;
      }
      err[k] = static_cast<double>(se / sites.size());
      ++checked;
    }
    const auto& e = cb.entries[b];
    const double best = *std::min_element(err.begin(), err.end());
    worst_gap = std::max(worst_gap, err[static_cast<std::size_t>(e.k)] - best);
    worst_stored = std::max(worst_stored, std::abs(e.mse - err[static_cast<std::size_t>(e.k)]));
  }
  return {worst_gap <= 1e-12 && worst_stored <= 1e-12,
          std::to_string(cb.n_buckets()) + " buckets x " + std::to_string(cb.candidates.size()) +
              " candidates; max excess over minimum " + fmt("%.2e", worst_gap) + ", stored vs recomputed " +
              fmt("%.2e", worst_stored) + " (" + std::to_string(checked) + " evaluations)"};
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> all = {
      {1, "two-dipole closed form", physics_oracle},
      {2, "reciprocity", reciprocity},
      {3, "J0/Y0 against series oracle", special_functions},
      {4, "gradient check", gradient_check},
      {5, "mse and hybrid loss oracles", loss_oracles},
      {6, "pipeline determinism", determinism},
      {7, "desk-scale error reduction", desk_trend},
      {8, "K-scaling trend", k_scaling},
      {9, "codebook optimality", codebook_optimality},
      {10, "checkpoint and dataset round-trip", round_trips},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& c : all) {
    if (!only.empty() && !only.count(c.id)) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << c.id << ". " << c.name << ": " << o.detail << std::endl;
  }

  // Results table for every trend run, in the report layout.
  if (!trend_cache().empty()) {
    std::string args;
    for (const auto& [key, r] : trend_cache()) args += " --eval-dir " + r.paths.p("ev");
    try {
      cli("report" + args + " --out " + (work_dir() / "report").string());
      std::cout << "\n" << read_file((work_dir() / "report" / "table.txt").string());
    } catch (const std::exception& e) {
      std::cout << "report: " << e.what() << "\n";
    }
  }
  if (!std::getenv("RISLAB_KEEP_ACCEPTANCE")) fs::remove_all(work_dir());
  else std::cout << "artifacts kept in " << work_dir().string() << "\n";
  return failed ? 1 : 0;
}
