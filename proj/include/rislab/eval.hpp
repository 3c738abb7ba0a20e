// SPDX-License-Identifier: Apache-2.0
#pragma once

// Random-configuration baseline, test-set replay and Table-1 style reports.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "rislab/checkpoint.hpp"
#include "rislab/codebook.hpp"
#include "rislab/dataset.hpp"
#include "rislab/error.hpp"
#include "rislab/metrics.hpp"
#include "rislab/neural.hpp"
#include "rislab/random.hpp"

namespace rislab {

// ---------------------------------------------------------------------------
// Baseline: feed-forward net on the flattened feature sequence,
// in -> 64 relu -> 64 relu -> 2.

struct MlpDims {
  int input = 0;
  int hidden = 64;

  std::size_t w1() const { return 0; }
  std::size_t b1() const { return w1() + static_cast<std::size_t>(hidden * input); }
  std::size_t w2() const { return b1() + static_cast<std::size_t>(hidden); }
  std::size_t b2() const { return w2() + static_cast<std::size_t>(hidden * hidden); }
  std::size_t w3() const { return b2() + static_cast<std::size_t>(hidden); }
  std::size_t b3() const { return w3() + static_cast<std::size_t>(2 * hidden); }
  std::size_t total() const { return b3() + 2; }

  std::vector<ParamGroup> groups() const {
    return {{"layer1", w1(), w2() - w1()}, {"layer2", w2(), w3() - w2()}, {"head", w3(), total() - w3()}};
  }
};

inline void init_mlp(ParamVector& theta, const MlpDims& d, Rng& rng) {
  theta.assign(d.total(), 0.0);
  auto fill = [&](std::size_t off, std::size_t n, int fan_in) {
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < n; ++i) theta[off + i] = rng.uniform(-s, s);
  };
  fill(d.w1(), d.b1() - d.w1(), d.input);
  fill(d.w2(), d.b2() - d.w2(), d.hidden);
  fill(d.w3(), d.b3() - d.w3(), d.hidden);
}

struct MlpTrace {
  Eigen::MatrixXd a1, a2, out;
};

inline MlpTrace mlp_forward(std::span<const double> theta, const MlpDims& d, const Eigen::MatrixXd& x) {
  ConstMatMap w1(theta.data() + d.w1(), d.hidden, d.input);
  ConstVecMap b1(theta.data() + d.b1(), d.hidden);
  ConstMatMap w2(theta.data() + d.w2(), d.hidden, d.hidden);
  ConstVecMap b2(theta.data() + d.b2(), d.hidden);
  ConstMatMap w3(theta.data() + d.w3(), 2, d.hidden);
  ConstVecMap b3(theta.data() + d.b3(), 2);
  MlpTrace t;
  t.a1.noalias() = w1 * x;
  t.a1.colwise() += b1;
  t.a1 = t.a1.cwiseMax(0.0);
  t.a2.noalias() = w2 * t.a1;
  t.a2.colwise() += b2;
  t.a2 = t.a2.cwiseMax(0.0);
  t.out.noalias() = w3 * t.a2;
  t.out.colwise() += b3;
  return t;
}

class MlpNet {
 public:
  // inputs: one flattened feature column per record.
  MlpNet(const MlpDims& d, const Eigen::MatrixXd& inputs, std::vector<Vec2> targets)
      : dims_(d), x_(&inputs), u_(std::move(targets)) {}

  std::size_t param_count() const { return dims_.total(); }
  const MlpDims& dims() const { return dims_; }

  DataLoss accumulate(std::span<const double> theta, std::span<const std::size_t> idx, double scale,
                      std::span<double> grad) const {
    const auto B = static_cast<Eigen::Index>(idx.size());
    Eigen::MatrixXd x(dims_.input, B);
    for (Eigen::Index j = 0; j < B; ++j) x.col(j) = x_->col(static_cast<Eigen::Index>(idx[static_cast<std::size_t>(j)]));
    const auto t = mlp_forward(theta, dims_, x);
    DataLoss loss;
    loss.n = idx.size();
    Eigen::MatrixXd d_out(2, B);
    for (Eigen::Index j = 0; j < B; ++j) {
      const auto& u = u_[idx[static_cast<std::size_t>(j)]];
      const double ex = t.out(0, j) - u.x;
      const double ey = t.out(1, j) - u.y;
      loss.coord += ex * ex + ey * ey;
      d_out(0, j) = 2.0 * ex * scale;
      d_out(1, j) = 2.0 * ey * scale;
    }
    if (grad.empty()) return loss;
    const auto& d = dims_;
    ConstMatMap w2(theta.data() + d.w2(), d.hidden, d.hidden);
    ConstMatMap w3(theta.data() + d.w3(), 2, d.hidden);
    MatMap g_w1(grad.data() + d.w1(), d.hidden, d.input);
    VecMap g_b1(grad.data() + d.b1(), d.hidden);
    MatMap g_w2(grad.data() + d.w2(), d.hidden, d.hidden);
    VecMap g_b2(grad.data() + d.b2(), d.hidden);
    MatMap g_w3(grad.data() + d.w3(), 2, d.hidden);
    VecMap g_b3(grad.data() + d.b3(), 2);
    g_w3.noalias() += d_out * t.a2.transpose();
    g_b3 += d_out.rowwise().sum();
    Eigen::MatrixXd d2 = w3.transpose() * d_out;
    d2 = d2.cwiseProduct((t.a2.array() > 0.0).cast<double>().matrix());
    g_w2.noalias() += d2 * t.a1.transpose();
    g_b2 += d2.rowwise().sum();
    Eigen::MatrixXd d1 = w2.transpose() * d2;
    d1 = d1.cwiseProduct((t.a1.array() > 0.0).cast<double>().matrix());
    g_w1.noalias() += d1 * x.transpose();
    g_b1 += d1.rowwise().sum();
    return loss;
  }

 private:
  MlpDims dims_;
  const Eigen::MatrixXd* x_;
  std::vector<Vec2> u_;
};

inline Eigen::VectorXd flatten(const FeatureSequence& x) { return x.reshaped(); }

inline Eigen::MatrixXd flatten_all(const Dataset& ds, const NormStats& norm) {
  const Eigen::Index width = static_cast<Eigen::Index>(norm.width()) * norm.n_freq;
  Eigen::MatrixXd out(width, static_cast<Eigen::Index>(ds.size()));
  for (std::size_t i = 0; i < ds.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = flatten(featurize(ds.records[i], norm));
  return out;
}

struct BaselineModel {
  MlpDims dims;
  NormStats norm;
  ParamVector theta;

  Vec2 predict(const DatasetRecord& r) const {
    const auto t = mlp_forward(theta, dims, flatten(featurize(r, norm)));
    return {t.out(0, 0), t.out(1, 0)};
  }
};

struct BaselineFit {
  BaselineModel model;
  TrainResult result;
};

// Same splits, normalization, optimizer and checkpoint rule as the main model.
inline BaselineFit train_baseline(const Dataset& ds, const Split& sp, const TrainConfig& cfg) {
  BaselineFit fit;
  fit.model.norm = fit_norm(ds, sp.train);
  fit.model.dims.input = fit.model.norm.width() * fit.model.norm.n_freq;
  const Eigen::MatrixXd x = flatten_all(ds, fit.model.norm);
  std::vector<Vec2> u;
  u.reserve(ds.size());
  for (const auto& r : ds.records) u.push_back(r.u);
  MlpNet net(fit.model.dims, x, std::move(u));
  ParamVector theta0;
  Rng rng = derive_stream(cfg.seed, {stream::kInit});
  init_mlp(theta0, fit.model.dims, rng);
  fit.result = train(net, std::move(theta0), sp.train, sp.val, cfg);
  fit.model.theta = fit.result.theta;
  return fit;
}

inline Checkpoint make_baseline_checkpoint(const BaselineFit& fit, const TrainConfig& cfg, std::string dataset_hash) {
  Checkpoint c;
  c.kind = "mlp";
  c.dims = {{"input", fit.model.dims.input}, {"hidden", fit.model.dims.hidden}};
  c.hyper = cfg;
  c.dataset_hash = std::move(dataset_hash);
  c.val_loss = fit.result.best_val_loss;
  c.best_epoch = fit.result.best_epoch;
  c.norm = fit.model.norm;
  c.layout = fit.model.dims.groups();
  c.producer = std::string("rislab ") + kToolVersion;
  c.theta = fit.model.theta;
  return c;
}

inline BaselineModel baseline_from_checkpoint(const Checkpoint& c) {
  if (c.kind != "mlp") throw ValidationError("baseline: expected checkpoint kind 'mlp', found '" + c.kind + "'");
  BaselineModel m;
  m.dims.input = c.dims.at("input").get<int>();
  m.dims.hidden = c.dims.at("hidden").get<int>();
  m.norm = c.norm;
  if (c.theta.size() != m.dims.total()) throw ValidationError("baseline: parameter count mismatch");
  m.theta = c.theta;
  return m;
}

// ---------------------------------------------------------------------------
// Test-set replay.

struct ReportRow {
  int n_ris = 0;
  int k = 0;
  double baseline_mse = 0.0;
  double optimized_mse = 0.0;
  double sigma = 0.0;
  double pct_error_reduction = 0.0;

  friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

inline double pct_reduction(double baseline, double optimized) {
  return baseline > 0.0 ? 100.0 * (baseline - optimized) / baseline : 0.0;
}

inline ReportRow make_row(int n_ris, int k, std::span<const double> se_random, std::span<const double> se_optimized) {
  if (se_random.size() != se_optimized.size() || se_random.empty())
    throw ValidationError("report: series must be aligned and nonempty");
  const double n = static_cast<double>(se_random.size());
  ReportRow r;
  r.n_ris = n_ris;
  r.k = k;
  for (std::size_t i = 0; i < se_random.size(); ++i) {
    r.baseline_mse += se_random[i];
    r.optimized_mse += se_optimized[i];
  }
  r.baseline_mse /= n;
  r.optimized_mse /= n;
  double var = 0.0;
  for (double v : se_optimized) var += (v - r.optimized_mse) * (v - r.optimized_mse);
  r.sigma = std::sqrt(var / n);
  r.pct_error_reduction = pct_reduction(r.baseline_mse, r.optimized_mse);
  return r;
}

struct EpisodeStep {
  std::size_t record = 0;
  std::size_t site = 0;
  std::string probe;
  std::size_t bucket_true = 0;
  std::size_t bucket_est = 0;
  double distance = 0.0;
  int k = 0;
};

struct EvalResult {
  std::vector<double> se_random;
  std::vector<double> se_optimized;
  std::vector<EpisodeStep> steps;
  ReportRow row;
};

inline std::size_t site_of(const SceneTemplate& tpl, Vec2 u) {
  const auto sites = tpl.ue_sites();
  for (std::size_t s = 0; s < sites.size(); ++s)
    if (sites[s] == u) return s;
  throw ValidationError("evaluate: record position is not a UE site of the scene");
}

// Test instances drawn from the test split with a seeded shuffle.
inline std::vector<std::size_t> pick_instances(std::span<const std::size_t> test, std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> pool(test.begin(), test.end());
  Rng rng = derive_stream(seed, {stream::kEvalPick});
  rng.shuffle(pool);
  pool.resize(std::min(n, pool.size()));
  return pool;
}

// Replays the selected test instances as one closed-loop episode. The
// baseline sees each record as generated (random configuration); the
// optimized path senses under the previously applied configuration
// (all-zeros at the start), picks the codebook entry and localizes.
inline EvalResult evaluate(const Dataset& ds, const SceneTemplate& tpl, std::span<const std::size_t> instances,
                           const Localizer& loc, const Codebook& cb, const BaselineModel& base) {
  if (instances.empty()) throw ValidationError("evaluate: no test instances");
  if (static_cast<int>(cb.candidates.size()) != ds.meta.n_configs)
    throw ValidationError("evaluate: codebook candidates differ from the dataset configurations");
  EvalResult res;
  std::string probe = RISConfig::zeros(tpl.n_ris()).to_string();
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto& rec = ds.records.at(instances[i]);
    res.se_random.push_back(squared_error(base.predict(rec), rec.u));
    const std::size_t site = site_of(tpl, rec.u);
    Rng noise_rng = derive_stream(ds.meta.seed, {stream::kEvalPick, i + 1});
    RuntimeNoise noise;
    if (ds.meta.snr_db) noise = {*ds.meta.snr_db, &noise_rng};
    const auto step = runtime_step(tpl, rec.p, site, cb, loc, probe, noise);
    res.se_optimized.push_back(squared_error(step.u_hat, rec.u));
    res.steps.push_back({instances[i], site, probe, bucket_index(quantize_so(rec.p, cb.resolution), cb.resolution),
                         step.estimate.bucket, step.estimate.distance, step.k});
    probe = step.config;
  }
  res.row = make_row(ds.meta.n_ris, ds.meta.n_configs, res.se_random, res.se_optimized);
  return res;
}

// ---------------------------------------------------------------------------
// Reports.

namespace eval_detail {

inline std::string num(double v) {
  char buf[40];
  const int n = std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf, static_cast<std::size_t>(n));
}

}  // namespace eval_detail

inline constexpr const char* kSeriesHeader = "test_index,se_random,se_optimized";
inline constexpr const char* kSummaryHeader = "n_ris,k,baseline_mse,optimized_mse,sigma,pct_error_reduction";

inline std::string series_csv(std::span<const double> se_random, std::span<const double> se_optimized) {
  if (se_random.size() != se_optimized.size()) throw ValidationError("series_csv: series not aligned");
  std::string out = std::string(kSeriesHeader) + "\n";
  for (std::size_t i = 0; i < se_random.size(); ++i)
    out += std::to_string(i) + "," + eval_detail::num(se_random[i]) + "," + eval_detail::num(se_optimized[i]) + "\n";
  return out;
}

inline std::string summary_csv(std::span<const ReportRow> rows) {
  using eval_detail::num;
  std::string out = std::string(kSummaryHeader) + "\n";
  for (const auto& r : rows)
    out += std::to_string(r.n_ris) + "," + std::to_string(r.k) + "," + num(r.baseline_mse) + "," +
           num(r.optimized_mse) + "," + num(r.sigma) + "," + num(r.pct_error_reduction) + "\n";
  return out;
}

namespace eval_detail {

inline std::vector<std::vector<std::string>> csv_rows(std::string_view text, std::string_view header) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != header)
    throw ValidationError("csv: expected header '" + std::string(header) + "'");
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    const auto want = static_cast<std::size_t>(std::count(header.begin(), header.end(), ',') + 1);
    if (f.size() != want) throw ValidationError("csv line " + std::to_string(line_no) + ": wrong field count");
    rows.push_back(std::move(f));
  }
  return rows;
}

inline double to_num(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ValidationError("csv: '" + s + "' is not a number");
  }
}

}  // namespace eval_detail

struct Series {
  std::vector<double> se_random;
  std::vector<double> se_optimized;
};

inline Series parse_series_csv(std::string_view text) {
  Series s;
  std::size_t i = 0;
  for (const auto& f : eval_detail::csv_rows(text, kSeriesHeader)) {
    if (f[0] != std::to_string(i++)) throw ValidationError("series csv: test_index out of sequence");
    s.se_random.push_back(eval_detail::to_num(f[1]));
    s.se_optimized.push_back(eval_detail::to_num(f[2]));
  }
  return s;
}

inline std::vector<ReportRow> parse_summary_csv(std::string_view text) {
  std::vector<ReportRow> rows;
  for (const auto& f : eval_detail::csv_rows(text, kSummaryHeader)) {
    ReportRow r;
    r.n_ris = static_cast<int>(eval_detail::to_num(f[0]));
    r.k = static_cast<int>(eval_detail::to_num(f[1]));
    r.baseline_mse = eval_detail::to_num(f[2]);
    r.optimized_mse = eval_detail::to_num(f[3]);
    r.sigma = eval_detail::to_num(f[4]);
    r.pct_error_reduction = eval_detail::to_num(f[5]);
    rows.push_back(r);
  }
  return rows;
}

inline void report_csv(std::span<const double> se_random, std::span<const double> se_optimized, const ReportRow& row,
                       const std::string& series_path, const std::string& summary_path) {
  write_file(series_path, series_csv(se_random, se_optimized));
  write_file(summary_path, summary_csv(std::span<const ReportRow>(&row, 1)));
}

// Plain-text table in the layout of the published results table.
inline std::string table_text(std::span<const ReportRow> rows) {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%6s %6s %14s %14s %12s %12s\n", "N_RIS", "K", "Baseline", "Optimized",
                "sigma", "% reduction");
  out += buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%6d %6d %14.6g %14.6g %12.6g %11.2f%%\n", r.n_ris, r.k, r.baseline_mse,
                  r.optimized_mse, r.sigma, r.pct_error_reduction);
    out += buf;
  }
  return out;
}

}  // namespace rislab
