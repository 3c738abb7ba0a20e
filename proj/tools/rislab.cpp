// SPDX-License-Identifier: Apache-2.0
// rislab: scene -> dataset -> checkpoint -> codebook -> evaluation -> report.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "rislab/checkpoint.hpp"
#include "rislab/codebook.hpp"
#include "rislab/dataset.hpp"
#include "rislab/error.hpp"
#include "rislab/eval.hpp"
#include "rislab/neural.hpp"
#include "rislab/parallel.hpp"
#include "rislab/provenance.hpp"
#include "rislab/scene.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace rislab;

namespace {

constexpr const char* kFormats = R"(File formats
  scene      Line-oriented text. '#' starts a comment; a line without a
             [section] header continues the previous section.
               [frequency] f_center df n_points
               [bs] x y
               [ue_grid] x0 y0 x1 y1 nx ny
               [wall] ax ay bx by            (one per wall)
               [ris] x y                     (one per element, bit order)
               [sense] i j ...               (RIS indices used for sensing)
               [object] f_res chi gamma_l    then 'offset dx dy' lines and
                                             an optional 'phase u'
               [trajectory] x y              (closed polyline vertex)
  dataset    JSON lines. Line 1: metadata {version, F, S_RIS, N_RIS, K,
             n_obj, seed, scene_hash, configs, ...}. Then one record per
             line: {l, k, u, p, h_ue, h_sense}; complex values as [re, im],
             reals with 17 significant digits.
  checkpoint One JSON header line {kind, dims, hyperparams, seed,
             dataset_hash, val_loss, best_epoch, norm, n_params, layout,
             producer}, a newline, then n_params little-endian float64
             values. Layout order: bilstm_fw, bilstm_bw, lstm2, embed,
             head_coord, head_class; each cell stores input weights,
             recurrent weights, bias, gates i,f,g,o.
  history    CSV epoch,train_loss,val_loss,improved (one row per epoch).
  codebook   JSON {resolution, n_obj, F, S_RIS, scene_hash,
             checkpoint_hash, dataset_hash, candidates, entries
             [{bucket, k, config, mse}], probes, fingerprints
             [{probe, bucket, site, h_sense}], scene, producer}.
             Fingerprints stack [Re, Im] of the S_RIS x F sensing response.
  eval dir   series.csv  test_index,se_random,se_optimized
             summary.csv n_ris,k,baseline_mse,optimized_mse,sigma,pct_error_reduction
             episode.csv test_index,record,site,probe,bucket_true,bucket_est,distance,k
             table.txt   fixed-width results table
  manifest   JSON {command, flags, seed, inputs, tool_version, outputs,
             workers, duration_s, manifest_hash}. manifest_hash is the
             SHA-256 of {command, non-path flags, seed, input hashes,
             tool_version}; every artifact stores it as 'producer'.

Exit codes: 0 ok, 1 other failure, 2 validation error, 3 numerical failure,
4 provenance mismatch.
Environment: RIS_LAB_WORKERS sets the worker count when --workers is absent.)";

// Records what a command consumed and produced.
class Manifest {
 public:
  explicit Manifest(std::string command) : command_(std::move(command)), start_(std::chrono::steady_clock::now()) {}

  void flag(const std::string& name, const json& value) {
    flags_[name] = value;
    core_flags_[name] = value;
  }
  void path_flag(const std::string& name, const json& value) { flags_[name] = value; }
  void seed(std::uint64_t s) { seed_ = s; }
  void input(const std::string& name, const std::string& hash) { inputs_[name] = hash; }

  std::string hash() const {
    json core;
    core["command"] = command_;
    core["flags"] = core_flags_;
    core["seed"] = seed_ ? json(*seed_) : json(nullptr);
    core["inputs"] = inputs_;
    core["tool_version"] = kToolVersion;
    return sha256_hex(core.dump());
  }

  void output(const std::string& name, const std::string& path) { outputs_[name] = file_sha256(path); }

  void write(const std::string& path, unsigned workers) const {
    json j;
    j["command"] = command_;
    j["flags"] = flags_;
    j["seed"] = seed_ ? json(*seed_) : json(nullptr);
    j["inputs"] = inputs_;
    j["tool_version"] = kToolVersion;
    j["outputs"] = outputs_;
    j["workers"] = workers;
    j["duration_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    j["manifest_hash"] = hash();
    write_file(path, j.dump(2) + "\n");
  }

 private:
  std::string command_;
  std::chrono::steady_clock::time_point start_;
  json flags_ = json::object();
  json core_flags_ = json::object();
  std::optional<std::uint64_t> seed_;
  json inputs_ = json::object();
  json outputs_ = json::object();
};

std::string manifest_path_for(const std::string& artifact) { return artifact + ".manifest.json"; }

void require_hash(const std::string& what, const std::string& recorded, const std::string& actual) {
  if (recorded != actual)
    throw ProvenanceError(what + ": recorded hash " + (recorded.empty() ? "<none>" : recorded.substr(0, 16)) +
                          " does not match " + actual.substr(0, 16));
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
}

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------

struct SceneInitArgs {
  std::string out;
  bool force = false;
};

void cmd_scene_init(const SceneInitArgs& a, unsigned workers) {
  if (fs::exists(a.out) && !a.force)
    throw ValidationError("scene-init: '" + a.out + "' exists; pass --force to overwrite");
  Manifest man("scene-init");
  man.path_flag("out", a.out);
  man.flag("force", a.force);
  write_file(a.out, write_scene(default_template()));
  parse_scene(read_file(a.out)).validate();
  man.output("scene", a.out);
  man.write(manifest_path_for(a.out), workers);
}

struct GenerateArgs {
  std::string scene, out;
  int configs = 10;
  int so_samples = 10;
  std::uint64_t seed = 1;
  std::optional<double> snr_db;
};

void cmd_generate(const GenerateArgs& a, unsigned workers) {
  const std::string scene_text = read_file(a.scene);
  const auto tpl = parse_scene(scene_text);
  Manifest man("generate");
  man.path_flag("scene", a.scene);
  man.path_flag("out", a.out);
  man.flag("configs", a.configs);
  man.flag("so_samples", a.so_samples);
  man.flag("snr_db", a.snr_db ? json(*a.snr_db) : json(nullptr));
  man.seed(a.seed);
  const std::string scene_hash = sha256_hex(scene_text);
  man.input("scene", scene_hash);

  GenerateOptions opts;
  opts.snr_db = a.snr_db;
  opts.scene_hash = scene_hash;
  opts.workers = workers;
  Dataset ds = generate(tpl, a.configs, a.so_samples, a.seed, opts);
  ds.meta.producer = man.hash();
  save(ds, a.out);
  man.output("dataset", a.out);
  man.write(manifest_path_for(a.out), workers);
  std::cout << "generate: " << ds.size() << " records (K=" << a.configs << ", " << a.so_samples
            << " SO samples, " << ds.meta.n_sites << " sites) -> " << a.out << "\n";
}

struct TrainArgs {
  std::string dataset, out;
  int epochs = 200;
  int batch = 32;
  double lr = 1e-4;
  double alpha = 1e-4;
  double clip_norm = 5.0;
  std::uint64_t seed = 1;
};

TrainConfig train_config(const TrainArgs& a, unsigned workers) {
  TrainConfig cfg;
  cfg.epochs = a.epochs;
  cfg.batch = a.batch;
  cfg.adam.lr = a.lr;
  cfg.alpha = a.alpha;
  cfg.clip_norm = a.clip_norm;
  cfg.seed = a.seed;
  cfg.workers = workers;
  return cfg;
}

void train_flags(Manifest& man, const TrainArgs& a) {
  man.path_flag("dataset", a.dataset);
  man.path_flag("out", a.out);
  man.flag("epochs", a.epochs);
  man.flag("batch", a.batch);
  man.flag("lr", a.lr);
  man.flag("alpha", a.alpha);
  man.flag("clip_norm", a.clip_norm);
  man.seed(a.seed);
}

void write_history(const TrainResult& r, const std::string& path) {
  std::string out = "epoch,train_loss,val_loss,improved\n";
  for (const auto& h : r.history)
    out += std::to_string(h.epoch) + "," + fmt17(h.train_loss) + "," + fmt17(h.val_loss) + "," +
           (h.improved ? "1" : "0") + "\n";
  write_file(path, out);
}

void cmd_train(const TrainArgs& a, unsigned workers) {
  const std::string ds_text = read_file(a.dataset);
  const Dataset ds = dataset_from_string(ds_text);
  Manifest man("train");
  train_flags(man, a);
  const std::string ds_hash = sha256_hex(ds_text);
  man.input("dataset", ds_hash);

  const auto cfg = train_config(a, workers);
  const auto sp = split(ds, ds.meta.seed);
  const auto fit = train_localizer(ds, sp, cfg);
  auto ckpt = make_checkpoint(fit.model, cfg, fit.norm, fit.result, ds_hash);
  ckpt.producer = man.hash();
  save_checkpoint(ckpt, a.out);
  const std::string hist = a.out + ".history.csv";
  write_history(fit.result, hist);
  man.output("checkpoint", a.out);
  man.output("history", hist);
  man.write(manifest_path_for(a.out), workers);
  std::cout << "train: best val loss " << fmt17(fit.result.best_val_loss) << " at epoch " << fit.result.best_epoch
            << " -> " << a.out << "\n";
}

void cmd_baseline(const TrainArgs& a, unsigned workers) {
  const std::string ds_text = read_file(a.dataset);
  const Dataset ds = dataset_from_string(ds_text);
  Manifest man("baseline");
  train_flags(man, a);
  const std::string ds_hash = sha256_hex(ds_text);
  man.input("dataset", ds_hash);

  const auto cfg = train_config(a, workers);
  const auto fit = train_baseline(ds, split(ds, ds.meta.seed), cfg);
  auto ckpt = make_baseline_checkpoint(fit, cfg, ds_hash);
  ckpt.producer = man.hash();
  save_checkpoint(ckpt, a.out);
  const std::string hist = a.out + ".history.csv";
  write_history(fit.result, hist);
  man.output("checkpoint", a.out);
  man.output("history", hist);
  man.write(manifest_path_for(a.out), workers);
  std::cout << "baseline: best val loss " << fmt17(fit.result.best_val_loss) << " at epoch "
            << fit.result.best_epoch << " -> " << a.out << "\n";
}

struct CalibrateArgs {
  std::string checkpoint, scene, dataset, out;
  int resolution = 8;
};

void cmd_calibrate(const CalibrateArgs& a, unsigned workers) {
  const std::string ck_text = read_file(a.checkpoint);
  const std::string scene_text = read_file(a.scene);
  const std::string ds_text = read_file(a.dataset);
  const auto ck = checkpoint_from_string(ck_text);
  const auto tpl = parse_scene(scene_text);
  const auto ds = dataset_from_string(ds_text);
  const std::string ck_hash = sha256_hex(ck_text), scene_hash = sha256_hex(scene_text),
                    ds_hash = sha256_hex(ds_text);
  require_hash("calibrate: dataset was generated from a different scene", ds.meta.scene_hash, scene_hash);
  require_hash("calibrate: checkpoint was trained on a different dataset", ck.dataset_hash, ds_hash);

  Manifest man("calibrate");
  man.path_flag("checkpoint", a.checkpoint);
  man.path_flag("scene", a.scene);
  man.path_flag("dataset", a.dataset);
  man.path_flag("out", a.out);
  man.flag("resolution", a.resolution);
  man.input("checkpoint", ck_hash);
  man.input("scene", scene_hash);
  man.input("dataset", ds_hash);

  const Localizer loc{model_from_checkpoint(ck), ck.norm};
  std::vector<RISConfig> cands;
  for (int k = 0; k < ds.meta.n_configs; ++k) cands.push_back(ds.config(k));
  CalibrateOptions opts;
  opts.workers = workers;
  auto cb = calibrate(loc, tpl, cands, a.resolution, opts);
  cb.scene_hash = scene_hash;
  cb.checkpoint_hash = ck_hash;
  cb.dataset_hash = ds_hash;
  cb.scene_text = scene_text;
  cb.producer = man.hash();
  save_codebook(cb, a.out);
  man.output("codebook", a.out);
  man.write(manifest_path_for(a.out), workers);
  std::cout << "calibrate: " << cb.n_buckets() << " buckets, " << cb.probes.size() << " sensing probes -> "
            << a.out << "\n";
}

struct EvaluateArgs {
  std::string checkpoint, codebook, dataset, baseline, out;
  int instances = 100;
};

void cmd_evaluate(const EvaluateArgs& a, unsigned workers) {
  const std::string ck_text = read_file(a.checkpoint);
  const std::string cb_text = read_file(a.codebook);
  const std::string ds_text = read_file(a.dataset);
  const std::string bl_text = read_file(a.baseline);
  const auto ck = checkpoint_from_string(ck_text);
  const auto cb = codebook_from_string(cb_text);
  const auto ds = dataset_from_string(ds_text);
  const auto bl = checkpoint_from_string(bl_text);
  const std::string ck_hash = sha256_hex(ck_text), cb_hash = sha256_hex(cb_text), ds_hash = sha256_hex(ds_text),
                    bl_hash = sha256_hex(bl_text);
  require_hash("evaluate: codebook was calibrated with a different checkpoint", cb.checkpoint_hash, ck_hash);
  require_hash("evaluate: codebook was calibrated on a different dataset", cb.dataset_hash, ds_hash);
  require_hash("evaluate: checkpoint was trained on a different dataset", ck.dataset_hash, ds_hash);
  require_hash("evaluate: baseline was trained on a different dataset", bl.dataset_hash, ds_hash);
  require_hash("evaluate: codebook scene text does not match its recorded hash", cb.scene_hash,
               sha256_hex(cb.scene_text));
  require_hash("evaluate: dataset and codebook disagree on the scene", ds.meta.scene_hash, cb.scene_hash);
  if (a.instances < 1) throw ValidationError("evaluate: --instances must be >= 1");

  Manifest man("evaluate");
  man.path_flag("checkpoint", a.checkpoint);
  man.path_flag("codebook", a.codebook);
  man.path_flag("dataset", a.dataset);
  man.path_flag("baseline", a.baseline);
  man.path_flag("out", a.out);
  man.flag("instances", a.instances);
  man.seed(ds.meta.seed);
  man.input("checkpoint", ck_hash);
  man.input("codebook", cb_hash);
  man.input("dataset", ds_hash);
  man.input("baseline", bl_hash);

  const auto tpl = parse_scene(cb.scene_text);
  const Localizer loc{model_from_checkpoint(ck), ck.norm};
  const auto base = baseline_from_checkpoint(bl);
  const auto sp = split(ds, ds.meta.seed);
  const auto inst = pick_instances(sp.test, static_cast<std::size_t>(a.instances), ds.meta.seed);
  const auto res = evaluate(ds, tpl, inst, loc, cb, base);

  ensure_dir(a.out);
  const auto p = [&](const char* name) { return (fs::path(a.out) / name).string(); };
  report_csv(res.se_random, res.se_optimized, res.row, p("series.csv"), p("summary.csv"));
  std::string ep = "test_index,record,site,probe,bucket_true,bucket_est,distance,k\n";
  for (std::size_t i = 0; i < res.steps.size(); ++i) {
    const auto& s = res.steps[i];
    ep += std::to_string(i) + "," + std::to_string(s.record) + "," + std::to_string(s.site) + "," + s.probe + "," +
          std::to_string(s.bucket_true) + "," + std::to_string(s.bucket_est) + "," + fmt17(s.distance) + "," +
          std::to_string(s.k) + "\n";
  }
  write_file(p("episode.csv"), ep);
  const std::string table = table_text(std::span<const ReportRow>(&res.row, 1));
  write_file(p("table.txt"), table);
  for (const char* name : {"series.csv", "summary.csv", "episode.csv", "table.txt"}) man.output(name, p(name));
  man.write(p("manifest.json"), workers);
  std::cout << table;
}

struct ReportArgs {
  std::vector<std::string> eval_dirs;
  std::string out;
};

void cmd_report(const ReportArgs& a, unsigned workers) {
  Manifest man("report");
  man.path_flag("out", a.out);
  json dirs = json::array();
  std::vector<ReportRow> rows;
  for (std::size_t i = 0; i < a.eval_dirs.size(); ++i) {
    const auto& dir = a.eval_dirs[i];
    dirs.push_back(dir);
    const auto mpath = (fs::path(dir) / "manifest.json").string();
    json m;
    try {
      m = json::parse(read_file(mpath));
    } catch (const json::exception& e) {
      throw ValidationError("report: " + mpath + ": " + e.what());
    }
    for (const char* name : {"series.csv", "summary.csv"}) {
      const auto path = (fs::path(dir) / name).string();
      const auto actual = file_sha256(path);
      require_hash("report: " + path + " was modified after evaluation",
                   m.value("outputs", json::object()).value(name, std::string()), actual);
      man.input("eval" + std::to_string(i) + "/" + name, actual);
    }
    for (const auto& r : parse_summary_csv(read_file((fs::path(dir) / "summary.csv").string()))) rows.push_back(r);
  }
  man.flag("eval_dirs", json(a.eval_dirs.size()));
  man.path_flag("eval_dir", dirs);

  ensure_dir(a.out);
  const auto csv = (fs::path(a.out) / "table.csv").string();
  const auto txt = (fs::path(a.out) / "table.txt").string();
  write_file(csv, summary_csv(rows));
  const std::string table = table_text(rows);
  write_file(txt, table);
  man.output("table.csv", csv);
  man.output("table.txt", txt);
  man.write((fs::path(a.out) / "manifest.json").string(), workers);
  std::cout << table;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rislab: RIS-assisted localization pipeline in a rich-scattering enclosure"};
  app.footer(kFormats);
  app.require_subcommand(1);
  app.fallthrough();

  std::optional<unsigned> workers_flag;
  app.add_option("--workers", workers_flag, "Worker threads (default: RIS_LAB_WORKERS, else all cores)")
      ->check(CLI::PositiveNumber);

  SceneInitArgs si;
  auto* c_scene = app.add_subcommand("scene-init", "Write the default enclosure scene file");
  c_scene->add_option("--out", si.out, "Scene file to write")->required();
  c_scene->add_flag("--force", si.force, "Overwrite an existing file");

  GenerateArgs ga;
  std::optional<double> snr;
  auto* c_gen = app.add_subcommand("generate", "Simulate a labelled dataset over random RIS configurations");
  c_gen->add_option("--scene", ga.scene, "Scene file")->required();
  c_gen->add_option("--configs", ga.configs, "Number of distinct RIS configurations K")->capture_default_str();
  c_gen->add_option("--so-samples", ga.so_samples, "SO states per configuration")->capture_default_str();
  c_gen->add_option("--seed", ga.seed, "Master seed")->capture_default_str();
  c_gen->add_option("--out", ga.out, "Dataset file to write (JSON lines)")->required();
  c_gen->add_option("--snr-db", snr, "Add complex Gaussian measurement noise at this SNR");

  TrainArgs ta;
  auto add_train = [](CLI::App* c, TrainArgs& t) {
    c->add_option("--dataset", t.dataset, "Dataset file")->required();
    c->add_option("--epochs", t.epochs, "Training epochs")->capture_default_str();
    c->add_option("--batch", t.batch, "Mini-batch size")->capture_default_str();
    c->add_option("--lr", t.lr, "Adam learning rate")->capture_default_str();
    c->add_option("--alpha", t.alpha, "L2 weight on all parameters")->capture_default_str();
    c->add_option("--clip-norm", t.clip_norm, "Global gradient norm clip (0 disables)")->capture_default_str();
    c->add_option("--seed", t.seed, "Initialization and shuffling seed")->capture_default_str();
    c->add_option("--out", t.out, "Checkpoint file to write; history goes to <out>.history.csv")->required();
  };
  auto* c_train = app.add_subcommand("train", "Train the BiLSTM localizer");
  add_train(c_train, ta);
  TrainArgs ba;
  auto* c_base = app.add_subcommand("baseline", "Train the random-configuration feed-forward baseline");
  add_train(c_base, ba);

  CalibrateArgs ca;
  auto* c_cal = app.add_subcommand("calibrate", "Build the SO-state codebook from a trained localizer");
  c_cal->add_option("--checkpoint", ca.checkpoint, "Localizer checkpoint")->required();
  c_cal->add_option("--scene", ca.scene, "Scene file the dataset was generated from")->required();
  c_cal->add_option("--dataset", ca.dataset, "Dataset (candidate configurations)")->required();
  c_cal->add_option("--resolution", ca.resolution, "Buckets per object path parameter")->capture_default_str();
  c_cal->add_option("--out", ca.out, "Codebook file to write")->required();

  EvaluateArgs ea;
  auto* c_eval = app.add_subcommand("evaluate", "Replay test instances through baseline and codebook paths");
  c_eval->add_option("--checkpoint", ea.checkpoint, "Localizer checkpoint")->required();
  c_eval->add_option("--codebook", ea.codebook, "Codebook file")->required();
  c_eval->add_option("--dataset", ea.dataset, "Dataset file")->required();
  c_eval->add_option("--baseline", ea.baseline, "Baseline checkpoint")->required();
  c_eval->add_option("--out", ea.out, "Output directory")->required();
  c_eval->add_option("--instances", ea.instances, "Test instances to replay")->capture_default_str();

  ReportArgs ra;
  auto* c_rep = app.add_subcommand("report", "Collect evaluation summaries into one results table");
  c_rep->add_option("--eval-dir", ra.eval_dirs, "Evaluation directory (repeatable)")->required();
  c_rep->add_option("--out", ra.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ExitCode::kValidation);
  }

  const unsigned workers = workers_flag ? *workers_flag : default_workers();
  try {
    if (*c_scene) cmd_scene_init(si, workers);
    if (*c_gen) {
      ga.snr_db = snr;
      cmd_generate(ga, workers);
    }
    if (*c_train) cmd_train(ta, workers);
    if (*c_base) cmd_baseline(ba, workers);
    if (*c_cal) cmd_calibrate(ca, workers);
    if (*c_eval) cmd_evaluate(ea, workers);
    if (*c_rep) cmd_report(ra, workers);
  } catch (const Error& e) {
    std::cerr << "rislab: error: " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "rislab: error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kFailure);
  }
  return 0;
}
