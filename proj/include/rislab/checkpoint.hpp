// SPDX-License-Identifier: Apache-2.0
#pragma once

// Checkpoint file: one JSON header line, a newline, then every parameter as
// a little-endian IEEE-754 double in layout order.
//
// Header keys: kind ("bilstm" | "mlp"), dims, hyperparams, seed,
// dataset_hash, val_loss, best_epoch, norm {F, S_RIS, mean, std},
// n_params, layout [{name, offset, size}], producer.

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "rislab/dataset.hpp"
#include "rislab/error.hpp"
#include "rislab/neural.hpp"
#include "rislab/provenance.hpp"

namespace rislab {

struct Checkpoint {
  std::string kind;
  nlohmann::json dims;
  TrainConfig hyper;
  std::string dataset_hash;
  double val_loss = 0.0;
  int best_epoch = 0;
  NormStats norm;
  std::vector<ParamGroup> layout;
  std::string producer;
  ParamVector theta;
};

inline nlohmann::json dims_to_json(const ModelDims& d) {
  return {{"input", d.input}, {"hidden1", d.hidden1}, {"hidden2", d.hidden2},
          {"n_classes", d.n_classes}, {"embed", d.embed}};
}

inline ModelDims dims_from_json(const nlohmann::json& j) {
  ModelDims d;
  d.input = j.at("input").get<int>();
  d.hidden1 = j.at("hidden1").get<int>();
  d.hidden2 = j.at("hidden2").get<int>();
  d.n_classes = j.at("n_classes").get<int>();
  d.embed = j.at("embed").get<int>();
  return d;
}

namespace checkpoint_detail {

inline void append_le(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline double read_le(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace checkpoint_detail

inline std::string checkpoint_to_string(const Checkpoint& c) {
  nlohmann::json h;
  h["kind"] = c.kind;
  h["dims"] = c.dims;
  h["hyperparams"] = {{"epochs", c.hyper.epochs},   {"batch", c.hyper.batch},
                      {"lr", c.hyper.adam.lr},      {"beta1", c.hyper.adam.beta1},
                      {"beta2", c.hyper.adam.beta2}, {"eps", c.hyper.adam.eps},
                      {"alpha", c.hyper.alpha},     {"clip_norm", c.hyper.clip_norm},
                      {"chunk", c.hyper.chunk}};
  h["seed"] = c.hyper.seed;
  h["dataset_hash"] = c.dataset_hash;
  h["val_loss"] = c.val_loss;
  h["best_epoch"] = c.best_epoch;
  h["norm"] = {{"F", c.norm.n_freq}, {"S_RIS", c.norm.n_sense}, {"mean", c.norm.mean}, {"std", c.norm.stddev}};
  h["n_params"] = c.theta.size();
  nlohmann::json lay = nlohmann::json::array();
  for (const auto& g : c.layout) lay.push_back({{"name", g.name}, {"offset", g.offset}, {"size", g.size}});
  h["layout"] = lay;
  h["producer"] = c.producer;
  std::string out = h.dump();
  out.push_back('\n');
  out.reserve(out.size() + 8 * c.theta.size());
  for (double v : c.theta) checkpoint_detail::append_le(out, v);
  return out;
}

inline Checkpoint checkpoint_from_string(std::string_view data) {
  const auto nl = data.find('\n');
  if (nl == std::string_view::npos) throw ValidationError("checkpoint: missing header line");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(data.substr(0, nl));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint: malformed header: ") + e.what());
  }
  Checkpoint c;
  try {
    c.kind = h.at("kind").get<std::string>();
    c.dims = h.at("dims");
    const auto& hp = h.at("hyperparams");
    c.hyper.epochs = hp.at("epochs").get<int>();
    c.hyper.batch = hp.at("batch").get<int>();
    c.hyper.adam.lr = hp.at("lr").get<double>();
    c.hyper.adam.beta1 = hp.at("beta1").get<double>();
    c.hyper.adam.beta2 = hp.at("beta2").get<double>();
    c.hyper.adam.eps = hp.at("eps").get<double>();
    c.hyper.alpha = hp.at("alpha").get<double>();
    c.hyper.clip_norm = hp.at("clip_norm").get<double>();
    c.hyper.chunk = hp.at("chunk").get<int>();
    c.hyper.seed = h.at("seed").get<std::uint64_t>();
    c.dataset_hash = h.at("dataset_hash").get<std::string>();
    c.val_loss = h.at("val_loss").get<double>();
    c.best_epoch = h.at("best_epoch").get<int>();
    const auto& n = h.at("norm");
    c.norm.n_freq = n.at("F").get<int>();
    c.norm.n_sense = n.at("S_RIS").get<int>();
    c.norm.mean = n.at("mean").get<std::vector<double>>();
    c.norm.stddev = n.at("std").get<std::vector<double>>();
    for (const auto& g : h.at("layout"))
      c.layout.push_back({g.at("name").get<std::string>(), g.at("offset").get<std::size_t>(),
                          g.at("size").get<std::size_t>()});
    c.producer = h.at("producer").get<std::string>();
    const auto n_params = h.at("n_params").get<std::size_t>();
    const auto body = data.substr(nl + 1);
    if (body.size() != 8 * n_params)
      throw ValidationError("checkpoint: header declares " + std::to_string(n_params) +
                            " parameters but the body holds " + std::to_string(body.size()) + " bytes");
    c.theta.resize(n_params);
    for (std::size_t i = 0; i < n_params; ++i) c.theta[i] = checkpoint_detail::read_le(body.data() + 8 * i);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint: bad header field: ") + e.what());
  }
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  write_file(path, checkpoint_to_string(c));
}

inline Checkpoint load_checkpoint(const std::string& path) { return checkpoint_from_string(read_file(path)); }

inline Checkpoint make_checkpoint(const BiLstmModel& m, const TrainConfig& cfg, const NormStats& norm,
                                  const TrainResult& r, std::string dataset_hash) {
  Checkpoint c;
  c.kind = "bilstm";
  c.dims = dims_to_json(m.dims);
  c.hyper = cfg;
  c.dataset_hash = std::move(dataset_hash);
  c.val_loss = r.best_val_loss;
  c.best_epoch = r.best_epoch;
  c.norm = norm;
  c.layout = m.layout().groups();
  c.producer = std::string("rislab ") + kToolVersion;
  c.theta = m.theta;
  return c;
}

inline BiLstmModel model_from_checkpoint(const Checkpoint& c) {
  if (c.kind != "bilstm") throw ValidationError("checkpoint: expected kind 'bilstm', found '" + c.kind + "'");
  BiLstmModel m(dims_from_json(c.dims));
  if (c.theta.size() != m.theta.size())
    throw ValidationError("checkpoint: parameter count does not match the stored dimensions");
  m.theta = c.theta;
  return m;
}

}  // namespace rislab
