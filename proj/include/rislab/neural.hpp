// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dual-input / dual-output recurrent localizer.
//
//   features (D x F) -> BiLSTM(H1, tanh) -> LSTM(H2, relu), last state
//   k_index          -> embedding row (E)
//   [h2_last ; embed] -> linear head (2 coordinates)
//                     -> softmax head (K configuration classes)
//
// All parameters live in one flat vector of doubles. Weight matrices are
// row-major; each cell stores input weights, recurrent weights, then bias,
// with gate blocks ordered i, f, g, o.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "rislab/dataset.hpp"
#include "rislab/error.hpp"
#include "rislab/parallel.hpp"
#include "rislab/random.hpp"

namespace rislab {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

enum class Activation { kTanh, kRelu };

struct ModelDims {
  int input = 0;
  int hidden1 = 50;
  int hidden2 = 50;
  int n_classes = 1;
  int embed = 20;

  int concat() const { return hidden2 + embed; }
  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

// Offsets of one recurrent cell inside the flat parameter vector.
struct CellLayout {
  int in = 0;
  int hidden = 0;
  std::size_t wx = 0;  // 4H x in
  std::size_t wh = 0;  // 4H x H
  std::size_t b = 0;   // 4H
  std::size_t end = 0;
};

struct ParamGroup {
  std::string name;
  std::size_t offset;
  std::size_t size;
};

struct ParamLayout {
  CellLayout fw, bw, l2;
  std::size_t embed = 0, coord_w = 0, coord_b = 0, class_w = 0, class_b = 0, total = 0;

  explicit ParamLayout(const ModelDims& d) {
    std::size_t at = 0;
    auto cell = [&](int in, int h) {
      CellLayout c{in, h, at, 0, 0, 0};
      at += static_cast<std::size_t>(4 * h * in);
      c.wh = at;
      at += static_cast<std::size_t>(4 * h * h);
      c.b = at;
      at += static_cast<std::size_t>(4 * h);
      c.end = at;
      return c;
    };
    fw = cell(d.input, d.hidden1);
    bw = cell(d.input, d.hidden1);
    l2 = cell(2 * d.hidden1, d.hidden2);
    embed = at;
    at += static_cast<std::size_t>(d.n_classes * d.embed);
    coord_w = at;
    at += static_cast<std::size_t>(2 * d.concat());
    coord_b = at;
    at += 2;
    class_w = at;
    at += static_cast<std::size_t>(d.n_classes * d.concat());
    class_b = at;
    at += static_cast<std::size_t>(d.n_classes);
    total = at;
  }

  std::vector<ParamGroup> groups() const {
    return {{"bilstm_fw", fw.wx, fw.end - fw.wx},  {"bilstm_bw", bw.wx, bw.end - bw.wx},
            {"lstm2", l2.wx, l2.end - l2.wx},      {"embed", embed, coord_w - embed},
            {"head_coord", coord_w, class_w - coord_w}, {"head_class", class_w, total - class_w}};
  }
};

// Parameter storage. The base is always vector-aligned so Eigen splits
// reductions over each block the same way in every thread and run.
using ParamVector = std::vector<double, Eigen::aligned_allocator<double>>;

struct BiLstmModel {
  ModelDims dims;
  ParamVector theta;

  BiLstmModel() = default;
  explicit BiLstmModel(const ModelDims& d)
      : dims(d), theta(ParamLayout(d).total, 0.0) {}

  ParamLayout layout() const { return ParamLayout(dims); }
};

// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) per weight matrix, zero biases
// except the forget gate (1). The embedding table is a linear map on a
// one-hot input, so its fan-in is K.
inline void init_params(BiLstmModel& m, Rng& rng) {
  const auto L = m.layout();
  auto fill = [&](std::size_t off, std::size_t n, int fan_in) {
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < n; ++i) m.theta[off + i] = rng.uniform(-s, s);
  };
  for (const CellLayout* c : {&L.fw, &L.bw, &L.l2}) {
    fill(c->wx, c->wh - c->wx, c->in);
    fill(c->wh, c->b - c->wh, c->hidden);
    for (std::size_t i = c->b; i < c->end; ++i) m.theta[i] = 0.0;
    for (int j = 0; j < c->hidden; ++j) m.theta[c->b + static_cast<std::size_t>(c->hidden + j)] = 1.0;
  }
  fill(L.embed, L.coord_w - L.embed, m.dims.n_classes);
  fill(L.coord_w, L.coord_b - L.coord_w, m.dims.concat());
  m.theta[L.coord_b] = m.theta[L.coord_b + 1] = 0.0;
  fill(L.class_w, L.class_b - L.class_w, m.dims.concat());
  for (std::size_t i = L.class_b; i < L.total; ++i) m.theta[i] = 0.0;
}

// ---------------------------------------------------------------------------
// Recurrent cell.

struct CellWeights {
  ConstMatMap wx;
  ConstMatMap wh;
  ConstVecMap b;

  CellWeights(std::span<const double> theta, const CellLayout& c)
      : wx(theta.data() + c.wx, 4 * c.hidden, c.in),
        wh(theta.data() + c.wh, 4 * c.hidden, c.hidden),
        b(theta.data() + c.b, 4 * c.hidden) {}
};

namespace neural_detail {

inline Eigen::ArrayXXd sigmoid(const Eigen::ArrayXXd& a) { return 1.0 / (1.0 + (-a).exp()); }

inline Eigen::ArrayXXd activate(const Eigen::ArrayXXd& a, Activation act) {
  return act == Activation::kTanh ? Eigen::ArrayXXd(a.tanh()) : Eigen::ArrayXXd(a.max(0.0));
}

// d act / d pre-activation, written in terms of the activation's output.
inline Eigen::ArrayXXd activate_grad(const Eigen::ArrayXXd& out, Activation act) {
  if (act == Activation::kTanh) return 1.0 - out.square();
  return (out > 0.0).cast<double>();
}

// Gate pre-activations (4H x B) -> post-activations in place, and the new
// cell/hidden state.
inline void cell_update(Eigen::Ref<Eigen::MatrixXd> gates, const Eigen::Ref<const Eigen::MatrixXd>& c_prev,
                        Eigen::Ref<Eigen::MatrixXd> c, Eigen::Ref<Eigen::MatrixXd> act_c,
                        Eigen::Ref<Eigen::MatrixXd> h, int hidden, Activation act) {
  const auto H = static_cast<Eigen::Index>(hidden);
  gates.topRows(2 * H) = sigmoid(gates.topRows(2 * H).array()).matrix();
  gates.middleRows(2 * H, H) = activate(gates.middleRows(2 * H, H).array(), act).matrix();
  gates.bottomRows(H) = sigmoid(gates.bottomRows(H).array()).matrix();
  const auto i = gates.topRows(H).array();
  const auto f = gates.middleRows(H, H).array();
  const auto g = gates.middleRows(2 * H, H).array();
  const auto o = gates.bottomRows(H).array();
  c = (f * c_prev.array() + i * g).matrix();
  act_c = activate(c.array(), act).matrix();
  h = (o * act_c.array()).matrix();
}

}  // namespace neural_detail

// One step for a single sample: gates i, f, o are sigmoids, the candidate g
// and the output squashing use `act`.
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> lstm_cell(const Eigen::VectorXd& x,
                                                             const Eigen::VectorXd& h_prev,
                                                             const Eigen::VectorXd& c_prev,
                                                             const CellWeights& w, Activation act) {
  const auto H = w.wh.cols();
  if (x.size() != w.wx.cols() || h_prev.size() != H || c_prev.size() != H)
    throw ValidationError("lstm_cell: shape mismatch");
  Eigen::MatrixXd gates = w.wx * x + w.wh * h_prev + w.b;
  Eigen::MatrixXd c(H, 1), ac(H, 1), h(H, 1);
  neural_detail::cell_update(gates, c_prev, c, ac, h, static_cast<int>(H), act);
  return {h.col(0), c.col(0)};
}

// Activations of one cell run over a batch of sequences. Columns are laid
// out step-major: column t*B + b is step t of sample b.
struct CellTrace {
  Eigen::MatrixXd gates;  // post-activation i, f, g, o
  Eigen::MatrixXd c;
  Eigen::MatrixXd act_c;
  Eigen::MatrixXd h;
};

inline CellTrace run_cell(const Eigen::MatrixXd& x, int steps, int batch, const CellWeights& w,
                          Activation act, bool reverse) {
  const auto H = w.wh.cols();
  const auto B = static_cast<Eigen::Index>(batch);
  CellTrace tr;
  tr.gates.noalias() = w.wx * x;
  tr.gates.colwise() += w.b;
  tr.c.resize(H, x.cols());
  tr.act_c.resize(H, x.cols());
  tr.h.resize(H, x.cols());
  const Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(H, B);
  for (int s = 0; s < steps; ++s) {
    const int t = reverse ? steps - 1 - s : s;
    const int tp = reverse ? t + 1 : t - 1;
    const bool first = s == 0;
    auto g = tr.gates.middleCols(t * B, B);
    if (!first) g.noalias() += w.wh * tr.h.middleCols(tp * B, B);
    neural_detail::cell_update(g, first ? zero : Eigen::MatrixXd(tr.c.middleCols(tp * B, B)),
                               tr.c.middleCols(t * B, B), tr.act_c.middleCols(t * B, B),
                               tr.h.middleCols(t * B, B), static_cast<int>(H), act);
  }
  return tr;
}

// Backpropagation through time for one cell. d_h holds dL/dh_t from the
// layer above (H x steps*B). Accumulates weight gradients into grad and
// returns dL/dx when want_dx.
inline Eigen::MatrixXd backprop_cell(const Eigen::MatrixXd& x, const CellTrace& tr,
                                     const Eigen::MatrixXd& d_h, int steps, int batch,
                                     const CellWeights& w, const CellLayout& lay,
                                     std::span<double> grad, Activation act, bool reverse,
                                     bool want_dx) {
  using neural_detail::activate_grad;
  const auto H = w.wh.cols();
  const auto B = static_cast<Eigen::Index>(batch);
  MatMap g_wx(grad.data() + lay.wx, 4 * H, w.wx.cols());
  MatMap g_wh(grad.data() + lay.wh, 4 * H, H);
  VecMap g_b(grad.data() + lay.b, 4 * H);

  Eigen::MatrixXd d_pre(4 * H, x.cols());
  Eigen::MatrixXd dh_rec = Eigen::MatrixXd::Zero(H, B);
  Eigen::MatrixXd dc_rec = Eigen::MatrixXd::Zero(H, B);
  for (int s = steps - 1; s >= 0; --s) {
    const int t = reverse ? steps - 1 - s : s;
    const int tp = reverse ? t + 1 : t - 1;
    const bool first = s == 0;
    const auto gates = tr.gates.middleCols(t * B, B).array();
    const auto i = gates.topRows(H);
    const auto f = gates.middleRows(H, H);
    const auto g = gates.middleRows(2 * H, H);
    const auto o = gates.bottomRows(H);
    const auto ac = tr.act_c.middleCols(t * B, B).array();

    const Eigen::ArrayXXd dh = d_h.middleCols(t * B, B).array() + dh_rec.array();
    const Eigen::ArrayXXd dc = dc_rec.array() + dh * o * activate_grad(ac, act);
    auto dp = d_pre.middleCols(t * B, B);
    dp.topRows(H) = (dc * g * i * (1.0 - i)).matrix();
    if (first) {
      dp.middleRows(H, H).setZero();
    } else {
      dp.middleRows(H, H) = (dc * tr.c.middleCols(tp * B, B).array() * f * (1.0 - f)).matrix();
    }
    dp.middleRows(2 * H, H) = (dc * i * activate_grad(g, act)).matrix();
    dp.bottomRows(H) = (dh * ac * o * (1.0 - o)).matrix();
    dc_rec = (dc * f).matrix();
    if (!first) {
      g_wh.noalias() += dp * tr.h.middleCols(tp * B, B).transpose();
      dh_rec.noalias() = w.wh.transpose() * dp;
    }
  }
  g_wx.noalias() += d_pre * x.transpose();
  g_b += d_pre.rowwise().sum();
  if (!want_dx) return {};
  return w.wx.transpose() * d_pre;
}

// ---------------------------------------------------------------------------
// Model forward / backward on a batch.

struct Batch {
  std::vector<const FeatureSequence*> x;
  std::vector<int> k;
  std::vector<Vec2> u;  // targets; may be empty for inference

  std::size_t size() const { return x.size(); }
};

struct ForwardTrace {
  int steps = 0;
  int batch = 0;
  Eigen::MatrixXd input;  // D x steps*B
  CellTrace fw, bw, l2;
  Eigen::MatrixXd layer1;  // 2H1 x steps*B
  Eigen::MatrixXd concat;  // (H2 + E) x B
  Eigen::MatrixXd coords;  // 2 x B
  Eigen::MatrixXd probs;   // K x B
};

namespace neural_detail {

inline Eigen::MatrixXd stack_inputs(const Batch& b, int input_dim, int& steps) {
  if (b.x.empty()) throw ValidationError("model: empty batch");
  steps = static_cast<int>(b.x.front()->cols());
  const auto B = static_cast<Eigen::Index>(b.size());
  Eigen::MatrixXd x(input_dim, steps * B);
  for (Eigen::Index j = 0; j < B; ++j) {
    const auto& seq = *b.x[static_cast<std::size_t>(j)];
    if (seq.rows() != input_dim || seq.cols() != steps)
      throw ValidationError("model: sequence shape " + std::to_string(seq.rows()) + "x" +
                            std::to_string(seq.cols()) + " does not match input width " +
                            std::to_string(input_dim));
    for (int t = 0; t < steps; ++t) x.col(t * B + j) = seq.col(t);
  }
  return x;
}

inline Eigen::MatrixXd softmax_columns(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd p(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const double mx = logits.col(j).maxCoeff();
    p.col(j) = (logits.col(j).array() - mx).exp().matrix();
    p.col(j) /= p.col(j).sum();
  }
  return p;
}

}  // namespace neural_detail

inline ForwardTrace forward(const BiLstmModel& m, const Batch& b) {
  const auto L = m.layout();
  const auto& d = m.dims;
  std::span<const double> th(m.theta);
  ForwardTrace tr;
  tr.input = neural_detail::stack_inputs(b, d.input, tr.steps);
  tr.batch = static_cast<int>(b.size());
  const auto B = static_cast<Eigen::Index>(tr.batch);
  for (int k : b.k)
    if (k < 0 || k >= d.n_classes)
      throw ValidationError("model: configuration index " + std::to_string(k) + " out of range");

  tr.fw = run_cell(tr.input, tr.steps, tr.batch, CellWeights(th, L.fw), Activation::kTanh, false);
  tr.bw = run_cell(tr.input, tr.steps, tr.batch, CellWeights(th, L.bw), Activation::kTanh, true);
  tr.layer1.resize(2 * d.hidden1, tr.input.cols());
  tr.layer1.topRows(d.hidden1) = tr.fw.h;
  tr.layer1.bottomRows(d.hidden1) = tr.bw.h;
  tr.l2 = run_cell(tr.layer1, tr.steps, tr.batch, CellWeights(th, L.l2), Activation::kRelu, false);

  ConstMatMap emb(th.data() + L.embed, d.n_classes, d.embed);
  tr.concat.resize(d.concat(), B);
  tr.concat.topRows(d.hidden2) = tr.l2.h.middleCols((tr.steps - 1) * B, B);
  for (Eigen::Index j = 0; j < B; ++j)
    tr.concat.col(j).tail(d.embed) = emb.row(b.k[static_cast<std::size_t>(j)]).transpose();

  ConstMatMap wc(th.data() + L.coord_w, 2, d.concat());
  ConstVecMap bc(th.data() + L.coord_b, 2);
  ConstMatMap wk(th.data() + L.class_w, d.n_classes, d.concat());
  ConstVecMap bk(th.data() + L.class_b, d.n_classes);
  tr.coords.noalias() = wc * tr.concat;
  tr.coords.colwise() += bc;
  Eigen::MatrixXd logits = wk * tr.concat;
  logits.colwise() += bk;
  tr.probs = neural_detail::softmax_columns(logits);
  return tr;
}

// Per-step [h_fw; h_bw] for one sequence, one column per step.
inline Eigen::MatrixXd bilstm_forward(const FeatureSequence& seq, const BiLstmModel& m) {
  const auto L = m.layout();
  std::span<const double> th(m.theta);
  const int steps = static_cast<int>(seq.cols());
  if (steps < 1) throw ValidationError("bilstm_forward: empty sequence");
  if (seq.rows() != m.dims.input) throw ValidationError("bilstm_forward: input width mismatch");
  const auto fw = run_cell(seq, steps, 1, CellWeights(th, L.fw), Activation::kTanh, false);
  const auto bw = run_cell(seq, steps, 1, CellWeights(th, L.bw), Activation::kTanh, true);
  Eigen::MatrixXd out(2 * m.dims.hidden1, steps);
  out.topRows(m.dims.hidden1) = fw.h;
  out.bottomRows(m.dims.hidden1) = bw.h;
  return out;
}

struct Prediction {
  Vec2 u_hat;
  std::vector<double> probs;
};

inline Prediction model_forward(const FeatureSequence& seq, int k_index, const BiLstmModel& m) {
  Batch b;
  b.x = {&seq};
  b.k = {k_index};
  const auto tr = forward(m, b);
  Prediction p;
  p.u_hat = {tr.coords(0, 0), tr.coords(1, 0)};
  p.probs.assign(tr.probs.data(), tr.probs.data() + tr.probs.rows());
  return p;
}

// Coordinate-head outputs for many sequences, evaluated in fixed chunks.
inline std::vector<Vec2> predict_coords(const BiLstmModel& m, std::span<const FeatureSequence> xs,
                                        std::span<const int> ks, std::size_t chunk = 64) {
  if (xs.size() != ks.size()) throw ValidationError("predict_coords: length mismatch");
  std::vector<Vec2> out;
  out.reserve(xs.size());
  for (std::size_t start = 0; start < xs.size(); start += chunk) {
    Batch b;
    for (std::size_t i = start; i < std::min(xs.size(), start + chunk); ++i) {
      b.x.push_back(&xs[i]);
      b.k.push_back(ks[i]);
    }
    const auto tr = forward(m, b);
    for (Eigen::Index j = 0; j < tr.coords.cols(); ++j) out.push_back({tr.coords(0, j), tr.coords(1, j)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Hybrid loss: mean squared coordinate error + mean cross-entropy + alpha |theta|^2.

inline constexpr double kProbFloor = 1e-12;

struct LossSpec {
  double alpha = 1e-4;
  int n_classes = 1;
};

struct LossParts {
  double coord = 0.0;
  double cls = 0.0;
  double reg = 0.0;
  double total() const { return coord + cls + reg; }
};

// Sums over a batch (not yet divided by N).
struct DataLoss {
  double coord = 0.0;
  double cls = 0.0;
  std::size_t n = 0;

  DataLoss& operator+=(const DataLoss& o) {
    coord += o.coord;
    cls += o.cls;
    n += o.n;
    return *this;
  }
};

inline double squared_norm(std::span<const double> theta) {
  double s = 0.0;
  for (double v : theta) s += v * v;
  return s;
}

inline double cross_entropy(std::span<const double> probs, int k) {
  return -std::log(std::max(probs[static_cast<std::size_t>(k)], kProbFloor));
}

inline LossParts hybrid_loss(std::span<const Vec2> u_hat, std::span<const std::vector<double>> probs,
                             std::span<const Vec2> u, std::span<const int> k,
                             std::span<const double> theta, const LossSpec& ls) {
  const std::size_t n = u_hat.size();
  if (n == 0) throw ValidationError("hybrid_loss: empty batch");
  if (probs.size() != n || u.size() != n || k.size() != n)
    throw ValidationError("hybrid_loss: batch length mismatch");
  LossParts out;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = u[i].x - u_hat[i].x;
    const double dy = u[i].y - u_hat[i].y;
    out.coord += dx * dx + dy * dy;
    if (k[i] < 0 || k[i] >= static_cast<int>(probs[i].size()))
      throw ValidationError("hybrid_loss: target class out of range");
    out.cls += cross_entropy(probs[i], k[i]);
  }
  out.coord /= static_cast<double>(n);
  out.cls /= static_cast<double>(n);
  out.reg = ls.alpha * squared_norm(theta);
  return out;
}

// Data-term sums for a batch and, when grad is non-empty, adds
// scale * d(sums)/d(theta) into grad. The regularizer is not included.
inline DataLoss accumulate_gradient(const BiLstmModel& m, const Batch& b, double scale,
                                    std::span<double> grad) {
  const auto L = m.layout();
  const auto& d = m.dims;
  std::span<const double> th(m.theta);
  const auto tr = forward(m, b);
  const auto B = static_cast<Eigen::Index>(tr.batch);
  if (b.u.size() != b.size()) throw ValidationError("model: missing coordinate targets");

  DataLoss loss;
  loss.n = b.size();
  Eigen::MatrixXd d_coords(2, B);
  Eigen::MatrixXd d_logits = tr.probs;
  for (Eigen::Index j = 0; j < B; ++j) {
    const auto& u = b.u[static_cast<std::size_t>(j)];
    const int k = b.k[static_cast<std::size_t>(j)];
    const double ex = tr.coords(0, j) - u.x;
    const double ey = tr.coords(1, j) - u.y;
    loss.coord += ex * ex + ey * ey;
    const double pk = tr.probs(k, j);
    loss.cls += -std::log(std::max(pk, kProbFloor));
    d_coords(0, j) = 2.0 * ex * scale;
    d_coords(1, j) = 2.0 * ey * scale;
    if (pk >= kProbFloor) {
      d_logits(k, j) -= 1.0;
      d_logits.col(j) *= scale;
    } else {
      d_logits.col(j).setZero();  // clamped log is flat
    }
  }
  if (grad.empty()) return loss;

  MatMap g_wc(grad.data() + L.coord_w, 2, d.concat());
  VecMap g_bc(grad.data() + L.coord_b, 2);
  MatMap g_wk(grad.data() + L.class_w, d.n_classes, d.concat());
  VecMap g_bk(grad.data() + L.class_b, d.n_classes);
  MatMap g_emb(grad.data() + L.embed, d.n_classes, d.embed);
  ConstMatMap wc(th.data() + L.coord_w, 2, d.concat());
  ConstMatMap wk(th.data() + L.class_w, d.n_classes, d.concat());

  g_wc.noalias() += d_coords * tr.concat.transpose();
  g_bc += d_coords.rowwise().sum();
  g_wk.noalias() += d_logits * tr.concat.transpose();
  g_bk += d_logits.rowwise().sum();
  Eigen::MatrixXd d_concat = wc.transpose() * d_coords;
  d_concat.noalias() += wk.transpose() * d_logits;
  for (Eigen::Index j = 0; j < B; ++j)
    g_emb.row(b.k[static_cast<std::size_t>(j)]) += d_concat.col(j).tail(d.embed).transpose();

  Eigen::MatrixXd d_h2 = Eigen::MatrixXd::Zero(d.hidden2, tr.input.cols());
  d_h2.middleCols((tr.steps - 1) * B, B) = d_concat.topRows(d.hidden2);
  const Eigen::MatrixXd d_layer1 =
      backprop_cell(tr.layer1, tr.l2, d_h2, tr.steps, tr.batch, CellWeights(th, L.l2), L.l2, grad,
                    Activation::kRelu, false, true);
  backprop_cell(tr.input, tr.fw, d_layer1.topRows(d.hidden1), tr.steps, tr.batch,
                CellWeights(th, L.fw), L.fw, grad, Activation::kTanh, false, false);
  backprop_cell(tr.input, tr.bw, d_layer1.bottomRows(d.hidden1), tr.steps, tr.batch,
                CellWeights(th, L.bw), L.bw, grad, Activation::kTanh, true, false);
  return loss;
}

// Gradient of the full hybrid loss over one batch.
inline std::vector<double> backward(const BiLstmModel& m, const Batch& b, const LossSpec& ls,
                                    LossParts* parts = nullptr) {
  std::vector<double> grad(m.theta.size(), 0.0);
  const double n = static_cast<double>(b.size());
  const auto dl = accumulate_gradient(m, b, 1.0 / n, grad);
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += 2.0 * ls.alpha * m.theta[i];
  if (parts) *parts = {dl.coord / n, dl.cls / n, ls.alpha * squared_norm(m.theta)};
  return grad;
}

// ---------------------------------------------------------------------------
// Adam.

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

struct OptimizerState {
  AdamConfig cfg;
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;

  OptimizerState() = default;
  OptimizerState(const AdamConfig& c, std::size_t n) : cfg(c), m(n, 0.0), v(n, 0.0) {}
};

inline void adam_step(std::span<double> theta, std::span<const double> grad, OptimizerState& st) {
  if (grad.size() != theta.size() || st.m.size() != theta.size() || st.v.size() != theta.size())
    throw ValidationError("adam_step: shape mismatch");
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!std::isfinite(grad[i]))
      throw NumericalError("adam_step: non-finite gradient at parameter " + std::to_string(i));
  ++st.step;
  const auto& c = st.cfg;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * grad[i];
    st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * (grad[i] * grad[i]);
    theta[i] -= c.lr * (st.m[i] / bc1) / (std::sqrt(st.v[i] / bc2) + c.eps);
  }
}

// ---------------------------------------------------------------------------
// Training loop, shared by every network with this interface:
//   std::size_t param_count() const;
//   DataLoss accumulate(std::span<const double> theta, std::span<const std::size_t> idx,
//                       double scale, std::span<double> grad) const;
// accumulate() returns data-term sums over idx and, if grad is non-empty,
// adds scale * gradient of those sums.

template <typename Net>
concept TrainableNet = requires(const Net& n, std::span<const double> th,
                                std::span<const std::size_t> idx, double s, std::span<double> g) {
  { n.param_count() } -> std::convertible_to<std::size_t>;
  { n.accumulate(th, idx, s, g) } -> std::same_as<DataLoss>;
};

struct TrainConfig {
  int epochs = 200;
  int batch = 32;
  double alpha = 1e-4;
  AdamConfig adam{};
  std::uint64_t seed = 0;
  double clip_norm = 5.0;  // <= 0 disables clipping
  int chunk = 8;           // samples per gradient chunk, fixed so workers never change sums
  unsigned workers = 1;
  int eval_chunk = 256;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  bool improved = false;
};

struct TrainResult {
  ParamVector theta;  // best checkpoint
  double best_val_loss = 0.0;
  int best_epoch = 0;         // 0 = initialization
  double initial_val_loss = 0.0;
  std::vector<EpochRecord> history;
};

// Mean data loss over idx plus alpha |theta|^2, evaluated in fixed chunks.
template <TrainableNet Net>
LossParts evaluate_loss(const Net& net, std::span<const double> theta,
                        std::span<const std::size_t> idx, double alpha, int chunk = 256,
                        unsigned workers = 1) {
  if (idx.empty()) throw ValidationError("evaluate_loss: empty split");
  const std::size_t c = static_cast<std::size_t>(std::max(1, chunk));
  const std::size_t n_chunks = (idx.size() + c - 1) / c;
  std::vector<DataLoss> parts(n_chunks);
  parallel_for(n_chunks, workers, [&](std::size_t i) {
    const auto sub = idx.subspan(i * c, std::min(c, idx.size() - i * c));
    parts[i] = net.accumulate(theta, sub, 0.0, {});
  });
  DataLoss sum;
  for (const auto& p : parts) sum += p;
  const double n = static_cast<double>(sum.n);
  return {sum.coord / n, sum.cls / n, alpha * squared_norm(theta)};
}

// Mini-batch Adam with per-epoch seeded shuffling. After every epoch the
// validation loss is measured and the parameters are kept only when it
// strictly improves. Batches are cut into fixed chunks whose gradients are
// summed in chunk order, so the worker count never changes the result.
template <TrainableNet Net>
TrainResult train(const Net& net, ParamVector theta, std::span<const std::size_t> train_idx,
                  std::span<const std::size_t> val_idx, const TrainConfig& cfg) {
  if (train_idx.empty() || val_idx.empty()) throw ValidationError("train: empty split");
  if (cfg.batch < 1) throw ValidationError("train: batch size must be >= 1");
  if (cfg.epochs < 0) throw ValidationError("train: epochs must be >= 0");
  if (theta.size() != net.param_count()) throw ValidationError("train: parameter count mismatch");
  {
    std::vector<std::size_t> a(train_idx.begin(), train_idx.end());
    std::vector<std::size_t> b(val_idx.begin(), val_idx.end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::vector<std::size_t> common;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
    if (!common.empty()) throw ValidationError("train: training and validation splits overlap");
  }

  TrainResult res;
  res.initial_val_loss =
      evaluate_loss(net, theta, val_idx, cfg.alpha, cfg.eval_chunk, cfg.workers).total();
  if (!std::isfinite(res.initial_val_loss)) throw NumericalError("train: non-finite initial loss");
  res.best_val_loss = res.initial_val_loss;
  res.theta = theta;

  OptimizerState opt(cfg.adam, theta.size());
  std::vector<std::size_t> order(train_idx.begin(), train_idx.end());
  ParamVector grad(theta.size());
  const std::size_t bsz = static_cast<std::size_t>(cfg.batch);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng = derive_stream(cfg.seed, {stream::kShuffle, static_cast<std::uint64_t>(epoch)});
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += bsz) {
      const std::span<const std::size_t> batch(order.data() + start, std::min(bsz, order.size() - start));
      const std::size_t chunk = cfg.chunk > 0 ? static_cast<std::size_t>(cfg.chunk) : batch.size();
      const std::size_t n_chunks = (batch.size() + chunk - 1) / chunk;
      std::vector<ParamVector> chunk_grads(n_chunks, ParamVector(theta.size(), 0.0));
      std::vector<DataLoss> chunk_loss(n_chunks);
      const double scale = 1.0 / static_cast<double>(batch.size());
      parallel_for(n_chunks, cfg.workers, [&](std::size_t c) {
        const auto sub = batch.subspan(c * chunk, std::min(chunk, batch.size() - c * chunk));
        chunk_loss[c] = net.accumulate(theta, sub, scale, chunk_grads[c]);
      });
      DataLoss dl;
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t c = 0; c < n_chunks; ++c) {
        dl += chunk_loss[c];
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += chunk_grads[c][i];
      }
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += 2.0 * cfg.alpha * theta[i];
      const double batch_loss =
          (dl.coord + dl.cls) / static_cast<double>(dl.n) + cfg.alpha * squared_norm(theta);
      if (!std::isfinite(batch_loss))
        throw NumericalError("train: non-finite loss at epoch " + std::to_string(epoch) +
                             ", batch " + std::to_string(n_batches));
      if (cfg.clip_norm > 0.0) {
        const double norm = std::sqrt(squared_norm(grad));
        if (norm > cfg.clip_norm)
          for (auto& g : grad) g *= cfg.clip_norm / norm;
      }
      try {
        adam_step(theta, grad, opt);
      } catch (const NumericalError& e) {
        throw NumericalError("train: epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(n_batches) + ": " + e.what());
      }
      loss_sum += batch_loss;
      ++n_batches;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(n_batches);
    rec.val_loss = evaluate_loss(net, theta, val_idx, cfg.alpha, cfg.eval_chunk, cfg.workers).total();
    if (!std::isfinite(rec.val_loss))
      throw NumericalError("train: non-finite validation loss at epoch " + std::to_string(epoch));
    if (rec.val_loss < res.best_val_loss) {
      rec.improved = true;
      res.best_val_loss = rec.val_loss;
      res.best_epoch = epoch;
      res.theta = theta;
    }
    res.history.push_back(rec);
  }
  return res;
}

// ---------------------------------------------------------------------------
// The recurrent localizer bound to a featurized dataset.

struct FeatureStore {
  std::vector<FeatureSequence> x;
  std::vector<int> k;
  std::vector<Vec2> u;
  int n_classes = 1;

  std::size_t size() const { return x.size(); }
};

inline FeatureStore build_features(const Dataset& ds, const NormStats& norm) {
  FeatureStore fs;
  fs.n_classes = ds.meta.n_configs;
  fs.x.reserve(ds.size());
  for (const auto& r : ds.records) {
    fs.x.push_back(featurize(r, norm));
    fs.k.push_back(r.k_index);
    fs.u.push_back(r.u);
  }
  return fs;
}

class BiLstmNet {
 public:
  BiLstmNet(const ModelDims& dims, const FeatureStore& data) : dims_(dims), data_(&data) {}

  std::size_t param_count() const { return ParamLayout(dims_).total; }
  const ModelDims& dims() const { return dims_; }

  DataLoss accumulate(std::span<const double> theta, std::span<const std::size_t> idx, double scale,
                      std::span<double> grad) const {
    // The model type owns its parameters; wrap without copying where possible.
    BiLstmModel m;
    m.dims = dims_;
    m.theta.assign(theta.begin(), theta.end());
    Batch b;
    for (auto i : idx) {
      b.x.push_back(&data_->x[i]);
      b.k.push_back(data_->k[i]);
      b.u.push_back(data_->u[i]);
    }
    return accumulate_gradient(m, b, scale, grad);
  }

 private:
  ModelDims dims_;
  const FeatureStore* data_;
};

struct LocalizerFit {
  BiLstmModel model;
  NormStats norm;
  TrainResult result;
};

// Standardizes on the training split, initializes from the seed and trains.
// dims.input and dims.n_classes are taken from the dataset.
inline LocalizerFit train_localizer(const Dataset& ds, const Split& sp, const TrainConfig& cfg,
                                    ModelDims dims = {}) {
  LocalizerFit fit;
  fit.norm = fit_norm(ds, sp.train);
  dims.input = fit.norm.width();
  dims.n_classes = ds.meta.n_configs;
  const FeatureStore fs = build_features(ds, fit.norm);
  const BiLstmNet net(dims, fs);
  fit.model = BiLstmModel(dims);
  Rng rng = derive_stream(cfg.seed, {stream::kInit});
  init_params(fit.model, rng);
  fit.result = train(net, fit.model.theta, sp.train, sp.val, cfg);
  fit.model.theta = fit.result.theta;
  return fit;
}

// ---------------------------------------------------------------------------
// Grid search.

struct GridRow {
  TrainConfig config;
  double best_val_loss = 0.0;
  double final_train_loss = 0.0;
  int best_epoch = 0;
};

struct GridResult {
  std::size_t best = 0;
  std::vector<GridRow> table;  // grid order
};

// Trains one model per grid point from the same initialization and ranks
// by best validation loss; ties go to the earlier grid point.
template <TrainableNet Net>
GridResult grid_search(const Net& net, const ParamVector& theta0,
                       std::span<const TrainConfig> grid, std::span<const std::size_t> train_idx,
                       std::span<const std::size_t> val_idx) {
  if (grid.empty()) throw ValidationError("grid_search: empty grid");
  GridResult out;
  for (const auto& cfg : grid) {
    const auto r = train(net, theta0, train_idx, val_idx, cfg);
    GridRow row;
    row.config = cfg;
    row.best_val_loss = r.best_val_loss;
    row.final_train_loss = r.history.empty() ? r.initial_val_loss : r.history.back().train_loss;
    row.best_epoch = r.best_epoch;
    out.table.push_back(row);
  }
  for (std::size_t i = 1; i < out.table.size(); ++i)
    if (out.table[i].best_val_loss < out.table[out.best].best_val_loss) out.best = i;
  return out;
}

}  // namespace rislab
