#include "lotattn/autograd.hpp"

#include <cmath>
#include <cstring>
#include <utility>

#include "lotattn/error.hpp"

namespace lotattn::ad {
namespace {

using Values = Tape::Values;

const Matrix& at(const Values& v, int id) { return v[static_cast<std::size_t>(id)]; }

Matrix lse_along_rows(const Matrix& a) {
  const Eigen::VectorXd m = a.rowwise().maxCoeff();
  Matrix out(a.rows(), 1);
  for (Index i = 0; i < a.rows(); ++i)
    out(i, 0) = m(i) + std::log((a.row(i).array() - m(i)).exp().sum());
  return out;
}

Matrix lse_down_cols(const Matrix& a) {
  const Eigen::RowVectorXd m = a.colwise().maxCoeff();
  Matrix out(1, a.cols());
  for (Index j = 0; j < a.cols(); ++j)
    out(0, j) = m(j) + std::log((a.col(j).array() - m(j)).exp().sum());
  return out;
}

}  // namespace

Var Tape::input(Matrix value, bool requires_grad) {
  Node node;
  node.needs_grad = requires_grad;
  nodes_.push_back(std::move(node));
  values_.push_back(std::move(value));
  grads_.emplace_back();
  has_grad_.push_back(false);
  return Var{static_cast<int>(values_.size()) - 1};
}

Var Tape::record(std::vector<int> inputs, Forward forward, Backward backward) {
  Matrix value = forward(values_);
  bool needs = false;
  for (int id : inputs) needs = needs || nodes_[static_cast<std::size_t>(id)].needs_grad;
  nodes_.push_back(Node{std::move(inputs), std::move(forward), std::move(backward), needs});
  values_.push_back(std::move(value));
  grads_.emplace_back();
  has_grad_.push_back(false);
  return Var{static_cast<int>(values_.size()) - 1};
}

const Matrix& Tape::value(Var v) const { return val(v.id); }

Matrix Tape::grad(Var v) const {
  const auto i = static_cast<std::size_t>(v.id);
  if (has_grad_[i]) return grads_[i];
  return Matrix::Zero(values_[i].rows(), values_[i].cols());
}

bool Tape::requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }

void Tape::accumulate(int id, const Matrix& g) {
  const auto i = static_cast<std::size_t>(id);
  if (!nodes_[i].needs_grad) return;
  if (has_grad_[i]) {
    grads_[i] += g;
  } else {
    grads_[i] = g;
    has_grad_[i] = true;
  }
}

void Tape::zero_grad() {
  for (std::size_t i = 0; i < grads_.size(); ++i) {
    grads_[i] = Matrix();
    has_grad_[i] = false;
  }
  reverse_visits_ = 0;
}

void Tape::backward(Var out, const Matrix& seed) {
  const Matrix& v = val(out.id);
  if (seed.rows() != v.rows() || seed.cols() != v.cols())
    fail(ErrorKind::kShapeMismatch, "seed gradient shape differs from the output");
  if (!all_finite(seed)) fail(ErrorKind::kInvalidInput, "non-finite upstream gradient");
  accumulate(out.id, seed);
  for (int id = out.id; id >= 0; --id) {
    const auto i = static_cast<std::size_t>(id);
    ++reverse_visits_;
    if (!has_grad_[i] || !nodes_[i].backward) continue;
    // Copy: the rule may accumulate into other nodes' storage.
    const Matrix g = grads_[i];
    nodes_[i].backward(*this, g);
  }
}

bool Tape::replay() const {
  Values fresh(values_.size());
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (!nodes_[i].forward) {
      fresh[i] = values_[i];
      continue;
    }
    fresh[i] = nodes_[i].forward(fresh);
    const Matrix& old = values_[i];
    if (fresh[i].rows() != old.rows() || fresh[i].cols() != old.cols()) return false;
    if (std::memcmp(fresh[i].data(), old.data(), sizeof(double) * static_cast<std::size_t>(old.size())) != 0)
      return false;
  }
  return true;
}

Var Tape::matmul(Var a, Var b) {
  if (val(a.id).cols() != val(b.id).rows())
    fail(ErrorKind::kShapeMismatch, "matmul inner dimensions differ");
  const int ia = a.id, ib = b.id;
  return record(
      {ia, ib}, [=](const Values& v) -> Matrix { return at(v, ia) * at(v, ib); },
      [=](Tape& t, const Matrix& g) {
        if (t.nodes_[static_cast<std::size_t>(ia)].needs_grad)
          t.accumulate(ia, g * t.val(ib).transpose());
        if (t.nodes_[static_cast<std::size_t>(ib)].needs_grad)
          t.accumulate(ib, t.val(ia).transpose() * g);
      });
}

Var Tape::transpose(Var a) {
  const int ia = a.id;
  return record(
      {ia}, [=](const Values& v) -> Matrix { return at(v, ia).transpose(); },
      [=](Tape& t, const Matrix& g) { t.accumulate(ia, g.transpose()); });
}

Var Tape::add(Var a, Var b) {
  const int ia = a.id, ib = b.id;
  if (val(ia).rows() != val(ib).rows() || val(ia).cols() != val(ib).cols())
    fail(ErrorKind::kShapeMismatch, "add shapes differ");
  return record(
      {ia, ib}, [=](const Values& v) -> Matrix { return at(v, ia) + at(v, ib); },
      [=](Tape& t, const Matrix& g) {
        t.accumulate(ia, g);
        t.accumulate(ib, g);
      });
}

Var Tape::sub(Var a, Var b) {
  const int ia = a.id, ib = b.id;
  if (val(ia).rows() != val(ib).rows() || val(ia).cols() != val(ib).cols())
    fail(ErrorKind::kShapeMismatch, "sub shapes differ");
  return record(
      {ia, ib}, [=](const Values& v) -> Matrix { return at(v, ia) - at(v, ib); },
      [=](Tape& t, const Matrix& g) {
        t.accumulate(ia, g);
        t.accumulate(ib, -g);
      });
}

Var Tape::mul(Var a, Var b) {
  const int ia = a.id, ib = b.id;
  if (val(ia).rows() != val(ib).rows() || val(ia).cols() != val(ib).cols())
    fail(ErrorKind::kShapeMismatch, "mul shapes differ");
  return record(
      {ia, ib}, [=](const Values& v) -> Matrix { return at(v, ia).cwiseProduct(at(v, ib)); },
      [=](Tape& t, const Matrix& g) {
        t.accumulate(ia, g.cwiseProduct(t.val(ib)));
        t.accumulate(ib, g.cwiseProduct(t.val(ia)));
      });
}

Var Tape::scale(Var a, double s) {
  const int ia = a.id;
  return record(
      {ia}, [=](const Values& v) -> Matrix { return at(v, ia) * s; },
      [=](Tape& t, const Matrix& g) { t.accumulate(ia, g * s); });
}

Var Tape::add_row(Var a, Var row) {
  const int ia = a.id, ir = row.id;
  if (val(ir).rows() != 1 || val(ir).cols() != val(ia).cols())
    fail(ErrorKind::kShapeMismatch, "add_row expects a 1 x cols row");
  return record(
      {ia, ir},
      [=](const Values& v) -> Matrix {
        Matrix out = at(v, ia);
        out.rowwise() += at(v, ir).row(0);
        return out;
      },
      [=](Tape& t, const Matrix& g) {
        t.accumulate(ia, g);
        t.accumulate(ir, g.colwise().sum());
      });
}

Var Tape::add_col(Var a, Var col) {
  const int ia = a.id, ic = col.id;
  if (val(ic).cols() != 1 || val(ic).rows() != val(ia).rows())
    fail(ErrorKind::kShapeMismatch, "add_col expects a rows x 1 column");
  return record(
      {ia, ic},
      [=](const Values& v) -> Matrix {
        Matrix out = at(v, ia);
        out.colwise() += at(v, ic).col(0);
        return out;
      },
      [=](Tape& t, const Matrix& g) {
        t.accumulate(ia, g);
        t.accumulate(ic, g.rowwise().sum());
      });
}

Var Tape::div_col(Var a, Var col) {
  const int ia = a.id, ic = col.id;
  if (val(ic).cols() != 1 || val(ic).rows() != val(ia).rows())
    fail(ErrorKind::kShapeMismatch, "div_col expects a rows x 1 column");
  const int self = static_cast<int>(values_.size());
  return record(
      {ia, ic},
      [=](const Values& v) -> Matrix {
        return at(v, ic).col(0).cwiseInverse().asDiagonal() * at(v, ia);
      },
      [=](Tape& t, const Matrix& g) {
        const Matrix& c = t.val(ic);
        t.accumulate(ia, c.col(0).cwiseInverse().asDiagonal() * g);
        if (t.nodes_[static_cast<std::size_t>(ic)].needs_grad) {
          const Matrix& out = t.val(self);
          Matrix gc(c.rows(), 1);
          for (Index i = 0; i < c.rows(); ++i) gc(i, 0) = -g.row(i).dot(out.row(i)) / c(i, 0);
          t.accumulate(ic, gc);
        }
      });
}

Var Tape::exp(Var a) {
  const int ia = a.id;
  const int self = static_cast<int>(values_.size());
  return record(
      {ia}, [=](const Values& v) -> Matrix { return at(v, ia).array().exp().matrix(); },
      [=](Tape& t, const Matrix& g) { t.accumulate(ia, g.cwiseProduct(t.val(self))); });
}

Var Tape::relu(Var a) {
  const int ia = a.id;
  return record(
      {ia}, [=](const Values& v) -> Matrix { return at(v, ia).cwiseMax(0.0); },
      [=](Tape& t, const Matrix& g) {
        t.accumulate(ia, (t.val(ia).array() > 0.0).select(g, 0.0).matrix());
      });
}

Var Tape::pow0(Var a, double p) {
  if (!(p > 0.0)) fail(ErrorKind::kInvalidInput, "pow0 exponent must be positive");
  const int ia = a.id;
  return record(
      {ia},
      [=](const Values& v) -> Matrix {
        return at(v, ia).unaryExpr([p](double x) { return x > 0.0 ? std::pow(x, p) : 0.0; });
      },
      [=](Tape& t, const Matrix& g) {
        // At exactly 0 only p = 1 has a finite one-sided slope worth keeping.
        const Matrix d = t.val(ia).unaryExpr([p](double x) {
          if (x > 0.0) return p * std::pow(x, p - 1.0);
          return p == 1.0 ? 1.0 : 0.0;
        });
        t.accumulate(ia, g.cwiseProduct(d));
      });
}

Var Tape::lse_rows(Var a) {
  const int ia = a.id;
  const int self = static_cast<int>(values_.size());
  return record(
      {ia}, [=](const Values& v) -> Matrix { return lse_along_rows(at(v, ia)); },
      [=](Tape& t, const Matrix& g) {
        Matrix w = t.val(ia);
        w.colwise() -= t.val(self).col(0);
        t.accumulate(ia, (w.array().exp().colwise() * g.col(0).array()).matrix());
      });
}

Var Tape::lse_cols(Var a) {
  const int ia = a.id;
  const int self = static_cast<int>(values_.size());
  return record(
      {ia}, [=](const Values& v) -> Matrix { return lse_down_cols(at(v, ia)); },
      [=](Tape& t, const Matrix& g) {
        Matrix w = t.val(ia);
        w.rowwise() -= t.val(self).row(0);
        t.accumulate(ia, (w.array().exp().rowwise() * g.row(0).array()).matrix());
      });
}

Var Tape::softmax_rows(Var a) {
  const int ia = a.id;
  const int self = static_cast<int>(values_.size());
  return record(
      {ia},
      [=](const Values& v) -> Matrix {
        Matrix w = at(v, ia);
        w.colwise() -= lse_along_rows(w).col(0);
        return w.array().exp().matrix();
      },
      [=](Tape& t, const Matrix& g) {
        const Matrix& s = t.val(self);
        const Eigen::VectorXd inner = g.cwiseProduct(s).rowwise().sum();
        Matrix ga = g;
        ga.colwise() -= inner;
        t.accumulate(ia, ga.cwiseProduct(s));
      });
}

Var Tape::log_softmax_col(Var a) {
  const int ia = a.id;
  if (val(ia).cols() != 1) fail(ErrorKind::kShapeMismatch, "log_softmax_col expects a column");
  const int self = static_cast<int>(values_.size());
  return record(
      {ia},
      [=](const Values& v) -> Matrix {
        return (at(v, ia).array() - lse_down_cols(at(v, ia))(0, 0)).matrix();
      },
      [=](Tape& t, const Matrix& g) {
        const Matrix p = t.val(self).array().exp().matrix();
        t.accumulate(ia, g - p * g.sum());
      });
}

Var Tape::slice_rows(Var a, Index start, Index count) {
  const int ia = a.id;
  if (start < 0 || count < 0 || start + count > val(ia).rows())
    fail(ErrorKind::kShapeMismatch, "row slice out of range");
  return record(
      {ia}, [=](const Values& v) -> Matrix { return at(v, ia).middleRows(start, count); },
      [=](Tape& t, const Matrix& g) {
        Matrix ga = Matrix::Zero(t.val(ia).rows(), t.val(ia).cols());
        ga.middleRows(start, count) = g;
        t.accumulate(ia, ga);
      });
}

Var Tape::concat_rows(Var top, Var bottom) {
  const int it = top.id, ib = bottom.id;
  if (val(it).cols() != val(ib).cols()) fail(ErrorKind::kShapeMismatch, "concat widths differ");
  const Index split = val(it).rows();
  return record(
      {it, ib},
      [=](const Values& v) -> Matrix {
        Matrix out(at(v, it).rows() + at(v, ib).rows(), at(v, it).cols());
        out << at(v, it), at(v, ib);
        return out;
      },
      [=](Tape& t, const Matrix& g) {
        t.accumulate(it, g.topRows(split));
        t.accumulate(ib, g.bottomRows(g.rows() - split));
      });
}

Var Tape::gather_rows(Var table, std::vector<Index> ids) {
  const int it = table.id;
  for (Index id : ids)
    if (id < 0 || id >= val(it).rows()) fail(ErrorKind::kInvalidInput, "gather index out of range");
  return record(
      {it},
      [=](const Values& v) -> Matrix {
        Matrix out(static_cast<Index>(ids.size()), at(v, it).cols());
        for (std::size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Index>(i)) = at(v, it).row(ids[i]);
        return out;
      },
      [=](Tape& t, const Matrix& g) {
        Matrix ga = Matrix::Zero(t.val(it).rows(), t.val(it).cols());
        for (std::size_t i = 0; i < ids.size(); ++i) ga.row(ids[i]) += g.row(static_cast<Index>(i));
        t.accumulate(it, ga);
      });
}

Var Tape::mean_rows(Var a) {
  const int ia = a.id;
  return record(
      {ia}, [=](const Values& v) -> Matrix { return at(v, ia).colwise().mean(); },
      [=](Tape& t, const Matrix& g) {
        const Index m = t.val(ia).rows();
        t.accumulate(ia, g.replicate(m, 1) / static_cast<double>(m));
      });
}

Var Tape::depthwise_conv(Var values, Var kernel) {
  const int iv = values.id, ik = kernel.id;
  return record(
      {iv, ik},
      [=](const Values& v) -> Matrix { return depthwise_conv_values(at(v, iv), at(v, ik)); },
      [=](Tape& t, const Matrix& g) {
        const Matrix& k = t.val(ik);
        t.accumulate(iv, depthwise_conv_values(g, k.colwise().reverse()));
        if (t.nodes_[static_cast<std::size_t>(ik)].needs_grad) {
          const Matrix& x = t.val(iv);
          const Index n = x.rows(), half = k.rows() / 2;
          Matrix gk = Matrix::Zero(k.rows(), k.cols());
          for (Index tap = 0; tap < k.rows(); ++tap) {
            const Index shift = tap - half;
            const Index lo = std::max<Index>(0, -shift), hi = std::min<Index>(n, n - shift);
            if (hi <= lo) continue;
            gk.row(tap) = g.middleRows(lo, hi - lo)
                              .cwiseProduct(x.middleRows(lo + shift, hi - lo))
                              .colwise()
                              .sum();
          }
          t.accumulate(ik, gk);
        }
      });
}

Var Tape::sum(Var a) {
  const int ia = a.id;
  return record(
      {ia}, [=](const Values& v) -> Matrix { return Matrix::Constant(1, 1, at(v, ia).sum()); },
      [=](Tape& t, const Matrix& g) {
        t.accumulate(ia, Matrix::Constant(t.val(ia).rows(), t.val(ia).cols(), g(0, 0)));
      });
}

Var Tape::sum_squares(Var a) {
  const int ia = a.id;
  return record(
      {ia},
      [=](const Values& v) -> Matrix { return Matrix::Constant(1, 1, at(v, ia).squaredNorm()); },
      [=](Tape& t, const Matrix& g) { t.accumulate(ia, 2.0 * g(0, 0) * t.val(ia)); });
}

Var Tape::cross_entropy(Var logits_row, Index label) {
  const int il = logits_row.id;
  if (val(il).rows() != 1) fail(ErrorKind::kShapeMismatch, "cross_entropy expects one row");
  if (label < 0 || label >= val(il).cols()) fail(ErrorKind::kInvalidInput, "label out of range");
  return record(
      {il},
      [=](const Values& v) -> Matrix {
        return Matrix::Constant(1, 1, lse_along_rows(at(v, il))(0, 0) - at(v, il)(0, label));
      },
      [=](Tape& t, const Matrix& g) {
        const Matrix& z = t.val(il);
        Matrix p = (z.array() - lse_along_rows(z)(0, 0)).exp().matrix();
        p(0, label) -= 1.0;
        t.accumulate(il, g(0, 0) * p);
      });
}

PivotVars pivot_vars(Tape& tape, Var locations, Var mass_logits, double tau) {
  if (!(tau > 0.0)) fail(ErrorKind::kInvalidInput, "mass temperature must be positive");
  return {locations, tape.log_softmax_col(tape.scale(mass_logits, 1.0 / tau))};
}

namespace {

// Unrolled Sinkhorn on M = S / eps in log-potentials. Returns the plan.
Var unrolled_sinkhorn(Tape& t, Var m, Var log_alpha, Var log_beta, int sweeps, bool final_col) {
  const Index r = t.value(m).rows(), n = t.value(m).cols();
  Var f = t.constant(Matrix::Zero(r, 1));
  Var g = t.constant(Matrix::Zero(1, n));
  auto row_update = [&] { f = t.sub(log_alpha, t.lse_rows(t.add_row(m, g))); };
  auto col_update = [&] { g = t.sub(log_beta, t.lse_cols(t.add_col(m, f))); };
  for (int s = 0; s < sweeps; ++s) {
    if (final_col) {
      row_update();
      col_update();
    } else {
      col_update();
      row_update();
    }
  }
  return t.exp(t.add_row(t.add_col(m, f), g));
}

}  // namespace

Var lot_attention(Tape& t, Var queries, Var keys, Var values, const PivotVars& pivot,
                  const LotSettings& settings) {
  if (!(settings.epsilon > 0.0)) fail(ErrorKind::kInvalidInput, "epsilon must be positive");
  if (settings.iters < 1) fail(ErrorKind::kInvalidInput, "need at least one sweep");
  const Index n = t.value(queries).rows();
  if (n == 0) fail(ErrorKind::kInvalidInput, "no tokens");
  if (t.value(keys).rows() != n || t.value(values).rows() != n)
    fail(ErrorKind::kShapeMismatch, "queries, keys and values must share n");
  if (t.value(pivot.locations).cols() != t.value(queries).cols() ||
      t.value(keys).cols() != t.value(queries).cols())
    fail(ErrorKind::kInvalidInput, "pivot and token widths differ");
  const double inv_eps = 1.0 / settings.epsilon;
  const Var log_beta =
      t.constant(Matrix::Constant(1, n, -std::log(static_cast<double>(n))));
  const Var m1 = t.scale(t.matmul(pivot.locations, t.transpose(queries)), inv_eps);
  const Var m2 = t.scale(t.matmul(pivot.locations, t.transpose(keys)), inv_eps);
  const Var gamma1 = unrolled_sinkhorn(t, m1, pivot.log_masses, log_beta, settings.iters, true);
  const Var gamma2 = unrolled_sinkhorn(t, m2, pivot.log_masses, log_beta, settings.iters, false);
  const Var sigma = t.exp(pivot.log_masses);
  const Var y = t.div_col(t.matmul(gamma2, values), sigma);
  return t.scale(t.matmul(t.transpose(gamma1), y), static_cast<double>(n));
}

Var attention_with_cls(Tape& t, Var tokens, const HeadVars& w, const PivotVars& pivot,
                       const HeadConfig& config) {
  config.validate();
  const Index total = t.value(tokens).rows();
  if (total < 2) fail(ErrorKind::kInvalidInput, "need [CLS] plus at least one token");
  const Index n = total - 1;
  const Var q = t.matmul(tokens, w.w_q);
  const Var k = t.matmul(tokens, w.w_k);
  Var v = t.matmul(tokens, w.w_v);
  const LotSettings settings = config.lot_settings();

  if (config.cls_mode == ClsMode::kFullDs) {
    if (config.dwc_kernel > 0) v = t.depthwise_conv(v, w.dwc);
    return lot_attention(t, q, k, v, pivot, settings);
  }

  const Var v_cls = t.slice_rows(v, 0, 1);
  Var v_tok = t.slice_rows(v, 1, n);
  if (config.dwc_kernel > 0) v_tok = t.depthwise_conv(v_tok, w.dwc);
  const Var body = lot_attention(t, t.slice_rows(q, 1, n), t.slice_rows(k, 1, n), v_tok, pivot,
                                 settings);
  const Var q_cls = t.slice_rows(q, 0, 1);
  Var logits{};
  if (config.cls_mode == ClsMode::kClsSoftmax) {
    logits = t.scale(t.matmul(q_cls, t.transpose(k)), config.effective_beta(t.value(q).cols()));
  } else {
    const Var qp = t.relu(q_cls), qn = t.relu(t.scale(q_cls, -1.0));
    const Var kp = t.transpose(t.relu(k)), kn = t.transpose(t.relu(t.scale(k, -1.0)));
    const Var same = t.add(t.matmul(qp, kp), t.matmul(qn, kn));
    const Var opposite = t.add(t.matmul(qp, kn), t.matmul(qn, kp));
    logits = t.add(t.pow0(same, config.p_s), t.pow0(opposite, config.p_o));
  }
  const Var head = t.matmul(t.softmax_rows(logits), t.concat_rows(v_cls, v_tok));
  return t.concat_rows(head, body);
}

}  // namespace lotattn::ad

namespace lotattn {

bool GradientBundle::all_finite() const {
  return lotattn::all_finite(w_q) && lotattn::all_finite(w_k) && lotattn::all_finite(w_v) &&
         lotattn::all_finite(pivot_locations) && lotattn::all_finite(mass_logits) &&
         lotattn::all_finite(tokens) && lotattn::all_finite(values);
}

Matrix forward_lot_attention(const LotForwardInputs& in) {
  in.pivot.validate();
  LotSettings s = in.settings;
  s.tolerance = 0.0;
  return lot_attention(in.tokens * in.w_q, in.tokens * in.w_k, in.tokens * in.w_v,
                       in.pivot.measure(), s)
      .outputs;
}

GradientBundle backward_lot_attention(const LotForwardInputs& in, const Matrix& upstream_grad) {
  in.pivot.validate();
  if (!all_finite(upstream_grad)) fail(ErrorKind::kInvalidInput, "non-finite upstream gradient");
  ad::Tape t;
  const ad::Var x = t.input(in.tokens);
  const ad::Var wq = t.input(in.w_q), wk = t.input(in.w_k), wv = t.input(in.w_v);
  const ad::Var z = t.input(in.pivot.locations);
  const ad::Var logits = t.input(Matrix(in.pivot.mass_logits));
  const ad::PivotVars pv = ad::pivot_vars(t, z, logits, in.pivot.mass_temperature);
  const ad::Var v = t.matmul(x, wv);
  const ad::Var out =
      ad::lot_attention(t, t.matmul(x, wq), t.matmul(x, wk), v, pv, in.settings);
  if (upstream_grad.rows() != t.value(out).rows() || upstream_grad.cols() != t.value(out).cols())
    fail(ErrorKind::kShapeMismatch, "upstream gradient must be n x d_v");
  t.backward(out, upstream_grad);
  GradientBundle b;
  b.w_q = t.grad(wq);
  b.w_k = t.grad(wk);
  b.w_v = t.grad(wv);
  b.pivot_locations = t.grad(z);
  b.mass_logits = t.grad(logits).col(0);
  b.tokens = t.grad(x);
  b.values = t.grad(v);
  return b;
}

double finite_difference_check(const std::function<double(const Vector&)>& loss_fn,
                               const Vector& params, const Vector& analytic_grad, double h) {
  if (!(h > 0.0)) fail(ErrorKind::kInvalidInput, "finite-difference step must be positive");
  if (analytic_grad.size() != params.size())
    fail(ErrorKind::kShapeMismatch, "gradient and parameter sizes differ");
  double worst = 0.0;
  Vector x = params;
  for (Index i = 0; i < params.size(); ++i) {
    x(i) = params(i) + h;
    const double up = loss_fn(x);
    x(i) = params(i) - h;
    const double down = loss_fn(x);
    x(i) = params(i);
    if (!std::isfinite(up) || !std::isfinite(down))
      fail(ErrorKind::kDivergence, "non-finite loss in finite-difference probe");
    const double numeric = (up - down) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic_grad(i) - numeric) / std::max(1e-8, std::abs(numeric)));
  }
  return worst;
}

}  // namespace lotattn
