#pragma once

// Reverse-mode differentiation for the attention pipeline.
//
// A Tape records matrix operations in execution order. Each node keeps its
// forward value, which is all the reverse rules need. backward() walks the
// nodes once, newest first. Sinkhorn is differentiated by unrolling exactly
// the configured number of sweeps.

#include <cstddef>
#include <functional>
#include <vector>

#include "lotattn/heads.hpp"
#include "lotattn/linalg.hpp"
#include "lotattn/lot_attention.hpp"
#include "lotattn/pivot.hpp"

namespace lotattn::ad {

struct Var {
  int id = -1;
};

class Tape {
 public:
  using Values = std::vector<Matrix>;
  using Forward = std::function<Matrix(const Values&)>;
  using Backward = std::function<void(Tape&, const Matrix& grad)>;

  Var input(Matrix value, bool requires_grad = true);
  Var constant(Matrix value) { return input(std::move(value), false); }

  const Matrix& value(Var v) const;
  // Zeros shaped like value(v) when nothing reached v.
  Matrix grad(Var v) const;
  bool requires_grad(Var v) const;
  std::size_t size() const { return values_.size(); }
  std::size_t reverse_visits() const { return reverse_visits_; }

  void backward(Var out, const Matrix& seed);
  void backward(Var scalar_out) { backward(scalar_out, Matrix::Ones(1, 1)); }
  void zero_grad();

  // Recomputes every recorded operation from the inputs and reports whether
  // each value came out bitwise identical.
  bool replay() const;

  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  Var add_row(Var a, Var row);  // row is 1 x cols(a)
  Var add_col(Var a, Var col);  // col is rows(a) x 1
  Var div_col(Var a, Var col);  // row i divided by col(i)
  Var exp(Var a);
  Var relu(Var a);
  Var pow0(Var a, double p);  // for a >= 0, with 0^p = 0
  Var lse_rows(Var a);        // rows x 1
  Var lse_cols(Var a);        // 1 x cols
  Var softmax_rows(Var a);
  Var log_softmax_col(Var a);
  Var slice_rows(Var a, Index start, Index count);
  Var concat_rows(Var top, Var bottom);
  Var gather_rows(Var table, std::vector<Index> ids);
  Var mean_rows(Var a);
  Var depthwise_conv(Var values, Var kernel);
  Var sum(Var a);
  Var sum_squares(Var a);
  Var cross_entropy(Var logits_row, Index label);

 private:
  struct Node {
    std::vector<int> inputs;
    Forward forward;  // empty for inputs
    Backward backward;
    bool needs_grad = false;
  };

  Var record(std::vector<int> inputs, Forward forward, Backward backward);
  void accumulate(int id, const Matrix& g);
  const Matrix& val(int id) const { return values_[static_cast<std::size_t>(id)]; }

  std::vector<Node> nodes_;
  Values values_;
  std::vector<Matrix> grads_;
  std::vector<bool> has_grad_;
  std::size_t reverse_visits_ = 0;
};

struct HeadVars {
  Var w_q, w_k, w_v, dwc;  // dwc unused when the kernel is disabled
};

struct PivotVars {
  Var locations;
  Var log_masses;  // r x 1
};

/// log softmax(logits / tau) on the tape.
PivotVars pivot_vars(Tape& tape, Var locations, Var mass_logits, double tau);

/// The factored LOT pipeline with exactly settings.iters sweeps per solve.
Var lot_attention(Tape& tape, Var queries, Var keys, Var values, const PivotVars& pivot,
                  const LotSettings& settings);

/// Tape counterpart of lotattn::attention_with_cls.
Var attention_with_cls(Tape& tape, Var tokens, const HeadVars& weights, const PivotVars& pivot,
                       const HeadConfig& config);

}  // namespace lotattn::ad

namespace lotattn {

struct LotForwardInputs {
  Matrix tokens;  // n x d_in
  Matrix w_q, w_k, w_v;
  PivotParams pivot;
  LotSettings settings;
};

struct GradientBundle {
  Matrix w_q, w_k, w_v;
  Matrix pivot_locations;
  Vector mass_logits;
  Matrix tokens;
  Matrix values;  // gradient w.r.t. V = X W_V

  bool all_finite() const;
};

/// O = LOT(X W_Q, X W_K, X W_V) with exactly settings.iters sweeps.
Matrix forward_lot_attention(const LotForwardInputs& in);

GradientBundle backward_lot_attention(const LotForwardInputs& in, const Matrix& upstream_grad);

/// Largest |analytic - numeric| / max(1e-8, |numeric|) over coordinates, with
/// central differences of step h.
double finite_difference_check(const std::function<double(const Vector&)>& loss_fn,
                               const Vector& params, const Vector& analytic_grad,
                               double h = 1e-5);

}  // namespace lotattn
