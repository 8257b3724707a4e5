#pragma once

// Entropic optimal transport between discrete measures.
//
// Plans are maximizers of <S, G> + eps * H(G) over the transport polytope
// U(alpha, beta), where S is a similarity (score) matrix and
// H(G) = -sum G_ab (log G_ab - 1). The solver works on log-potentials so that
// G_ab = exp(S_ab / eps + log_u_a + log_v_b) never overflows for small eps.

#include <vector>

#include "lotattn/linalg.hpp"

namespace lotattn::ot {

/// Weighted point cloud: masses on the simplex plus one support row per mass.
struct DiscreteMeasure {
  Vector masses;
  Matrix support;

  static DiscreteMeasure uniform(Matrix support);
  void validate() const;
};

enum class Axis { kRow, kCol };
enum class Convention { kSimilarityMax, kCostMin };
enum class StopReason { kTolerance, kMaxIters };

/// Marginal entries below this are rejected rather than clamped.
inline constexpr double kMinMarginal = 1e-15;

struct SinkhornProblem {
  Matrix scores;       // a x b similarities
  Vector row_marginal;  // length a
  Vector col_marginal;  // length b
  double epsilon = 1.0;
  int max_iters = 10;
  double tolerance = 1e-9;
  // Record the primal value <S, G_t> + eps * H(G_t) and the dual value after
  // every sweep. Costs one extra exponentiation pass per sweep.
  bool track_objective = false;

  void validate() const;
};

struct TransportPlan {
  Matrix plan;
  Vector row_target;  // marginals the plan was solved for
  Vector col_target;
  Vector log_u;
  Vector log_v;
  int iters_used = 0;
  double row_residual = 0.0;
  double col_residual = 0.0;
  StopReason stop_reason = StopReason::kMaxIters;
  // L1 residual of the marginal that is *not* enforced last, after each sweep.
  std::vector<double> residual_history;
  // Primal values of infeasible iterates are not monotone. The dual
  // eps * (sum G - <log u, alpha> - <log v, beta>) decreases monotonically
  // and meets the primal at the fixed point.
  std::vector<double> objective_history;
  std::vector<double> dual_history;
};

/// Entry (t, i) is the dot product of pivot row t with token row i.
Matrix build_score_matrix(const Eigen::Ref<const Matrix>& pivots,
                          const Eigen::Ref<const Matrix>& tokens);

/// Log-domain Sinkhorn. One sweep updates the other axis and then
/// `final_axis`, so the `final_axis` marginal is met to rounding error.
TransportPlan sinkhorn(const SinkhornProblem& problem, Axis final_axis);

/// H(G) = -sum G_ab (log G_ab - 1) with 0 log 0 = 0.
double entropy(const Eigen::Ref<const Matrix>& plan);
inline double entropy(const TransportPlan& p) { return entropy(p.plan); }

double transport_cost(const Eigen::Ref<const Matrix>& plan,
                      const Eigen::Ref<const Matrix>& scores, Convention convention);
inline double transport_cost(const TransportPlan& p, const Eigen::Ref<const Matrix>& scores,
                             Convention convention) {
  return transport_cost(p.plan, scores, convention);
}

struct MarginalResiduals {
  double row = 0.0;
  double col = 0.0;
};

/// L1 norms |G 1 - alpha|_1 and |G^T 1 - beta|_1.
MarginalResiduals marginal_residuals(const Eigen::Ref<const Matrix>& plan,
                                     const Eigen::Ref<const Vector>& row_marginal,
                                     const Eigen::Ref<const Vector>& col_marginal);

struct ExactOtResult {
  double cost = 0.0;
  Matrix plan;
  std::vector<int> permutation;  // row i is matched to column permutation[i]
};

inline constexpr int kMaxExactOtSize = 8;

/// Exact min <C, G> over U(1/n, 1/n) by enumerating the n! permutation
/// vertices of the Birkhoff polytope. Ties resolve to the lexicographically
/// smallest permutation.
ExactOtResult exact_ot_tiny(const Eigen::Ref<const Matrix>& cost);

}  // namespace lotattn::ot
