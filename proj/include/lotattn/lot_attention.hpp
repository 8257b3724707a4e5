#pragma once

// Linear-time doubly-stochastic attention through a learnable pivot measure.
//
// Queries and keys are each transported onto r pivots by entropic OT. The two
// pivot-major plans gamma1 (r x n, queries) and gamma2 (r x n, keys) are glued
// into the query-key coupling
//
//   G = gamma1^T Diag(sigma)^-1 gamma2,
//
// which is kept in factored form. With uniform token masses, A = n G is
// doubly stochastic and A V costs O(n r d_v).

#include <vector>

#include "lotattn/linalg.hpp"
#include "lotattn/ot.hpp"

namespace lotattn {

struct PivotMeasure {
  Matrix locations;  // r x d_k
  Vector masses;     // length r, on the simplex

  Index rank() const { return masses.size(); }
  void validate() const;
};

inline constexpr int kDefaultPivotRank = 32;

struct LotSettings {
  double epsilon = 1.0;
  int iters = 10;
  double tolerance = 1e-9;
};

struct LowRankCoupling {
  Matrix gamma1;          // r x n, columns sum to query_marginal
  Matrix gamma2;          // r x n, rows sum to sigma
  Vector sigma;           // pivot masses
  Vector query_marginal;  // p1
  Vector key_marginal;    // p2
  // Bound on the L1 column-sum error of the unscaled glued coupling.
  double col_residual_bound = 0.0;

  Index n() const { return gamma1.cols(); }
  Index r() const { return gamma1.rows(); }
};

struct AttentionDiagnostics {
  double col_residual_bound = 0.0;
  int query_iters = 0;
  int key_iters = 0;
  double wall_ms = 0.0;
};

struct AttentionOutput {
  Matrix outputs;  // n x d_v
  AttentionDiagnostics diagnostics;
};

LowRankCoupling glue(const ot::TransportPlan& gamma1, const ot::TransportPlan& gamma2,
                     const Eigen::Ref<const Vector>& sigma);

// Raw-factor overload, mainly for constructing couplings by hand.
LowRankCoupling glue(Matrix gamma1, Matrix gamma2, Vector sigma, Vector query_marginal,
                     Vector key_marginal, double col_residual_bound = 0.0);

inline constexpr Index kMaxDenseTokens = 4096;

/// n x n glued coupling (scaled = true gives A = n G). Oracle use only.
Matrix materialize_dense(const LowRankCoupling& coupling, bool scaled);

/// Y = gamma2 V, Y <- Diag(sigma)^-1 Y, O = gamma1^T Y. Never forms n x n.
AttentionOutput apply_to_values(const LowRankCoupling& coupling,
                                const Eigen::Ref<const Matrix>& values, bool scaled);

/// Both pivot solves with uniform token masses, glued into a coupling.
/// The query solve ends on columns and the key solve on rows, which makes
/// the rows of the glued coupling exact.
LowRankCoupling lot_coupling(const Eigen::Ref<const Matrix>& queries,
                             const Eigen::Ref<const Matrix>& keys, const PivotMeasure& pivot,
                             const LotSettings& settings, AttentionDiagnostics* diag = nullptr);

AttentionOutput lot_attention(const Eigen::Ref<const Matrix>& queries,
                              const Eigen::Ref<const Matrix>& keys,
                              const Eigen::Ref<const Matrix>& values, const PivotMeasure& pivot,
                              const LotSettings& settings);

inline constexpr double kDefaultRankTol = 1e-8;

/// Singular values above tol * (largest singular value).
int numerical_rank(const Eigen::Ref<const Matrix>& dense, double tol = kDefaultRankTol);

enum class Side { kQuery, kKey };

/// Pivot-indexed rows of gamma1 (query side) or gamma2 (key side).
std::vector<Vector> soft_clusters(const LowRankCoupling& coupling, Side side);

/// max |G - sum_i (1 / sigma_i) C^q_i (x) C^k_i|.
double cluster_decomposition_residual(const LowRankCoupling& coupling);

/// Cost of the glued plan under c(q, k) = -q^T k minus the exact OT cost on
/// the same cost matrix. Nonnegative up to Sinkhorn truncation, since the
/// glued plan is feasible for U(1/n, 1/n).
double lot_vs_ot_gap(const Eigen::Ref<const Matrix>& queries, const Eigen::Ref<const Matrix>& keys,
                     const PivotMeasure& pivot, const LotSettings& settings);

}  // namespace lotattn
