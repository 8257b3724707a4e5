#include "lotattn/lot_attention.hpp"

#include <chrono>
#include <cmath>

#include "lotattn/error.hpp"

namespace lotattn {
namespace {

constexpr double kSimplexTol = 1e-12;

bool is_uniform(const Vector& m) {
  const double u = 1.0 / static_cast<double>(m.size());
  return ((m.array() - u).abs() <= kSimplexTol).all();
}

}  // namespace

void PivotMeasure::validate() const {
  if (masses.size() < 1) fail(ErrorKind::kInvalidInput, "pivot needs at least one atom");
  if (locations.rows() != masses.size())
    fail(ErrorKind::kShapeMismatch, "pivot location rows differ from mass count");
  if (!(masses.minCoeff() > 0.0)) fail(ErrorKind::kInvalidInput, "pivot masses must be positive");
  if (std::abs(masses.sum() - 1.0) > kSimplexTol)
    fail(ErrorKind::kInvalidInput, "pivot masses do not sum to 1");
}

LowRankCoupling glue(Matrix gamma1, Matrix gamma2, Vector sigma, Vector query_marginal,
                     Vector key_marginal, double col_residual_bound) {
  if (gamma1.rows() != gamma2.rows() || gamma1.rows() != sigma.size())
    fail(ErrorKind::kShapeMismatch, "glue factors disagree on pivot count");
  if (gamma1.cols() != query_marginal.size() || gamma2.cols() != key_marginal.size())
    fail(ErrorKind::kShapeMismatch, "glue factors disagree with token marginals");
  if (gamma1.cols() != gamma2.cols())
    fail(ErrorKind::kShapeMismatch, "glue factors have different token counts");
  if (!(sigma.minCoeff() > 0.0)) fail(ErrorKind::kInvalidInput, "sigma must be strictly positive");
  LowRankCoupling c;
  c.gamma1 = std::move(gamma1);
  c.gamma2 = std::move(gamma2);
  c.sigma = std::move(sigma);
  c.query_marginal = std::move(query_marginal);
  c.key_marginal = std::move(key_marginal);
  c.col_residual_bound = col_residual_bound;
  return c;
}

LowRankCoupling glue(const ot::TransportPlan& gamma1, const ot::TransportPlan& gamma2,
                     const Eigen::Ref<const Vector>& sigma) {
  // Column sums of G are (gamma1 1)^T Diag(sigma)^-1 gamma2. Writing
  // gamma1 1 = sigma + d gives 1^T gamma2 + d^T Diag(sigma)^-1 gamma2, and
  // gamma2's rows sum to sigma, so the L1 error is at most
  // |d|_1 + |gamma2^T 1 - p2|_1.
  const double bound = gamma1.row_residual + gamma2.col_residual;
  return glue(gamma1.plan, gamma2.plan, sigma, gamma1.col_target, gamma2.col_target, bound);
}

Matrix materialize_dense(const LowRankCoupling& coupling, bool scaled) {
  const Index n = coupling.n();
  if (n > kMaxDenseTokens) fail(ErrorKind::kUnsupportedSize, "dense coupling limited to n <= 4096");
  if (scaled && !(is_uniform(coupling.query_marginal) && is_uniform(coupling.key_marginal)))
    fail(ErrorKind::kInvalidInput, "scaled coupling requires uniform token marginals");
  Matrix dense = coupling.gamma1.transpose() *
                 (coupling.sigma.cwiseInverse().asDiagonal() * coupling.gamma2);
  if (scaled) dense *= static_cast<double>(n);
  return dense;
}

AttentionOutput apply_to_values(const LowRankCoupling& coupling,
                                const Eigen::Ref<const Matrix>& values, bool scaled) {
  if (values.rows() != coupling.n())
    fail(ErrorKind::kShapeMismatch, "value rows differ from token count");
  if (scaled && !(is_uniform(coupling.query_marginal) && is_uniform(coupling.key_marginal)))
    fail(ErrorKind::kInvalidInput, "scaled coupling requires uniform token marginals");
  Matrix pivot_values = coupling.gamma2 * values;  // r x d_v
  pivot_values = coupling.sigma.cwiseInverse().asDiagonal() * pivot_values;
  if (scaled) pivot_values *= static_cast<double>(coupling.n());
  AttentionOutput out;
  out.outputs.noalias() = coupling.gamma1.transpose() * pivot_values;
  out.diagnostics.col_residual_bound = coupling.col_residual_bound;
  return out;
}

LowRankCoupling lot_coupling(const Eigen::Ref<const Matrix>& queries,
                             const Eigen::Ref<const Matrix>& keys, const PivotMeasure& pivot,
                             const LotSettings& settings, AttentionDiagnostics* diag) {
  pivot.validate();
  if (queries.rows() != keys.rows())
    fail(ErrorKind::kShapeMismatch, "queries and keys differ in token count");
  if (queries.rows() < 1) fail(ErrorKind::kInvalidInput, "no tokens");
  const Index n = queries.rows();
  const Vector token_mass = Vector::Constant(n, 1.0 / static_cast<double>(n));

  ot::SinkhornProblem problem;
  problem.row_marginal = pivot.masses;
  problem.col_marginal = token_mass;
  problem.epsilon = settings.epsilon;
  problem.max_iters = settings.iters;
  problem.tolerance = settings.tolerance;

  problem.scores = ot::build_score_matrix(pivot.locations, queries);
  const ot::TransportPlan gamma1 = ot::sinkhorn(problem, ot::Axis::kCol);
  problem.scores = ot::build_score_matrix(pivot.locations, keys);
  const ot::TransportPlan gamma2 = ot::sinkhorn(problem, ot::Axis::kRow);
  if (diag != nullptr) {
    diag->query_iters = gamma1.iters_used;
    diag->key_iters = gamma2.iters_used;
  }
  LowRankCoupling c = glue(gamma1, gamma2, pivot.masses);
  if (diag != nullptr) diag->col_residual_bound = c.col_residual_bound;
  return c;
}

AttentionOutput lot_attention(const Eigen::Ref<const Matrix>& queries,
                              const Eigen::Ref<const Matrix>& keys,
                              const Eigen::Ref<const Matrix>& values, const PivotMeasure& pivot,
                              const LotSettings& settings) {
  const auto start = std::chrono::steady_clock::now();
  if (values.rows() != queries.rows())
    fail(ErrorKind::kShapeMismatch, "value rows differ from token count");
  AttentionDiagnostics diag;
  const LowRankCoupling coupling = lot_coupling(queries, keys, pivot, settings, &diag);
  AttentionOutput out = apply_to_values(coupling, values, /*scaled=*/true);
  diag.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  out.diagnostics = diag;
  return out;
}

int numerical_rank(const Eigen::Ref<const Matrix>& dense, double tol) {
  if (dense.size() == 0) return 0;
  Eigen::BDCSVD<Matrix> svd(dense);
  const Vector& sv = svd.singularValues();
  if (sv.size() == 0 || sv(0) <= 0.0) return 0;
  return static_cast<int>((sv.array() > tol * sv(0)).count());
}

std::vector<Vector> soft_clusters(const LowRankCoupling& coupling, Side side) {
  const Matrix& g = side == Side::kQuery ? coupling.gamma1 : coupling.gamma2;
  std::vector<Vector> out;
  out.reserve(static_cast<size_t>(g.rows()));
  for (Index t = 0; t < g.rows(); ++t) out.emplace_back(g.row(t).transpose());
  return out;
}

double cluster_decomposition_residual(const LowRankCoupling& coupling) {
  const Matrix dense = materialize_dense(coupling, /*scaled=*/false);
  const auto queries = soft_clusters(coupling, Side::kQuery);
  const auto keys = soft_clusters(coupling, Side::kKey);
  Matrix sum = Matrix::Zero(coupling.n(), coupling.n());
  for (size_t i = 0; i < queries.size(); ++i)
    sum.noalias() += (1.0 / coupling.sigma(static_cast<Index>(i))) * queries[i] *
                     keys[i].transpose();
  return (dense - sum).cwiseAbs().maxCoeff();
}

double lot_vs_ot_gap(const Eigen::Ref<const Matrix>& queries, const Eigen::Ref<const Matrix>& keys,
                     const PivotMeasure& pivot, const LotSettings& settings) {
  const Index n = queries.rows();
  if (n > ot::kMaxExactOtSize) fail(ErrorKind::kUnsupportedSize, "OT gap limited to n <= 8");
  const LowRankCoupling coupling = lot_coupling(queries, keys, pivot, settings);
  const Matrix glued = materialize_dense(coupling, /*scaled=*/false);
  const Matrix similarity = ot::build_score_matrix(queries, keys);
  const double lot_cost = ot::transport_cost(glued, similarity, ot::Convention::kCostMin);
  const double exact = ot::exact_ot_tiny(-similarity).cost;
  return lot_cost - exact;
}

}  // namespace lotattn
