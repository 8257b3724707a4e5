#include "lotattn/ot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "lotattn/error.hpp"

namespace lotattn::ot {
namespace {

constexpr double kSimplexTol = 1e-12;

void validate_marginal(const Vector& m, const char* what) {
  if (m.size() == 0) fail(ErrorKind::kInvalidInput, std::string(what) + " is empty");
  if (!m.allFinite()) fail(ErrorKind::kInvalidInput, std::string(what) + " is not finite");
  if (m.minCoeff() < kMinMarginal)
    fail(ErrorKind::kInvalidInput, std::string(what) + " has an entry below 1e-15");
  if (std::abs(m.sum() - 1.0) > kSimplexTol)
    fail(ErrorKind::kInvalidInput, std::string(what) + " does not sum to 1");
}

// out(b) = log sum_a exp(S(a, b) * inv_eps + f(a))
void lse_down_columns(const Matrix& s, double inv_eps, const Vector& f, Vector& out) {
  for (Index b = 0; b < s.cols(); ++b) {
    const auto z = s.col(b).array() * inv_eps + f.array();
    const double m = z.maxCoeff();
    out(b) = m + std::log((z - m).exp().sum());
  }
}

// out(a) = log sum_b exp(S(a, b) * inv_eps + g(b)). Two column-major passes so
// the inner loops stay contiguous.
void lse_along_rows(const Matrix& s, double inv_eps, const Vector& g, Vector& row_max,
                    Vector& out) {
  row_max.setConstant(-std::numeric_limits<double>::infinity());
  for (Index b = 0; b < s.cols(); ++b)
    row_max.array() = row_max.array().max(s.col(b).array() * inv_eps + g(b));
  out.setZero();
  for (Index b = 0; b < s.cols(); ++b)
    out.array() += (s.col(b).array() * inv_eps + g(b) - row_max.array()).exp();
  out.array() = row_max.array() + out.array().log();
}

struct Objectives {
  double primal;
  double dual;
};

Objectives objectives_at(const Matrix& s, double eps, const Vector& f, const Vector& g,
                         const Vector& alpha, const Vector& beta) {
  // log G = S/eps + f + g, so <S, G> + eps H(G) = eps * sum G (1 - f_a - g_b).
  const double inv_eps = 1.0 / eps;
  double primal = 0.0;
  double mass = 0.0;
  for (Index b = 0; b < s.cols(); ++b) {
    const auto e = (s.col(b).array() * inv_eps + f.array() + g(b)).exp();
    primal += (e * (1.0 - f.array() - g(b))).sum();
    mass += e.sum();
  }
  return {eps * primal, eps * (mass - f.dot(alpha) - g.dot(beta))};
}

}  // namespace

DiscreteMeasure DiscreteMeasure::uniform(Matrix support) {
  DiscreteMeasure m;
  const Index n = support.rows();
  m.masses = Vector::Constant(n, 1.0 / static_cast<double>(n));
  m.support = std::move(support);
  return m;
}

void DiscreteMeasure::validate() const {
  if (support.rows() != masses.size())
    fail(ErrorKind::kShapeMismatch, "measure support rows differ from mass count");
  if (masses.size() == 0) fail(ErrorKind::kInvalidInput, "measure is empty");
  if (masses.minCoeff() <= 0.0) fail(ErrorKind::kInvalidInput, "measure masses must be positive");
  if (std::abs(masses.sum() - 1.0) > kSimplexTol)
    fail(ErrorKind::kInvalidInput, "measure masses do not sum to 1");
}

void SinkhornProblem::validate() const {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon))
    fail(ErrorKind::kInvalidInput, "epsilon must be positive");
  if (max_iters < 1) fail(ErrorKind::kInvalidInput, "max_iters must be >= 1");
  if (!(tolerance >= 0.0)) fail(ErrorKind::kInvalidInput, "tolerance must be nonnegative");
  if (scores.rows() != row_marginal.size() || scores.cols() != col_marginal.size())
    fail(ErrorKind::kShapeMismatch, "scores shape does not match marginals");
  if (!scores.allFinite()) fail(ErrorKind::kInvalidInput, "scores must be finite");
  validate_marginal(row_marginal, "row marginal");
  validate_marginal(col_marginal, "col marginal");
}

Matrix build_score_matrix(const Eigen::Ref<const Matrix>& pivots,
                          const Eigen::Ref<const Matrix>& tokens) {
  if (pivots.cols() != tokens.cols())
    fail(ErrorKind::kInvalidInput, "pivot and token feature dimensions differ");
  return pivots * tokens.transpose();
}

TransportPlan sinkhorn(const SinkhornProblem& problem, Axis final_axis) {
  problem.validate();
  const Matrix& s = problem.scores;
  const Index a = s.rows();
  const Index b = s.cols();
  const double inv_eps = 1.0 / problem.epsilon;
  const Vector log_alpha = problem.row_marginal.array().log();
  const Vector log_beta = problem.col_marginal.array().log();

  Vector f = Vector::Zero(a);
  Vector g = Vector::Zero(b);
  Vector lse_a(a), lse_b(b), row_max(a);

  TransportPlan out;
  out.stop_reason = StopReason::kMaxIters;

  // Residual of the non-final marginal for the current potentials; leaves the
  // log-sum-exp needed by the next update in lse_a / lse_b.
  auto other_residual = [&]() {
    if (final_axis == Axis::kRow) {
      lse_down_columns(s, inv_eps, f, lse_b);
      return ((g + lse_b).array().exp() - problem.col_marginal.array()).abs().sum();
    }
    lse_along_rows(s, inv_eps, g, row_max, lse_a);
    return ((f + lse_a).array().exp() - problem.row_marginal.array()).abs().sum();
  };

  for (int it = 0; it < problem.max_iters; ++it) {
    const double res = other_residual();
    if (it > 0) {
      out.residual_history.push_back(res);
      if (res <= problem.tolerance) {
        out.stop_reason = StopReason::kTolerance;
        break;
      }
    }
    if (final_axis == Axis::kRow) {
      g = log_beta - lse_b;
      lse_along_rows(s, inv_eps, g, row_max, lse_a);
      f = log_alpha - lse_a;
    } else {
      f = log_alpha - lse_a;
      lse_down_columns(s, inv_eps, f, lse_b);
      g = log_beta - lse_b;
    }
    ++out.iters_used;
    if (problem.track_objective) {
      const auto obj = objectives_at(s, problem.epsilon, f, g, problem.row_marginal,
                                     problem.col_marginal);
      out.objective_history.push_back(obj.primal);
      out.dual_history.push_back(obj.dual);
    }
  }
  if (out.stop_reason == StopReason::kMaxIters) out.residual_history.push_back(other_residual());

  out.plan.resize(a, b);
  for (Index j = 0; j < b; ++j)
    out.plan.col(j) = (s.col(j).array() * inv_eps + f.array() + g(j)).exp();
  const auto res = marginal_residuals(out.plan, problem.row_marginal, problem.col_marginal);
  out.row_residual = res.row;
  out.col_residual = res.col;
  out.row_target = problem.row_marginal;
  out.col_target = problem.col_marginal;
  out.log_u = std::move(f);
  out.log_v = std::move(g);
  return out;
}

double entropy(const Eigen::Ref<const Matrix>& plan) {
  double h = 0.0;
  for (Index j = 0; j < plan.cols(); ++j)
    for (Index i = 0; i < plan.rows(); ++i) {
      const double x = plan(i, j);
      if (x > 0.0) h -= x * (std::log(x) - 1.0);
    }
  return h;
}

double transport_cost(const Eigen::Ref<const Matrix>& plan, const Eigen::Ref<const Matrix>& scores,
                      Convention convention) {
  if (plan.rows() != scores.rows() || plan.cols() != scores.cols())
    fail(ErrorKind::kShapeMismatch, "plan and scores differ in shape");
  const double sim = plan.cwiseProduct(scores).sum();
  return convention == Convention::kSimilarityMax ? sim : -sim;
}

MarginalResiduals marginal_residuals(const Eigen::Ref<const Matrix>& plan,
                                     const Eigen::Ref<const Vector>& row_marginal,
                                     const Eigen::Ref<const Vector>& col_marginal) {
  if (plan.rows() != row_marginal.size() || plan.cols() != col_marginal.size())
    fail(ErrorKind::kShapeMismatch, "plan shape does not match marginals");
  return {(plan.rowwise().sum() - row_marginal).lpNorm<1>(),
          (plan.colwise().sum().transpose() - col_marginal).lpNorm<1>()};
}

ExactOtResult exact_ot_tiny(const Eigen::Ref<const Matrix>& cost) {
  if (cost.rows() != cost.cols()) fail(ErrorKind::kShapeMismatch, "exact OT needs a square cost");
  const Index n = cost.rows();
  if (n < 1) fail(ErrorKind::kInvalidInput, "exact OT needs a non-empty cost");
  if (n > kMaxExactOtSize) fail(ErrorKind::kUnsupportedSize, "exact OT limited to n <= 8");
  if (!cost.allFinite()) fail(ErrorKind::kInvalidInput, "cost must be finite");

  std::vector<int> perm(static_cast<size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<int> best = perm;
  double best_sum = std::numeric_limits<double>::infinity();
  // next_permutation walks in lexicographic order, so a strict improvement
  // test keeps the smallest permutation among ties.
  do {
    double sum = 0.0;
    for (Index i = 0; i < n; ++i) sum += cost(i, perm[static_cast<size_t>(i)]);
    if (std::isinf(best_sum) || sum < best_sum - 1e-12 * std::max(1.0, std::abs(best_sum))) {
      best_sum = sum;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));

  ExactOtResult out;
  const double inv_n = 1.0 / static_cast<double>(n);
  out.cost = best_sum * inv_n;
  out.plan = Matrix::Zero(n, n);
  for (Index i = 0; i < n; ++i) out.plan(i, best[static_cast<size_t>(i)]) = inv_n;
  out.permutation = std::move(best);
  return out;
}

}  // namespace lotattn::ot
