#include "lotattn/linalg.hpp"

#include <cmath>

namespace lotattn {

Matrix random_normal(Index rows, Index cols, Rng& rng, double scale) {
  std::normal_distribution<double> dist(0.0, scale);
  Matrix m(rows, cols);
  // Fill row by row so the draw order is independent of storage order.
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

double log_sum_exp(const Eigen::Ref<const Vector>& x) {
  const double m = x.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((x.array() - m).exp().sum());
}

Vector softmax(const Eigen::Ref<const Vector>& logits) {
  const double m = logits.maxCoeff();
  Vector e = (logits.array() - m).exp().matrix();
  return e / e.sum();
}

bool all_finite(const Eigen::Ref<const Matrix>& m) { return m.allFinite(); }

}  // namespace lotattn
