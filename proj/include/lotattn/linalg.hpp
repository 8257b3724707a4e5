#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>

namespace lotattn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;

using Rng = std::mt19937_64;

// i.i.d. N(0, scale^2) entries.
Matrix random_normal(Index rows, Index cols, Rng& rng, double scale = 1.0);

// Numerically stable log(sum(exp(x))).
double log_sum_exp(const Eigen::Ref<const Vector>& x);

// Softmax over a vector; invariant to constant shifts of the input.
Vector softmax(const Eigen::Ref<const Vector>& logits);

bool all_finite(const Eigen::Ref<const Matrix>& m);

}  // namespace lotattn
