#pragma once

#include "lotattn/linalg.hpp"
#include "lotattn/lot_attention.hpp"

namespace lotattn {

// Learnable pivots: free locations plus mass logits pushed through a tempered
// softmax, so masses stay strictly positive whatever the optimizer does.
struct PivotParams {
  Matrix locations;  // r x d_k
  Vector mass_logits;
  double mass_temperature = 1.0;

  Index rank() const { return locations.rows(); }
  Vector masses() const;
  PivotMeasure measure() const;
  void validate() const;

  // Locations ~ N(0, 1/d_k), zero logits.
  static PivotParams init(Index r, Index d_k, Rng& rng, double tau = 1.0);
};

/// softmax(logits / tau).
Vector pivot_masses_from_logits(const Eigen::Ref<const Vector>& logits, double tau);

}  // namespace lotattn
