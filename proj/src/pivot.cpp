#include "lotattn/pivot.hpp"

#include <cmath>

#include "lotattn/error.hpp"

namespace lotattn {

Vector pivot_masses_from_logits(const Eigen::Ref<const Vector>& logits, double tau) {
  if (!(tau > 0.0)) fail(ErrorKind::kInvalidInput, "mass temperature must be positive");
  if (logits.size() == 0) fail(ErrorKind::kInvalidInput, "empty mass logits");
  if (!all_finite(logits)) fail(ErrorKind::kInvalidInput, "non-finite mass logits");
  return softmax(logits / tau);
}

Vector PivotParams::masses() const { return pivot_masses_from_logits(mass_logits, mass_temperature); }

PivotMeasure PivotParams::measure() const { return {locations, masses()}; }

void PivotParams::validate() const {
  if (locations.rows() == 0) fail(ErrorKind::kInvalidInput, "pivot rank must be >= 1");
  if (mass_logits.size() != locations.rows())
    fail(ErrorKind::kShapeMismatch, "one mass logit per pivot required");
  if (!(mass_temperature > 0.0)) fail(ErrorKind::kInvalidInput, "mass temperature must be positive");
  if (!all_finite(locations) || !all_finite(mass_logits))
    fail(ErrorKind::kInvalidInput, "non-finite pivot parameters");
}

PivotParams PivotParams::init(Index r, Index d_k, Rng& rng, double tau) {
  PivotParams p;
  p.locations = random_normal(r, d_k, rng, 1.0 / std::sqrt(static_cast<double>(d_k)));
  p.mass_logits = Vector::Zero(r);
  p.mass_temperature = tau;
  return p;
}

}  // namespace lotattn
