#pragma once

// Attention heads over a token sequence whose row 0 is a [CLS] token.
//
//   full_ds      LOT attention over every token, [CLS] included.
//   cls_softmax  LOT attention among the non-[CLS] tokens; the [CLS] row is a
//                softmax of beta <q_cls, k_j> over all keys.
//   cls_pola     as cls_softmax, with polarized [CLS] logits.
//
// The [CLS] key never enters the doubly-stochastic block. The [CLS] query
// attends over every key, its own included.

#include <optional>
#include <string>
#include <string_view>

#include "lotattn/linalg.hpp"
#include "lotattn/lot_attention.hpp"

namespace lotattn {

enum class ClsMode { kFullDs, kClsSoftmax, kClsPola };

std::string_view to_string(ClsMode mode);
ClsMode parse_cls_mode(std::string_view name);

struct HeadConfig {
  ClsMode cls_mode = ClsMode::kClsSoftmax;
  std::optional<double> beta;  // unset: 1 / sqrt(d_k)
  double p_s = 1.0;
  double p_o = 1.0;
  int dwc_kernel = 3;  // odd, or 0 to disable
  double epsilon = 1.0;
  int sinkhorn_iters = 10;
  int pivot_rank = kDefaultPivotRank;

  double effective_beta(Index d_k) const;
  LotSettings lot_settings() const { return {epsilon, sinkhorn_iters, 0.0}; }
  void validate() const;
};

struct HeadWeights {
  Matrix w_q;  // d_in x d_k
  Matrix w_k;  // d_in x d_k
  Matrix w_v;  // d_in x d_v
  Matrix dwc;  // dwc_kernel x d_v taps, empty when disabled
};

/// softmax_j(beta <q_cls, k_j>).
Vector cls_softmax_row(const Eigen::Ref<const Vector>& q_cls, const Eigen::Ref<const Matrix>& keys,
                       double beta);

/// ((q+)^T k+ + (q-)^T k-)^p_s + ((q+)^T k- + (q-)^T k+)^p_o with
/// x+ = max(x, 0), x- = max(-x, 0) and 0^p = 0.
Vector polarized_cls_logits(const Eigen::Ref<const Vector>& q_cls,
                            const Eigen::Ref<const Matrix>& keys, double p_s, double p_o);

/// Per-channel 1-D convolution along tokens, zero padded to the same length:
/// out(i, c) = sum_t kernel(t, c) * values(i + t - k/2, c).
Matrix depthwise_conv_values(const Eigen::Ref<const Matrix>& values,
                             const Eigen::Ref<const Matrix>& kernel);

/// Tokens are (n + 1) x d_in with row 0 the [CLS] token; returns (n + 1) x d_v.
Matrix attention_with_cls(const Eigen::Ref<const Matrix>& tokens, const HeadWeights& weights,
                          const PivotMeasure& pivot, const HeadConfig& config);

}  // namespace lotattn
