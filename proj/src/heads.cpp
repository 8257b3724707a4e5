#include "lotattn/heads.hpp"

#include <cmath>

#include "lotattn/error.hpp"

namespace lotattn {
namespace {

double pow0(double x, double p) { return x > 0.0 ? std::pow(x, p) : 0.0; }

void check_weights(const HeadWeights& w, const HeadConfig& config, Index d_in) {
  if (w.w_q.rows() != d_in || w.w_k.rows() != d_in || w.w_v.rows() != d_in)
    fail(ErrorKind::kShapeMismatch, "projection rows differ from token width");
  if (w.w_q.cols() != w.w_k.cols())
    fail(ErrorKind::kShapeMismatch, "query and key projections differ in width");
  if (config.dwc_kernel > 0 &&
      (w.dwc.rows() != config.dwc_kernel || w.dwc.cols() != w.w_v.cols()))
    fail(ErrorKind::kShapeMismatch, "DWC taps must be dwc_kernel x d_v");
}

}  // namespace

std::string_view to_string(ClsMode mode) {
  switch (mode) {
    case ClsMode::kFullDs: return "full_ds";
    case ClsMode::kClsSoftmax: return "cls_softmax";
    case ClsMode::kClsPola: return "cls_pola";
  }
  return "unknown";
}

ClsMode parse_cls_mode(std::string_view name) {
  if (name == "full_ds") return ClsMode::kFullDs;
  if (name == "cls_softmax") return ClsMode::kClsSoftmax;
  if (name == "cls_pola") return ClsMode::kClsPola;
  fail(ErrorKind::kInvalidInput, "unknown cls_mode '" + std::string(name) + "'");
}

double HeadConfig::effective_beta(Index d_k) const {
  return beta.value_or(1.0 / std::sqrt(static_cast<double>(d_k)));
}

void HeadConfig::validate() const {
  if (beta && !(*beta > 0.0)) fail(ErrorKind::kInvalidInput, "beta must be positive");
  if (!(p_s > 0.0) || !(p_o > 0.0))
    fail(ErrorKind::kInvalidInput, "polarization exponents must be positive");
  if (dwc_kernel < 0 || (dwc_kernel > 0 && dwc_kernel % 2 == 0))
    fail(ErrorKind::kInvalidInput, "dwc_kernel must be odd or 0");
  if (!(epsilon > 0.0)) fail(ErrorKind::kInvalidInput, "epsilon must be positive");
  if (sinkhorn_iters < 1) fail(ErrorKind::kInvalidInput, "sinkhorn_iters must be >= 1");
  if (pivot_rank < 1) fail(ErrorKind::kInvalidInput, "pivot_rank must be >= 1");
}

Vector cls_softmax_row(const Eigen::Ref<const Vector>& q_cls, const Eigen::Ref<const Matrix>& keys,
                       double beta) {
  if (keys.rows() == 0) fail(ErrorKind::kInvalidInput, "empty key set");
  if (!(beta > 0.0)) fail(ErrorKind::kInvalidInput, "beta must be positive");
  if (keys.cols() != q_cls.size()) fail(ErrorKind::kShapeMismatch, "query and key widths differ");
  return softmax(beta * (keys * q_cls));
}

Vector polarized_cls_logits(const Eigen::Ref<const Vector>& q_cls,
                            const Eigen::Ref<const Matrix>& keys, double p_s, double p_o) {
  if (!(p_s > 0.0) || !(p_o > 0.0))
    fail(ErrorKind::kInvalidInput, "polarization exponents must be positive");
  if (keys.cols() != q_cls.size()) fail(ErrorKind::kShapeMismatch, "query and key widths differ");
  const Vector q_pos = q_cls.cwiseMax(0.0);
  const Vector q_neg = (-q_cls).cwiseMax(0.0);
  const Matrix k_pos = keys.cwiseMax(0.0);
  const Matrix k_neg = (-keys).cwiseMax(0.0);
  const Vector same = k_pos * q_pos + k_neg * q_neg;
  const Vector opposite = k_neg * q_pos + k_pos * q_neg;
  Vector out(keys.rows());
  for (Index j = 0; j < keys.rows(); ++j) out(j) = pow0(same(j), p_s) + pow0(opposite(j), p_o);
  return out;
}

Matrix depthwise_conv_values(const Eigen::Ref<const Matrix>& values,
                             const Eigen::Ref<const Matrix>& kernel) {
  const Index k = kernel.rows();
  if (k % 2 == 0) fail(ErrorKind::kInvalidInput, "DWC kernel size must be odd");
  if (kernel.cols() != values.cols())
    fail(ErrorKind::kShapeMismatch, "DWC kernel channel count differs from values");
  const Index n = values.rows();
  const Index half = k / 2;
  Matrix out = Matrix::Zero(n, values.cols());
  for (Index t = 0; t < k; ++t) {
    const Index shift = t - half;
    const Index lo = std::max<Index>(0, -shift);
    const Index hi = std::min<Index>(n, n - shift);
    if (hi <= lo) continue;
    out.middleRows(lo, hi - lo).array() +=
        values.middleRows(lo + shift, hi - lo).array().rowwise() * kernel.row(t).array();
  }
  return out;
}

Matrix attention_with_cls(const Eigen::Ref<const Matrix>& tokens, const HeadWeights& weights,
                          const PivotMeasure& pivot, const HeadConfig& config) {
  config.validate();
  check_weights(weights, config, tokens.cols());
  if (tokens.rows() < 2) fail(ErrorKind::kInvalidInput, "need [CLS] plus at least one token");
  const Index total = tokens.rows();
  const Index n = total - 1;
  const Matrix q = tokens * weights.w_q;
  const Matrix k = tokens * weights.w_k;
  Matrix v = tokens * weights.w_v;
  const LotSettings settings = config.lot_settings();

  if (config.cls_mode == ClsMode::kFullDs) {
    if (config.dwc_kernel > 0) v = depthwise_conv_values(v, weights.dwc);
    return lot_attention(q, k, v, pivot, settings).outputs;
  }

  if (config.dwc_kernel > 0) v.bottomRows(n) = depthwise_conv_values(v.bottomRows(n), weights.dwc);
  Matrix out(total, v.cols());
  out.bottomRows(n) =
      lot_attention(q.bottomRows(n), k.bottomRows(n), v.bottomRows(n), pivot, settings).outputs;
  const Vector q_cls = q.row(0).transpose();
  const Vector weights_cls =
      config.cls_mode == ClsMode::kClsSoftmax
          ? cls_softmax_row(q_cls, k, config.effective_beta(q.cols()))
          : softmax(polarized_cls_logits(q_cls, k, config.p_s, config.p_o));
  out.row(0) = weights_cls.transpose() * v;
  return out;
}

}  // namespace lotattn
