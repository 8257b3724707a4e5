#include <cmath>

#include "doctest.h"
#include "instances.hpp"
#include "lotattn/error.hpp"
#include "lotattn/heads.hpp"
#include "oracles.hpp"

using namespace lotattn;

namespace {

HeadWeights random_weights(Index d_in, Index dk, Index dv, int kernel, std::mt19937_64& rng) {
  HeadWeights w;
  w.w_q = oracle::normal(d_in, dk, rng, 1.0 / std::sqrt(static_cast<double>(d_in)));
  w.w_k = oracle::normal(d_in, dk, rng, 1.0 / std::sqrt(static_cast<double>(d_in)));
  w.w_v = oracle::normal(d_in, dv, rng, 1.0 / std::sqrt(static_cast<double>(d_in)));
  if (kernel > 0) w.dwc = oracle::normal(kernel, dv, rng, 0.5);
  return w;
}

Vector loop_softmax(const Vector& x) {
  double m = x(0);
  for (Index i = 1; i < x.size(); ++i) m = std::max(m, x(i));
  Vector e(x.size());
  double s = 0.0;
  for (Index i = 0; i < x.size(); ++i) s += (e(i) = std::exp(x(i) - m));
  return e / s;
}

Matrix loop_conv(const Matrix& v, const Matrix& kernel) {
  const Index n = v.rows(), half = kernel.rows() / 2;
  Matrix out = Matrix::Zero(n, v.cols());
  for (Index i = 0; i < n; ++i)
    for (Index c = 0; c < v.cols(); ++c)
      for (Index t = 0; t < kernel.rows(); ++t) {
        const Index src = i + t - half;
        if (src >= 0 && src < n) out(i, c) += kernel(t, c) * v(src, c);
      }
  return out;
}

}  // namespace

TEST_CASE("cls_softmax_row") {
  SUBCASE("two orthogonal keys") {
    Vector q(2);
    q << 1.0, 0.0;
    Matrix keys(2, 2);
    keys << 1.0, 0.0, 0.0, 1.0;
    const Vector p = cls_softmax_row(q, keys, 1.0);
    const double e = std::exp(1.0);
    CHECK(p(0) == doctest::Approx(e / (e + 1.0)).epsilon(1e-14));
    CHECK(p(1) == doctest::Approx(1.0 / (e + 1.0)).epsilon(1e-14));
    CHECK(p(0) == doctest::Approx(0.73106).epsilon(1e-5));
  }
  SUBCASE("identical keys give uniform weights") {
    const Matrix keys = Matrix::Constant(5, 3, 0.7);
    const Vector p = cls_softmax_row(Vector::Constant(3, 2.0), keys, 3.0);
    for (Index j = 0; j < 5; ++j) CHECK(p(j) == doctest::Approx(0.2).epsilon(1e-15));
  }
  SUBCASE("single key") {
    CHECK(cls_softmax_row(Vector::Ones(2), Matrix::Ones(1, 2), 1.0)(0) == 1.0);
  }
  SUBCASE("sums to one, shift invariant, sharpens with beta") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
      const Vector q = oracle::normal(4, 1, rng);
      const Matrix keys = oracle::normal(9, 4, rng);
      double prev_max = 0.0;
      for (double beta : {0.5, 1.0, 2.0, 4.0}) {
        const Vector p = cls_softmax_row(q, keys, beta);
        CHECK(std::abs(p.sum() - 1.0) <= 1e-12);
        CHECK(p.maxCoeff() >= prev_max - 1e-15);
        prev_max = p.maxCoeff();
      }
      // Shifting every key along q shifts all logits by the same amount.
      Matrix shifted = keys;
      shifted.rowwise() += (2.5 * q / q.squaredNorm()).transpose();
      CHECK((cls_softmax_row(q, shifted, 1.3) - cls_softmax_row(q, keys, 1.3))
                .cwiseAbs()
                .maxCoeff() < 1e-12);
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(cls_softmax_row(Vector::Ones(2), Matrix(0, 2), 1.0), Error);
    CHECK_THROWS_AS(cls_softmax_row(Vector::Ones(2), Matrix::Ones(3, 2), 0.0), Error);
    CHECK_THROWS_AS(cls_softmax_row(Vector::Ones(2), Matrix::Ones(3, 3), 1.0), Error);
  }
}

TEST_CASE("polarized_cls_logits") {
  SUBCASE("mixed-sign query against an all-positive key") {
    Vector q(2);
    q << 1.0, -1.0;
    const Vector s = polarized_cls_logits(q, Matrix::Ones(1, 2), 1.0, 1.0);
    CHECK(s(0) == 2.0);
  }
  SUBCASE("zero query") {
    std::mt19937_64 rng(4);
    const Vector s = polarized_cls_logits(Vector::Zero(3), oracle::normal(6, 3, rng), 1.5, 0.7);
    CHECK(s.cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("nonnegative inputs reduce to the dot product") {
    std::mt19937_64 rng(5);
    const Vector q = oracle::normal(4, 1, rng).cwiseAbs();
    const Matrix keys = oracle::normal(7, 4, rng).cwiseAbs();
    CHECK((polarized_cls_logits(q, keys, 1.0, 1.0) - keys * q).cwiseAbs().maxCoeff() < 1e-14);
  }
  SUBCASE("sign symmetries") {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 20; ++trial) {
      const Vector q = oracle::normal(5, 1, rng);
      const Matrix keys = oracle::normal(8, 5, rng);
      const Vector base = polarized_cls_logits(q, keys, 2.0, 1.5);
      CHECK((polarized_cls_logits(-q, -keys, 2.0, 1.5) - base).cwiseAbs().maxCoeff() < 1e-12);
      const Vector equal = polarized_cls_logits(q, keys, 1.7, 1.7);
      CHECK((polarized_cls_logits(q, -keys, 1.7, 1.7) - equal).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
  SUBCASE("hand-expanded terms") {
    std::mt19937_64 rng(7);
    const Vector q = oracle::normal(3, 1, rng);
    const Matrix keys = oracle::normal(4, 3, rng);
    const Vector s = polarized_cls_logits(q, keys, 3.0, 0.5);
    for (Index j = 0; j < 4; ++j) {
      double same = 0.0, opp = 0.0;
      for (Index d = 0; d < 3; ++d) {
        const double qp = std::max(q(d), 0.0), qn = std::max(-q(d), 0.0);
        const double kp = std::max(keys(j, d), 0.0), kn = std::max(-keys(j, d), 0.0);
        same += qp * kp + qn * kn;
        opp += qp * kn + qn * kp;
      }
      CHECK(s(j) == doctest::Approx(std::pow(same, 3.0) + std::pow(opp, 0.5)).epsilon(1e-13));
    }
  }
  CHECK_THROWS_AS(polarized_cls_logits(Vector::Ones(2), Matrix::Ones(2, 2), 0.0, 1.0), Error);
}

TEST_CASE("depthwise_conv_values") {
  SUBCASE("box kernel with zero padding") {
    Matrix v(4, 1);
    v << 1, 2, 3, 4;
    const Matrix out = depthwise_conv_values(v, Matrix::Ones(3, 1));
    Matrix expected(4, 1);
    expected << 3, 6, 9, 7;
    CHECK(out == expected);
  }
  SUBCASE("identity tap and zero input") {
    std::mt19937_64 rng(8);
    const Matrix v = oracle::normal(6, 3, rng);
    Matrix ident = Matrix::Zero(3, 3);
    ident.row(1).setOnes();
    CHECK(depthwise_conv_values(v, ident) == v);
    CHECK(depthwise_conv_values(Matrix::Zero(6, 3), oracle::normal(3, 3, rng)).isZero(0.0));
  }
  SUBCASE("tap orientation and wide kernels") {
    std::mt19937_64 rng(9);
    for (int k : {1, 3, 5, 9}) {
      const Matrix v = oracle::normal(4, 2, rng);
      const Matrix kernel = oracle::normal(k, 2, rng);
      CHECK((depthwise_conv_values(v, kernel) - loop_conv(v, kernel)).cwiseAbs().maxCoeff() <
            1e-14);
    }
    Matrix v(3, 1);
    v << 1, 10, 100;
    Matrix taps(3, 1);
    taps << 1, 0, 0;  // tap 0 reads the previous token
    Matrix expected(3, 1);
    expected << 0, 1, 10;
    CHECK(depthwise_conv_values(v, taps) == expected);
  }
  SUBCASE("linearity") {
    std::mt19937_64 rng(10);
    const Matrix v1 = oracle::normal(7, 3, rng), v2 = oracle::normal(7, 3, rng);
    const Matrix kernel = oracle::normal(3, 3, rng);
    const Matrix lhs = depthwise_conv_values(-1.7 * v1 + v2, kernel);
    const Matrix rhs = -1.7 * depthwise_conv_values(v1, kernel) + depthwise_conv_values(v2, kernel);
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() <= 1e-12);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(depthwise_conv_values(Matrix::Ones(4, 2), Matrix::Ones(2, 2)), Error);
    CHECK_THROWS_AS(depthwise_conv_values(Matrix::Ones(4, 2), Matrix::Ones(3, 1)), Error);
  }
}

TEST_CASE("HeadConfig") {
  HeadConfig c;
  CHECK(c.effective_beta(16) == 0.25);
  c.beta = 2.0;
  CHECK(c.effective_beta(16) == 2.0);
  c.beta = -1.0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = HeadConfig{};
  c.dwc_kernel = 4;
  CHECK_THROWS_AS(c.validate(), Error);
  c = HeadConfig{};
  c.p_o = 0.0;
  CHECK_THROWS_AS(c.validate(), Error);
  for (auto m : {ClsMode::kFullDs, ClsMode::kClsSoftmax, ClsMode::kClsPola})
    CHECK(parse_cls_mode(to_string(m)) == m);
  CHECK_THROWS_AS(parse_cls_mode("pola"), Error);
}

TEST_CASE("attention_with_cls") {
  SUBCASE("one token plus [CLS]") {
    std::mt19937_64 rng(11);
    const Matrix x = oracle::normal(2, 4, rng);
    const HeadWeights w = random_weights(4, 3, 2, 0, rng);
    HeadConfig c;
    c.dwc_kernel = 0;
    c.beta = 1.0;
    PivotMeasure pivot{oracle::normal(2, 3, rng), Vector::Constant(2, 0.5)};
    const Matrix out = attention_with_cls(x, w, pivot, c);
    const Matrix q = x * w.w_q, k = x * w.w_k, v = x * w.w_v;
    const Vector a = loop_softmax(k * q.row(0).transpose());
    CHECK((out.row(0) - a.transpose() * v).cwiseAbs().maxCoeff() < 1e-14);
    CHECK((out.row(1) - v.row(1)).cwiseAbs().maxCoeff() < 1e-14);
  }
  SUBCASE("full_ds with constant values") {
    std::mt19937_64 rng(12);
    const Matrix x = oracle::normal(9, 4, rng);
    HeadWeights w = random_weights(4, 3, 2, 0, rng);
    // Constant value rows come from a constant input column.
    Matrix xc = x;
    xc.col(3).setConstant(1.0);
    w.w_v.setZero();
    w.w_v(3, 0) = 2.0;
    w.w_v(3, 1) = -0.5;
    HeadConfig c;
    c.cls_mode = ClsMode::kFullDs;
    c.dwc_kernel = 0;
    PivotMeasure pivot{oracle::normal(3, 3, rng), Vector::Constant(3, 1.0 / 3)};
    const Matrix out = attention_with_cls(xc, w, pivot, c);
    CHECK((out.col(0).array() - 2.0).abs().maxCoeff() < 1e-12);
    CHECK((out.col(1).array() + 0.5).abs().maxCoeff() < 1e-12);
  }
  SUBCASE("dense block assembly oracle") {
    for (int kernel : {0, 3}) {
      for (auto mode : {ClsMode::kClsPola, ClsMode::kClsSoftmax, ClsMode::kFullDs}) {
        std::mt19937_64 rng(13);
        const Index n = 8, total = n + 1;
        const Matrix x = oracle::normal(total, 5, rng);
        const HeadWeights w = random_weights(5, 4, 3, kernel, rng);
        PivotMeasure pivot{oracle::normal(2, 4, rng, 0.5), Vector(2)};
        pivot.masses << 0.4, 0.6;
        HeadConfig c;
        c.cls_mode = mode;
        c.dwc_kernel = kernel;
        c.sinkhorn_iters = 10;
        const Matrix out = attention_with_cls(x, w, pivot, c);

        const Matrix q = oracle::matmul(x, w.w_q), k = oracle::matmul(x, w.w_k);
        Matrix v = oracle::matmul(x, w.w_v);
        Matrix a = Matrix::Zero(total, total);
        if (mode == ClsMode::kFullDs) {
          if (kernel) v = loop_conv(v, w.dwc);
          const Matrix block = oracle::dense_lot_attention(q, k, Matrix::Identity(total, total),
                                                           pivot.locations, pivot.masses, 1.0, 10);
          a = block;
        } else {
          if (kernel) v.bottomRows(n) = loop_conv(v.bottomRows(n), w.dwc);
          a.bottomRightCorner(n, n) = oracle::dense_lot_attention(
              q.bottomRows(n), k.bottomRows(n), Matrix::Identity(n, n), pivot.locations,
              pivot.masses, 1.0, 10);
          Vector logits(total);
          for (Index j = 0; j < total; ++j) {
            double same = 0.0, opp = 0.0, dot = 0.0;
            for (Index d = 0; d < 4; ++d) {
              const double qp = std::max(q(0, d), 0.0), qn = std::max(-q(0, d), 0.0);
              const double kp = std::max(k(j, d), 0.0), kn = std::max(-k(j, d), 0.0);
              same += qp * kp + qn * kn;
              opp += qp * kn + qn * kp;
              dot += q(0, d) * k(j, d);
            }
            logits(j) = mode == ClsMode::kClsPola ? same + opp : 0.5 * dot;
          }
          a.row(0) = loop_softmax(logits).transpose();
        }
        const Matrix expected = oracle::matmul(a, v);
        CHECK((out - expected).cwiseAbs().maxCoeff() <= 1e-9);
      }
    }
  }
  SUBCASE("[CLS] treatment only touches row 0") {
    const auto inst = instances::make_lot(12, 3, 4, 4, 14);
    std::mt19937_64 rng(15);
    const Matrix x = oracle::normal(12, 6, rng);
    const HeadWeights w = random_weights(6, 4, 4, 3, rng);
    HeadConfig soft, pola;
    pola.cls_mode = ClsMode::kClsPola;
    const Matrix a = attention_with_cls(x, w, inst.pivot, soft);
    const Matrix b = attention_with_cls(x, w, inst.pivot, pola);
    CHECK(a.bottomRows(11) == b.bottomRows(11));
    CHECK((a.row(0) - b.row(0)).cwiseAbs().maxCoeff() > 0.0);
    // Non-[CLS] rows never see the [CLS] token.
    Matrix x2 = x;
    x2.row(0) = oracle::normal(1, 6, rng);
    CHECK(attention_with_cls(x2, w, inst.pivot, soft).bottomRows(11) == a.bottomRows(11));
  }
  SUBCASE("errors") {
    std::mt19937_64 rng(16);
    const HeadWeights w = random_weights(4, 3, 2, 3, rng);
    PivotMeasure pivot{oracle::normal(2, 3, rng), Vector::Constant(2, 0.5)};
    HeadConfig c;
    CHECK_THROWS_AS(attention_with_cls(oracle::normal(1, 4, rng), w, pivot, c), Error);
    CHECK_THROWS_AS(attention_with_cls(oracle::normal(5, 3, rng), w, pivot, c), Error);
    c.dwc_kernel = 5;
    CHECK_THROWS_AS(attention_with_cls(oracle::normal(5, 4, rng), w, pivot, c), Error);
  }
}
