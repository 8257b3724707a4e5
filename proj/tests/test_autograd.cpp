#include <cmath>
#include <functional>
#include <numeric>

#include "doctest.h"
#include "instances.hpp"
#include "lotattn/autograd.hpp"
#include "lotattn/error.hpp"
#include "oracles.hpp"

using namespace lotattn;
using ad::Tape;
using ad::Var;

namespace {

// Flattens a list of matrices into one parameter vector and back.
struct Packer {
  std::vector<std::pair<Index, Index>> shapes;

  explicit Packer(const std::vector<Matrix>& ms) {
    for (const auto& m : ms) shapes.emplace_back(m.rows(), m.cols());
  }
  Index size() const {
    Index s = 0;
    for (auto [r, c] : shapes) s += r * c;
    return s;
  }
  Vector pack(const std::vector<Matrix>& ms) const {
    Vector v(size());
    Index o = 0;
    for (const auto& m : ms) {
      v.segment(o, m.size()) = Eigen::Map<const Vector>(m.data(), m.size());
      o += m.size();
    }
    return v;
  }
  std::vector<Matrix> unpack(const Vector& v) const {
    std::vector<Matrix> ms;
    Index o = 0;
    for (auto [r, c] : shapes) {
      ms.push_back(Eigen::Map<const Matrix>(v.data() + o, r, c));
      o += r * c;
    }
    return ms;
  }
};

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

// Gradient check of a tape expression with loss <W, f(inputs)> for a fixed W.
double op_fd_error(const Builder& build, const std::vector<Matrix>& inputs, std::uint64_t seed) {
  Packer packer(inputs);
  Matrix weights;
  auto loss = [&](const std::vector<Matrix>& xs, Vector* grad) {
    Tape t;
    std::vector<Var> vars;
    for (const auto& x : xs) vars.push_back(t.input(x));
    const Var out = build(t, vars);
    if (weights.size() == 0) {
      std::mt19937_64 rng(seed);
      weights = oracle::normal(t.value(out).rows(), t.value(out).cols(), rng);
    }
    const double value = t.value(out).cwiseProduct(weights).sum();
    if (grad) {
      t.backward(out, weights);
      std::vector<Matrix> gs;
      for (const auto& v : vars) gs.push_back(t.grad(v));
      *grad = packer.pack(gs);
    }
    return value;
  };
  Vector analytic;
  loss(inputs, &analytic);
  return finite_difference_check(
      [&](const Vector& p) { return loss(packer.unpack(p), nullptr); }, packer.pack(inputs),
      analytic);
}

Matrix rnd(Index r, Index c, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  return oracle::normal(r, c, rng, scale);
}

LotForwardInputs make_inputs(Index n, Index r, Index d_in, Index dk, Index dv, double eps, int iters,
                             std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  LotForwardInputs in;
  in.tokens = oracle::normal(n, d_in, rng);
  const double s = 1.0 / std::sqrt(static_cast<double>(d_in));
  in.w_q = oracle::normal(d_in, dk, rng, s);
  in.w_k = oracle::normal(d_in, dk, rng, s);
  in.w_v = oracle::normal(d_in, dv, rng, s);
  in.pivot.locations = oracle::normal(r, dk, rng, 1.0 / std::sqrt(static_cast<double>(dk)));
  in.pivot.mass_logits = oracle::normal(r, 1, rng, 0.5);
  in.pivot.mass_temperature = 1.0;
  in.settings = {eps, iters, 0.0};
  return in;
}

// Max relative FD error over (W_Q, W_K, W_V, Z, mass logits) for loss ||O||^2.
double pipeline_fd_error(const LotForwardInputs& in) {
  const std::vector<Matrix> params{in.w_q, in.w_k, in.w_v, in.pivot.locations,
                                   Matrix(in.pivot.mass_logits)};
  Packer packer(params);
  const Matrix out = forward_lot_attention(in);
  const GradientBundle g = backward_lot_attention(in, 2.0 * out);
  const Vector analytic =
      packer.pack({g.w_q, g.w_k, g.w_v, g.pivot_locations, Matrix(g.mass_logits)});
  auto loss = [&](const Vector& p) {
    const auto ms = packer.unpack(p);
    LotForwardInputs x = in;
    x.w_q = ms[0];
    x.w_k = ms[1];
    x.w_v = ms[2];
    x.pivot.locations = ms[3];
    x.pivot.mass_logits = ms[4].col(0);
    return forward_lot_attention(x).squaredNorm();
  };
  return finite_difference_check(loss, packer.pack(params), analytic);
}

bool bitwise_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

}  // namespace

TEST_CASE("finite_difference_check") {
  SUBCASE("quadratic form") {
    const Matrix m = rnd(6, 6, 1);
    const Vector x = rnd(6, 1, 2).col(0);
    const Vector grad = (m + m.transpose()) * x;
    const double err = finite_difference_check(
        [&](const Vector& p) { return p.dot(m * p); }, x, grad, 1e-5);
    CHECK(err <= 1e-9);
  }
  SUBCASE("constant loss") {
    CHECK(finite_difference_check([](const Vector&) { return 3.0; }, Vector::Ones(4),
                                  Vector::Zero(4)) == 0.0);
  }
  SUBCASE("wrong gradient is caught") {
    const double err = finite_difference_check(
        [](const Vector& p) { return p.squaredNorm(); }, Vector::Ones(3), Vector::Ones(3));
    CHECK(err == doctest::Approx(0.5));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(finite_difference_check([](const Vector&) { return 0.0; }, Vector::Ones(2),
                                            Vector::Ones(2), 0.0),
                    Error);
    CHECK_THROWS_AS(finite_difference_check([](const Vector&) { return NAN; }, Vector::Ones(2),
                                            Vector::Ones(2)),
                    Error);
  }
}

TEST_CASE("tape operation gradients") {
  const double tol = 1e-6;
  CHECK(op_fd_error([](Tape& t, auto& v) { return t.matmul(v[0], v[1]); },
                    {rnd(3, 4, 1), rnd(4, 2, 2)}, 9) < tol);
  CHECK(op_fd_error([](Tape& t, auto& v) { return t.transpose(v[0]); }, {rnd(3, 4, 3)}, 9) < tol);
  CHECK(op_fd_error([](Tape& t, auto& v) { return t.sub(t.add(v[0], v[1]), t.mul(v[0], v[1])); },
                    {rnd(3, 4, 4), rnd(3, 4, 5)}, 9) < tol);
  CHECK(op_fd_error([](Tape& t, auto& v) { return t.scale(v[0], -2.5); }, {rnd(2, 2, 6)}, 9) < tol);
  CHECK(op_fd_error([](Tape& t, auto& v) { return t.add_row(v[0], v[1]); },
                    {rnd(3, 4, 7), rnd(1, 4, 8)}, 9) < tol);
  CHECK(op_fd_error([](Tape& t, auto& v) { return t.add_col(v[0], v[1]); },
                    {rnd(3, 4, 10), rnd(3, 1, 11)}, 9) < tol);
  CHECK(op_fd_error([](Tape& t, auto& v) { return t.div_col(v[0], t.exp(v[1])); },
                    {rnd(3, 4, 12), rnd(3, 1, 13)}, 9) < tol);
  CHECK(op_fd_error([](Tape& t, auto& v) { return t.relu(v[0]); }, {rnd(4, 4, 14)}, 9) < tol);
  for (double p : {1.0, 1.5, 3.0})
    CHECK(op_fd_error([p](Tape& t, auto& v) { return t.pow0(t.exp(v[0]), p); }, {rnd(3, 3, 15)},
                      9) < tol);
  CHECK(op_fd_error([](Tape& t, auto& v) { return t.lse_rows(v[0]); }, {rnd(3, 5, 16, 3.0)}, 9) <
        tol);
  CHECK(op_fd_error([](Tape& t, auto& v) { return t.lse_cols(v[0]); }, {rnd(3, 5, 17, 3.0)}, 9) <
        tol);
  CHECK(op_fd_error([](Tape& t, auto& v) { return t.softmax_rows(v[0]); }, {rnd(3, 5, 18)}, 9) <
        tol);
  CHECK(op_fd_error([](Tape& t, auto& v) { return t.log_softmax_col(v[0]); }, {rnd(5, 1, 19)}, 9) <
        tol);
  CHECK(op_fd_error(
            [](Tape& t, auto& v) {
              return t.concat_rows(t.slice_rows(v[0], 1, 2), t.gather_rows(v[0], {0, 3, 0}));
            },
            {rnd(4, 3, 20)}, 9) < tol);
  CHECK(op_fd_error([](Tape& t, auto& v) { return t.mean_rows(v[0]); }, {rnd(5, 3, 21)}, 9) < tol);
  for (Index k : {1, 3, 5})
    CHECK(op_fd_error([](Tape& t, auto& v) { return t.depthwise_conv(v[0], v[1]); },
                      {rnd(6, 3, 22), rnd(k, 3, 23)}, 9) < tol);
  CHECK(op_fd_error([](Tape& t, auto& v) { return t.sum_squares(v[0]); }, {rnd(3, 3, 24)}, 9) <
        tol);
  CHECK(op_fd_error([](Tape& t, auto& v) { return t.sum(v[0]); }, {rnd(3, 3, 25)}, 9) < tol);
  CHECK(op_fd_error([](Tape& t, auto& v) { return t.cross_entropy(v[0], 2); }, {rnd(1, 4, 26)},
                    9) < tol);
}

TEST_CASE("tape bookkeeping") {
  Tape t;
  const Var a = t.input(rnd(3, 3, 30));
  const Var c = t.constant(rnd(3, 3, 31));
  const Var out = t.sum(t.exp(t.matmul(a, c)));
  CHECK(t.requires_grad(out));
  CHECK_FALSE(t.requires_grad(c));
  t.backward(out);
  CHECK(t.reverse_visits() == t.size());
  CHECK(t.grad(c).isZero(0.0));
  CHECK(t.replay());
  const Matrix first = t.grad(a);
  t.zero_grad();
  t.backward(out);
  CHECK(bitwise_equal(first, t.grad(a)));
  CHECK_THROWS_AS(t.backward(out, Matrix::Ones(2, 1)), Error);
  CHECK_THROWS_AS(t.backward(out, Matrix::Constant(1, 1, INFINITY)), Error);
  CHECK_THROWS_AS(t.matmul(a, t.input(Matrix::Ones(2, 2))), Error);
  CHECK_THROWS_AS(t.cross_entropy(t.input(Matrix::Ones(1, 3)), 3), Error);
}

TEST_CASE("tape forward matches production") {
  SUBCASE("lot attention") {
    for (double eps : {0.5, 1.0})
      for (int iters : {1, 5, 10}) {
        const auto in = make_inputs(9, 3, 5, 4, 3, eps, iters, 40 + iters);
        Tape t;
        const Var x = t.input(in.tokens);
        const auto pv = ad::pivot_vars(t, t.input(in.pivot.locations),
                                       t.input(Matrix(in.pivot.mass_logits)), 1.0);
        const Var out = ad::lot_attention(t, t.matmul(x, t.input(in.w_q)),
                                          t.matmul(x, t.input(in.w_k)),
                                          t.matmul(x, t.input(in.w_v)), pv, in.settings);
        CHECK((t.value(out) - forward_lot_attention(in)).cwiseAbs().maxCoeff() < 1e-12);
        CHECK(t.replay());
      }
  }
  SUBCASE("heads") {
    for (auto mode : {ClsMode::kFullDs, ClsMode::kClsSoftmax, ClsMode::kClsPola})
      for (int kernel : {0, 3}) {
        std::mt19937_64 rng(50);
        const Matrix x = oracle::normal(8, 5, rng);
        HeadWeights w{oracle::normal(5, 4, rng, 0.5), oracle::normal(5, 4, rng, 0.5),
                      oracle::normal(5, 3, rng, 0.5), oracle::normal(3, 3, rng, 0.5)};
        PivotParams p{oracle::normal(2, 4, rng, 0.5), oracle::normal(2, 1, rng).col(0), 0.7};
        HeadConfig c;
        c.cls_mode = mode;
        c.dwc_kernel = kernel;
        c.p_s = 2.0;
        Tape t;
        const ad::HeadVars hv{t.input(w.w_q), t.input(w.w_k), t.input(w.w_v), t.input(w.dwc)};
        const auto pv = ad::pivot_vars(t, t.input(p.locations), t.input(Matrix(p.mass_logits)),
                                       p.mass_temperature);
        const Var out = ad::attention_with_cls(t, t.input(x), hv, pv, c);
        CHECK((t.value(out) - attention_with_cls(x, w, p.measure(), c)).cwiseAbs().maxCoeff() <
              1e-12);
      }
  }
}

TEST_CASE("backward_lot_attention") {
  SUBCASE("zero upstream gives zero gradients") {
    const auto in = make_inputs(6, 2, 4, 3, 3, 1.0, 5, 60);
    const auto g = backward_lot_attention(in, Matrix::Zero(6, 3));
    CHECK(g.w_q.isZero(0.0));
    CHECK(g.w_k.isZero(0.0));
    CHECK(g.w_v.isZero(0.0));
    CHECK(g.pivot_locations.isZero(0.0));
    CHECK(g.mass_logits.isZero(0.0));
  }
  SUBCASE("shapes, finiteness and errors") {
    const auto in = make_inputs(7, 3, 5, 4, 2, 1.0, 10, 61);
    const auto g = backward_lot_attention(in, Matrix::Ones(7, 2));
    CHECK(g.w_q.rows() == 5);
    CHECK(g.w_q.cols() == 4);
    CHECK(g.w_v.cols() == 2);
    CHECK(g.pivot_locations.rows() == 3);
    CHECK(g.mass_logits.size() == 3);
    CHECK(g.all_finite());
    CHECK_THROWS_AS(backward_lot_attention(in, Matrix::Constant(7, 2, NAN)), Error);
    CHECK_THROWS_AS(backward_lot_attention(in, Matrix::Ones(6, 2)), Error);
  }
  SUBCASE("sum loss gives the column sums of A as the value gradient") {
    const auto in = make_inputs(8, 3, 4, 4, 2, 1.0, 200, 62);
    const auto g = backward_lot_attention(in, Matrix::Ones(8, 2));
    CHECK((g.values.array() - 1.0).abs().maxCoeff() < 1e-9);
  }
  SUBCASE("finite differences on every parameter") {
    for (double eps : {0.5, 1.0})
      for (std::uint64_t seed = 0; seed < 3; ++seed)
        CHECK(pipeline_fd_error(make_inputs(6, 2, 4, 3, 3, eps, 5, 70 + seed)) <= 1e-4);
    CHECK(pipeline_fd_error(make_inputs(8, 4, 5, 4, 2, 0.5, 10, 80)) <= 1e-4);
  }
  SUBCASE("mass-logit shifts do not change the loss") {
    auto in = make_inputs(6, 3, 4, 3, 3, 1.0, 5, 90);
    const double base = forward_lot_attention(in).squaredNorm();
    in.pivot.mass_logits.array() += 1.75;
    CHECK(std::abs(forward_lot_attention(in).squaredNorm() - base) <= 1e-12 * base);
    const auto g = backward_lot_attention(in, 2.0 * forward_lot_attention(in));
    CHECK(std::abs(g.mass_logits.sum()) <= 1e-12 * g.mass_logits.cwiseAbs().sum() + 1e-15);
  }
  SUBCASE("token permutation permutes value gradients") {
    const auto in = make_inputs(7, 2, 4, 3, 3, 1.0, 10, 91);
    const Matrix up = rnd(7, 3, 92);
    std::vector<int> perm(7);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), std::mt19937_64(93));
    Eigen::PermutationMatrix<Eigen::Dynamic> p(Eigen::Map<Eigen::VectorXi>(perm.data(), 7));
    LotForwardInputs permuted = in;
    permuted.tokens = p * in.tokens;
    const auto g = backward_lot_attention(in, up);
    const auto gp = backward_lot_attention(permuted, p * up);
    CHECK((gp.values - p * g.values).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((gp.w_q - g.w_q).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("determinism") {
    const auto in = make_inputs(6, 2, 4, 3, 3, 0.5, 7, 94);
    const Matrix up = rnd(6, 3, 95);
    const auto a = backward_lot_attention(in, up);
    const auto b = backward_lot_attention(in, up);
    CHECK(bitwise_equal(a.w_q, b.w_q));
    CHECK(bitwise_equal(a.pivot_locations, b.pivot_locations));
    CHECK(bitwise_equal(a.mass_logits, b.mass_logits));
  }
}

TEST_CASE("head gradients through the tape") {
  for (auto mode : {ClsMode::kFullDs, ClsMode::kClsSoftmax, ClsMode::kClsPola}) {
    std::mt19937_64 rng(100);
    const std::vector<Matrix> params{
        oracle::normal(6, 4, rng, 0.5), oracle::normal(4, 3, rng, 0.5),
        oracle::normal(4, 3, rng, 0.5), oracle::normal(4, 2, rng, 0.5),
        oracle::normal(3, 2, rng, 0.5), oracle::normal(2, 3, rng, 0.5),
        oracle::normal(2, 1, rng)};
    HeadConfig c;
    c.cls_mode = mode;
    c.sinkhorn_iters = 5;
    c.p_s = 1.5;
    const double err = op_fd_error(
        [&](Tape& t, const std::vector<Var>& v) {
          const ad::HeadVars hv{v[1], v[2], v[3], v[4]};
          return ad::attention_with_cls(t, v[0], hv, ad::pivot_vars(t, v[5], v[6], 1.3), c);
        },
        params, 101);
    CHECK(err <= 1e-4);
  }
}
