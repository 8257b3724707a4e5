#include "lotattn/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ostream>

#include "lotattn/alloc_audit.hpp"
#include "lotattn/error.hpp"
#include "lotattn/lot_attention.hpp"
#include "lotattn/ot.hpp"

namespace lotattn {
namespace {

void check_shapes(const Eigen::Ref<const Matrix>& q, const Eigen::Ref<const Matrix>& k,
                  const Eigen::Ref<const Matrix>& v) {
  if (q.rows() == 0) fail(ErrorKind::kInvalidInput, "no tokens");
  if (k.rows() != q.rows() || v.rows() != q.rows())
    fail(ErrorKind::kShapeMismatch, "queries, keys and values must share n");
  if (k.cols() != q.cols()) fail(ErrorKind::kShapeMismatch, "query and key widths differ");
}

struct Inputs {
  Matrix q, k, v;
  PivotMeasure pivot;
};

Inputs make_inputs(const BenchSpec& spec, Index n, Index r) {
  Rng rng(spec.seed ^ (static_cast<std::uint64_t>(n) * 0x9e3779b97f4a7c15ULL) ^
          static_cast<std::uint64_t>(r));
  const double scale = std::pow(static_cast<double>(spec.d_k), -0.25);
  Inputs in;
  in.q = random_normal(n, spec.d_k, rng, scale);
  in.k = random_normal(n, spec.d_k, rng, scale);
  in.v = random_normal(n, spec.d_v, rng);
  if (r > 0) {
    in.pivot.locations = random_normal(r, spec.d_k, rng, scale);
    in.pivot.masses = Vector::Constant(r, 1.0 / static_cast<double>(r));
  }
  return in;
}

Matrix run_method(const std::string& method, const Inputs& in, const BenchSpec& spec) {
  if (method == "lot")
    return lot_attention(in.q, in.k, in.v, in.pivot, {spec.epsilon, spec.iters, 0.0}).outputs;
  if (method == "softmax")
    return dense_softmax_attention(in.q, in.k, in.v,
                                   1.0 / std::sqrt(static_cast<double>(spec.d_k)));
  return dense_sinkhorn_attention(in.q, in.k, in.v, spec.epsilon, spec.iters);
}

}  // namespace

Matrix dense_softmax_attention(const Eigen::Ref<const Matrix>& queries,
                               const Eigen::Ref<const Matrix>& keys,
                               const Eigen::Ref<const Matrix>& values, double beta) {
  check_shapes(queries, keys, values);
  Matrix a = beta * (queries * keys.transpose());
  const Vector m = a.rowwise().maxCoeff();
  a.colwise() -= m;
  a = a.array().exp().matrix();
  const Vector z = a.rowwise().sum();
  a = z.cwiseInverse().asDiagonal() * a;
  return a * values;
}

Matrix dense_sinkhorn_attention(const Eigen::Ref<const Matrix>& queries,
                                const Eigen::Ref<const Matrix>& keys,
                                const Eigen::Ref<const Matrix>& values, double epsilon,
                                int iters) {
  check_shapes(queries, keys, values);
  const Index n = queries.rows();
  ot::SinkhornProblem p;
  p.scores = queries * keys.transpose();
  p.row_marginal = Vector::Constant(n, 1.0 / static_cast<double>(n));
  p.col_marginal = p.row_marginal;
  p.epsilon = epsilon;
  p.max_iters = iters;
  p.tolerance = 0.0;
  ot::TransportPlan plan = ot::sinkhorn(p, ot::Axis::kRow);
  p.scores.resize(0, 0);
  plan.plan *= static_cast<double>(n);
  return plan.plan * values;
}

void BenchSpec::validate() const {
  if (methods.empty()) fail(ErrorKind::kInvalidInput, "no methods selected");
  for (const auto& m : methods)
    if (m != "lot" && m != "softmax" && m != "sinkhorn")
      fail(ErrorKind::kInvalidInput, "unknown method '" + m + "'");
  if (n_list.empty()) fail(ErrorKind::kInvalidInput, "no sequence lengths");
  for (Index n : n_list)
    if (n < 1) fail(ErrorKind::kInvalidInput, "sequence lengths must be positive");
  for (Index r : r_list)
    if (r < 1) fail(ErrorKind::kInvalidInput, "ranks must be positive");
  if (std::find(methods.begin(), methods.end(), "lot") != methods.end() && r_list.empty())
    fail(ErrorKind::kInvalidInput, "lot needs at least one rank");
  if (reps < 3) fail(ErrorKind::kInvalidInput, "reps must be >= 3");
  if (d_k < 1 || d_v < 1) fail(ErrorKind::kInvalidInput, "dimensions must be positive");
  if (!(epsilon > 0.0) || iters < 1) fail(ErrorKind::kInvalidInput, "bad Sinkhorn settings");
}

double median(std::vector<double> xs) {
  if (xs.empty()) fail(ErrorKind::kInvalidInput, "median of an empty sample");
  std::sort(xs.begin(), xs.end());
  const std::size_t mid = xs.size() / 2;
  return xs.size() % 2 ? xs[mid] : 0.5 * (xs[mid - 1] + xs[mid]);
}

std::vector<BenchRecord> bench_runtime(const BenchSpec& spec, const BenchProgress& progress) {
  spec.validate();
  std::vector<BenchRecord> out;
  for (const auto& method : spec.methods) {
    const bool dense = method != "lot";
    const std::vector<Index> ranks = dense ? std::vector<Index>{0} : spec.r_list;
    for (Index n : spec.n_list) {
      for (Index r : ranks) {
        BenchRecord rec;
        rec.method = method;
        rec.n = n;
        rec.r = r;
        rec.d_k = spec.d_k;
        rec.d_v = spec.d_v;
        rec.epsilon = spec.epsilon;
        rec.iters = spec.iters;
        rec.reps = spec.reps;
        if (dense && n > spec.dense_cap) {
          rec.skipped = true;
        } else {
          const Inputs in = make_inputs(spec, n, r);
          run_method(method, in, spec);  // warm-up
          std::vector<double> times;
          std::int64_t peak = 0;
          for (int rep = 0; rep < spec.reps; ++rep) {
            alloc_audit::Scope scope;
            const auto t0 = std::chrono::steady_clock::now();
            const Matrix result = run_method(method, in, spec);
            const auto t1 = std::chrono::steady_clock::now();
            peak = std::max(peak, scope.peak_delta());
            if (!all_finite(result)) fail(ErrorKind::kDivergence, method + " produced non-finite output");
            times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
          }
          rec.median_ms = median(times);
          if (alloc_audit::available()) rec.peak_bytes = peak;
        }
        if (progress) progress(rec);
        out.push_back(rec);
      }
    }
  }
  return out;
}

void write_bench_csv(std::ostream& out, const std::vector<BenchRecord>& records) {
  out << kBenchCsvHeader << '\n';
  for (const auto& r : records) {
    out << r.method << ',' << r.n << ',' << r.r << ',' << r.d_k << ',' << r.d_v << ','
        << r.epsilon << ',' << r.iters << ',' << r.reps << ',';
    if (r.skipped)
      out << "skipped";
    else
      out << r.median_ms;
    out << ',';
    if (r.peak_bytes && !r.skipped) out << *r.peak_bytes;
    out << '\n';
  }
}

double fit_loglog_slope(const std::vector<BenchRecord>& records) {
  std::vector<double> x, y;
  for (const auto& r : records) {
    if (r.skipped) continue;
    if (r.n < 1 || !(r.median_ms > 0.0))
      fail(ErrorKind::kInvalidInput, "slope fit needs positive n and times");
    x.push_back(std::log2(static_cast<double>(r.n)));
    y.push_back(std::log2(r.median_ms));
  }
  if (x.size() < 4) fail(ErrorKind::kInsufficientPoints, "slope fit needs at least 4 points");
  const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
  if (*hi - *lo < 3.0) fail(ErrorKind::kInsufficientPoints, "slope fit needs 3 octaves of n");
  const double k = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= k;
  my /= k;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxy / sxx;
}

}  // namespace lotattn
