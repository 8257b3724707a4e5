#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "lotattn/linalg.hpp"

namespace lotattn {

/// Row-wise softmax(beta Q K^T) V, materialising the n x n matrix.
Matrix dense_softmax_attention(const Eigen::Ref<const Matrix>& queries,
                               const Eigen::Ref<const Matrix>& keys,
                               const Eigen::Ref<const Matrix>& values, double beta);

/// n * Gamma V for the full n x n entropic plan between the uniform query and
/// key measures under scores Q K^T, after exactly `iters` sweeps ending on rows.
Matrix dense_sinkhorn_attention(const Eigen::Ref<const Matrix>& queries,
                                const Eigen::Ref<const Matrix>& keys,
                                const Eigen::Ref<const Matrix>& values, double epsilon, int iters);

inline constexpr Index kDenseBenchCap = Index{1} << 13;

struct BenchRecord {
  std::string method;  // lot | softmax | sinkhorn
  Index n = 0;
  Index r = 0;  // 0 for dense methods
  Index d_k = 0;
  Index d_v = 0;
  double epsilon = 1.0;
  int iters = 10;
  int reps = 3;
  double median_ms = 0.0;
  std::optional<std::int64_t> peak_bytes;
  bool skipped = false;
};

struct BenchSpec {
  std::vector<std::string> methods{"lot", "softmax", "sinkhorn"};
  std::vector<Index> n_list;
  std::vector<Index> r_list{64};
  Index d_k = 64;
  Index d_v = 64;
  double epsilon = 1.0;
  int iters = 10;
  int reps = 3;
  std::uint64_t seed = 0;
  Index dense_cap = kDenseBenchCap;

  void validate() const;
};

using BenchProgress = std::function<void(const BenchRecord&)>;

/// Runs every (method, n[, r]) cell sequentially: one untimed warm-up, then
/// `reps` timed runs; the record keeps the median.
std::vector<BenchRecord> bench_runtime(const BenchSpec& spec, const BenchProgress& progress = {});

inline constexpr const char* kBenchCsvHeader =
    "method,n,r,d_k,d_v,epsilon,iters,reps,median_ms,peak_bytes";

void write_bench_csv(std::ostream& out, const std::vector<BenchRecord>& records);

/// Least-squares slope of log2(median_ms) against log2(n) over non-skipped
/// records; needs at least 4 points spanning 3 octaves of n.
double fit_loglog_slope(const std::vector<BenchRecord>& records);

/// Median of a non-empty sample.
double median(std::vector<double> xs);

}  // namespace lotattn
