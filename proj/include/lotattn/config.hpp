#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>

#include "lotattn/heads.hpp"
#include "lotattn/linalg.hpp"

namespace lotattn {

/// Settings shared by the attend, train and cluster commands.
struct RunConfig {
  HeadConfig head;
  double mass_temperature = 1.0;
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const;
};

/// Keys: epsilon, iters, rank, beta, p_s, p_o, dwc_kernel, cls_mode,
/// mass_temperature, seed. Missing keys keep their defaults; unknown keys and
/// ill-typed values throw kInvalidInput.
RunConfig parse_run_config(std::string_view json_text);
RunConfig load_run_config(const std::string& path);
std::string dump_run_config(const RunConfig& config);

using EnvLookup = std::function<std::optional<std::string>(const char*)>;

/// Reads the process environment.
std::optional<std::string> process_env(const char* name);

/// LOTATTN_SEED replaces the seed, LOTATTN_THREADS the thread count.
void apply_env_overrides(RunConfig& config, const EnvLookup& env = process_env);

/// One row per token, comma-separated decimals, no header. Every row must
/// have the same number of fields.
Matrix read_token_csv(std::istream& in);
Matrix read_token_csv_file(const std::string& path);
void write_matrix_csv(std::ostream& out, const Eigen::Ref<const Matrix>& m);
void write_matrix_csv_file(const std::string& path, const Eigen::Ref<const Matrix>& m);

}  // namespace lotattn
