#include "lotattn/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "lotattn/error.hpp"

namespace lotattn {
namespace {

using nlohmann::json;

double number(const json& v, const char* key) {
  if (!v.is_number()) fail(ErrorKind::kInvalidInput, std::string(key) + " must be a number");
  return v.get<double>();
}

int integer(const json& v, const char* key) {
  if (!v.is_number_integer())
    fail(ErrorKind::kInvalidInput, std::string(key) + " must be an integer");
  const auto x = v.get<std::int64_t>();
  if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max())
    fail(ErrorKind::kInvalidInput, std::string(key) + " is out of range");
  return static_cast<int>(x);
}

std::uint64_t parse_u64(std::string_view s, const char* what) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty())
    fail(ErrorKind::kInvalidInput, std::string(what) + " must be a non-negative integer");
  return out;
}

}  // namespace

void RunConfig::validate() const {
  head.validate();
  if (!(mass_temperature > 0.0) || !std::isfinite(mass_temperature))
    fail(ErrorKind::kInvalidInput, "mass_temperature must be positive");
  if (threads < 1) fail(ErrorKind::kInvalidInput, "threads must be >= 1");
}

RunConfig parse_run_config(std::string_view json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::kInvalidInput, std::string("config is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) fail(ErrorKind::kInvalidInput, "config must be a JSON object");

  RunConfig c;
  for (const auto& [key, v] : doc.items()) {
    if (key == "epsilon") {
      c.head.epsilon = number(v, "epsilon");
    } else if (key == "iters") {
      c.head.sinkhorn_iters = integer(v, "iters");
    } else if (key == "rank") {
      c.head.pivot_rank = integer(v, "rank");
    } else if (key == "beta") {
      if (v.is_null())
        c.head.beta.reset();
      else
        c.head.beta = number(v, "beta");
    } else if (key == "p_s") {
      c.head.p_s = number(v, "p_s");
    } else if (key == "p_o") {
      c.head.p_o = number(v, "p_o");
    } else if (key == "dwc_kernel") {
      c.head.dwc_kernel = integer(v, "dwc_kernel");
    } else if (key == "cls_mode") {
      if (!v.is_string()) fail(ErrorKind::kInvalidInput, "cls_mode must be a string");
      c.head.cls_mode = parse_cls_mode(v.get<std::string>());
    } else if (key == "mass_temperature") {
      c.mass_temperature = number(v, "mass_temperature");
    } else if (key == "seed") {
      if (!v.is_number_unsigned()) fail(ErrorKind::kInvalidInput, "seed must be a non-negative integer");
      c.seed = v.get<std::uint64_t>();
    } else {
      fail(ErrorKind::kInvalidInput, "unknown config key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kInvalidInput, "cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string dump_run_config(const RunConfig& c) {
  json doc = {{"epsilon", c.head.epsilon},
              {"iters", c.head.sinkhorn_iters},
              {"rank", c.head.pivot_rank},
              {"p_s", c.head.p_s},
              {"p_o", c.head.p_o},
              {"dwc_kernel", c.head.dwc_kernel},
              {"cls_mode", std::string(to_string(c.head.cls_mode))},
              {"mass_temperature", c.mass_temperature},
              {"seed", c.seed}};
  doc["beta"] = c.head.beta ? json(*c.head.beta) : json(nullptr);
  return doc.dump(2);
}

std::optional<std::string> process_env(const char* name) {
  if (const char* v = std::getenv(name)) return std::string(v);
  return std::nullopt;
}

void apply_env_overrides(RunConfig& config, const EnvLookup& env) {
  if (auto s = env("LOTATTN_SEED")) config.seed = parse_u64(*s, "LOTATTN_SEED");
  if (auto t = env("LOTATTN_THREADS")) {
    const std::uint64_t n = parse_u64(*t, "LOTATTN_THREADS");
    if (n < 1 || n > 1024) fail(ErrorKind::kInvalidInput, "LOTATTN_THREADS must be in [1, 1024]");
    config.threads = static_cast<int>(n);
  }
}

Matrix read_token_csv(std::istream& in) {
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> row;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      std::string field = line.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
      const auto first = field.find_first_not_of(" \t");
      const auto last = field.find_last_not_of(" \t");
      field = first == std::string::npos ? "" : field.substr(first, last - first + 1);
      double x = 0.0;
      const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), x);
      if (field.empty() || ec != std::errc() || ptr != field.data() + field.size() || !std::isfinite(x))
        fail(ErrorKind::kInvalidInput, "bad number on line " + std::to_string(lineno));
      row.push_back(x);
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (!rows.empty() && row.size() != rows.front().size())
      fail(ErrorKind::kShapeMismatch, "ragged row on line " + std::to_string(lineno));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) fail(ErrorKind::kInvalidInput, "token CSV is empty");
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) m(i, j) = rows[i][j];
  return m;
}

Matrix read_token_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kInvalidInput, "cannot open " + path);
  return read_token_csv(in);
}

void write_matrix_csv(std::ostream& out, const Eigen::Ref<const Matrix>& m) {
  out << std::setprecision(17);
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      if (j) out << ',';
      out << m(i, j);
    }
    out << '\n';
  }
}

void write_matrix_csv_file(const std::string& path, const Eigen::Ref<const Matrix>& m) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kInvalidInput, "cannot write " + path);
  write_matrix_csv(out, m);
}

}  // namespace lotattn
