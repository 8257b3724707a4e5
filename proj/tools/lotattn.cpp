#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lotattn/bench.hpp"
#include "lotattn/config.hpp"
#include "lotattn/error.hpp"
#include "lotattn/heads.hpp"
#include "lotattn/lot_attention.hpp"
#include "lotattn/pivot.hpp"
#include "lotattn/training.hpp"
#include "lotattn/verify.hpp"

using namespace lotattn;

namespace {

RunConfig run_config(const std::string& path) {
  RunConfig c = path.empty() ? RunConfig{} : load_run_config(path);
  apply_env_overrides(c);
  c.validate();
  return c;
}

// "1024..16384" doubles from the lower bound; "16,32,64" is taken literally.
std::vector<Index> parse_sizes(const std::string& text) {
  std::vector<Index> out;
  const auto dots = text.find("..");
  if (dots != std::string::npos) {
    const long long lo = std::stoll(text.substr(0, dots));
    const long long hi = std::stoll(text.substr(dots + 2));
    if (lo < 1 || hi < lo) fail(ErrorKind::kInvalidInput, "bad range " + text);
    for (long long n = lo; n <= hi; n *= 2) out.push_back(static_cast<Index>(n));
    return out;
  }
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const long long v = std::stoll(item);
    if (v < 1) fail(ErrorKind::kInvalidInput, "sizes must be positive");
    out.push_back(static_cast<Index>(v));
  }
  if (out.empty()) fail(ErrorKind::kInvalidInput, "empty size list");
  return out;
}

std::vector<std::string> split(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

PivotMeasure seeded_pivot(const RunConfig& c, Index d) {
  Rng rng(c.seed);
  return PivotParams::init(c.head.pivot_rank, d, rng, c.mass_temperature).measure();
}

int cmd_attend(const std::string& config_path, const std::string& input, const std::string& output) {
  const RunConfig c = run_config(config_path);
  const Matrix tokens = read_token_csv_file(input);
  const Index d = tokens.cols();
  HeadWeights w;
  w.w_q = w.w_k = w.w_v = Matrix::Identity(d, d);
  if (c.head.dwc_kernel > 0) {
    w.dwc = Matrix::Zero(c.head.dwc_kernel, d);
    w.dwc.row(c.head.dwc_kernel / 2).setOnes();
  }
  write_matrix_csv_file(output, attention_with_cls(tokens, w, seeded_pivot(c, d), c.head));
  return 0;
}

int cmd_cluster(const std::string& config_path, const std::string& input, int rank,
                const std::string& output) {
  RunConfig c = run_config(config_path);
  if (rank > 0) c.head.pivot_rank = rank;
  const Matrix tokens = read_token_csv_file(input);
  const auto coupling =
      lot_coupling(tokens, tokens, seeded_pivot(c, tokens.cols()), c.head.lot_settings());
  const auto clusters = soft_clusters(coupling, Side::kQuery);
  const Index n = tokens.rows();
  Matrix membership(n, static_cast<Index>(clusters.size()));
  for (std::size_t t = 0; t < clusters.size(); ++t)
    membership.col(static_cast<Index>(t)) = static_cast<double>(n) * clusters[t];
  write_matrix_csv_file(output, membership);
  return 0;
}

int cmd_bench(const BenchSpec& base, const std::string& methods, const std::string& ns,
              const std::string& rs, const std::string& out_path) {
  BenchSpec spec = base;
  spec.methods = split(methods);
  spec.n_list = parse_sizes(ns);
  spec.r_list = parse_sizes(rs);
  RunConfig env_cfg;
  env_cfg.seed = spec.seed;
  apply_env_overrides(env_cfg);
  spec.seed = env_cfg.seed;

  const auto records = bench_runtime(spec, [](const BenchRecord& r) {
    if (r.skipped)
      std::fprintf(stderr, "%-8s n=%-6lld skipped\n", r.method.c_str(), static_cast<long long>(r.n));
    else
      std::fprintf(stderr, "%-8s n=%-6lld r=%-4lld %10.3f ms\n", r.method.c_str(),
                   static_cast<long long>(r.n), static_cast<long long>(r.r), r.median_ms);
  });
  if (out_path.empty() || out_path == "-") {
    write_bench_csv(std::cout, records);
  } else {
    std::ofstream out(out_path);
    if (!out) fail(ErrorKind::kInvalidInput, "cannot write " + out_path);
    write_bench_csv(out, records);
  }
  for (const auto& m : spec.methods)
    for (Index r : m == "lot" ? spec.r_list : std::vector<Index>{0}) {
      std::vector<BenchRecord> sel;
      for (const auto& rec : records)
        if (rec.method == m && rec.r == r) sel.push_back(rec);
      try {
        std::fprintf(stderr, "slope %s r=%lld: %.3f\n", m.c_str(), static_cast<long long>(r),
                     fit_loglog_slope(sel));
      } catch (const Error&) {
      }
    }
  return 0;
}

int cmd_verify(const std::string& suite) {
  const VerifyReport rep = verify(suite);
  std::cout << rep.format();
  return rep.passed() ? 0 : 1;
}

int cmd_train(ToyTaskSpec task, const std::string& task_name, const std::string& config_path,
              const std::string& checkpoint, bool resume, TrainConfig tc) {
  task.kind = parse_task_kind(task_name);
  if (!config_path.empty()) {
    const RunConfig c = run_config(config_path);
    tc.model.head = c.head;
    tc.model.mass_temperature = c.mass_temperature;
    tc.seed = c.seed;
    tc.threads = c.threads;
  } else {
    RunConfig c;
    c.seed = tc.seed;
    apply_env_overrides(c);
    tc.seed = c.seed;
    tc.threads = c.threads;
  }
  task.seed = tc.seed;
  task.validate();

  const Dataset data = generate_synthetic_task(task);
  TrainState state = init_training(task, tc);
  const std::uint64_t hash = config_hash(task, tc.model);
  if (resume && !checkpoint.empty() && std::filesystem::exists(checkpoint)) {
    std::ifstream in(checkpoint, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    load_checkpoint(ss.str(), hash, state);
    std::fprintf(stderr, "resumed at epoch %d\n", state.epoch);
  }

  std::printf("epoch,loss,train_accuracy,test_accuracy,pivot_grad_norm,mass_grad_norm\n");
  while (state.epoch < tc.epochs) {
    const EpochMetrics m = train_epochs(state, data, tc, 1).front();
    std::printf("%d,%.6f,%.4f,%.4f,%.3e,%.3e\n", m.epoch, m.loss, m.train_accuracy, m.test_accuracy,
                m.pivot_location_grad_norm, m.mass_logit_grad_norm);
    std::fflush(stdout);
    if (!checkpoint.empty()) {
      const std::string tmp = checkpoint + ".tmp";
      {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) fail(ErrorKind::kInvalidInput, "cannot write " + tmp);
        const std::string bytes = save_checkpoint(state, hash);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      }
      std::filesystem::rename(tmp, checkpoint);
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Linear-time doubly-stochastic attention through learnable pivots"};
  app.require_subcommand(1);

  std::string config_path, input, output;
  auto* attend = app.add_subcommand("attend", "Apply one attention head to a token CSV");
  attend->add_option("--config", config_path, "JSON run configuration");
  attend->add_option("--input", input, "Token CSV, one row per token")->required();
  attend->add_option("--output", output, "Output CSV")->required();

  BenchSpec bench_spec;
  std::string methods = "lot,softmax,sinkhorn", ns = "1024..16384", rs = "64", bench_out;
  auto* bench = app.add_subcommand("bench", "Runtime scaling benchmark");
  bench->add_option("--methods", methods, "Comma list of lot, softmax, sinkhorn");
  bench->add_option("--n", ns, "Sequence lengths, a..b (doubling) or a comma list");
  bench->add_option("--r", rs, "Pivot ranks for lot");
  bench->add_option("--reps", bench_spec.reps, "Timed repetitions (>= 3)");
  bench->add_option("--dk", bench_spec.d_k);
  bench->add_option("--dv", bench_spec.d_v);
  bench->add_option("--epsilon", bench_spec.epsilon);
  bench->add_option("--iters", bench_spec.iters);
  bench->add_option("--seed", bench_spec.seed);
  bench->add_option("--dense-cap", bench_spec.dense_cap, "Largest n run for dense methods");
  bench->add_option("--out", bench_out, "CSV path, stdout when omitted");

  std::string suite = "all";
  auto* ver = app.add_subcommand("verify", "Run the invariant suites");
  ver->add_option("--suite", suite)->check(CLI::IsMember({"all", "ds", "rank", "grad", "ot", "cluster"}));

  ToyTaskSpec task;
  TrainConfig tc;
  std::string task_name = "motif", checkpoint;
  bool resume = false;
  auto* train = app.add_subcommand("train", "Train the toy classifier");
  train->add_option("--task", task_name)->check(CLI::IsMember({"motif", "majority"}));
  train->add_option("--config", config_path, "JSON run configuration");
  train->add_option("--checkpoint", checkpoint, "Checkpoint written after every epoch");
  train->add_flag("--resume", resume, "Continue from --checkpoint when it exists");
  train->add_option("--epochs", tc.epochs);
  train->add_option("--lr", tc.optimizer.lr);
  train->add_option("--batch", tc.optimizer.batch_size);
  train->add_option("--seq-len", task.seq_len);
  train->add_option("--train-size", task.train_size);
  train->add_option("--test-size", task.test_size);
  train->add_option("--seed", tc.seed);
  train->add_flag("--freeze-pivots", tc.freeze_pivots);

  int rank = 0;
  auto* cluster = app.add_subcommand("cluster", "Soft cluster memberships of tokens");
  cluster->add_option("--config", config_path, "JSON run configuration");
  cluster->add_option("--input", input, "Token CSV")->required();
  cluster->add_option("--r", rank, "Number of pivots");
  cluster->add_option("--out", output, "n x r membership CSV")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*attend) return cmd_attend(config_path, input, output);
    if (*bench) return cmd_bench(bench_spec, methods, ns, rs, bench_out);
    if (*ver) return cmd_verify(suite);
    if (*train) return cmd_train(task, task_name, config_path, checkpoint, resume, tc);
    if (*cluster) return cmd_cluster(config_path, input, rank, output);
  } catch (const Error& e) {
    std::fprintf(stderr, "error (%s): %s\n", std::string(to_string(e.kind())).c_str(), e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
