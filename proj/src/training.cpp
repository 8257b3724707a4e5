#include "lotattn/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <thread>

#include "lotattn/autograd.hpp"
#include "lotattn/error.hpp"

namespace lotattn {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

constexpr int kPivotLocationsIndex = 5;
constexpr int kMassLogitsIndex = 6;

std::uint64_t epoch_seed(std::uint64_t seed, int epoch) {
  // splitmix64 finaliser over (seed, epoch)
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(epoch) + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

int uniform_int(Rng& rng, int lo, int hi) {  // inclusive
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

std::vector<int> background(const ToyTaskSpec& spec, Rng& rng) {
  // Non-motif tokens when the vocabulary has any, otherwise everything.
  const int lo = spec.vocab > kMotifLength ? kMotifLength : 0;
  std::vector<int> t(static_cast<std::size_t>(spec.seq_len));
  for (auto& x : t) x = uniform_int(rng, lo, spec.vocab - 1);
  return t;
}

Example motif_example(const ToyTaskSpec& spec, int label, Rng& rng) {
  const int n = spec.seq_len;
  for (;;) {
    std::vector<int> t = background(spec, rng);
    if (label == 1) {
      const int p = uniform_int(rng, 0, n - kMotifLength);
      for (int i = 0; i < kMotifLength; ++i) t[static_cast<std::size_t>(p + i)] = i;
      return {std::move(t), 1};
    }
    std::vector<int> pos(static_cast<std::size_t>(n));
    std::iota(pos.begin(), pos.end(), 0);
    std::shuffle(pos.begin(), pos.end(), rng);
    for (int i = 0; i < kMotifLength; ++i) t[static_cast<std::size_t>(pos[static_cast<std::size_t>(i)])] = i;
    if (!contains_motif(t)) return {std::move(t), 0};
  }
}

Example majority_example(const ToyTaskSpec& spec, int label, Rng& rng) {
  std::vector<int> t(static_cast<std::size_t>(spec.seq_len));
  for (auto& x : t) x = uniform_int(rng, 0, spec.vocab - 1);
  const int per_class = (spec.vocab - 1 - label) / spec.classes;  // class members beyond label
  for (;;) {
    std::vector<int> counts(static_cast<std::size_t>(spec.classes), 0);
    for (int x : t) ++counts[static_cast<std::size_t>(x % spec.classes)];
    int best_other = 0;
    for (int c = 0; c < spec.classes; ++c)
      if (c != label) best_other = std::max(best_other, counts[static_cast<std::size_t>(c)]);
    if (counts[static_cast<std::size_t>(label)] > best_other) break;
    int i;
    do {
      i = uniform_int(rng, 0, spec.seq_len - 1);
    } while (t[static_cast<std::size_t>(i)] % spec.classes == label);
    t[static_cast<std::size_t>(i)] = label + spec.classes * uniform_int(rng, 0, per_class);
  }
  return {std::move(t), label};
}

std::vector<Example> make_split(const ToyTaskSpec& spec, int size, Rng& rng) {
  std::vector<int> labels(static_cast<std::size_t>(size));
  for (int i = 0; i < size; ++i) labels[static_cast<std::size_t>(i)] = i % spec.classes;
  std::shuffle(labels.begin(), labels.end(), rng);
  std::vector<Example> out;
  out.reserve(labels.size());
  for (int y : labels)
    out.push_back(spec.kind == TaskKind::kMotif ? motif_example(spec, y, rng)
                                                : majority_example(spec, y, rng));
  return out;
}

Matrix row_relu(const Matrix& m) { return m.cwiseMax(0.0); }

void fnv1a(std::uint64_t& h, std::string_view s) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
}

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  void read_doubles(double* dst, std::size_t count) {
    if (count > (bytes_.size() - pos_) / sizeof(double))
      fail(ErrorKind::kCorruptCheckpoint, "truncated parameter block");
    std::memcpy(dst, bytes_.data() + pos_, count * sizeof(double));
    pos_ += count * sizeof(double);
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) fail(ErrorKind::kCorruptCheckpoint, "truncated checkpoint");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

// ---- tasks -----------------------------------------------------------------

std::string_view to_string(TaskKind kind) {
  return kind == TaskKind::kMotif ? "motif" : "majority";
}

TaskKind parse_task_kind(std::string_view name) {
  if (name == "motif") return TaskKind::kMotif;
  if (name == "majority") return TaskKind::kMajority;
  fail(ErrorKind::kInvalidInput, "unknown task '" + std::string(name) + "'");
}

void ToyTaskSpec::validate() const {
  if (kind == TaskKind::kMotif) {
    if (vocab < kMotifLength) fail(ErrorKind::kInvalidInput, "vocabulary smaller than the motif");
    if (classes != 2) fail(ErrorKind::kInvalidInput, "motif detection has two classes");
    if (seq_len < kMotifLength + 1)
      fail(ErrorKind::kInvalidInput, "sequence too short for motif and distractor placement");
  } else {
    if (classes < 2) fail(ErrorKind::kInvalidInput, "need at least two classes");
    if (vocab < classes) fail(ErrorKind::kInvalidInput, "vocabulary smaller than class count");
    if (seq_len < 1) fail(ErrorKind::kInvalidInput, "empty sequences");
  }
  if (embed_dim < 1) fail(ErrorKind::kInvalidInput, "embed_dim must be >= 1");
  if (train_size < 1 || test_size < 0) fail(ErrorKind::kInvalidInput, "bad dataset sizes");
}

bool contains_motif(const std::vector<int>& tokens) {
  for (std::size_t i = 0; i + kMotifLength <= tokens.size(); ++i) {
    bool hit = true;
    for (int k = 0; k < kMotifLength && hit; ++k) hit = tokens[i + static_cast<std::size_t>(k)] == k;
    if (hit) return true;
  }
  return false;
}

int majority_label(const std::vector<int>& tokens, int classes) {
  if (tokens.empty()) fail(ErrorKind::kInvalidInput, "empty sequence");
  std::vector<int> counts(static_cast<std::size_t>(classes), 0);
  for (int t : tokens) ++counts[static_cast<std::size_t>(t % classes)];
  return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

Dataset generate_synthetic_task(const ToyTaskSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Dataset d;
  d.train = make_split(spec, spec.train_size, rng);
  d.test = make_split(spec, spec.test_size, rng);
  return d;
}

// ---- model -----------------------------------------------------------------

HeadConfig ModelConfig::default_head() {
  HeadConfig h;
  h.cls_mode = ClsMode::kFullDs;
  h.pivot_rank = 8;
  return h;
}

void ModelConfig::validate() const {
  head.validate();
  if (mlp_hidden < 1) fail(ErrorKind::kInvalidInput, "mlp_hidden must be >= 1");
  if (!(mass_temperature > 0.0)) fail(ErrorKind::kInvalidInput, "mass temperature must be positive");
  if (!(projection_scale > 0.0)) fail(ErrorKind::kInvalidInput, "projection_scale must be positive");
}

const std::vector<std::string>& Model::tensor_names() {
  static const std::vector<std::string> names{
      "embedding",   "w_q",    "w_k",    "w_v",    "dwc",   "pivot_locations", "mass_logits",
      "mlp_w1",      "mlp_b1", "mlp_w2", "mlp_b2", "out_w", "out_b"};
  return names;
}

std::vector<Matrix*> Model::tensors() {
  return {&embedding, &w_q,    &w_k,    &w_v,    &dwc,   &pivot_locations, &mass_logits,
          &mlp_w1,    &mlp_b1, &mlp_w2, &mlp_b2, &out_w, &out_b};
}

std::vector<const Matrix*> Model::tensors() const {
  return {&embedding, &w_q,    &w_k,    &w_v,    &dwc,   &pivot_locations, &mass_logits,
          &mlp_w1,    &mlp_b1, &mlp_w2, &mlp_b2, &out_w, &out_b};
}

Model Model::init(const ModelConfig& config, const ToyTaskSpec& task, Rng& rng) {
  config.validate();
  task.validate();
  const Index d = task.embed_dim, h = config.mlp_hidden, k = config.head.dwc_kernel;
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));
  Model m;
  m.embedding = random_normal(task.vocab + 1, d, rng);
  m.w_q = random_normal(d, d, rng, config.projection_scale * inv);
  m.w_k = random_normal(d, d, rng, config.projection_scale * inv);
  m.w_v = random_normal(d, d, rng, inv);
  m.dwc = Matrix::Zero(k, d);
  if (k > 0) {
    m.dwc = random_normal(k, d, rng, 0.1);
    m.dwc.row(k / 2).array() += 1.0;
  }
  const PivotParams p = PivotParams::init(config.head.pivot_rank, d, rng, config.mass_temperature);
  m.pivot_locations = p.locations;
  m.mass_logits = p.mass_logits;
  m.mlp_w1 = random_normal(d, h, rng, inv);
  m.mlp_b1 = Matrix::Zero(1, h);
  m.mlp_w2 = random_normal(h, d, rng, 1.0 / std::sqrt(static_cast<double>(h)));
  m.mlp_b2 = Matrix::Zero(1, d);
  m.out_w = random_normal(d, task.classes, rng, inv);
  m.out_b = Matrix::Zero(1, task.classes);
  return m;
}

HeadWeights Model::head() const { return {w_q, w_k, w_v, dwc}; }

PivotParams Model::pivot(double tau) const { return {pivot_locations, mass_logits.col(0), tau}; }

Vector Model::logits(const std::vector<int>& tokens, const ModelConfig& config) const {
  const Index vocab = embedding.rows() - 1;
  Matrix x(static_cast<Index>(tokens.size()) + 1, embedding.cols());
  x.row(0) = embedding.row(vocab);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= vocab) fail(ErrorKind::kInvalidInput, "token id out of range");
    x.row(static_cast<Index>(i) + 1) = embedding.row(tokens[i]);
  }
  const Matrix h =
      x + attention_with_cls(x, head(), pivot(config.mass_temperature).measure(), config.head);
  Matrix hidden = h * mlp_w1;
  hidden.rowwise() += mlp_b1.row(0);
  Matrix f = row_relu(hidden) * mlp_w2;
  f.rowwise() += mlp_b2.row(0);
  const Matrix m = h + f;
  const RowVector pooled =
      config.head.cls_mode == ClsMode::kFullDs ? RowVector(m.colwise().mean()) : RowVector(m.row(0));
  return (pooled * out_w + out_b).transpose();
}

double example_loss_and_grad(const Model& model, const ModelConfig& config, const Example& ex,
                             bool freeze_pivots, std::vector<Matrix>* grads) {
  ad::Tape t;
  const auto params = model.tensors();
  std::vector<ad::Var> v;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const bool pivot = i == kPivotLocationsIndex || i == kMassLogitsIndex;
    v.push_back(t.input(*params[i], grads != nullptr && !(freeze_pivots && pivot)));
  }
  const Index vocab = model.embedding.rows() - 1;
  std::vector<Index> ids{vocab};
  for (int tok : ex.tokens) {
    if (tok < 0 || tok >= vocab) fail(ErrorKind::kInvalidInput, "token id out of range");
    ids.push_back(tok);
  }
  const ad::Var x = t.gather_rows(v[0], std::move(ids));
  const ad::PivotVars pv = ad::pivot_vars(t, v[kPivotLocationsIndex], v[kMassLogitsIndex],
                                          config.mass_temperature);
  const ad::Var attn = ad::attention_with_cls(t, x, {v[1], v[2], v[3], v[4]}, pv, config.head);
  const ad::Var h = t.add(x, attn);
  const ad::Var hidden = t.relu(t.add_row(t.matmul(h, v[7]), v[8]));
  const ad::Var m = t.add(h, t.add_row(t.matmul(hidden, v[9]), v[10]));
  const ad::Var pooled =
      config.head.cls_mode == ClsMode::kFullDs ? t.mean_rows(m) : t.slice_rows(m, 0, 1);
  const ad::Var logits = t.add_row(t.matmul(pooled, v[11]), v[12]);
  const ad::Var loss = t.cross_entropy(logits, ex.label);
  const double value = t.value(loss)(0, 0);
  if (grads) {
    t.backward(loss);
    grads->resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) (*grads)[i] = t.grad(v[i]);
  }
  return value;
}

double accuracy(const Model& model, const ModelConfig& config, const std::vector<Example>& data) {
  if (data.empty()) return 0.0;
  int hits = 0;
  for (const auto& ex : data) {
    const Vector z = model.logits(ex.tokens, config);
    Index arg;
    z.maxCoeff(&arg);
    hits += arg == ex.label;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

// ---- optimisation ----------------------------------------------------------

void OptimizerConfig::validate() const {
  if (!(lr >= 0.0)) fail(ErrorKind::kInvalidInput, "learning rate must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    fail(ErrorKind::kInvalidInput, "Adam betas must lie in [0, 1)");
  if (!(eps > 0.0)) fail(ErrorKind::kInvalidInput, "Adam eps must be positive");
  if (batch_size < 1) fail(ErrorKind::kInvalidInput, "batch_size must be >= 1");
}

TrainState init_training(const ToyTaskSpec& task, const TrainConfig& config) {
  config.optimizer.validate();
  Rng rng(config.seed);
  TrainState s;
  s.model = Model::init(config.model, task, rng);
  for (const Matrix* p : s.model.tensors()) {
    s.adam.m.push_back(Matrix::Zero(p->rows(), p->cols()));
    s.adam.v.push_back(Matrix::Zero(p->rows(), p->cols()));
  }
  return s;
}

std::vector<EpochMetrics> train_epochs(TrainState& state, const Dataset& data,
                                       const TrainConfig& config, int epochs) {
  config.model.validate();
  config.optimizer.validate();
  if (data.train.empty()) fail(ErrorKind::kInvalidInput, "empty training set");
  const OptimizerConfig& opt = config.optimizer;
  const auto params = state.model.tensors();
  const std::size_t np = params.size();
  const std::size_t n_train = data.train.size();
  const int threads = std::max(1, config.threads);

  std::vector<EpochMetrics> history;
  for (int e = 0; e < epochs; ++e) {
    Rng rng(epoch_seed(config.seed, state.epoch));
    std::vector<std::size_t> order(n_train);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    EpochMetrics metrics;
    metrics.epoch = state.epoch + 1;
    double loss_sum = 0.0;
    int steps = 0;
    for (std::size_t start = 0; start < n_train; start += static_cast<std::size_t>(opt.batch_size)) {
      const std::size_t end = std::min(n_train, start + static_cast<std::size_t>(opt.batch_size));
      const std::size_t b = end - start;
      std::vector<std::vector<Matrix>> grads(b);
      std::vector<double> losses(b);
      auto work = [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i)
          losses[i] = example_loss_and_grad(state.model, config.model, data.train[order[start + i]],
                                            config.freeze_pivots, &grads[i]);
      };
      if (threads == 1 || b == 1) {
        work(0, b);
      } else {
        std::vector<std::thread> pool;
        const std::size_t shard = (b + static_cast<std::size_t>(threads) - 1) / static_cast<std::size_t>(threads);
        for (std::size_t lo = 0; lo < b; lo += shard) pool.emplace_back(work, lo, std::min(b, lo + shard));
        for (auto& th : pool) th.join();
      }
      // Sample-order reduction: identical for any thread count.
      std::vector<Matrix> g = grads[0];
      for (std::size_t i = 1; i < b; ++i)
        for (std::size_t p = 0; p < np; ++p) g[p] += grads[i][p];
      for (auto& x : g) x /= static_cast<double>(b);
      for (std::size_t i = 0; i < b; ++i) {
        if (!std::isfinite(losses[i])) {
          std::ostringstream msg;
          msg << "loss is " << losses[i] << " at epoch " << metrics.epoch << ", step " << steps + 1;
          fail(ErrorKind::kDivergence, msg.str());
        }
        loss_sum += losses[i];
      }
      metrics.pivot_location_grad_norm += g[kPivotLocationsIndex].norm();
      metrics.mass_logit_grad_norm += g[kMassLogitsIndex].norm();

      ++state.adam.step;
      const double t = static_cast<double>(state.adam.step);
      const double c1 = 1.0 - std::pow(opt.beta1, t), c2 = 1.0 - std::pow(opt.beta2, t);
      for (std::size_t p = 0; p < np; ++p) {
        if (config.freeze_pivots && (p == kPivotLocationsIndex || p == kMassLogitsIndex)) continue;
        Matrix& m = state.adam.m[p];
        Matrix& v = state.adam.v[p];
        m = opt.beta1 * m + (1.0 - opt.beta1) * g[p];
        v = opt.beta2 * v + (1.0 - opt.beta2) * g[p].cwiseAbs2();
        params[p]->array() -=
            opt.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + opt.eps);
      }
      const Vector masses =
          pivot_masses_from_logits(state.model.mass_logits.col(0), config.model.mass_temperature);
      if (!(masses.minCoeff() > 0.0)) fail(ErrorKind::kDivergence, "pivot mass underflowed to 0");
      ++steps;
    }
    metrics.loss = loss_sum / static_cast<double>(n_train);
    metrics.pivot_location_grad_norm /= steps;
    metrics.mass_logit_grad_norm /= steps;
    metrics.train_accuracy = accuracy(state.model, config.model, data.train);
    metrics.test_accuracy = accuracy(state.model, config.model, data.test);
    ++state.epoch;
    history.push_back(metrics);
  }
  return history;
}

std::vector<EpochMetrics> train_toy_classifier(const ToyTaskSpec& task, const TrainConfig& config) {
  const Dataset data = generate_synthetic_task(task);
  TrainState state = init_training(task, config);
  return train_epochs(state, data, config, config.epochs);
}

// ---- checkpoints -----------------------------------------------------------

std::uint64_t config_hash(const ToyTaskSpec& task, const ModelConfig& config) {
  std::ostringstream s;
  s.precision(17);
  s << to_string(task.kind) << '|' << task.seq_len << '|' << task.vocab << '|' << task.embed_dim
    << '|' << task.classes << '|' << to_string(config.head.cls_mode) << '|'
    << config.head.beta.value_or(-1.0) << '|' << config.head.p_s << '|' << config.head.p_o << '|'
    << config.head.dwc_kernel << '|' << config.head.epsilon << '|' << config.head.sinkhorn_iters
    << '|' << config.head.pivot_rank << '|' << config.mlp_hidden << '|' << config.mass_temperature
    << '|' << config.projection_scale;
  std::uint64_t h = 0xcbf29ce484222325ULL;
  fnv1a(h, s.str());
  return h;
}

std::string save_checkpoint(const TrainState& state, std::uint64_t hash) {
  std::string out = "LOTF";
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, hash);
  put<std::uint64_t>(out, static_cast<std::uint64_t>(state.epoch));
  put<std::uint64_t>(out, static_cast<std::uint64_t>(state.adam.step));
  const auto params = state.model.tensors();
  std::vector<const Matrix*> blocks(params.begin(), params.end());
  for (const auto& m : state.adam.m) blocks.push_back(&m);
  for (const auto& v : state.adam.v) blocks.push_back(&v);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(blocks.size()));
  for (const Matrix* b : blocks) {
    put<std::uint64_t>(out, static_cast<std::uint64_t>(b->rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(b->cols()));
    out.append(reinterpret_cast<const char*>(b->data()),
               sizeof(double) * static_cast<std::size_t>(b->size()));
  }
  return out;
}

void load_checkpoint(std::string_view bytes, std::uint64_t expected_hash, TrainState& state) {
  if (bytes.size() < 4 || bytes.substr(0, 4) != "LOTF")
    fail(ErrorKind::kCorruptCheckpoint, "missing LOTF magic");
  Reader r(bytes.substr(4));
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    fail(ErrorKind::kVersionMismatch, "checkpoint version " + std::to_string(version) +
                                          ", expected " + std::to_string(kCheckpointVersion));
  const auto hash = r.get<std::uint64_t>();
  const auto epoch = r.get<std::uint64_t>();
  const auto step = r.get<std::uint64_t>();
  const auto count = r.get<std::uint32_t>();

  TrainState next = state;
  const auto params = next.model.tensors();
  std::vector<Matrix*> blocks(params.begin(), params.end());
  for (auto& m : next.adam.m) blocks.push_back(&m);
  for (auto& v : next.adam.v) blocks.push_back(&v);
  if (count != blocks.size()) fail(ErrorKind::kShapeMismatch, "checkpoint block count differs");
  for (Matrix* b : blocks) {
    const auto rows = r.get<std::uint64_t>();
    const auto cols = r.get<std::uint64_t>();
    if (rows != static_cast<std::uint64_t>(b->rows()) || cols != static_cast<std::uint64_t>(b->cols()))
      fail(ErrorKind::kShapeMismatch, "checkpoint block is " + std::to_string(rows) + "x" +
                                          std::to_string(cols) + ", model expects " +
                                          std::to_string(b->rows()) + "x" + std::to_string(b->cols()));
    r.read_doubles(b->data(), static_cast<std::size_t>(b->size()));
  }
  if (!r.done()) fail(ErrorKind::kCorruptCheckpoint, "trailing bytes after checkpoint");
  if (hash != expected_hash)
    fail(ErrorKind::kConfigMismatch, "checkpoint was written under a different configuration");
  next.epoch = static_cast<int>(epoch);
  next.adam.step = static_cast<std::int64_t>(step);
  state = std::move(next);
}

}  // namespace lotattn
