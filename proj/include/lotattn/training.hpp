#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "lotattn/heads.hpp"
#include "lotattn/linalg.hpp"
#include "lotattn/pivot.hpp"

namespace lotattn {

// ---- synthetic tasks -------------------------------------------------------

enum class TaskKind { kMotif, kMajority };

std::string_view to_string(TaskKind kind);
TaskKind parse_task_kind(std::string_view name);

struct ToyTaskSpec {
  TaskKind kind = TaskKind::kMotif;
  int seq_len = 64;
  int vocab = 12;
  int embed_dim = 16;
  int classes = 2;
  int train_size = 1024;
  int test_size = 128;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Example {
  std::vector<int> tokens;
  int label = 0;
};

struct Dataset {
  std::vector<Example> train;
  std::vector<Example> test;
};

// The motif is tokens 0, 1, 2 in consecutive positions.
inline constexpr int kMotifLength = 3;

bool contains_motif(const std::vector<int>& tokens);
// Token t belongs to class t % classes; the label is the most frequent class.
int majority_label(const std::vector<int>& tokens, int classes);

/// Positives carry the motif; negatives carry the same three tokens, never
/// adjacent in motif order, so token counts alone cannot separate them.
Dataset generate_synthetic_task(const ToyTaskSpec& spec);

// ---- model -----------------------------------------------------------------

struct ModelConfig {
  HeadConfig head = default_head();
  int mlp_hidden = 32;
  double mass_temperature = 1.0;
  double projection_scale = 2.0;  // init std of W_Q, W_K is this / sqrt(d)

  static HeadConfig default_head();
  void validate() const;
};

/// Embedding -> X + attention_with_cls(X) -> residual ReLU MLP -> readout ->
/// linear classifier. Readout is the mean over rows for full_ds and row 0
/// otherwise. Row 0 of every sequence is the [CLS] embedding (id = vocab).
struct Model {
  Matrix embedding;  // (vocab + 1) x d
  Matrix w_q, w_k, w_v, dwc;
  Matrix pivot_locations;
  Matrix mass_logits;  // r x 1
  Matrix mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  Matrix out_w, out_b;

  static constexpr int kTensorCount = 13;
  static const std::vector<std::string>& tensor_names();
  std::vector<Matrix*> tensors();
  std::vector<const Matrix*> tensors() const;

  static Model init(const ModelConfig& config, const ToyTaskSpec& task, Rng& rng);

  HeadWeights head() const;
  PivotParams pivot(double tau) const;
  Vector logits(const std::vector<int>& tokens, const ModelConfig& config) const;
};

// ---- optimisation ----------------------------------------------------------

struct OptimizerConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch_size = 16;

  void validate() const;
};

struct AdamState {
  std::vector<Matrix> m, v;
  std::int64_t step = 0;
};

struct TrainConfig {
  ModelConfig model;
  OptimizerConfig optimizer;
  int epochs = 30;
  std::uint64_t seed = 0;
  bool freeze_pivots = false;
  int threads = 1;  // > 1 shards each minibatch; the reduction order is fixed
};

struct TrainState {
  Model model;
  AdamState adam;
  int epoch = 0;
};

struct EpochMetrics {
  int epoch = 0;
  double loss = 0.0;            // mean over the epoch's training samples
  double train_accuracy = 0.0;  // after the epoch's updates
  double test_accuracy = 0.0;
  double pivot_location_grad_norm = 0.0;  // mean over the epoch's steps
  double mass_logit_grad_norm = 0.0;
};

/// Loss and gradients for one example, gradients laid out like Model::tensors().
double example_loss_and_grad(const Model& model, const ModelConfig& config, const Example& ex,
                             bool freeze_pivots, std::vector<Matrix>* grads);

double accuracy(const Model& model, const ModelConfig& config, const std::vector<Example>& data);

TrainState init_training(const ToyTaskSpec& task, const TrainConfig& config);

/// Runs `epochs` more epochs starting at state.epoch.
std::vector<EpochMetrics> train_epochs(TrainState& state, const Dataset& data,
                                       const TrainConfig& config, int epochs);

std::vector<EpochMetrics> train_toy_classifier(const ToyTaskSpec& task, const TrainConfig& config);

// ---- checkpoints -----------------------------------------------------------
//
// Layout, all little-endian:
//   "LOTF"  u32 version  u64 config hash  u64 epoch  u64 adam step  u32 blocks
//   then per block: u64 rows, u64 cols, rows * cols f64 in column-major order.
// Blocks are the model tensors in Model::tensor_names() order, then the Adam
// first moments, then the second moments.

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::uint64_t config_hash(const ToyTaskSpec& task, const ModelConfig& config);

std::string save_checkpoint(const TrainState& state, std::uint64_t hash);

/// Loads into `state`, whose tensors fix the expected shapes.
void load_checkpoint(std::string_view bytes, std::uint64_t expected_hash, TrainState& state);

}  // namespace lotattn
