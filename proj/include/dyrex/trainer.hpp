#pragma once

// Adam with linear warmup/decay, the training loop, finite-difference gradient
// checking and the layer-count x masking-strategy ablation grid.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dyrex/data.hpp"
#include "dyrex/metrics.hpp"
#include "dyrex/model.hpp"
#include "json.hpp"

namespace dyrex {

struct TrainConfig {
  double peak_lr = 3e-5;
  double warmup_frac = 0.10;
  std::size_t batch_size = 12;
  std::size_t max_epochs = 10;
  std::size_t max_steps = 2500;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;  // 0: evaluate once, after the last step
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;  // decoupled; 0 disables
  double grad_clip = 0.0;     // global L2 norm; 0 disables

  void validate() const;
  nlohmann::json to_json() const;
};

// min(max_steps, max_epochs * ceil(train_size / batch_size)).
std::size_t total_steps(const TrainConfig& config, std::size_t train_size);

std::size_t warmup_steps(const TrainConfig& config, std::size_t total);

// Learning rate for the update taking place at `step` (0-based).
double lr_at(std::size_t step, std::size_t total, const TrainConfig& config);

struct OptimState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::size_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static OptimState fresh(const ParamStore& store, const TrainConfig& config = {});
};

// One bias-corrected Adam update from store.grads(); non-trainable entries are skipped.
// Gradients are left in place.
void adam_step(ParamStore& store, OptimState& state, double lr, double weight_decay = 0.0);

struct TrainOutputs {
  std::optional<std::filesystem::path> log_path;
  std::optional<std::filesystem::path> checkpoint_dir;
  bool verbose = false;
};

struct TrainResult {
  std::vector<nlohmann::json> log;  // one record per step
  std::size_t steps = 0;
  double initial_loss = 0.0;  // batch loss at step 0
  double final_loss = 0.0;
  std::optional<EvalResult> eval;  // last evaluation
};

// Trains `model` in place. Examples that do not fit max_len with their gold
// span are rejected up front (GoldTruncatedError).
TrainResult train(DyrexModel& model, const Vocab& vocab, std::span<const QAExample> train_set,
                  std::span<const QAExample> eval_set, const TrainConfig& config,
                  const TrainOutputs& outputs = {});

// Greedy span predictions keyed by qid; text is the passage tokens of the span.
std::map<std::string, std::string> predict_all(const DyrexModel& model, const Vocab& vocab,
                                               std::span<const QAExample> examples);

EvalResult evaluate_model(const DyrexModel& model, const Vocab& vocab,
                          std::span<const QAExample> examples);

// ---- gradient checking ----------------------------------------------------------

struct GradCheckOptions {
  double h = 1e-5;
  double tol = 1e-4;
  // Tensors larger than this are checked on a seeded random subsample of
  // this many coordinates.
  std::size_t max_coords_per_tensor = 256;
  std::uint64_t seed = 0;
};

struct TensorCheck {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double analytic = 0.0;  // worst coordinate
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<TensorCheck> tensors;
  double max_rel_error = 0.0;
  std::string worst_tensor;
  bool passed = false;
};

using LossFn = std::function<double()>;
using GradFn = std::function<void(GradBuffer&)>;

// Compares `grad` (accumulated into a zeroed buffer) against central
// differences of `loss`, perturbing trainable parameters of `store` in place.
GradCheckReport grad_check(ParamStore& store, const LossFn& loss, const GradFn& grad,
                           const GradCheckOptions& options = {});

GradCheckReport grad_check(DyrexModel& model, const TokenizedInput& input, TokenSpan gold,
                           const GradCheckOptions& options = {});

// ---- ablation -------------------------------------------------------------------

struct AblationConfig {
  ModelConfig model;
  TrainConfig train;
  std::vector<std::size_t> layers{0, 1, 2, 3, 4, 5};
  std::vector<MaskStrategy> strategies{MaskStrategy::Bidirectional, MaskStrategy::Causal,
                                       MaskStrategy::Independent};
  std::size_t seed_count = 3;
  std::uint64_t base_seed = 0;
};

struct AblationCell {
  std::size_t layers = 0;
  MaskStrategy strategy = MaskStrategy::Bidirectional;
  std::vector<double> f1;  // per seed, percent
  std::vector<double> em;
  double f1_mean = 0.0, f1_std = 0.0;
  double em_mean = 0.0, em_std = 0.0;
  std::string error;  // non-empty when the cell failed
};

// Mean and population standard deviation.
std::pair<double, double> mean_std(std::span<const double> values);

// Run i uses seed base_seed + i for both initialization and shuffling. With
// L = 0 the strategy is irrelevant, so those runs are trained once and shared.
std::vector<AblationCell> run_ablation(const AblationConfig& config, const Vocab& vocab,
                                       std::span<const QAExample> train_set,
                                       std::span<const QAExample> eval_set,
                                       bool verbose = false);

// Header plus one row per cell; failed cells carry "nan" metrics.
void write_ablation_csv(std::ostream& out, std::span<const AblationCell> cells);

}  // namespace dyrex
