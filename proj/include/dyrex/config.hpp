#pragma once

// Flat JSON run configuration shared by every CLI subcommand, with
// key=value overrides.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dyrex/data.hpp"
#include "dyrex/model.hpp"
#include "dyrex/trainer.hpp"
#include "json.hpp"

namespace dyrex {

struct RunConfig {
  ModelConfig model;  // encoder.vocab_size is filled in from the data
  TrainConfig train;

  std::filesystem::path train_path;  // MRQA file; empty: synthetic data
  std::filesystem::path eval_path;
  std::filesystem::path output_dir = "runs/default";

  SynthSpec synth;
  std::size_t synth_train_size = 2000;
  std::size_t synth_eval_size = 500;

  std::vector<std::size_t> ablation_layers{0, 1, 2, 3, 4, 5};
  std::vector<MaskStrategy> ablation_strategies{MaskStrategy::Bidirectional, MaskStrategy::Causal,
                                                MaskStrategy::Independent};
  std::size_t ablation_seeds = 3;

  nlohmann::json to_json() const;
};

// Every key known to RunConfig with its default value.
nlohmann::json default_run_config_json();

// Builds a RunConfig from a flat object. Unknown keys, ill-typed values and
// missing dataset paths raise ConfigError / DataError.
RunConfig run_config_from_json(const nlohmann::json& j);

// `key=value`; the value is parsed as JSON when possible, otherwise taken as a string.
void apply_override(nlohmann::json& j, const std::string& assignment);

RunConfig load_run_config(const std::filesystem::path& path, std::span<const std::string> overrides);

struct Datasets {
  std::vector<QAExample> train;
  std::vector<QAExample> eval;
};

// MRQA files when train_path is set, otherwise train and eval drawn from one
// synthetic stream (first synth_train_size examples train, the rest eval).
Datasets load_datasets(const RunConfig& config);

}  // namespace dyrex
