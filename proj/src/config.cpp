#include "dyrex/config.hpp"

#include <fstream>

#include "dyrex/errors.hpp"

namespace dyrex {

namespace fs = std::filesystem;
using nlohmann::json;

json RunConfig::to_json() const {
  json strategies = json::array();
  for (MaskStrategy s : ablation_strategies) strategies.push_back(std::string(to_string(s)));
  const auto& e = model.encoder;
  const auto& h = model.head;
  return {
      {"seed", model.seed},
      {"dim", e.dim},
      {"encoder_layers", e.num_layers},
      {"encoder_heads", e.num_heads},
      {"max_len", e.max_len},
      {"use_segment_embeddings", e.use_segment_embeddings},
      {"encoder_trainable", e.trainable},
      {"encoder_init_std", e.init_std},
      {"decoder_layers", h.num_layers},
      {"decoder_heads", h.num_heads},
      {"strategy", std::string(to_string(h.strategy))},
      {"restrict_to_passage", h.restrict_to_passage},
      {"max_answer_len", h.max_answer_len},
      {"head_init_std", h.init_std},
      {"dropout", h.dropout},
      {"peak_lr", train.peak_lr},
      {"warmup_frac", train.warmup_frac},
      {"batch_size", train.batch_size},
      {"max_epochs", train.max_epochs},
      {"max_steps", train.max_steps},
      {"eval_every", train.eval_every},
      {"weight_decay", train.weight_decay},
      {"grad_clip", train.grad_clip},
      {"train_path", train_path.string()},
      {"eval_path", eval_path.string()},
      {"output_dir", output_dir.string()},
      {"synth_vocab_size", synth.vocab_size},
      {"synth_num_keys", synth.num_keys},
      {"synth_key_tokens", synth.key_tokens},
      {"synth_value_tokens", synth.value_tokens},
      {"synth_passage_len", synth.passage_len},
      {"synth_value_len_min", synth.value_len_min},
      {"synth_value_len_max", synth.value_len_max},
      {"synth_seed", synth.seed},
      {"synth_train_size", synth_train_size},
      {"synth_eval_size", synth_eval_size},
      {"ablation_layers", ablation_layers},
      {"ablation_strategies", strategies},
      {"ablation_seeds", ablation_seeds},
  };
}

json default_run_config_json() { return RunConfig{}.to_json(); }

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  const json defaults = default_run_config_json();
  for (const auto& [key, _] : j.items()) {
    if (!defaults.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  json merged = defaults;
  merged.update(j);

  RunConfig c;
  std::string current;
  try {
    auto get = [&](const char* key, auto& out) {
      current = key;
      out = merged.at(key).get<std::decay_t<decltype(out)>>();
    };
    auto& e = c.model.encoder;
    auto& h = c.model.head;
    auto& t = c.train;
    get("seed", c.model.seed);
    get("dim", e.dim);
    get("encoder_layers", e.num_layers);
    get("encoder_heads", e.num_heads);
    get("max_len", e.max_len);
    get("use_segment_embeddings", e.use_segment_embeddings);
    get("encoder_trainable", e.trainable);
    get("encoder_init_std", e.init_std);
    get("decoder_layers", h.num_layers);
    get("decoder_heads", h.num_heads);
    current = "strategy";
    h.strategy = parse_mask_strategy(merged.at("strategy").get<std::string>());
    get("restrict_to_passage", h.restrict_to_passage);
    get("max_answer_len", h.max_answer_len);
    get("head_init_std", h.init_std);
    get("dropout", h.dropout);
    get("peak_lr", t.peak_lr);
    get("warmup_frac", t.warmup_frac);
    get("batch_size", t.batch_size);
    get("max_epochs", t.max_epochs);
    get("max_steps", t.max_steps);
    get("eval_every", t.eval_every);
    get("weight_decay", t.weight_decay);
    get("grad_clip", t.grad_clip);
    t.seed = c.model.seed;
    std::string path;
    get("train_path", path);
    c.train_path = path;
    get("eval_path", path);
    c.eval_path = path;
    get("output_dir", path);
    c.output_dir = path;
    get("synth_vocab_size", c.synth.vocab_size);
    get("synth_num_keys", c.synth.num_keys);
    get("synth_key_tokens", c.synth.key_tokens);
    get("synth_value_tokens", c.synth.value_tokens);
    get("synth_passage_len", c.synth.passage_len);
    get("synth_value_len_min", c.synth.value_len_min);
    get("synth_value_len_max", c.synth.value_len_max);
    get("synth_seed", c.synth.seed);
    get("synth_train_size", c.synth_train_size);
    get("synth_eval_size", c.synth_eval_size);
    get("ablation_layers", c.ablation_layers);
    current = "ablation_strategies";
    c.ablation_strategies.clear();
    for (const auto& s : merged.at("ablation_strategies"))
      c.ablation_strategies.push_back(parse_mask_strategy(s.get<std::string>()));
    get("ablation_seeds", c.ablation_seeds);
  } catch (const json::exception& ex) {
    throw ConfigError("config key '" + current + "': " + ex.what());
  }

  c.train.validate();
  c.model.head.validate(c.model.encoder.dim);
  if (c.train_path.empty() != c.eval_path.empty())
    throw ConfigError("train_path and eval_path must be given together");
  for (const fs::path& p : {c.train_path, c.eval_path}) {
    if (!p.empty() && !fs::exists(p)) throw DataError("dataset not found: " + p.string());
  }
  if (c.train_path.empty()) c.synth.validate();
  return c;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, /*allow_exceptions=*/false);
  j[key] = value.is_discarded() ? json(raw) : value;
}

RunConfig load_run_config(const fs::path& path, std::span<const std::string> overrides) {
  json j = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    try {
      j = json::parse(in);
    } catch (const json::exception& ex) {
      throw ConfigError(path.string() + ": " + ex.what());
    }
  }
  for (const auto& o : overrides) apply_override(j, o);
  return run_config_from_json(j);
}

Datasets load_datasets(const RunConfig& config) {
  Datasets d;
  if (!config.train_path.empty()) {
    d.train = read_mrqa_jsonl(config.train_path).examples;
    d.eval = read_mrqa_jsonl(config.eval_path).examples;
    return d;
  }
  auto all = generate_synthetic(config.synth, config.synth_train_size + config.synth_eval_size);
  d.eval.assign(std::make_move_iterator(all.begin() + static_cast<long>(config.synth_train_size)),
                std::make_move_iterator(all.end()));
  all.resize(config.synth_train_size);
  d.train = std::move(all);
  return d;
}

}  // namespace dyrex
