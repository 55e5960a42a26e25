// dyrex: train, evaluate, gradient-check and ablate span-extraction heads.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "dyrex/config.hpp"
#include "dyrex/data.hpp"
#include "dyrex/errors.hpp"
#include "dyrex/metrics.hpp"
#include "dyrex/model.hpp"
#include "dyrex/parallel.hpp"
#include "dyrex/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dyrex;

namespace {

struct ConfigArgs {
  std::string config_path;
  std::vector<std::string> overrides;

  void attach(CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
    cmd->add_option("overrides", overrides, "key=value settings applied over the config file");
  }
  RunConfig load() const { return load_run_config(config_path, overrides); }
};

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

int cmd_train(const ConfigArgs& args, const std::string& resume) {
  RunConfig rc = args.load();
  Datasets data = load_datasets(rc);
  Vocab vocab;
  if (!resume.empty()) {
    vocab = load_checkpoint(resume).vocab;
  } else {
    vocab = build_vocab(data.train);
  }
  rc.model.encoder.vocab_size = vocab.size();
  DyrexModel model(rc.model);
  if (!resume.empty()) restore_parameters(resume, model);

  fs::create_directories(rc.output_dir);
  write_json(rc.output_dir / "config.json", rc.to_json());
  TrainOutputs outputs;
  outputs.log_path = rc.output_dir / "train_log.jsonl";
  outputs.checkpoint_dir = rc.output_dir / "checkpoint";
  outputs.verbose = true;

  std::cout << "training on " << data.train.size() << " examples, evaluating on "
            << data.eval.size() << "; vocab " << vocab.size() << ", "
            << model.params().scalar_count() << " parameters, "
            << total_steps(rc.train, data.train.size()) << " steps\n";
  const TrainResult r = train(model, vocab, data.train, data.eval, rc.train, outputs);
  std::cout << "loss " << r.initial_loss << " -> " << r.final_loss << '\n';
  if (r.eval) {
    std::printf("eval: EM %.2f  F1 %.2f\n", 100.0 * r.eval->em, 100.0 * r.eval->f1);
  }
  std::cout << "checkpoint written to " << outputs.checkpoint_dir->string() << '\n';
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_path, std::string out_dir,
             const ConfigArgs& args) {
  Checkpoint ck = load_checkpoint(checkpoint);
  DyrexModel* model = &ck.model;
  std::optional<DyrexModel> configured;
  if (!args.config_path.empty() || !args.overrides.empty()) {
    RunConfig rc = args.load();
    rc.model.encoder.vocab_size = ck.vocab.size();
    configured.emplace(rc.model);
    restore_parameters(checkpoint, *configured);
    model = &*configured;
  }
  const auto examples = read_mrqa_jsonl(data_path).examples;
  const auto predictions = predict_all(*model, ck.vocab, examples);
  const EvalResult result = evaluate(predictions, examples);
  if (out_dir.empty()) out_dir = checkpoint;
  fs::create_directories(out_dir);
  write_json(fs::path(out_dir) / "predictions.json", json(predictions));
  json report = result.to_json();
  report["data"] = data_path;
  report["checkpoint"] = checkpoint;
  write_json(fs::path(out_dir) / "eval.json", report);
  std::printf("%zu examples: EM %.2f  F1 %.2f\n", examples.size(), 100.0 * result.em,
              100.0 * result.f1);
  return 0;
}

bool print_report(const std::string& label, const GradCheckReport& r, bool detail) {
  std::printf("%-40s max rel err %.3e  %s  (worst: %s)\n", label.c_str(), r.max_rel_error,
              r.passed ? "PASS" : "FAIL", r.worst_tensor.c_str());
  if (detail) {
    for (const auto& t : r.tensors)
      std::printf("    %-36s %5zu coords  %.3e  (analytic %.6e, numeric %.6e)\n", t.name.c_str(), t.checked, t.max_rel_error, t.analytic, t.numeric);
  }
  return r.passed;
}

// d = 16, two heads, 12 tokens: every (L, strategy) pair on a fresh model.
bool gradcheck_suite(const GradCheckOptions& opts, std::uint64_t seed, double init_std) {
  SynthSpec spec;
  spec.vocab_size = 40;
  spec.key_tokens = 10;
  spec.value_tokens = 10;
  spec.num_keys = 2;
  spec.passage_len = 11;
  spec.value_len_min = 1;
  spec.value_len_max = 3;
  spec.seed = seed;
  const auto examples = generate_synthetic(spec, 1);
  const Vocab vocab = build_vocab(examples);
  const EncodedExample ex = encode_example(examples[0], vocab, 64);
  bool ok = true;
  for (std::size_t layers : {0, 1, 3}) {
    for (MaskStrategy s : {MaskStrategy::Bidirectional, MaskStrategy::Causal,
                           MaskStrategy::Independent}) {
      ModelConfig mc;
      mc.seed = seed;
      mc.encoder.vocab_size = vocab.size();
      mc.encoder.dim = 16;
      mc.encoder.num_heads = 2;
      mc.encoder.num_layers = 0;
      mc.encoder.trainable = false;
      mc.encoder.init_std = 0.5;
      mc.head.num_layers = layers;
      mc.head.num_heads = 2;
      mc.head.strategy = s;
      mc.head.init_std = init_std;
      DyrexModel model(mc);
      const auto r = grad_check(model, ex.input, ex.gold, opts);
      ok &= print_report("L=" + std::to_string(layers) + " " + std::string(to_string(s)), r,
                         !r.passed);
    }
  }
  return ok;
}

int cmd_gradcheck(const ConfigArgs& args, bool suite, double init_std,
                  const GradCheckOptions& opts) {
  bool ok = true;
  if (suite) {
    ok = gradcheck_suite(opts, opts.seed, init_std);
  } else {
    RunConfig rc = args.load();
    Datasets data = load_datasets(rc);
    if (data.train.empty()) throw DataError("gradcheck needs at least one training example");
    const Vocab vocab = build_vocab(data.train);
    rc.model.encoder.vocab_size = vocab.size();
    DyrexModel model(rc.model);
    const EncodedExample ex = encode_example(data.train.front(), vocab, rc.model.encoder.max_len);
    ok = print_report("model on " + ex.qid, grad_check(model, ex.input, ex.gold, opts), true);
  }
  std::cout << (ok ? "gradient check passed\n" : "gradient check FAILED\n");
  return ok ? 0 : 3;
}

int cmd_ablate(const ConfigArgs& args) {
  RunConfig rc = args.load();
  Datasets data = load_datasets(rc);
  const Vocab vocab = build_vocab(data.train);
  rc.model.encoder.vocab_size = vocab.size();
  AblationConfig ac;
  ac.model = rc.model;
  ac.train = rc.train;
  ac.layers = rc.ablation_layers;
  ac.strategies = rc.ablation_strategies;
  ac.seed_count = rc.ablation_seeds;
  ac.base_seed = rc.model.seed;
  const auto cells = run_ablation(ac, vocab, data.train, data.eval, true);
  fs::create_directories(rc.output_dir);
  const fs::path csv = rc.output_dir / "ablation.csv";
  std::ofstream out(csv);
  if (!out) throw DataError("cannot write " + csv.string());
  write_ablation_csv(out, cells);
  write_ablation_csv(std::cout, cells);
  std::size_t failed = 0;
  for (const auto& c : cells) failed += !c.error.empty();
  std::cout << "table written to " << csv.string() << '\n';
  if (failed > 0) std::cerr << failed << " cell(s) failed\n";
  return 0;
}

int cmd_synth(SynthSpec spec, std::size_t n, const std::string& out_path) {
  const auto examples = generate_synthetic(spec, n);
  write_mrqa_jsonl(out_path, examples, "synthetic-kv");
  std::cout << "wrote " << n << " examples to " << out_path << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic query span extraction: training, evaluation and ablations"};
  app.require_subcommand(1);
  int threads = parallel::threads_from_env();
  app.add_option("--threads", threads, "worker threads (default: DYREX_THREADS or 1)")
      ->check(CLI::PositiveNumber);

  ConfigArgs train_args, eval_args, grad_args, ablate_args;
  std::string resume;
  auto* train_cmd = app.add_subcommand("train", "train a model and write a checkpoint");
  train_args.attach(train_cmd);
  train_cmd->add_option("--resume", resume, "start from this checkpoint's parameters")
      ->check(CLI::ExistingDirectory);

  std::string checkpoint, data_path, out_dir;
  auto* eval_cmd = app.add_subcommand("eval", "predict and score an MRQA file");
  eval_cmd->add_option("--checkpoint", checkpoint)->required();
  eval_cmd->add_option("--data", data_path, "MRQA jsonl (optionally gzipped)")->required();
  eval_cmd->add_option("--out", out_dir, "report directory (default: the checkpoint)");
  eval_args.attach(eval_cmd);

  bool suite = false;
  double suite_init_std = 0.02;
  GradCheckOptions gopts;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient check");
  grad_args.attach(grad_cmd);
  grad_cmd->add_flag("--suite", suite, "sweep L in {0,1,3} x all masking strategies");
  grad_cmd->add_option("--step", gopts.h, "finite-difference step")->capture_default_str();
  grad_cmd->add_option("--init-std", suite_init_std, "parameter scale of the suite models")
      ->capture_default_str();
  grad_cmd->add_option("--tol", gopts.tol, "relative error tolerance")->capture_default_str();
  grad_cmd->add_option("--seed", gopts.seed, "subsampling and suite seed")->capture_default_str();

  auto* ablate_cmd = app.add_subcommand("ablate", "layer-count x masking-strategy grid");
  ablate_args.attach(ablate_cmd);

  SynthSpec spec;
  std::size_t n = 100;
  std::string synth_out;
  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic key/value dataset");
  synth_cmd->add_option("-n", n, "number of examples")->capture_default_str();
  synth_cmd->add_option("--out", synth_out)->required();
  synth_cmd->add_option("--seed", spec.seed, "")->capture_default_str();
  synth_cmd->add_option("--vocab-size", spec.vocab_size, "")->capture_default_str();
  synth_cmd->add_option("--num-keys", spec.num_keys, "")->capture_default_str();
  synth_cmd->add_option("--key-tokens", spec.key_tokens, "")->capture_default_str();
  synth_cmd->add_option("--value-tokens", spec.value_tokens, "")->capture_default_str();
  synth_cmd->add_option("--passage-len", spec.passage_len, "")->capture_default_str();
  synth_cmd->add_option("--value-len-min", spec.value_len_min, "")->capture_default_str();
  synth_cmd->add_option("--value-len-max", spec.value_len_max, "")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    parallel::set_thread_count(threads);
    if (*train_cmd) return cmd_train(train_args, resume);
    if (*eval_cmd) return cmd_eval(checkpoint, data_path, out_dir, eval_args);
    if (*grad_cmd) return cmd_gradcheck(grad_args, suite, suite_init_std, gopts);
    if (*ablate_cmd) return cmd_ablate(ablate_args);
    if (*synth_cmd) return cmd_synth(spec, n, synth_out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
