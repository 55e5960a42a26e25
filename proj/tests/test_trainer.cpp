#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dyrex/errors.hpp"
#include "dyrex/model.hpp"
#include "dyrex/trainer.hpp"

using namespace dyrex;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dyrex_test_trainer_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

struct Tiny {
  std::vector<QAExample> train_set, eval_set;
  Vocab vocab;
  ModelConfig mc;
  TrainConfig tc;
  Tiny() {
    SynthSpec spec;
    spec.seed = 5;
    auto all = generate_synthetic(spec, 60);
    train_set.assign(all.begin(), all.begin() + 48);
    eval_set.assign(all.begin() + 48, all.end());
    vocab = build_vocab(all);
    mc.encoder.vocab_size = vocab.size();
    mc.encoder.dim = 16;
    mc.encoder.num_heads = 2;
    mc.encoder.num_layers = 0;
    mc.encoder.trainable = false;
    mc.encoder.init_std = 0.5;
    mc.head.num_layers = 1;
    mc.head.num_heads = 2;
    mc.head.init_std = 0.125;
    tc.peak_lr = 1e-3;
    tc.batch_size = 8;
    tc.max_steps = 12;
    tc.max_epochs = 100;
  }
};

}  // namespace

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  c.peak_lr = 1.0;
  c.warmup_frac = 0.1;
  CHECK(warmup_steps(c, 100) == 10);
  CHECK(lr_at(0, 100, c) == 0.0);
  CHECK(lr_at(5, 100, c) == 0.5);
  CHECK(lr_at(10, 100, c) == 1.0);
  CHECK(lr_at(55, 100, c) == 0.5);
  CHECK(lr_at(100, 100, c) == 0.0);
  CHECK(lr_at(150, 100, c) == 0.0);

  // Piecewise linear with a single peak at the warmup boundary.
  for (std::size_t total : {7, 40, 1001}) {
    const std::size_t w = warmup_steps(c, total);
    CHECK(w == static_cast<std::size_t>(std::ceil(0.1 * total - 1e-9)));
    std::size_t peaks = 0;
    for (std::size_t s = 0; s <= total; ++s) {
      const double lr = lr_at(s, total, c);
      CHECK(lr >= 0.0);
      CHECK(lr <= 1.0);
      peaks += lr == 1.0;
      if (s > 0 && s < w) CHECK(lr > lr_at(s - 1, total, c));
      if (s > w) CHECK(lr < lr_at(s - 1, total, c));
    }
    CHECK(peaks == 1);
  }
}

TEST_CASE("total steps") {
  TrainConfig c;
  c.batch_size = 12;
  c.max_epochs = 10;
  c.max_steps = 2500;
  CHECK(total_steps(c, 100) == 90);
  CHECK(total_steps(c, 10000) == 2500);
  c.max_steps = 0;
  CHECK(total_steps(c, 100) == 0);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  c.warmup_frac = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.warmup_frac = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.peak_lr = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  ParamStore store;
  Rng rng(1);
  const ParamId a = store.add("a", rng.normal_matrix(3, 3, 1.0));
  const Matrix before = store.value(a);
  OptimState s = OptimState::fresh(store);
  for (int i = 0; i < 5; ++i) adam_step(store, s, 0.1);
  CHECK(store.value(a) == before);
}

TEST_CASE("adam: closed-form first step") {
  ParamStore store;
  const ParamId a = store.add("theta", Matrix(1, 1));
  store.grad(a)(0, 0) = 1.0;
  OptimState s = OptimState::fresh(store);
  adam_step(store, s, 0.1);
  CHECK(store.value(a)(0, 0) == -0.1 / (1.0 + 1e-8));
  CHECK(std::abs(store.value(a)(0, 0) + 0.1) < 1e-8);
}

TEST_CASE("adam: two identical gradients match a scripted oracle") {
  ParamStore store;
  const ParamId a = store.add("theta", Matrix::from_rows({{0.3, -1.2}}));
  const ParamId frozen = store.add("frozen", Matrix::from_rows({{2.0}}), false);
  OptimState s = OptimState::fresh(store);
  const double g[2] = {0.7, -0.05};
  double theta[2] = {0.3, -1.2}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int t = 1; t <= 2; ++t) {
    store.grad(a)(0, 0) = g[0];
    store.grad(a)(0, 1) = g[1];
    store.grad(frozen)(0, 0) = 5.0;
    adam_step(store, s, 0.01);
    for (int i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      theta[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  CHECK(std::abs(store.value(a)(0, 0) - theta[0]) < 1e-12);
  CHECK(std::abs(store.value(a)(0, 1) - theta[1]) < 1e-12);
  CHECK(store.value(frozen)(0, 0) == 2.0);
  CHECK(s.t == 2);
}

TEST_CASE("adam: shape drift is an error") {
  ParamStore store;
  store.add("a", Matrix(2, 2));
  OptimState s = OptimState::fresh(store);
  store.add("b", Matrix(1, 1));
  CHECK_THROWS_AS(adam_step(store, s, 0.1), DimensionError);
}

TEST_CASE("mean and population deviation") {
  const std::vector<double> one{73.5}, two{80.0, 82.0};
  CHECK(mean_std(one) == std::pair{73.5, 0.0});
  CHECK(mean_std(two) == std::pair{81.0, 1.0});
}

TEST_CASE("grad check: passes on a smooth loss, fails on a sign flip") {
  ParamStore store;
  const ParamId w = store.add("w", Matrix::from_rows({{0.5, -1.5, 2.0}}));
  auto loss = [&] {
    double s = 0.0;
    for (double x : store.value(w).data()) s += std::sin(x) + x * x * x;
    return s;
  };
  auto grad = [&](GradBuffer& g) {
    for (std::size_t i = 0; i < 3; ++i) {
      const double x = store.value(w).data()[i];
      g[w].data()[i] += std::cos(x) + 3 * x * x;
    }
  };
  auto flipped = [&](GradBuffer& g) {
    grad(g);
    g[w].data()[1] = -g[w].data()[1];
  };
  const auto ok = grad_check(store, loss, grad);
  CHECK(ok.passed);
  CHECK(ok.max_rel_error < 1e-8);
  const auto bad = grad_check(store, loss, flipped);
  CHECK_FALSE(bad.passed);
  CHECK(bad.worst_tensor == "w");
  CHECK(bad.max_rel_error == doctest::Approx(2.0));
}

TEST_CASE("grad check: subsampling is seeded and bounded") {
  ParamStore store;
  Rng rng(2);
  store.add("big", rng.normal_matrix(30, 30, 1.0));
  store.add("frozen", rng.normal_matrix(2, 2, 1.0), false);
  auto loss = [&] {
    double s = 0.0;
    for (double x : store.value(0).data()) s += x * x;
    return s;
  };
  auto grad = [&](GradBuffer& g) {
    for (std::size_t i = 0; i < 900; ++i) g[0].data()[i] += 2 * store.value(0).data()[i];
  };
  GradCheckOptions o;
  o.max_coords_per_tensor = 200;
  const auto r = grad_check(store, loss, grad, o);
  REQUIRE(r.tensors.size() == 1);
  CHECK(r.tensors[0].checked == 200);
  CHECK(r.passed);
}

TEST_CASE("model grad check: vanilla head") {
  Tiny t;
  t.mc.head.num_layers = 0;
  t.mc.head.init_std = 0.5;
  DyrexModel model(t.mc);
  const auto ex = encode_example(t.train_set[0], t.vocab, 512);
  const auto r = grad_check(model, ex.input, ex.gold);
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("training: zero steps keeps the initialization") {
  Tiny t;
  t.tc.max_steps = 0;
  DyrexModel model(t.mc);
  const DyrexModel init = model;
  const fs::path dir = temp_dir("zero");
  TrainOutputs out;
  out.checkpoint_dir = dir / "ck";
  const auto r = train(model, t.vocab, t.train_set, t.eval_set, t.tc, out);
  CHECK(r.steps == 0);
  const Checkpoint ck = load_checkpoint(dir / "ck");
  for (ParamId id = 0; id < init.params().size(); ++id)
    CHECK(ck.model.params().value(id) == init.params().value(id));
  fs::remove_all(dir);
}

TEST_CASE("training is bit-deterministic and the log is well formed") {
  Tiny t;
  const fs::path dir = temp_dir("det");
  fs::create_directories(dir);
  std::vector<std::string> logs;
  std::vector<DyrexModel> models;
  for (int run = 0; run < 2; ++run) {
    DyrexModel model(t.mc);
    TrainOutputs out;
    out.log_path = dir / ("log" + std::to_string(run) + ".jsonl");
    const auto r = train(model, t.vocab, t.train_set, t.eval_set, t.tc, out);
    CHECK(r.steps == 12);
    CHECK(r.log.size() == 12);
    CHECK(r.eval.has_value());
    logs.push_back(slurp(*out.log_path));
    models.push_back(model);
  }
  CHECK(logs[0] == logs[1]);
  for (ParamId id = 0; id < models[0].params().size(); ++id)
    CHECK(models[0].params().value(id) == models[1].params().value(id));

  std::istringstream lines(logs[0]);
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j["step"] == ++n);
    CHECK(j.contains("lr"));
    CHECK(std::isfinite(j["loss"].get<double>()));
  }
  CHECK(n == 12);
  const auto last_line = logs[0].substr(logs[0].rfind('\n', logs[0].size() - 2) + 1);
  CHECK(nlohmann::json::parse(last_line).contains("eval"));
  fs::remove_all(dir);
}

TEST_CASE("training reduces the loss on a learnable task") {
  Tiny t;
  t.mc.head.num_layers = 0;
  t.tc.max_steps = 150;
  DyrexModel model(t.mc);
  const auto r = train(model, t.vocab, t.train_set, {}, t.tc);
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < 10; ++i) {
    first += r.log[i]["loss"].get<double>();
    last += r.log[r.log.size() - 1 - i]["loss"].get<double>();
  }
  CHECK(last < first);
}

TEST_CASE("training rejects truncated gold spans") {
  Tiny t;
  t.mc.encoder.max_len = 10;
  DyrexModel model(t.mc);
  CHECK_THROWS_AS(train(model, t.vocab, t.train_set, {}, t.tc), GoldTruncatedError);
}

TEST_CASE("ablation: structure and csv") {
  Tiny t;
  t.tc.max_steps = 3;
  AblationConfig ac;
  ac.model = t.mc;
  ac.train = t.tc;
  ac.layers = {0, 1};
  ac.strategies = {MaskStrategy::Bidirectional, MaskStrategy::Independent};
  ac.seed_count = 2;
  const auto cells = run_ablation(ac, t.vocab, t.train_set, t.eval_set);
  REQUIRE(cells.size() == 4);
  for (const auto& c : cells) {
    CHECK(c.error.empty());
    CHECK(c.f1.size() == 2);
    CHECK(c.em_mean >= 0.0);
    CHECK(c.f1_mean >= c.em_mean);
  }
  // L = 0 ignores the strategy, so its cells coincide.
  CHECK(cells[0].f1 == cells[1].f1);

  std::ostringstream csv;
  write_ablation_csv(csv, cells);
  std::istringstream in(csv.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == "layers,strategy,seed_count,f1_mean,f1_std,em_mean,em_std");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    CHECK(std::count(line.begin(), line.end(), ',') == 6);
  }
  CHECK(rows == 4);

  ac.layers = {0};
  ac.strategies = {MaskStrategy::Causal};
  ac.seed_count = 1;
  const auto single = run_ablation(ac, t.vocab, t.train_set, t.eval_set);
  REQUIRE(single.size() == 1);
  CHECK(single[0].f1_std == 0.0);
  std::ostringstream one;
  write_ablation_csv(one, single);
  CHECK(one.str().find(",1,") != std::string::npos);
  CHECK(one.str().find("0.00") != std::string::npos);
}

TEST_CASE("ablation: failing cells are recorded and the run continues") {
  Tiny t;
  t.tc.max_steps = 2;
  AblationConfig ac;
  ac.model = t.mc;
  ac.model.head.num_heads = 3;  // 16 is not divisible by 3 once L > 0
  ac.train = t.tc;
  ac.layers = {0, 1};
  ac.strategies = {MaskStrategy::Bidirectional};
  ac.seed_count = 1;
  const auto cells = run_ablation(ac, t.vocab, t.train_set, t.eval_set);
  REQUIRE(cells.size() == 2);
  CHECK(cells[0].error.empty());
  CHECK_FALSE(cells[1].error.empty());
  std::ostringstream csv;
  write_ablation_csv(csv, cells);
  CHECK(csv.str().find("nan") != std::string::npos);
}
