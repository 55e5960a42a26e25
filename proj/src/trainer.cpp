#include "dyrex/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <numeric>
#include <ostream>

#include "dyrex/errors.hpp"
#include "dyrex/parallel.hpp"

namespace dyrex {

using nlohmann::json;

void TrainConfig::validate() const {
  if (!(warmup_frac > 0.0 && warmup_frac < 1.0))
    throw ConfigError("warmup_frac must lie in (0, 1), got " + std::to_string(warmup_frac));
  if (!(peak_lr > 0.0) || !std::isfinite(peak_lr))
    throw ConfigError("peak_lr must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (grad_clip < 0.0) throw ConfigError("grad_clip must be non-negative");
}

json TrainConfig::to_json() const {
  return {{"peak_lr", peak_lr},       {"warmup_frac", warmup_frac}, {"batch_size", batch_size},
          {"max_epochs", max_epochs}, {"max_steps", max_steps},     {"seed", seed},
          {"eval_every", eval_every}, {"beta1", beta1},             {"beta2", beta2},
          {"adam_eps", adam_eps},     {"weight_decay", weight_decay}, {"grad_clip", grad_clip}};
}

std::size_t total_steps(const TrainConfig& config, std::size_t train_size) {
  const std::size_t per_epoch = (train_size + config.batch_size - 1) / config.batch_size;
  return std::min(config.max_steps, config.max_epochs * per_epoch);
}

std::size_t warmup_steps(const TrainConfig& config, std::size_t total) {
  // The small slack keeps e.g. 0.1 * 100 from rounding up to 11.
  return static_cast<std::size_t>(std::ceil(config.warmup_frac * static_cast<double>(total) - 1e-9));
}

double lr_at(std::size_t step, std::size_t total, const TrainConfig& config) {
  if (step >= total) return 0.0;
  const std::size_t w = warmup_steps(config, total);
  if (step < w) return config.peak_lr * static_cast<double>(step) / static_cast<double>(w);
  return config.peak_lr * static_cast<double>(total - step) / static_cast<double>(total - w);
}

OptimState OptimState::fresh(const ParamStore& store, const TrainConfig& config) {
  OptimState s;
  s.beta1 = config.beta1;
  s.beta2 = config.beta2;
  s.eps = config.adam_eps;
  for (ParamId id = 0; id < store.size(); ++id) {
    const Matrix& p = store.value(id);
    s.m.emplace_back(p.rows(), p.cols());
    s.v.emplace_back(p.rows(), p.cols());
  }
  return s;
}

void adam_step(ParamStore& store, OptimState& state, double lr, double weight_decay) {
  if (state.m.size() != store.size() || state.v.size() != store.size())
    throw DimensionError("optimizer state has " + std::to_string(state.m.size()) +
                         " slots for " + std::to_string(store.size()) + " parameters");
  ++state.t;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (ParamId id = 0; id < store.size(); ++id) {
    if (!store.trainable(id)) continue;
    Matrix& theta = store.value(id);
    const Matrix& g = store.grad(id);
    Matrix& m = state.m[id];
    Matrix& v = state.v[id];
    if (!m.same_shape(theta) || !v.same_shape(theta) || !g.same_shape(theta))
      throw DimensionError("optimizer state shape drift for " + store.name(id));
    auto th = theta.data();
    auto gd = g.data();
    auto md = m.data();
    auto vd = v.data();
    for (std::size_t i = 0; i < th.size(); ++i) {
      md[i] = state.beta1 * md[i] + (1.0 - state.beta1) * gd[i];
      vd[i] = state.beta2 * vd[i] + (1.0 - state.beta2) * gd[i] * gd[i];
      const double m_hat = md[i] / c1;
      const double v_hat = vd[i] / c2;
      if (weight_decay > 0.0) th[i] -= lr * weight_decay * th[i];
      th[i] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  }
}

// ---- training loop --------------------------------------------------------------

namespace {

EncodedExample encode_for_inference(const QAExample& ex, const Vocab& vocab, std::size_t max_len) {
  QAExample copy = ex;
  copy.gold_span = {0, 0};
  return encode_example(copy, vocab, max_len);
}

double trainable_grad_norm(const ParamStore& store) {
  double s = 0.0;
  for (ParamId id = 0; id < store.size(); ++id) {
    if (!store.trainable(id)) continue;
    for (double g : store.grad(id).data()) s += g * g;
  }
  return std::sqrt(s);
}

void rethrow_first(const std::vector<std::exception_ptr>& errors) {
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

std::map<std::string, std::string> predict_all(const DyrexModel& model, const Vocab& vocab,
                                               std::span<const QAExample> examples) {
  const std::size_t n = examples.size();
  const std::size_t max_len = model.config().encoder.max_len;
  std::vector<std::string> texts(n);
  std::vector<std::exception_ptr> errors(n);
  const long ln = static_cast<long>(n);
#pragma omp parallel for num_threads(parallel::thread_count()) schedule(dynamic)
  for (long i = 0; i < ln; ++i) {
    try {
      const QAExample& ex = examples[i];
      const EncodedExample enc = encode_for_inference(ex, vocab, max_len);
      const SpanPrediction p = model.predict(enc.input);
      texts[i] = span_text(ex, {p.start - enc.question_len, p.end - enc.question_len});
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  rethrow_first(errors);
  std::map<std::string, std::string> out;
  for (std::size_t i = 0; i < n; ++i) out[examples[i].qid] = std::move(texts[i]);
  return out;
}

EvalResult evaluate_model(const DyrexModel& model, const Vocab& vocab,
                          std::span<const QAExample> examples) {
  return evaluate(predict_all(model, vocab, examples), examples);
}

TrainResult train(DyrexModel& model, const Vocab& vocab, std::span<const QAExample> train_set,
                  std::span<const QAExample> eval_set, const TrainConfig& config,
                  const TrainOutputs& outputs) {
  config.validate();
  if (train_set.empty()) throw DataError("training set is empty");

  const std::size_t max_len = model.config().encoder.max_len;
  std::vector<EncodedExample> encoded;
  encoded.reserve(train_set.size());
  for (const auto& ex : train_set) encoded.push_back(encode_example(ex, vocab, max_len));

  const std::size_t total = total_steps(config, encoded.size());
  Rng rng(config.seed);
  std::vector<std::size_t> order(encoded.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(order));
  std::size_t cursor = 0;

  std::ofstream log_file;
  if (outputs.log_path) {
    log_file.open(*outputs.log_path, std::ios::binary | std::ios::trunc);
    if (!log_file) throw DataError("cannot open training log " + outputs.log_path->string());
  }

  ParamStore& store = model.params();
  OptimState optim = OptimState::fresh(store, config);
  std::vector<GradBuffer> example_grads;
  TrainResult result;

  for (std::size_t step = 0; step < total; ++step) {
    std::vector<std::size_t> batch;
    while (batch.size() < config.batch_size) {
      if (cursor == order.size()) {
        // Epoch boundary: a short final batch closes the epoch.
        if (!batch.empty()) break;
        rng.shuffle(std::span<std::size_t>(order));
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }

    const std::size_t b = batch.size();
    while (example_grads.size() < b) example_grads.push_back(store.make_grad_buffer());
    std::vector<double> losses(b, 0.0);
    std::vector<std::exception_ptr> errors(b);
    const double scale = 1.0 / static_cast<double>(b);
    const long lb = static_cast<long>(b);
#pragma omp parallel for num_threads(parallel::thread_count()) schedule(static)
    for (long i = 0; i < lb; ++i) {
      try {
        const EncodedExample& ex = encoded[batch[i]];
        example_grads[i].zero();
        losses[i] = model.forward_backward(ex.input, ex.gold, scale, example_grads[i], nullptr,
                                           ex.qid);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
    rethrow_first(errors);

    double loss = 0.0;
    for (double l : losses) loss += l;
    loss /= static_cast<double>(b);
    if (!std::isfinite(loss)) {
      std::string ids;
      for (std::size_t i = 0; i < b; ++i) {
        if (!std::isfinite(losses[i])) ids += (ids.empty() ? "" : ", ") + encoded[batch[i]].qid;
      }
      throw NumericalError("non-finite loss at step " + std::to_string(step) + " (examples: " +
                           ids + ")");
    }

    store.zero_grad();
    for (std::size_t i = 0; i < b; ++i) store.grads().add(example_grads[i]);
    if (config.grad_clip > 0.0) {
      const double norm = trainable_grad_norm(store);
      if (norm > config.grad_clip) store.grads().scale(config.grad_clip / norm);
    }
    const double lr = lr_at(step, total, config);
    adam_step(store, optim, lr, config.weight_decay);
    store.zero_grad();

    if (step == 0) result.initial_loss = loss;
    result.final_loss = loss;
    result.steps = step + 1;

    json record = {{"step", step + 1}, {"lr", lr}, {"loss", loss}};
    const bool last = step + 1 == total;
    const bool periodic = config.eval_every > 0 && (step + 1) % config.eval_every == 0;
    if (!eval_set.empty() && (last || periodic)) {
      result.eval = evaluate_model(model, vocab, eval_set);
      record["eval"] = {{"em", result.eval->em}, {"f1", result.eval->f1}};
    }
    if (log_file) log_file << record.dump() << '\n';
    if (outputs.verbose && (periodic || last || (step + 1) % 100 == 0)) {
      std::cout << "step " << step + 1 << "/" << total << "  lr " << lr << "  loss " << loss;
      if (record.contains("eval"))
        std::cout << "  em " << 100.0 * result.eval->em << "  f1 " << 100.0 * result.eval->f1;
      std::cout << '\n';
    }
    result.log.push_back(std::move(record));
  }

  if (total == 0 && !eval_set.empty()) result.eval = evaluate_model(model, vocab, eval_set);
  if (outputs.checkpoint_dir) {
    json extra = {{"train_config", config.to_json()}, {"steps", result.steps}};
    if (result.eval) extra["eval"] = result.eval->to_json();
    save_checkpoint(*outputs.checkpoint_dir, model, vocab, extra);
  }
  return result;
}

// ---- gradient checking ----------------------------------------------------------

GradCheckReport grad_check(ParamStore& store, const LossFn& loss, const GradFn& grad,
                           const GradCheckOptions& options) {
  GradBuffer analytic = store.make_grad_buffer();
  grad(analytic);

  GradCheckReport report;
  Rng rng(options.seed);
  for (ParamId id = 0; id < store.size(); ++id) {
    if (!store.trainable(id)) continue;
    Matrix& value = store.value(id);
    std::vector<std::size_t> coords(value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > options.max_coords_per_tensor) {
      for (std::size_t i = 0; i < options.max_coords_per_tensor; ++i)
        std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
      coords.resize(options.max_coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }

    TensorCheck t;
    t.name = store.name(id);
    t.checked = coords.size();
    for (std::size_t c : coords) {
      const double orig = value.data()[c];
      value.data()[c] = orig + options.h;
      const double up = loss();
      value.data()[c] = orig - options.h;
      const double down = loss();
      value.data()[c] = orig;
      const double fd = (up - down) / (2.0 * options.h);
      const double ga = analytic[id].data()[c];
      const double rel = std::abs(ga - fd) / std::max({std::abs(ga), std::abs(fd), 1e-8});
      if (rel > t.max_rel_error) {
        t.max_rel_error = rel;
        t.analytic = ga;
        t.numeric = fd;
      }
    }
    if (t.max_rel_error >= report.max_rel_error) {
      report.max_rel_error = t.max_rel_error;
      report.worst_tensor = t.name;
    }
    report.tensors.push_back(std::move(t));
  }
  report.passed = report.max_rel_error < options.tol;
  return report;
}

GradCheckReport grad_check(DyrexModel& model, const TokenizedInput& input, TokenSpan gold,
                           const GradCheckOptions& options) {
  return grad_check(
      model.params(), [&] { return model.loss(input, gold); },
      [&](GradBuffer& g) { model.forward_backward(input, gold, 1.0, g); }, options);
}

// ---- ablation -------------------------------------------------------------------

std::pair<double, double> mean_std(std::span<const double> values) {
  if (values.empty()) return {std::nan(""), std::nan("")};
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(values.size());
  return {mean, std::sqrt(var)};
}

namespace {

void finish_cell(AblationCell& cell) {
  std::tie(cell.f1_mean, cell.f1_std) = mean_std(cell.f1);
  std::tie(cell.em_mean, cell.em_std) = mean_std(cell.em);
}

}  // namespace

std::vector<AblationCell> run_ablation(const AblationConfig& config, const Vocab& vocab,
                                       std::span<const QAExample> train_set,
                                       std::span<const QAExample> eval_set, bool verbose) {
  if (config.seed_count == 0) throw ConfigError("ablation needs at least one seed");
  if (eval_set.empty()) throw DataError("ablation needs a non-empty evaluation set");

  auto run_cell = [&](std::size_t layers, MaskStrategy strategy) {
    AblationCell cell;
    cell.layers = layers;
    cell.strategy = strategy;
    try {
      for (std::size_t i = 0; i < config.seed_count; ++i) {
        ModelConfig mc = config.model;
        mc.head.num_layers = layers;
        mc.head.strategy = strategy;
        mc.seed = config.base_seed + i;
        TrainConfig tc = config.train;
        tc.seed = config.base_seed + i;
        DyrexModel model(mc);
        const TrainResult r = train(model, vocab, train_set, eval_set, tc);
        cell.f1.push_back(100.0 * r.eval->f1);
        cell.em.push_back(100.0 * r.eval->em);
        if (verbose) {
          std::cout << "L=" << layers << " " << to_string(strategy) << " seed " << tc.seed
                    << ": em " << cell.em.back() << " f1 " << cell.f1.back() << '\n';
        }
      }
    } catch (const std::exception& e) {
      cell.error = e.what();
      std::cerr << "ablation cell L=" << layers << " " << to_string(strategy)
                << " failed: " << e.what() << '\n';
    }
    finish_cell(cell);
    return cell;
  };

  std::vector<AblationCell> cells;
  for (std::size_t layers : config.layers) {
    std::optional<AblationCell> shared;
    for (MaskStrategy s : config.strategies) {
      if (layers == 0) {
        if (!shared) shared = run_cell(0, s);
        AblationCell c = *shared;
        c.strategy = s;
        cells.push_back(std::move(c));
      } else {
        cells.push_back(run_cell(layers, s));
      }
    }
  }
  return cells;
}

void write_ablation_csv(std::ostream& out, std::span<const AblationCell> cells) {
  out << "layers,strategy,seed_count,f1_mean,f1_std,em_mean,em_std\n";
  char buf[160];
  for (const auto& c : cells) {
    if (!c.error.empty()) {
      std::snprintf(buf, sizeof buf, "%zu,%s,%zu,nan,nan,nan,nan", c.layers,
                    std::string(to_string(c.strategy)).c_str(), c.em.size());
    } else {
      std::snprintf(buf, sizeof buf, "%zu,%s,%zu,%.2f,%.2f,%.2f,%.2f", c.layers,
                    std::string(to_string(c.strategy)).c_str(), c.em.size(), c.f1_mean, c.f1_std,
                    c.em_mean, c.em_std);
    }
    out << buf << '\n';
  }
}

}  // namespace dyrex
