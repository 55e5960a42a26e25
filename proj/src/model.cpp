#include "dyrex/model.hpp"

#include <fstream>

#include "dyrex/errors.hpp"

namespace dyrex {

namespace fs = std::filesystem;
using nlohmann::json;

json ModelConfig::to_json() const {
  return json{
      {"seed", seed},
      {"encoder",
       {{"vocab_size", encoder.vocab_size},
        {"dim", encoder.dim},
        {"num_layers", encoder.num_layers},
        {"num_heads", encoder.num_heads},
        {"max_len", encoder.max_len},
        {"use_segment_embeddings", encoder.use_segment_embeddings},
        {"trainable", encoder.trainable},
        {"init_std", encoder.init_std}}},
      {"head",
       {{"num_layers", head.num_layers},
        {"num_heads", head.num_heads},
        {"strategy", std::string(to_string(head.strategy))},
        {"restrict_to_passage", head.restrict_to_passage},
        {"max_answer_len", head.max_answer_len},
        {"init_std", head.init_std},
        {"dropout", head.dropout}}},
  };
}

ModelConfig ModelConfig::from_json(const json& j) {
  try {
    ModelConfig c;
    c.seed = j.at("seed").get<std::uint64_t>();
    const json& e = j.at("encoder");
    c.encoder.vocab_size = e.at("vocab_size").get<std::size_t>();
    c.encoder.dim = e.at("dim").get<std::size_t>();
    c.encoder.num_layers = e.at("num_layers").get<std::size_t>();
    c.encoder.num_heads = e.at("num_heads").get<std::size_t>();
    c.encoder.max_len = e.at("max_len").get<std::size_t>();
    c.encoder.use_segment_embeddings = e.at("use_segment_embeddings").get<bool>();
    c.encoder.trainable = e.at("trainable").get<bool>();
    c.encoder.init_std = e.at("init_std").get<double>();
    const json& h = j.at("head");
    c.head.num_layers = h.at("num_layers").get<std::size_t>();
    c.head.num_heads = h.at("num_heads").get<std::size_t>();
    c.head.strategy = parse_mask_strategy(h.at("strategy").get<std::string>());
    c.head.restrict_to_passage = h.at("restrict_to_passage").get<bool>();
    c.head.max_answer_len = h.at("max_answer_len").get<std::size_t>();
    c.head.init_std = h.at("init_std").get<double>();
    c.head.dropout = h.at("dropout").get<double>();
    return c;
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("model config: ") + ex.what());
  }
}

DyrexModel::DyrexModel(const ModelConfig& config) : config_(config) {
  config_.encoder.validate();
  config_.head.validate(config_.encoder.dim);
  Rng rng(config_.seed);
  encoder_ = Encoder::create(store_, config_.encoder, rng);
  head_ = HeadParams::create(store_, config_.encoder.dim, config_.head, rng);
}

namespace {

Matrix pad_precomputed(const Matrix& pre, const TokenizedInput& input, std::size_t dim) {
  if (pre.cols() != dim) {
    throw ConfigError("precomputed embeddings have dim " + std::to_string(pre.cols()) +
                      ", model expects " + std::to_string(dim));
  }
  if (pre.rows() != input.unpadded_size()) {
    throw DataError("precomputed embeddings have " + std::to_string(pre.rows()) +
                    " rows for " + std::to_string(input.unpadded_size()) + " tokens");
  }
  Matrix h(input.size(), dim);
  std::copy(pre.data().begin(), pre.data().end(), h.data().begin());
  return h;
}

}  // namespace

DyrexModel::Pass DyrexModel::forward(const TokenizedInput& input,
                                     const Matrix* precomputed) const {
  Pass pass;
  if (precomputed) {
    input.validate();
    pass.h = pad_precomputed(*precomputed, input, config_.encoder.dim);
  } else {
    pass.h = encoder_.encode(store_, input, &pass.encoder_cache);
  }
  pass.head = head_forward(store_, head_, config_.head, pass.h, input);
  return pass;
}

double DyrexModel::loss(const TokenizedInput& input, TokenSpan gold,
                        const Matrix* precomputed) const {
  return span_nll(forward(input, precomputed).head.dists, gold);
}

double DyrexModel::forward_backward(const TokenizedInput& input, TokenSpan gold, double scale,
                                    GradBuffer& grads, const Matrix* precomputed,
                                    std::string_view example_id) const {
  Pass pass = forward(input, precomputed);
  const double l = span_nll(pass.head.dists, gold, example_id);
  Matrix d_h = head_backward(store_, head_, pass.head, pass.h, gold, scale, grads);
  if (!precomputed && config_.encoder.trainable) {
    encoder_.backward(store_, input, pass.encoder_cache, d_h, grads);
  }
  return l;
}

SpanPrediction DyrexModel::predict(const TokenizedInput& input,
                                   const Matrix* precomputed) const {
  Pass pass = forward(input, precomputed);
  return decode_span(pass.head.dists, pass.head.allowed, config_.head.max_answer_len);
}

// ---- checkpoints --------------------------------------------------------------

namespace {

std::string param_file(const std::string& name) { return name + ".mat"; }

}  // namespace

void save_checkpoint(const fs::path& dir, const DyrexModel& model, const Vocab& vocab,
                     const json& extra) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create checkpoint directory " + dir.string());
  const ParamStore& store = model.params();
  json params = json::array();
  for (ParamId id = 0; id < store.size(); ++id) {
    const std::string file = param_file(store.name(id));
    save_matrix(dir / file, store.value(id));
    params.push_back({{"name", store.name(id)},
                      {"file", file},
                      {"rows", store.value(id).rows()},
                      {"cols", store.value(id).cols()}});
  }
  vocab.save(dir / kVocabFile);
  json manifest = {{"format", "dyrex-checkpoint-1"},
                   {"config", model.config().to_json()},
                   {"vocab_file", std::string(kVocabFile)},
                   {"vocab_size", vocab.size()},
                   {"parameters", params}};
  for (const auto& [k, v] : extra.items()) manifest[k] = v;
  std::ofstream out(dir / kManifestFile);
  if (!out) throw DataError("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

namespace {

json read_manifest(const fs::path& dir) {
  std::ifstream in(dir / kManifestFile);
  if (!in) throw DataError("no checkpoint manifest in " + dir.string());
  try {
    return json::parse(in);
  } catch (const json::exception& ex) {
    throw FormatError((dir / kManifestFile).string() + ": " + ex.what());
  }
}

}  // namespace

void restore_parameters(const fs::path& dir, DyrexModel& model) {
  ParamStore& store = model.params();
  for (ParamId id = 0; id < store.size(); ++id) {
    const fs::path file = dir / param_file(store.name(id));
    if (!fs::exists(file)) {
      throw ConfigError("checkpoint " + dir.string() + " lacks parameter " + store.name(id));
    }
    Matrix value = load_matrix(file);
    if (!value.same_shape(store.value(id))) {
      throw ConfigError("checkpoint parameter " + store.name(id) + " has shape " +
                        value.shape_str() + ", model expects " + store.value(id).shape_str());
    }
    store.value(id) = std::move(value);
  }
}

Checkpoint load_checkpoint(const fs::path& dir) {
  json manifest = read_manifest(dir);
  if (!manifest.contains("config")) throw FormatError("manifest lacks config");
  ModelConfig config = ModelConfig::from_json(manifest["config"]);
  Vocab vocab = Vocab::load(dir / manifest.value("vocab_file", std::string(kVocabFile)));
  if (vocab.size() != config.encoder.vocab_size) {
    throw ConfigError("checkpoint vocabulary has " + std::to_string(vocab.size()) +
                      " tokens, config says " + std::to_string(config.encoder.vocab_size));
  }
  DyrexModel model(config);
  restore_parameters(dir, model);
  return Checkpoint{std::move(model), std::move(vocab), std::move(manifest)};
}

}  // namespace dyrex
