#include "capgen/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "capgen/error.hpp"
#include "capgen/inference.hpp"
#include "capgen/metrics.hpp"
#include "capgen/util.hpp"

namespace capgen {

// --- config ----------------------------------------------------------------

void TrainConfig::validate() const {
  auto fail = [](const char* field) { throw Error(Errc::usage, std::string(field) + " must be positive"); };
  if (embed == 0) fail("embed");
  if (hidden == 0) fail("hidden");
  if (variant == Variant::attention && attention == 0) fail("attention");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail("learning_rate");
  if (batch_size == 0) fail("batch_size");
  if (max_epochs <= 0) fail("max_epochs");
  if (!(clip_norm > 0.0)) fail("clip_norm");
  if (early_stop_patience <= 0) fail("early_stop_patience");
  if (max_len < 3) throw Error(Errc::usage, "max_len must be >= 3");
}

nlohmann::json TrainConfig::to_json() const {
  return nlohmann::json{{"variant", to_string(variant)},
                        {"embed", embed},
                        {"hidden", hidden},
                        {"attention", attention},
                        {"learning_rate", learning_rate},
                        {"batch_size", batch_size},
                        {"max_epochs", max_epochs},
                        {"clip_norm", clip_norm},
                        {"early_stop_patience", early_stop_patience},
                        {"seed", seed},
                        {"max_len", max_len}};
}

void TrainConfig::merge_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw Error(Errc::format, "training config must be a JSON object");
  static const std::set<std::string> known = {"variant", "embed", "hidden", "attention", "learning_rate",
                                              "batch_size", "max_epochs", "clip_norm", "early_stop_patience",
                                              "seed", "max_len"};
  for (const auto& [key, value] : doc.items()) {
    if (known.count(key) == 0) throw Error(Errc::format, "unknown training config key '" + key + "'");
  }
  try {
    if (doc.contains("variant")) variant = parse_variant(doc["variant"].get<std::string>());
    if (doc.contains("embed")) embed = doc["embed"].get<std::size_t>();
    if (doc.contains("hidden")) hidden = doc["hidden"].get<std::size_t>();
    if (doc.contains("attention")) attention = doc["attention"].get<std::size_t>();
    if (doc.contains("learning_rate")) learning_rate = doc["learning_rate"].get<double>();
    if (doc.contains("batch_size")) batch_size = doc["batch_size"].get<std::size_t>();
    if (doc.contains("max_epochs")) max_epochs = doc["max_epochs"].get<int>();
    if (doc.contains("clip_norm")) clip_norm = doc["clip_norm"].get<double>();
    if (doc.contains("early_stop_patience")) early_stop_patience = doc["early_stop_patience"].get<int>();
    if (doc.contains("seed")) seed = doc["seed"].get<std::uint64_t>();
    if (doc.contains("max_len")) max_len = doc["max_len"].get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::format, std::string("malformed training config: ") + e.what());
  }
}

TrainConfig TrainConfig::from_json(const nlohmann::json& doc) {
  TrainConfig c;
  c.merge_json(doc);
  return c;
}

// --- loss and gradients -----------------------------------------------------

SequenceLoss sequence_loss(const DecoderParams& params, const FeatureStore& store, const Batch& batch,
                           bool record_tape) {
  SequenceLoss out;
  out.tokens = batch.token_count();
  if (out.tokens == 0) throw Error(Errc::usage, "batch has an all-zero mask");
  const double normalizer = static_cast<double>(out.tokens);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& mask = batch.mask[b];
    std::size_t steps = mask.size();
    while (steps > 0 && mask[steps - 1] == 0) --steps;
    if (steps == 0) continue;
    const std::span<const TokenId> inputs(batch.inputs[b].data(), steps);
    auto fwd = forward_sequence(params, store.at(batch.image_ids[b]), inputs, record_tape);
    auto ce = masked_cross_entropy(fwd.logits, std::span<const TokenId>(batch.targets[b].data(), steps),
                                   std::span<const std::uint8_t>(mask.data(), steps), normalizer);
    out.loss += ce.loss;
    if (record_tape) {
      out.tape.sequences.push_back(std::move(*fwd.tape));
      out.tape.dlogits.push_back(std::move(ce.dlogits));
      if (fwd.trace) out.tape.traces.push_back(std::move(*fwd.trace));
    }
  }
  if (!std::isfinite(out.loss)) throw Error(Errc::numeric, "training loss is not finite");
  return out;
}

Gradients backward_pass(const DecoderParams& params, LossTape& tape) {
  if (tape.consumed) throw Error(Errc::usage, "loss tape was already consumed");
  tape.consumed = true;
  auto grads = zero_params(params.variant, params.dims());
  for (std::size_t k = 0; k < tape.sequences.size(); ++k) {
    backward_sequence(params, tape.sequences[k], tape.dlogits[k], grads);
  }
  return grads;
}

double global_norm(const Gradients& grads) {
  double sq = 0.0;
  for (const auto& t : grads.tensors()) {
    for (double v : t.tensor->values()) sq += v * v;
  }
  return std::sqrt(sq);
}

double clip_gradients(Gradients& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw Error(Errc::usage, "clip norm must be positive");
  const double norm = global_norm(grads);
  if (!std::isfinite(norm)) throw Error(Errc::numeric, "gradient norm is not finite");
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& t : grads.tensors()) {
      for (auto& v : t.tensor->values()) v *= scale;
    }
  }
  return norm;
}

AdamState make_adam_state(const DecoderParams& params) {
  const auto dims = params.dims();
  return {zero_params(params.variant, dims), zero_params(params.variant, dims), 0};
}

void adam_step(DecoderParams& params, const Gradients& grads, AdamState& state, const AdamOptions& options) {
  auto p = params.tensors();
  auto g = grads.tensors();
  auto m = state.m.tensors();
  auto v = state.v.tensors();
  if (p.size() != g.size() || p.size() != m.size() || p.size() != v.size()) {
    throw Error(Errc::shape, "optimizer state does not match the parameters");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(options.beta1, t);
  const double correction2 = 1.0 - std::pow(options.beta2, t);
  for (std::size_t k = 0; k < p.size(); ++k) {
    auto pv = p[k].tensor->values();
    const auto gv = g[k].tensor->values();
    auto mv = m[k].tensor->values();
    auto vv = v[k].tensor->values();
    if (pv.size() != gv.size()) throw Error(Errc::shape, "gradient shape mismatch at " + p[k].name);
    for (std::size_t i = 0; i < pv.size(); ++i) {
      mv[i] = options.beta1 * mv[i] + (1.0 - options.beta1) * gv[i];
      vv[i] = options.beta2 * vv[i] + (1.0 - options.beta2) * gv[i] * gv[i];
      const double m_hat = mv[i] / correction1;
      const double v_hat = vv[i] / correction2;
      pv[i] -= options.learning_rate * m_hat / (std::sqrt(v_hat) + options.epsilon);
    }
  }
  ++params.version;
}

// --- early stopping and logs -------------------------------------------------

bool EarlyStopping::observe(double bleu4, double val_loss) {
  const bool better = bleu4 > best_bleu4_ || (bleu4 == best_bleu4_ && val_loss < best_val_loss_);
  if (better) {
    best_bleu4_ = bleu4;
    best_val_loss_ = val_loss;
    since_best_ = 0;
  } else {
    ++since_best_;
  }
  return better;
}

std::string TrainLog::to_csv() const {
  std::string out = "epoch,train_loss,val_loss,val_bleu4,seconds\n";
  char line[256];
  for (const auto& e : epochs) {
    std::snprintf(line, sizeof line, "%d,%.9g,%.9g,%.9g,%.3f\n", e.epoch, e.train_loss, e.val_loss, e.val_bleu4,
                  e.seconds);
    out += line;
  }
  return out;
}

void TrainLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::io, "cannot write " + path.string());
  out << to_csv();
  if (!out) throw Error(Errc::io, "failed writing " + path.string());
}

// --- loop ----------------------------------------------------------------------

double run_epoch(DecoderParams& params, AdamState& optimizer, const TrainConfig& config, const FeatureStore& store,
                 std::span<const Batch> batches, const std::function<void(const LossTape&)>& on_batch) {
  const AdamOptions adam{config.learning_rate};
  double weighted = 0.0;
  std::size_t tokens = 0;
  for (const auto& batch : batches) {
    auto loss = sequence_loss(params, store, batch, true);
    if (on_batch) on_batch(loss.tape);
    auto grads = backward_pass(params, loss.tape);
    clip_gradients(grads, config.clip_norm);
    adam_step(params, grads, optimizer, adam);
    weighted += loss.loss * static_cast<double>(loss.tokens);
    tokens += loss.tokens;
  }
  return tokens == 0 ? 0.0 : weighted / static_cast<double>(tokens);
}

double evaluate_loss(const DecoderParams& params, const FeatureStore& store, std::span<const Batch> batches) {
  double weighted = 0.0;
  std::size_t tokens = 0;
  for (const auto& batch : batches) {
    const auto loss = sequence_loss(params, store, batch, false);
    weighted += loss.loss * static_cast<double>(loss.tokens);
    tokens += loss.tokens;
  }
  return tokens == 0 ? 0.0 : weighted / static_cast<double>(tokens);
}

namespace {

void require_present(std::span<const std::string> ids, const FeatureStore& store, const CaptionCorpus& corpus,
                     const char* split_name) {
  std::string missing_features;
  std::string missing_captions;
  for (const auto& id : ids) {
    if (!store.contains(id)) missing_features += " " + id;
    if (!corpus.contains(id)) missing_captions += " " + id;
  }
  if (!missing_features.empty()) {
    throw Error(Errc::missing, std::string(split_name) + " split images without features:" + missing_features);
  }
  if (!missing_captions.empty()) {
    throw Error(Errc::missing, std::string(split_name) + " split images without captions:" + missing_captions);
  }
}

double validation_bleu4(const DecoderParams& params, const FeatureStore& store, const CaptionCorpus& corpus,
                        const Vocabulary& vocab, std::span<const std::string> val, std::size_t max_len) {
  std::vector<EvalInstance> instances;
  instances.reserve(val.size());
  for (const auto& id : val) {
    EvalInstance inst;
    inst.image_id = id;
    inst.candidate = greedy_decode(params, store.at(id), vocab, max_len).words;
    for (const auto* rec : corpus.captions_for(id)) inst.references.push_back(rec->tokens);
    instances.push_back(std::move(inst));
  }
  return bleu(instances)[3];
}

}  // namespace

TrainResult train(const TrainConfig& config, const FeatureStore& store, const CaptionCorpus& corpus,
                  const Vocabulary& vocab, const Splits& splits, const TrainOptions& options) {
  config.validate();
  if (splits.train.empty()) throw Error(Errc::usage, "training split is empty");
  if (splits.val.empty()) throw Error(Errc::usage, "validation split is empty");
  require_present(splits.train, store, corpus, "training");
  require_present(splits.val, store, corpus, "validation");

  const DecoderDims dims{vocab.size(), config.embed, config.hidden, config.attention, store.dim()};
  TrainResult result;
  Checkpoint& state = result.last;
  state.config = config;
  state.vocab_fingerprint = vocab.fingerprint();
  if (options.resume != nullptr) {
    const auto& r = *options.resume;
    if (r.vocab_fingerprint != state.vocab_fingerprint) {
      throw Error(Errc::mismatch, "resume checkpoint was trained with a different vocabulary");
    }
    if (r.params.variant != config.variant || r.params.dims().feature_dim != dims.feature_dim ||
        r.params.dims().vocab != dims.vocab || r.params.dims().hidden != dims.hidden ||
        r.params.dims().embed != dims.embed) {
      throw Error(Errc::mismatch, "resume checkpoint does not match the training configuration");
    }
    state.params = r.params;
    state.optimizer = r.optimizer;
    state.epoch = r.epoch;
    state.best_bleu4 = r.best_bleu4;
    state.best_val_loss = r.best_val_loss;
    state.epochs_since_best = r.epochs_since_best;
  } else {
    state.params = init_decoder_params(config.variant, dims, mix_seed(config.seed, 1));
    state.optimizer = make_adam_state(state.params);
  }
  state.params.validate();

  auto clock = options.clock;
  if (!clock) {
    clock = [] {
      using namespace std::chrono;
      return duration<double>(steady_clock::now().time_since_epoch()).count();
    };
  }

  EarlyStopping stopper(config.early_stop_patience, state.best_bleu4, state.best_val_loss, state.epochs_since_best);
  const auto val_batches = make_batches(corpus, vocab, splits.val, config.batch_size, config.max_len, 0);

  for (int epoch = state.epoch + 1; epoch <= config.max_epochs && !stopper.should_stop(); ++epoch) {
    const double started = clock();
    const auto batches = make_batches(corpus, vocab, splits.train, config.batch_size, config.max_len,
                                      mix_seed(config.seed, 1000 + static_cast<std::uint64_t>(epoch)));
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = run_epoch(state.params, state.optimizer, config, store, batches, options.on_batch);
    rec.val_loss = evaluate_loss(state.params, store, val_batches);
    rec.val_bleu4 = validation_bleu4(state.params, store, corpus, vocab, splits.val, config.max_len);
    rec.seconds = clock() - started;
    result.log.epochs.push_back(rec);

    const bool improved = stopper.observe(rec.val_bleu4, rec.val_loss);
    state.epoch = epoch;
    state.best_bleu4 = stopper.best_bleu4();
    state.best_val_loss = stopper.best_val_loss();
    state.epochs_since_best = stopper.since_best();
    if (improved) result.best = state;
    if (options.on_epoch) options.on_epoch(rec);
  }
  return result;
}

}  // namespace capgen
