#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "capgen/corpus.hpp"
#include "capgen/decoder.hpp"
#include "capgen/features.hpp"

namespace capgen {

struct TrainConfig {
  Variant variant = Variant::baseline;
  std::size_t embed = 256;
  std::size_t hidden = 512;
  std::size_t attention = 512;
  double learning_rate = 4e-4;
  std::size_t batch_size = 32;
  int max_epochs = 30;
  double clip_norm = 5.0;
  int early_stop_patience = 10;
  std::uint64_t seed = 0;
  std::size_t max_len = 38;

  /// Throws Errc::usage naming the first invalid field.
  void validate() const;

  nlohmann::json to_json() const;
  /// Missing keys keep their current values, so a partial document acts as
  /// a set of overrides.
  void merge_json(const nlohmann::json& doc);
  static TrainConfig from_json(const nlohmann::json& doc);

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Same layout as the parameters; zero-initialised mirrors.
using Gradients = DecoderParams;

/// Forward records of one batch plus the loss gradient w.r.t. each
/// sequence's logits.
struct LossTape {
  std::vector<SequenceTape> sequences;
  std::vector<Matrix> dlogits;
  std::vector<AttentionTrace> traces;  // attention variant only
  bool consumed = false;
};

struct SequenceLoss {
  double loss = 0.0;          // mean NLL per unmasked token
  std::size_t tokens = 0;     // unmasked target count
  LossTape tape;
};

/// Mean masked negative log-likelihood of a teacher-forced batch.
SequenceLoss sequence_loss(const DecoderParams& params, const FeatureStore& store, const Batch& batch,
                           bool record_tape = true);

/// Exact gradient of the batch loss. Consumes the tape.
Gradients backward_pass(const DecoderParams& params, LossTape& tape);

double global_norm(const Gradients& grads);

/// Rescales to max_norm when the global L2 norm exceeds it. Returns the norm
/// before clipping.
double clip_gradients(Gradients& grads, double max_norm);

struct AdamState {
  Gradients m;
  Gradients v;
  std::int64_t step = 0;
};

struct AdamOptions {
  double learning_rate = 4e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

AdamState make_adam_state(const DecoderParams& params);

/// Bias-corrected Adam update; advances state.step.
void adam_step(DecoderParams& params, const Gradients& grads, AdamState& state, const AdamOptions& options);

/// Model selection on validation BLEU-4, with validation loss breaking ties.
/// Stops once more than `patience` consecutive evaluations fail to improve.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {}
  EarlyStopping(int patience, double best_bleu4, double best_val_loss, int since_best)
      : patience_(patience), best_bleu4_(best_bleu4), best_val_loss_(best_val_loss), since_best_(since_best) {}

  /// Returns true if this evaluation is the new best.
  bool observe(double bleu4, double val_loss);
  bool should_stop() const { return since_best_ > patience_; }

  double best_bleu4() const { return best_bleu4_; }
  double best_val_loss() const { return best_val_loss_; }
  int since_best() const { return since_best_; }

 private:
  int patience_;
  double best_bleu4_ = -std::numeric_limits<double>::infinity();
  double best_val_loss_ = std::numeric_limits<double>::infinity();
  int since_best_ = 0;
};

struct Checkpoint {
  TrainConfig config;
  std::uint64_t vocab_fingerprint = 0;
  DecoderParams params;
  AdamState optimizer;
  int epoch = 0;
  double best_bleu4 = -std::numeric_limits<double>::infinity();
  double best_val_loss = std::numeric_limits<double>::infinity();
  int epochs_since_best = 0;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
/// Throws Errc::version, Errc::corruption or Errc::mismatch (when
/// expected_vocab is given and differs).
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           std::optional<std::uint64_t> expected_vocab = std::nullopt);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_bleu4 = 0.0;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;

  /// `epoch,train_loss,val_loss,val_bleu4,seconds`
  std::string to_csv() const;
  void write_csv(const std::filesystem::path& path) const;
};

struct Splits {
  std::vector<std::string> train;
  std::vector<std::string> val;
};

struct TrainOptions {
  /// Seconds since an arbitrary origin; defaults to a steady clock.
  std::function<double()> clock;
  std::function<void(const EpochRecord&)> on_epoch;
  /// Observes every batch's loss tape before backpropagation.
  std::function<void(const LossTape&)> on_batch;
  /// Continue from the state after checkpoint.epoch.
  const Checkpoint* resume = nullptr;
};

struct TrainResult {
  Checkpoint last;
  std::optional<Checkpoint> best;  // set when some epoch of this call improved
  TrainLog log;
};

/// One pass over the batches: loss, backprop, clipping and an Adam step per
/// batch. Returns the token-weighted mean training loss.
double run_epoch(DecoderParams& params, AdamState& optimizer, const TrainConfig& config,
                 const FeatureStore& store, std::span<const Batch> batches,
                 const std::function<void(const LossTape&)>& on_batch = {});

/// Token-weighted mean loss without updating anything.
double evaluate_loss(const DecoderParams& params, const FeatureStore& store, std::span<const Batch> batches);

TrainResult train(const TrainConfig& config, const FeatureStore& store, const CaptionCorpus& corpus,
                  const Vocabulary& vocab, const Splits& splits, const TrainOptions& options = {});

}  // namespace capgen
