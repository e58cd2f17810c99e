#pragma once

#include <optional>
#include <string>
#include <vector>

#include "capgen/corpus.hpp"
#include "capgen/decoder.hpp"
#include "capgen/features.hpp"

namespace capgen {

struct DecodedCaption {
  TokenSequence ids;
  std::vector<std::string> words;
  double log_prob = 0.0;
  /// False when max_len cut the caption off before the model emitted the
  /// end token. The closing end id is then structural and not scored.
  bool finished = false;
  std::optional<AttentionTrace> attention;  // one alpha per scored step
};

/// Greedy argmax decoding from the start token. Pad and start are never
/// emitted; ties go to the smaller id. At most max_len - 2 words.
DecodedCaption greedy_decode(const DecoderParams& params, const FeatureSet& features, const Vocabulary& vocab,
                             std::size_t max_len);

struct BeamResult {
  DecodedCaption best;
  std::vector<DecodedCaption> nbest;  // every retired hypothesis, best first
};

/// Length-unnormalised beam search over summed log-probabilities. Each step
/// keeps the top `beam_width` expansions; those ending in the end token
/// retire. Hypotheses that reach max_len are closed unscored. Ordering is by
/// log-probability, then lexicographic id sequence.
BeamResult beam_decode(const DecoderParams& params, const FeatureSet& features, const Vocabulary& vocab,
                       std::size_t beam_width, std::size_t max_len);

}  // namespace capgen
