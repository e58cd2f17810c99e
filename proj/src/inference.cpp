#include "capgen/inference.hpp"

#include <algorithm>

#include "capgen/error.hpp"

namespace capgen {

namespace {

bool emittable(TokenId id) { return id != Vocabulary::kPad && id != Vocabulary::kStart; }

void check_compatible(const DecoderParams& params, const FeatureSet& features, const Vocabulary& vocab,
                      std::size_t max_len) {
  if (params.out_w.cols() != vocab.size()) {
    throw Error(Errc::shape, "decoder vocabulary size " + std::to_string(params.out_w.cols()) +
                                 " does not match vocabulary of " + std::to_string(vocab.size()));
  }
  if (features.dim != params.init.w_h.rows()) {
    throw Error(Errc::shape, "feature dim " + std::to_string(features.dim) + " does not match decoder (" +
                                 std::to_string(params.init.w_h.rows()) + ")");
  }
  if (max_len < 3) throw Error(Errc::usage, "max_len must be >= 3");
}

DecodedCaption make_caption(const Vocabulary& vocab, const std::vector<TokenId>& emitted, double log_prob,
                            bool finished, std::optional<AttentionTrace> trace, std::size_t max_len) {
  DecodedCaption out;
  out.ids.ids.push_back(Vocabulary::kStart);
  out.ids.ids.insert(out.ids.ids.end(), emitted.begin(), emitted.end());
  if (!finished) out.ids.ids.push_back(Vocabulary::kEnd);
  out.ids.length = out.ids.ids.size();
  out.ids.ids.resize(std::max(max_len, out.ids.length), Vocabulary::kPad);
  out.words = decode_tokens(vocab, out.ids.ids);
  out.log_prob = log_prob;
  out.finished = finished;
  out.attention = std::move(trace);
  return out;
}

}  // namespace

DecodedCaption greedy_decode(const DecoderParams& params, const FeatureSet& features, const Vocabulary& vocab,
                             std::size_t max_len) {
  check_compatible(params, features, vocab, max_len);
  const DecoderStepper stepper(params, features);
  const std::size_t max_words = max_len - 2;
  const bool attend = params.variant == Variant::attention;

  std::optional<AttentionTrace> trace;
  if (attend) trace.emplace();
  LstmState state = stepper.initial_state();
  TokenId input = Vocabulary::kStart;
  std::vector<TokenId> emitted;
  double log_prob = 0.0;
  bool finished = false;
  while (emitted.size() < max_words) {
    auto out = stepper.step(state, input);
    const auto logp = log_softmax(out.logits);
    TokenId best = -1;
    for (std::size_t v = 0; v < logp.size(); ++v) {
      const auto id = static_cast<TokenId>(v);
      if (!emittable(id)) continue;
      if (best < 0 || logp[v] > logp[static_cast<std::size_t>(best)]) best = id;
    }
    log_prob += logp[static_cast<std::size_t>(best)];
    if (attend) {
      trace->alphas.push_back(std::move(out.alpha));
      trace->contexts.push_back(std::move(out.context));
    }
    if (best == Vocabulary::kEnd) {
      emitted.push_back(best);
      finished = true;
      break;
    }
    emitted.push_back(best);
    state = std::move(out.state);
    input = best;
  }
  return make_caption(vocab, emitted, log_prob, finished, std::move(trace), max_len);
}

namespace {

struct Hypothesis {
  std::vector<TokenId> emitted;
  double log_prob = 0.0;
  LstmState state;
  AttentionTrace trace;
  bool finished = false;
};

bool ranks_before(const Hypothesis& a, const Hypothesis& b) {
  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  return std::lexicographical_compare(a.emitted.begin(), a.emitted.end(), b.emitted.begin(), b.emitted.end());
}

}  // namespace

BeamResult beam_decode(const DecoderParams& params, const FeatureSet& features, const Vocabulary& vocab,
                       std::size_t beam_width, std::size_t max_len) {
  if (beam_width < 1) throw Error(Errc::usage, "beam width must be >= 1");
  check_compatible(params, features, vocab, max_len);
  const DecoderStepper stepper(params, features);
  const std::size_t max_words = max_len - 2;
  const bool attend = params.variant == Variant::attention;

  std::vector<Hypothesis> live(1);
  live[0].state = stepper.initial_state();
  std::vector<Hypothesis> done;

  struct Candidate {
    std::size_t parent;
    TokenId token;
    double log_prob;
  };

  while (!live.empty()) {
    if (live.front().emitted.size() >= max_words) {
      for (auto& h : live) done.push_back(std::move(h));  // truncated, unscored end
      break;
    }
    std::vector<DecoderStepper::Output> outputs;
    std::vector<Candidate> candidates;
    outputs.reserve(live.size());
    for (std::size_t p = 0; p < live.size(); ++p) {
      const TokenId input = live[p].emitted.empty() ? Vocabulary::kStart : live[p].emitted.back();
      outputs.push_back(stepper.step(live[p].state, input));
      const auto logp = log_softmax(outputs.back().logits);
      for (std::size_t v = 0; v < logp.size(); ++v) {
        const auto id = static_cast<TokenId>(v);
        if (emittable(id)) candidates.push_back({p, id, live[p].log_prob + logp[v]});
      }
    }
    // Live hypotheses share a length, so comparing parent prefixes then the
    // new token is the lexicographic order of the extended sequences.
    auto before = [&](const Candidate& a, const Candidate& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      const auto& pa = live[a.parent].emitted;
      const auto& pb = live[b.parent].emitted;
      if (pa != pb) return std::lexicographical_compare(pa.begin(), pa.end(), pb.begin(), pb.end());
      return a.token < b.token;
    };
    const std::size_t keep = std::min(beam_width, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      before);

    std::vector<Hypothesis> next;
    for (std::size_t k = 0; k < keep; ++k) {
      const auto& c = candidates[k];
      const auto& parent = live[c.parent];
      Hypothesis h;
      h.emitted = parent.emitted;
      h.emitted.push_back(c.token);
      h.log_prob = c.log_prob;
      if (attend) {
        h.trace = parent.trace;
        h.trace.alphas.push_back(outputs[c.parent].alpha);
        h.trace.contexts.push_back(outputs[c.parent].context);
      }
      if (c.token == Vocabulary::kEnd) {
        h.finished = true;
        done.push_back(std::move(h));
      } else {
        h.state = outputs[c.parent].state;
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
  }

  std::sort(done.begin(), done.end(), ranks_before);
  BeamResult result;
  for (auto& h : done) {
    std::optional<AttentionTrace> trace;
    if (attend) trace = std::move(h.trace);
    result.nbest.push_back(make_caption(vocab, h.emitted, h.log_prob, h.finished, std::move(trace), max_len));
  }
  result.best = result.nbest.front();
  return result;
}

}  // namespace capgen
