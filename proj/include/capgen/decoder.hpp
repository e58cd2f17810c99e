#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "capgen/corpus.hpp"
#include "capgen/features.hpp"
#include "capgen/nnmath.hpp"

namespace capgen {

enum class Variant { baseline, attention };

std::string to_string(Variant v);
/// Accepts "baseline" or "attention"; throws Errc::usage otherwise.
Variant parse_variant(std::string_view name);

struct DecoderDims {
  std::size_t vocab = 0;
  std::size_t embed = 0;
  std::size_t hidden = 0;
  std::size_t attention = 0;  // ignored by the baseline variant
  std::size_t feature_dim = 0;
};

enum Gate : std::size_t { kInputGate = 0, kForgetGate = 1, kOutputGate = 2, kCellGate = 3 };
inline constexpr std::size_t kGateCount = 4;

/// h0 = tanh(pool(a) W_h + b_h), c0 = tanh(pool(a) W_c + b_c).
struct InitParams {
  Matrix w_h, b_h;  // D x H, 1 x H
  Matrix w_c, b_c;
};

/// Per-gate input (X x H), recurrent (H x H) and bias (1 x H) weights,
/// indexed by Gate.
struct LstmParams {
  std::array<Matrix, kGateCount> w, r, b;
};

/// Additive attention scorer v . tanh(a_i U_a + h U_h + b_a) plus the
/// context-to-gate matrices Z_g (D x H).
struct AttentionParams {
  Matrix u_a;  // D x A
  Matrix u_h;  // H x A
  Matrix b_a;  // 1 x A
  Matrix v;    // A x 1
  std::array<Matrix, kGateCount> z;
};

struct NamedTensor {
  std::string name;
  Matrix* tensor;
};

struct ConstNamedTensor {
  std::string name;
  const Matrix* tensor;
};

/// Every learned tensor of a decoder. The same layout doubles as the
/// gradient and optimizer-moment container.
struct DecoderParams {
  Variant variant = Variant::baseline;
  Matrix embedding;  // |V| x E
  InitParams init;
  LstmParams lstm;
  std::optional<AttentionParams> attention;
  Matrix out_w;  // H x |V|
  Matrix out_b;  // 1 x |V|

  /// Bumped whenever the values change in place (optimizer steps), so a
  /// tape recorded against older values can be rejected.
  std::uint64_t version = 0;

  DecoderDims dims() const;
  /// Declared order; stable across releases (checkpoints rely on it).
  std::vector<NamedTensor> tensors();
  std::vector<ConstNamedTensor> tensors() const;
  std::size_t parameter_count() const;
  /// Shape consistency and attention presence vs. variant.
  void validate() const;
};

DecoderParams zero_params(Variant variant, const DecoderDims& dims);

/// Uniform in [-s, s] with s = 1/sqrt(fan-in) for every weight matrix; biases
/// zero except the forget gate (+1).
DecoderParams init_decoder_params(Variant variant, const DecoderDims& dims, std::uint64_t seed);

Vector flatten(const DecoderParams& params);
void unflatten(std::span<const double> values, DecoderParams& params);

struct LstmState {
  Vector h;
  Vector c;
};

/// |a| x D copy of the region vectors in double precision.
Matrix region_matrix(const FeatureSet& features);

LstmState init_states(std::span<const double> pooled, const InitParams& init);
LstmState init_states(const FeatureSet& features, const InitParams& init);

LstmState lstm_step(std::span<const double> x, const LstmState& state, const LstmParams& p);

/// Attention weights over the regions given the previous hidden state.
Vector attention_scores(const FeatureSet& features, std::span<const double> h_prev,
                        const AttentionParams& ap);
/// z = sum_i alpha_i a_i.
Vector context_vector(const FeatureSet& features, std::span<const double> alpha);

LstmState attention_lstm_step(std::span<const double> x, std::span<const double> z,
                              const LstmState& state, const LstmParams& p, const AttentionParams& ap);

// --- building blocks for backpropagation through time ----------------------

struct LstmStepCache {
  Vector x, z;  // z empty for the baseline step
  Vector h_prev, c_prev;
  std::array<Vector, kGateCount> gates;  // post-activation
  Vector c, tanh_c, h;
};

/// One LSTM step; when `ap` is given each pre-activation also gets z Z_g.
LstmStepCache lstm_step_forward(std::span<const double> x, std::span<const double> z,
                                const LstmState& state, const LstmParams& p, const AttentionParams* ap);

struct LstmStepGrads {
  Vector dx, dz, dh_prev, dc_prev;
};

/// Accumulates weight gradients into dp (and dap->z); returns input grads.
LstmStepGrads lstm_step_backward(const LstmStepCache& cache, std::span<const double> dh,
                                 std::span<const double> dc, const LstmParams& p,
                                 const AttentionParams* ap, LstmParams& dp, AttentionParams* dap);

struct AttentionCache {
  Matrix hidden;  // |a| x A, tanh outputs
  Vector alpha;
  Vector context;
};

/// `projected` is regions * U_a, computed once per sequence.
AttentionCache attention_forward(const Matrix& regions, const Matrix& projected,
                                 std::span<const double> h_prev, const AttentionParams& ap);

/// Accumulates into dap (u_h, b_a, v), dprojected and dh_prev.
void attention_backward(const AttentionCache& cache, const Matrix& regions,
                        std::span<const double> h_prev, std::span<const double> dz,
                        const AttentionParams& ap, AttentionParams& dap, Matrix& dprojected,
                        std::span<double> dh_prev);

// --- sequences ---------------------------------------------------------------

struct AttentionTrace {
  std::vector<Vector> alphas;    // one per step, length |a|
  std::vector<Vector> contexts;  // one per step, length D
};

struct StepRecord {
  TokenId input = 0;
  LstmStepCache lstm;
  std::optional<AttentionCache> attention;
};

/// Everything needed for exact BPTT of one teacher-forced sequence. A tape
/// is single-use and tied to the parameter values it was recorded with.
struct SequenceTape {
  const DecoderParams* params = nullptr;
  std::uint64_t params_version = 0;
  bool consumed = false;

  Matrix regions;
  Matrix projected;  // attention only
  Vector pooled;
  LstmState initial;
  std::vector<StepRecord> steps;
};

struct ForwardResult {
  Matrix logits;  // T x |V|
  std::optional<AttentionTrace> trace;
  std::optional<SequenceTape> tape;
};

/// Teacher-forced forward pass. input_ids[0] must be the start token.
ForwardResult forward_sequence(const DecoderParams& params, const FeatureSet& features,
                               std::span<const TokenId> input_ids, bool record_tape);

/// Accumulates d(loss)/d(params) into grads given d(loss)/d(logits).
/// Throws Errc::usage for a consumed tape or one recorded against other
/// parameter values.
void backward_sequence(const DecoderParams& params, SequenceTape& tape, const Matrix& dlogits,
                       DecoderParams& grads);

/// Incremental decoding over one image, used by inference.
class DecoderStepper {
 public:
  DecoderStepper(const DecoderParams& params, const FeatureSet& features);

  struct Output {
    LstmState state;
    Vector logits;
    Vector alpha;    // empty for the baseline variant
    Vector context;  // empty for the baseline variant
  };

  const LstmState& initial_state() const { return initial_; }
  Output step(const LstmState& state, TokenId input) const;

 private:
  const DecoderParams& params_;
  Matrix regions_;
  Matrix projected_;
  LstmState initial_;
};

}  // namespace capgen
