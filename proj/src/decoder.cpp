#include "capgen/decoder.hpp"

#include <cmath>

#include "capgen/error.hpp"
#include "capgen/util.hpp"

namespace capgen {

namespace {

constexpr const char* kGateNames[kGateCount] = {"i", "f", "o", "c"};

void require_shape(const Matrix& m, std::size_t rows, std::size_t cols, const std::string& name) {
  if (m.rows() != rows || m.cols() != cols) {
    throw Error(Errc::shape, name + " is " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                                 ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
  }
}

void require_size(std::span<const double> v, std::size_t n, const char* what) {
  if (v.size() != n) {
    throw Error(Errc::shape, std::string(what) + " has length " + std::to_string(v.size()) + ", expected " +
                                 std::to_string(n));
  }
}

void fill_uniform(Matrix& m, Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(m.rows()));
  for (auto& v : m.values()) v = rng.uniform(-s, s);
}

}  // namespace

std::string to_string(Variant v) { return v == Variant::baseline ? "baseline" : "attention"; }

Variant parse_variant(std::string_view name) {
  if (name == "baseline") return Variant::baseline;
  if (name == "attention") return Variant::attention;
  throw Error(Errc::usage, "unknown decoder variant '" + std::string(name) + "' (baseline|attention)");
}

DecoderDims DecoderParams::dims() const {
  DecoderDims d;
  d.vocab = embedding.rows();
  d.embed = embedding.cols();
  d.hidden = out_w.rows();
  d.feature_dim = init.w_h.rows();
  d.attention = attention ? attention->u_a.cols() : 0;
  return d;
}

std::vector<NamedTensor> DecoderParams::tensors() {
  std::vector<NamedTensor> out;
  out.push_back({"embedding", &embedding});
  out.push_back({"init.w_h", &init.w_h});
  out.push_back({"init.b_h", &init.b_h});
  out.push_back({"init.w_c", &init.w_c});
  out.push_back({"init.b_c", &init.b_c});
  for (std::size_t g = 0; g < kGateCount; ++g) {
    const std::string gate = kGateNames[g];
    out.push_back({"lstm.w_" + gate, &lstm.w[g]});
    out.push_back({"lstm.r_" + gate, &lstm.r[g]});
    out.push_back({"lstm.b_" + gate, &lstm.b[g]});
  }
  if (attention) {
    out.push_back({"attention.u_a", &attention->u_a});
    out.push_back({"attention.u_h", &attention->u_h});
    out.push_back({"attention.b_a", &attention->b_a});
    out.push_back({"attention.v", &attention->v});
    for (std::size_t g = 0; g < kGateCount; ++g) {
      out.push_back({std::string("attention.z_") + kGateNames[g], &attention->z[g]});
    }
  }
  out.push_back({"output.w", &out_w});
  out.push_back({"output.b", &out_b});
  return out;
}

std::vector<ConstNamedTensor> DecoderParams::tensors() const {
  std::vector<ConstNamedTensor> out;
  for (auto& t : const_cast<DecoderParams*>(this)->tensors()) out.push_back({std::move(t.name), t.tensor});
  return out;
}

std::size_t DecoderParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors()) n += t.tensor->size();
  return n;
}

void DecoderParams::validate() const {
  const auto d = dims();
  if (d.vocab == 0 || d.embed == 0 || d.hidden == 0 || d.feature_dim == 0) {
    throw Error(Errc::shape, "decoder dimensions must be positive");
  }
  if ((variant == Variant::attention) != attention.has_value()) {
    throw Error(Errc::shape, "attention parameters present iff variant is attention");
  }
  require_shape(init.w_h, d.feature_dim, d.hidden, "init.w_h");
  require_shape(init.b_h, 1, d.hidden, "init.b_h");
  require_shape(init.w_c, d.feature_dim, d.hidden, "init.w_c");
  require_shape(init.b_c, 1, d.hidden, "init.b_c");
  for (std::size_t g = 0; g < kGateCount; ++g) {
    require_shape(lstm.w[g], d.embed, d.hidden, "lstm.w");
    require_shape(lstm.r[g], d.hidden, d.hidden, "lstm.r");
    require_shape(lstm.b[g], 1, d.hidden, "lstm.b");
  }
  if (attention) {
    if (d.attention == 0) throw Error(Errc::shape, "attention width must be positive");
    require_shape(attention->u_a, d.feature_dim, d.attention, "attention.u_a");
    require_shape(attention->u_h, d.hidden, d.attention, "attention.u_h");
    require_shape(attention->b_a, 1, d.attention, "attention.b_a");
    require_shape(attention->v, d.attention, 1, "attention.v");
    for (std::size_t g = 0; g < kGateCount; ++g) {
      require_shape(attention->z[g], d.feature_dim, d.hidden, "attention.z");
    }
  }
  require_shape(out_w, d.hidden, d.vocab, "output.w");
  require_shape(out_b, 1, d.vocab, "output.b");
}

DecoderParams zero_params(Variant variant, const DecoderDims& d) {
  if (d.vocab == 0 || d.embed == 0 || d.hidden == 0 || d.feature_dim == 0 ||
      (variant == Variant::attention && d.attention == 0)) {
    throw Error(Errc::usage, "decoder dimensions must be positive");
  }
  DecoderParams p;
  p.variant = variant;
  p.embedding = Matrix(d.vocab, d.embed);
  p.init = {Matrix(d.feature_dim, d.hidden), Matrix(1, d.hidden), Matrix(d.feature_dim, d.hidden),
            Matrix(1, d.hidden)};
  for (std::size_t g = 0; g < kGateCount; ++g) {
    p.lstm.w[g] = Matrix(d.embed, d.hidden);
    p.lstm.r[g] = Matrix(d.hidden, d.hidden);
    p.lstm.b[g] = Matrix(1, d.hidden);
  }
  if (variant == Variant::attention) {
    AttentionParams a;
    a.u_a = Matrix(d.feature_dim, d.attention);
    a.u_h = Matrix(d.hidden, d.attention);
    a.b_a = Matrix(1, d.attention);
    a.v = Matrix(d.attention, 1);
    for (auto& z : a.z) z = Matrix(d.feature_dim, d.hidden);
    p.attention = std::move(a);
  }
  p.out_w = Matrix(d.hidden, d.vocab);
  p.out_b = Matrix(1, d.vocab);
  return p;
}

DecoderParams init_decoder_params(Variant variant, const DecoderDims& dims, std::uint64_t seed) {
  auto p = zero_params(variant, dims);
  Rng rng(seed);
  for (auto& t : p.tensors()) {
    const auto leaf = t.name.substr(t.name.rfind('.') + 1);
    if (leaf[0] == 'b') continue;  // biases
    fill_uniform(*t.tensor, rng);
  }
  p.lstm.b[kForgetGate].fill(1.0);
  return p;
}

Vector flatten(const DecoderParams& params) {
  Vector out;
  out.reserve(params.parameter_count());
  for (const auto& t : params.tensors()) {
    auto v = t.tensor->values();
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

void unflatten(std::span<const double> values, DecoderParams& params) {
  if (values.size() != params.parameter_count()) throw Error(Errc::shape, "unflatten: size mismatch");
  std::size_t pos = 0;
  for (auto& t : params.tensors()) {
    auto dst = t.tensor->values();
    std::copy(values.begin() + static_cast<std::ptrdiff_t>(pos),
              values.begin() + static_cast<std::ptrdiff_t>(pos + dst.size()), dst.begin());
    pos += dst.size();
  }
  ++params.version;
}

Matrix region_matrix(const FeatureSet& features) {
  features.validate();
  Matrix m(features.regions, features.dim);
  std::copy(features.values.begin(), features.values.end(), m.values().begin());
  return m;
}

LstmState init_states(std::span<const double> pooled, const InitParams& init) {
  require_size(pooled, init.w_h.rows(), "pooled features");
  return {activation(affine(pooled, init.w_h, init.b_h.values()), Activation::tanh),
          activation(affine(pooled, init.w_c, init.b_c.values()), Activation::tanh)};
}

LstmState init_states(const FeatureSet& features, const InitParams& init) {
  return init_states(mean_pool(features), init);
}

LstmStepCache lstm_step_forward(std::span<const double> x, std::span<const double> z,
                                const LstmState& state, const LstmParams& p, const AttentionParams* ap) {
  const std::size_t hidden = p.r[0].rows();
  require_size(x, p.w[0].rows(), "lstm input");
  require_size(state.h, hidden, "lstm hidden state");
  require_size(state.c, hidden, "lstm cell state");
  if (ap != nullptr) require_size(z, ap->z[0].rows(), "context vector");

  LstmStepCache cache;
  cache.x.assign(x.begin(), x.end());
  if (ap != nullptr) cache.z.assign(z.begin(), z.end());
  cache.h_prev = state.h;
  cache.c_prev = state.c;
  for (std::size_t g = 0; g < kGateCount; ++g) {
    Vector pre(p.b[g].values().begin(), p.b[g].values().end());
    accumulate_xw(x, p.w[g], pre);
    accumulate_xw(state.h, p.r[g], pre);
    if (ap != nullptr) accumulate_xw(z, ap->z[g], pre);
    cache.gates[g] = activation(pre, g == kCellGate ? Activation::tanh : Activation::sigmoid);
  }
  const auto& i = cache.gates[kInputGate];
  const auto& f = cache.gates[kForgetGate];
  const auto& o = cache.gates[kOutputGate];
  const auto& g = cache.gates[kCellGate];
  cache.c.resize(hidden);
  cache.tanh_c.resize(hidden);
  cache.h.resize(hidden);
  for (std::size_t k = 0; k < hidden; ++k) {
    cache.c[k] = f[k] * state.c[k] + i[k] * g[k];
    cache.tanh_c[k] = std::tanh(cache.c[k]);
    cache.h[k] = o[k] * cache.tanh_c[k];
  }
  return cache;
}

LstmStepGrads lstm_step_backward(const LstmStepCache& cache, std::span<const double> dh,
                                 std::span<const double> dc, const LstmParams& p,
                                 const AttentionParams* ap, LstmParams& dp, AttentionParams* dap) {
  const std::size_t hidden = cache.h.size();
  require_size(dh, hidden, "dh");
  require_size(dc, hidden, "dc");
  const auto& i = cache.gates[kInputGate];
  const auto& f = cache.gates[kForgetGate];
  const auto& o = cache.gates[kOutputGate];
  const auto& g = cache.gates[kCellGate];

  std::array<Vector, kGateCount> dpre;
  for (auto& v : dpre) v.resize(hidden);
  LstmStepGrads out;
  out.dc_prev.resize(hidden);
  for (std::size_t k = 0; k < hidden; ++k) {
    const double dct = dc[k] + dh[k] * o[k] * (1.0 - cache.tanh_c[k] * cache.tanh_c[k]);
    dpre[kOutputGate][k] = dh[k] * cache.tanh_c[k] * o[k] * (1.0 - o[k]);
    dpre[kInputGate][k] = dct * g[k] * i[k] * (1.0 - i[k]);
    dpre[kForgetGate][k] = dct * cache.c_prev[k] * f[k] * (1.0 - f[k]);
    dpre[kCellGate][k] = dct * i[k] * (1.0 - g[k] * g[k]);
    out.dc_prev[k] = dct * f[k];
  }

  out.dx.assign(cache.x.size(), 0.0);
  out.dh_prev.assign(hidden, 0.0);
  if (ap != nullptr) out.dz.assign(cache.z.size(), 0.0);
  for (std::size_t gate = 0; gate < kGateCount; ++gate) {
    affine_backward(cache.x, p.w[gate], dpre[gate], out.dx, dp.w[gate], dp.b[gate].values());
    affine_backward(cache.h_prev, p.r[gate], dpre[gate], out.dh_prev, dp.r[gate], {});
    if (ap != nullptr) {
      if (dap == nullptr) throw Error(Errc::usage, "attention step backward needs attention gradients");
      affine_backward(cache.z, ap->z[gate], dpre[gate], out.dz, dap->z[gate], {});
    }
  }
  return out;
}

LstmState lstm_step(std::span<const double> x, const LstmState& state, const LstmParams& p) {
  auto cache = lstm_step_forward(x, {}, state, p, nullptr);
  return {std::move(cache.h), std::move(cache.c)};
}

LstmState attention_lstm_step(std::span<const double> x, std::span<const double> z, const LstmState& state,
                              const LstmParams& p, const AttentionParams& ap) {
  auto cache = lstm_step_forward(x, z, state, p, &ap);
  return {std::move(cache.h), std::move(cache.c)};
}

namespace {

Matrix project_regions(const Matrix& regions, const AttentionParams& ap) {
  if (regions.cols() != ap.u_a.rows()) throw Error(Errc::shape, "feature dim does not match attention.u_a");
  Matrix projected(regions.rows(), ap.u_a.cols());
  for (std::size_t i = 0; i < regions.rows(); ++i) accumulate_xw(regions.row(i), ap.u_a, projected.row(i));
  return projected;
}

}  // namespace

AttentionCache attention_forward(const Matrix& regions, const Matrix& projected, std::span<const double> h_prev,
                                 const AttentionParams& ap) {
  const std::size_t width = ap.u_a.cols();
  require_size(h_prev, ap.u_h.rows(), "attention hidden state");
  if (!projected.same_shape(Matrix(regions.rows(), width))) {
    throw Error(Errc::shape, "projected regions have the wrong shape");
  }
  Vector shared(ap.b_a.values().begin(), ap.b_a.values().end());
  accumulate_xw(h_prev, ap.u_h, shared);

  AttentionCache cache;
  cache.hidden = Matrix(regions.rows(), width);
  Vector scores(regions.rows());
  for (std::size_t i = 0; i < regions.rows(); ++i) {
    auto hid = cache.hidden.row(i);
    const auto proj = projected.row(i);
    double s = 0.0;
    for (std::size_t k = 0; k < width; ++k) {
      hid[k] = std::tanh(proj[k] + shared[k]);
      s += hid[k] * ap.v(k, 0);
    }
    scores[i] = s;
  }
  cache.alpha = softmax(scores);
  cache.context.assign(regions.cols(), 0.0);
  accumulate_xw(cache.alpha, regions, cache.context);
  return cache;
}

void attention_backward(const AttentionCache& cache, const Matrix& regions, std::span<const double> h_prev,
                        std::span<const double> dz, const AttentionParams& ap, AttentionParams& dap,
                        Matrix& dprojected, std::span<double> dh_prev) {
  const std::size_t width = ap.u_a.cols();
  require_size(dz, regions.cols(), "dz");
  // z = alpha^T regions  =>  dalpha_i = <dz, a_i>
  Vector dalpha(regions.rows(), 0.0);
  accumulate_dy_wt(dz, regions, dalpha);
  const auto dscores = softmax_backward(cache.alpha, dalpha);

  Vector dshared(width, 0.0);
  for (std::size_t i = 0; i < regions.rows(); ++i) {
    const auto hid = cache.hidden.row(i);
    auto dproj = dprojected.row(i);
    for (std::size_t k = 0; k < width; ++k) {
      dap.v(k, 0) += dscores[i] * hid[k];
      const double ds = dscores[i] * ap.v(k, 0) * (1.0 - hid[k] * hid[k]);
      dproj[k] += ds;
      dshared[k] += ds;
    }
  }
  affine_backward(h_prev, ap.u_h, dshared, dh_prev, dap.u_h, dap.b_a.values());
}

Vector attention_scores(const FeatureSet& features, std::span<const double> h_prev, const AttentionParams& ap) {
  const auto regions = region_matrix(features);
  return attention_forward(regions, project_regions(regions, ap), h_prev, ap).alpha;
}

Vector context_vector(const FeatureSet& features, std::span<const double> alpha) {
  if (alpha.size() != features.regions) {
    throw Error(Errc::shape, "attention weights have length " + std::to_string(alpha.size()) + ", expected " +
                                 std::to_string(features.regions));
  }
  Vector z(features.dim, 0.0);
  for (std::size_t i = 0; i < features.regions; ++i) {
    const auto row = features.region(i);
    for (std::size_t d = 0; d < features.dim; ++d) z[d] += alpha[i] * row[d];
  }
  return z;
}

// --- sequences ---------------------------------------------------------------

ForwardResult forward_sequence(const DecoderParams& params, const FeatureSet& features,
                               std::span<const TokenId> input_ids, bool record_tape) {
  if (input_ids.empty()) throw Error(Errc::usage, "forward_sequence needs at least one input token");
  if (input_ids[0] != Vocabulary::kStart) throw Error(Errc::usage, "input sequence must begin with the start token");
  if (features.dim != params.init.w_h.rows()) {
    throw Error(Errc::shape, "feature dim " + std::to_string(features.dim) + " does not match decoder (" +
                                 std::to_string(params.init.w_h.rows()) + ")");
  }
  const bool attend = params.variant == Variant::attention;
  const auto* ap = attend ? &*params.attention : nullptr;
  const std::size_t steps = input_ids.size();
  const std::size_t vocab = params.out_w.cols();

  SequenceTape tape;
  tape.regions = region_matrix(features);
  tape.pooled = mean_pool(features);
  if (attend) tape.projected = project_regions(tape.regions, *ap);
  tape.initial = init_states(tape.pooled, params.init);

  ForwardResult result;
  result.logits = Matrix(steps, vocab);
  if (attend) result.trace.emplace();

  LstmState state = tape.initial;
  if (record_tape) tape.steps.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    const auto x = embed(params.embedding, input_ids[t]);
    std::optional<AttentionCache> att;
    if (attend) {
      att = attention_forward(tape.regions, tape.projected, state.h, *ap);
      result.trace->alphas.push_back(att->alpha);
      result.trace->contexts.push_back(att->context);
    }
    auto cache = lstm_step_forward(x, att ? std::span<const double>(att->context) : std::span<const double>{},
                                   state, params.lstm, ap);
    auto row = result.logits.row(t);
    std::copy(params.out_b.values().begin(), params.out_b.values().end(), row.begin());
    accumulate_xw(cache.h, params.out_w, row);
    state = {cache.h, cache.c};
    if (record_tape) tape.steps.push_back({input_ids[t], std::move(cache), std::move(att)});
  }
  if (record_tape) {
    tape.params = &params;
    tape.params_version = params.version;
    result.tape = std::move(tape);
  }
  return result;
}

void backward_sequence(const DecoderParams& params, SequenceTape& tape, const Matrix& dlogits,
                       DecoderParams& grads) {
  if (tape.consumed) throw Error(Errc::usage, "sequence tape was already consumed by a backward pass");
  if (tape.params != &params || tape.params_version != params.version) {
    throw Error(Errc::usage, "sequence tape is stale: parameters changed since the forward pass");
  }
  if (dlogits.rows() != tape.steps.size() || dlogits.cols() != params.out_w.cols()) {
    throw Error(Errc::shape, "dlogits does not match the recorded sequence");
  }
  tape.consumed = true;
  const bool attend = params.variant == Variant::attention;
  const auto* ap = attend ? &*params.attention : nullptr;
  auto* dap = attend ? &*grads.attention : nullptr;
  const std::size_t hidden = params.out_w.rows();

  Matrix dprojected;
  if (attend) dprojected = Matrix(tape.projected.rows(), tape.projected.cols());

  Vector dh(hidden, 0.0);
  Vector dc(hidden, 0.0);
  for (std::size_t t = tape.steps.size(); t-- > 0;) {
    const auto& step = tape.steps[t];
    const auto dlog = dlogits.row(t);
    affine_backward(step.lstm.h, params.out_w, dlog, dh, grads.out_w, grads.out_b.values());

    auto sg = lstm_step_backward(step.lstm, dh, dc, params.lstm, ap, grads.lstm, dap);
    embed_backward(grads.embedding, step.input, sg.dx);
    if (attend) {
      attention_backward(*step.attention, tape.regions, step.lstm.h_prev, sg.dz, *ap, *dap, dprojected,
                         sg.dh_prev);
    }
    dh = std::move(sg.dh_prev);
    dc = std::move(sg.dc_prev);
  }

  if (attend) {
    for (std::size_t i = 0; i < tape.regions.rows(); ++i) {
      accumulate_outer(tape.regions.row(i), dprojected.row(i), dap->u_a);
    }
  }
  const auto dpre_h = activation_backward(tape.initial.h, dh, Activation::tanh);
  const auto dpre_c = activation_backward(tape.initial.c, dc, Activation::tanh);
  affine_backward(tape.pooled, params.init.w_h, dpre_h, {}, grads.init.w_h, grads.init.b_h.values());
  affine_backward(tape.pooled, params.init.w_c, dpre_c, {}, grads.init.w_c, grads.init.b_c.values());
}

DecoderStepper::DecoderStepper(const DecoderParams& params, const FeatureSet& features)
    : params_(params), regions_(region_matrix(features)) {
  if (features.dim != params.init.w_h.rows()) {
    throw Error(Errc::shape, "feature dim " + std::to_string(features.dim) + " does not match decoder (" +
                                 std::to_string(params.init.w_h.rows()) + ")");
  }
  if (params.variant == Variant::attention) projected_ = project_regions(regions_, *params.attention);
  initial_ = init_states(mean_pool(features), params.init);
}

DecoderStepper::Output DecoderStepper::step(const LstmState& state, TokenId input) const {
  const auto x = embed(params_.embedding, input);
  Output out;
  LstmStepCache cache;
  if (params_.variant == Variant::attention) {
    auto att = attention_forward(regions_, projected_, state.h, *params_.attention);
    cache = lstm_step_forward(x, att.context, state, params_.lstm, &*params_.attention);
    out.alpha = std::move(att.alpha);
    out.context = std::move(att.context);
  } else {
    cache = lstm_step_forward(x, {}, state, params_.lstm, nullptr);
  }
  out.logits = affine(cache.h, params_.out_w, params_.out_b.values());
  out.state = {std::move(cache.h), std::move(cache.c)};
  return out;
}

}  // namespace capgen
