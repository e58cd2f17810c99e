#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "capgen/error.hpp"
#include "capgen/training.hpp"
#include "capgen/util.hpp"
#include "test_util.hpp"

using namespace capgen;
using testutil::error_of;

namespace {

struct Toy {
  FeatureStore store;
  CaptionCorpus corpus;
  Vocabulary vocab;
  std::vector<std::string> ids;
};

Toy toy(std::size_t images, std::uint64_t seed = 1) {
  static const std::vector<std::vector<std::string>> captions = {
      {"a", "dog", "runs"}, {"a", "cat", "sits"}, {"two", "dogs", "play"}, {"a", "man", "rides", "a", "bike"}};
  auto store = synthetic_features(seed, images, 3, 6);
  CaptionCorpus corpus;
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < images; ++i) {
    const auto& id = store.sets()[i].image_id;
    ids.push_back(id);
    corpus.add({id, 0, captions[i % captions.size()]});
    corpus.add({id, 1, captions[(i + 1) % captions.size()]});
  }
  auto vocab = build_vocabulary(corpus, 1);
  return {std::move(store), std::move(corpus), std::move(vocab), std::move(ids)};
}

TrainConfig small_config(Variant variant) {
  TrainConfig c;
  c.variant = variant;
  c.embed = 6;
  c.hidden = 8;
  c.attention = 5;
  c.batch_size = 3;
  c.max_epochs = 3;
  c.max_len = 8;
  c.learning_rate = 1e-2;
  c.seed = 9;
  return c;
}

DecoderParams params_for(const Toy& t, Variant variant, std::uint64_t seed = 2) {
  return init_decoder_params(variant, {t.vocab.size(), 6, 8, 5, t.store.dim()}, seed);
}

}  // namespace

TEST_CASE("config defaults, JSON and validation") {
  TrainConfig c;
  CHECK(c.learning_rate == 4e-4);
  CHECK(c.batch_size == 32);
  CHECK(c.max_epochs == 30);
  CHECK(c.clip_norm == 5.0);
  CHECK(c.early_stop_patience == 10);
  CHECK(c.embed == 256);
  CHECK(c.hidden == 512);
  CHECK(c.attention == 512);
  CHECK(c.max_len == 38);
  CHECK_NOTHROW(c.validate());

  auto s = small_config(Variant::attention);
  CHECK(TrainConfig::from_json(s.to_json()) == s);

  nlohmann::json partial{{"hidden", 12}, {"variant", "attention"}};
  TrainConfig merged;
  merged.merge_json(partial);
  CHECK(merged.hidden == 12);
  CHECK(merged.variant == Variant::attention);
  CHECK(merged.embed == 256);

  CHECK(error_of([] { TrainConfig::from_json({{"hiden", 3}}); }) == Errc::format);
  CHECK(error_of([] { TrainConfig::from_json({{"hidden", "big"}}); }) == Errc::format);
  CHECK(error_of([] { TrainConfig::from_json({{"variant", "hard"}}); }) == Errc::usage);
  auto bad = c;
  bad.learning_rate = 0.0;
  CHECK(error_of([&] { bad.validate(); }) == Errc::usage);
  bad = c;
  bad.max_len = 2;
  CHECK(error_of([&] { bad.validate(); }) == Errc::usage);
}

TEST_CASE("uniform predictions give a loss of ln|V|") {
  auto t = toy(2);
  auto p = zero_params(Variant::baseline, {t.vocab.size(), 4, 5, 0, t.store.dim()});
  const auto batches = make_batches(t.corpus, t.vocab, t.ids, 4, 8, 0);
  const auto loss = sequence_loss(p, t.store, batches[0], false);
  CHECK(loss.loss == doctest::Approx(std::log(static_cast<double>(t.vocab.size()))).epsilon(1e-12));
  CHECK(loss.tokens == batches[0].token_count());
}

TEST_CASE("duplicating every row leaves the loss unchanged") {
  auto t = toy(3);
  const auto p = params_for(t, Variant::attention);
  const auto batches = make_batches(t.corpus, t.vocab, t.ids, 6, 8, 0);
  Batch doubled = batches[0];
  for (std::size_t k = 0; k < batches[0].size(); ++k) {
    doubled.image_ids.push_back(batches[0].image_ids[k]);
    doubled.inputs.push_back(batches[0].inputs[k]);
    doubled.targets.push_back(batches[0].targets[k]);
    doubled.mask.push_back(batches[0].mask[k]);
  }
  CHECK(sequence_loss(p, t.store, doubled, false).loss ==
        doctest::Approx(sequence_loss(p, t.store, batches[0], false).loss).epsilon(1e-13));
}

TEST_CASE("batch loss with an all-zero mask is rejected") {
  auto t = toy(1);
  const auto p = params_for(t, Variant::baseline);
  Batch b;
  b.image_ids = {t.ids[0]};
  b.inputs = {{1, 4}};
  b.targets = {{4, 2}};
  b.mask = {{0, 0}};
  CHECK(error_of([&] { sequence_loss(p, t.store, b); }) == Errc::usage);
}

TEST_CASE("loss tape is single use and baseline gradients have no attention") {
  auto t = toy(2);
  auto p = params_for(t, Variant::baseline);
  const auto batches = make_batches(t.corpus, t.vocab, t.ids, 4, 8, 0);
  auto loss = sequence_loss(p, t.store, batches[0]);
  const auto grads = backward_pass(p, loss.tape);
  CHECK_FALSE(grads.attention.has_value());
  CHECK(global_norm(grads) > 0.0);
  CHECK(error_of([&] { backward_pass(p, loss.tape); }) == Errc::usage);

  auto stale = sequence_loss(p, t.store, batches[0]);
  auto adam = make_adam_state(p);
  adam_step(p, grads, adam, {});
  CHECK(error_of([&] { backward_pass(p, stale.tape); }) == Errc::usage);
}

TEST_CASE("attention variant adds an |a|-independent parameter block") {
  const std::size_t V = 11, E = 4, H = 6, A = 3, D = 5;
  const auto base = init_decoder_params(Variant::baseline, {V, E, H, A, D}, 1);
  const auto att = init_decoder_params(Variant::attention, {V, E, H, A, D}, 1);
  CHECK(att.parameter_count() - base.parameter_count() == 4 * D * H + D * A + H * A + A + A);
}

TEST_CASE("gradient clipping") {
  auto g = zero_params(Variant::baseline, {5, 2, 2, 0, 2});
  g.out_b.values()[0] = 6.0;
  g.out_b.values()[1] = 8.0;
  CHECK(clip_gradients(g, 5.0) == doctest::Approx(10.0));
  CHECK(g.out_b.values()[0] == doctest::Approx(3.0));
  CHECK(g.out_b.values()[1] == doctest::Approx(4.0));
  CHECK(global_norm(g) <= 5.0 + 1e-6);

  auto small = zero_params(Variant::baseline, {5, 2, 2, 0, 2});
  small.out_b.values()[0] = 3.0;
  clip_gradients(small, 5.0);
  CHECK(small.out_b.values()[0] == 3.0);

  auto zero = zero_params(Variant::baseline, {5, 2, 2, 0, 2});
  clip_gradients(zero, 5.0);
  CHECK(global_norm(zero) == 0.0);
  CHECK(error_of([&] { clip_gradients(zero, 0.0); }) == Errc::usage);

  Rng rng(3);
  for (int k = 0; k < 20; ++k) {
    auto r = zero_params(Variant::attention, {6, 3, 4, 2, 3});
    for (auto& tn : r.tensors()) {
      for (double& v : tn.tensor->values()) v = rng.uniform(-3, 3);
    }
    const double before = global_norm(r);
    clip_gradients(r, 1.5);
    CHECK(global_norm(r) <= std::min(before, 1.5) + 1e-6);
  }
}

TEST_CASE("adam first step moves each component by about lr") {
  auto p = init_decoder_params(Variant::baseline, {6, 3, 4, 0, 3}, 1);
  const auto before = flatten(p);
  auto g = zero_params(Variant::baseline, p.dims());
  Rng rng(2);
  for (auto& tn : g.tensors()) {
    for (double& v : tn.tensor->values()) v = rng.uniform(-2, 2);
  }
  auto state = make_adam_state(p);
  adam_step(p, g, state, {1e-3});
  CHECK(state.step == 1);
  const auto after = flatten(p);
  const auto gv = flatten(g);
  for (std::size_t i = 0; i < after.size(); ++i) {
    CHECK(std::abs(std::abs(after[i] - before[i]) - 1e-3) < 1e-7);
    CHECK((after[i] - before[i]) * gv[i] < 0.0);
  }

  auto q = init_decoder_params(Variant::baseline, {6, 3, 4, 0, 3}, 1);
  auto fresh = make_adam_state(q);
  adam_step(q, zero_params(Variant::baseline, q.dims()), fresh, {});
  CHECK(flatten(q) == before);
}

TEST_CASE("early stopping patience") {
  EarlyStopping stop(2);
  CHECK(stop.observe(10.0, 1.0));
  int evaluations_after_best = 0;
  for (double b : {9.0, 8.0, 7.0, 6.0, 5.0}) {
    if (stop.should_stop()) break;
    CHECK_FALSE(stop.observe(b, 1.0));
    ++evaluations_after_best;
  }
  CHECK(evaluations_after_best == 3);
  CHECK(stop.should_stop());

  EarlyStopping tie(1);
  tie.observe(5.0, 2.0);
  CHECK(tie.observe(5.0, 1.5));
  CHECK_FALSE(tie.observe(5.0, 1.7));
  CHECK(tie.best_val_loss() == 1.5);
}

TEST_CASE("train log CSV") {
  TrainLog log;
  log.epochs.push_back({1, 2.5, 2.75, 0.0, 1.25});
  log.epochs.push_back({2, 1.0 / 3.0, 0.5, 12.5, 0.0});
  const auto csv = log.to_csv();
  CHECK(csv.rfind("epoch,train_loss,val_loss,val_bleu4,seconds\n", 0) == 0);
  CHECK(csv.find("\n1,2.5,2.75,0,1.250\n") != std::string::npos);
  CHECK(csv.find("\n2,0.333333333,0.5,12.5,0.000\n") != std::string::npos);
}

TEST_CASE("overfitting a single pair drives the loss below 0.05") {
  auto t = toy(1);
  auto config = small_config(Variant::baseline);
  config.hidden = 16;
  auto p = init_decoder_params(Variant::baseline, {t.vocab.size(), 6, 16, 0, t.store.dim()}, 3);
  auto adam = make_adam_state(p);
  CaptionCorpus one;
  one.add(*t.corpus.captions_for(t.ids[0])[0]);
  const auto batches = make_batches(one, t.vocab, t.ids, 1, 8, 0);
  double loss = 1e9;
  for (int epoch = 0; epoch < 300 && loss >= 0.05; ++epoch) {
    run_epoch(p, adam, config, t.store, batches);
    loss = evaluate_loss(p, t.store, batches);
  }
  CHECK(loss < 0.05);
}

TEST_CASE("train runs, logs every epoch and is deterministic") {
  auto t = toy(8);
  const Splits splits{{t.ids.begin(), t.ids.begin() + 6}, {t.ids.begin() + 6, t.ids.end()}};
  for (Variant variant : {Variant::baseline, Variant::attention}) {
    const auto config = small_config(variant);
    TrainOptions options;
    options.clock = [] { return 0.0; };
    int seen = 0;
    options.on_epoch = [&](const EpochRecord& r) { CHECK(r.epoch == ++seen); };
    const auto a = train(config, t.store, t.corpus, t.vocab, splits, options);
    CHECK(a.log.epochs.size() == 3);
    CHECK(seen == 3);
    CHECK(a.last.epoch == 3);
    REQUIRE(a.best.has_value());
    CHECK(a.best->epoch >= 1);
    CHECK(a.last.vocab_fingerprint == t.vocab.fingerprint());
    seen = 0;
    const auto b = train(config, t.store, t.corpus, t.vocab, splits, options);
    CHECK(a.log.to_csv() == b.log.to_csv());
    CHECK(flatten(a.last.params) == flatten(b.last.params));
    for (const auto& e : a.log.epochs) {
      CHECK(std::isfinite(e.train_loss));
      CHECK(e.val_bleu4 >= 0.0);
    }
  }
}

TEST_CASE("train rejects split ids without features or captions before starting") {
  auto t = toy(4);
  const auto config = small_config(Variant::baseline);
  int epochs = 0;
  TrainOptions options;
  options.on_epoch = [&](const EpochRecord&) { ++epochs; };
  Splits no_features{{t.ids[0], "ghost.jpg"}, {t.ids[1]}};
  t.corpus.add({"ghost.jpg", 0, {"a"}});
  CHECK(error_of([&] { train(config, t.store, t.corpus, t.vocab, no_features, options); }) == Errc::missing);
  Splits no_captions{{t.ids[0]}, {t.ids[1], "nowhere.jpg"}};
  CHECK(error_of([&] { train(config, t.store, t.corpus, t.vocab, no_captions, options); }) == Errc::missing);
  CHECK(epochs == 0);
  CHECK(error_of([&] { train(config, t.store, t.corpus, t.vocab, Splits{{}, {t.ids[0]}}, options); }) ==
        Errc::usage);
}

TEST_CASE("checkpoint round trip is bit exact") {
  const auto dir = testutil::scratch("ckpt_rt");
  auto t = toy(4);
  const Splits splits{{t.ids[0], t.ids[1], t.ids[2]}, {t.ids[3]}};
  auto config = small_config(Variant::attention);
  config.max_epochs = 1;
  const auto result = train(config, t.store, t.corpus, t.vocab, splits);
  const auto& ck = result.last;
  save_checkpoint(ck, dir / "c.bin");
  const auto back = load_checkpoint(dir / "c.bin", t.vocab.fingerprint());
  CHECK(back.config == ck.config);
  CHECK(back.epoch == ck.epoch);
  CHECK(back.best_bleu4 == ck.best_bleu4);
  CHECK(back.best_val_loss == ck.best_val_loss);
  CHECK(back.epochs_since_best == ck.epochs_since_best);
  CHECK(back.optimizer.step == ck.optimizer.step);
  CHECK(flatten(back.params) == flatten(ck.params));
  CHECK(flatten(back.optimizer.m) == flatten(ck.optimizer.m));
  CHECK(flatten(back.optimizer.v) == flatten(ck.optimizer.v));

  const std::vector<TokenId> ids{1, 4, 5, 6};
  const auto& fs = t.store.at(t.ids[0]);
  CHECK(forward_sequence(back.params, fs, ids, false).logits == forward_sequence(ck.params, fs, ids, false).logits);

  Checkpoint fresh;
  fresh.config = config;
  fresh.params = init_decoder_params(Variant::baseline, {5, 2, 3, 0, 2}, 1);
  fresh.optimizer = make_adam_state(fresh.params);
  save_checkpoint(fresh, dir / "fresh.bin");
  const auto fb = load_checkpoint(dir / "fresh.bin");
  CHECK(std::isinf(fb.best_val_loss));
  CHECK(fb.best_bleu4 < 0.0);
}

TEST_CASE("checkpoint load errors") {
  const auto dir = testutil::scratch("ckpt_bad");
  Checkpoint ck;
  ck.vocab_fingerprint = 42;
  ck.params = init_decoder_params(Variant::attention, {6, 2, 3, 2, 2}, 1);
  ck.optimizer = make_adam_state(ck.params);
  save_checkpoint(ck, dir / "ok.bin");
  const auto bytes = testutil::read_file(dir / "ok.bin");

  CHECK(error_of([&] { load_checkpoint(dir / "ok.bin", 43); }) == Errc::mismatch);
  CHECK_NOTHROW(load_checkpoint(dir / "ok.bin", 42));
  CHECK(error_of([&] { load_checkpoint(dir / "missing.bin"); }) == Errc::io);

  auto put = [&](const std::string& name, const std::string& content) {
    testutil::write_file(dir / name, content);
    return dir / name;
  };
  auto flipped = bytes;
  flipped[flipped.size() - 3] ^= 0x40;
  CHECK(error_of([&] { load_checkpoint(put("flip.bin", flipped)); }) == Errc::corruption);
  CHECK(error_of([&] { load_checkpoint(put("short.bin", bytes.substr(0, bytes.size() - 8))); }) ==
        Errc::corruption);
  CHECK(error_of([&] { load_checkpoint(put("head.bin", bytes.substr(0, 40))); }) == Errc::corruption);
  auto magic = bytes;
  magic[0] = 'X';
  CHECK(error_of([&] { load_checkpoint(put("magic.bin", magic)); }) == Errc::format);
  auto version = bytes;
  version[4] = 9;
  CHECK(error_of([&] { load_checkpoint(put("version.bin", version)); }) == Errc::version);
}

TEST_CASE("resumed training continues exactly like an uninterrupted run") {
  const auto dir = testutil::scratch("resume");
  auto t = toy(6);
  const Splits splits{{t.ids.begin(), t.ids.begin() + 4}, {t.ids.begin() + 4, t.ids.end()}};
  auto config = small_config(Variant::attention);
  config.max_epochs = 4;
  TrainOptions options;
  options.clock = [] { return 0.0; };
  const auto full = train(config, t.store, t.corpus, t.vocab, splits, options);

  auto first = config;
  first.max_epochs = 2;
  const auto part = train(first, t.store, t.corpus, t.vocab, splits, options);
  save_checkpoint(part.last, dir / "last.bin");
  const auto restored = load_checkpoint(dir / "last.bin", t.vocab.fingerprint());
  TrainOptions resume = options;
  resume.resume = &restored;
  const auto rest = train(config, t.store, t.corpus, t.vocab, splits, resume);
  REQUIRE(rest.log.epochs.size() == 2);
  for (std::size_t k = 0; k < 2; ++k) {
    CHECK(rest.log.epochs[k].epoch == full.log.epochs[k + 2].epoch);
    CHECK(rest.log.epochs[k].train_loss == full.log.epochs[k + 2].train_loss);
    CHECK(rest.log.epochs[k].val_loss == full.log.epochs[k + 2].val_loss);
  }
  CHECK(flatten(rest.last.params) == flatten(full.last.params));

  Checkpoint other = restored;
  other.vocab_fingerprint ^= 1;
  resume.resume = &other;
  CHECK(error_of([&] { train(config, t.store, t.corpus, t.vocab, splits, resume); }) == Errc::mismatch);
}
