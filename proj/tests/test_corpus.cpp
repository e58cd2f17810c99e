#include <doctest.h>

#include <algorithm>
#include <map>
#include <sstream>

#include "capgen/corpus.hpp"
#include "capgen/error.hpp"
#include "test_util.hpp"

using namespace capgen;
using testutil::error_of;

namespace {

CaptionCorpus parse(const std::string& text) {
  std::istringstream in(text);
  return parse_captions(in);
}

std::vector<TokenId> ids_of(const TokenSequence& s) { return s.ids; }

}  // namespace

TEST_CASE("caption line parses into a tokenized record") {
  const auto corpus = parse("img1.jpg#0\tA dog runs .\n");
  REQUIRE(corpus.size() == 1);
  const auto& r = corpus.records()[0];
  CHECK(r.image_id == "img1.jpg");
  CHECK(r.caption_index == 0);
  CHECK(r.tokens == std::vector<std::string>{"a", "dog", "runs"});
}

TEST_CASE("empty caption file gives an empty corpus") {
  CHECK(parse("").empty());
  CHECK(parse("\n\n  \n").empty());
}

TEST_CASE("malformed caption lines name the line") {
  try {
    parse("a.jpg#0\tok\nb.jpg\tno index\n");
    FAIL("expected a parse error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::parse);
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  CHECK(error_of([] { parse("a.jpg#0 no tab\n"); }) == Errc::parse);
  CHECK(error_of([] { parse("a.jpg#x\tbad index\n"); }) == Errc::parse);
  CHECK(error_of([] { parse("a.jpg#0\t. .\n"); }) == Errc::parse);
}

TEST_CASE("duplicate caption index is rejected") {
  CHECK(error_of([] { parse("a.jpg#0\tone\na.jpg#0\ttwo\n"); }) == Errc::duplicate);
  CaptionCorpus c;
  c.add({"x", 1, {"w"}});
  CHECK(error_of([&] { c.add({"x", 1, {"v"}}); }) == Errc::duplicate);
  CHECK(error_of([&] { c.add({"y", 0, {}}); }) == Errc::parse);
}

TEST_CASE("captions are grouped per image in index order") {
  const auto c = parse("b#1\tsecond\na#0\tfirst of a\nb#0\tfirst\n");
  CHECK(c.image_ids() == std::vector<std::string>{"b", "a"});
  const auto caps = c.captions_for("b");
  REQUIRE(caps.size() == 2);
  CHECK(caps[0]->tokens == std::vector<std::string>{"first"});
  CHECK(caps[1]->tokens == std::vector<std::string>{"second"});
  CHECK(c.captions_for("missing").empty());
  CHECK(c.contains("a"));
  CHECK_FALSE(c.contains("c"));
}

TEST_CASE("tokenize lowercases and drops trailing punctuation tokens") {
  CHECK(tokenize("Two DOGS play , .") == std::vector<std::string>{"two", "dogs", "play"});
  CHECK(tokenize("  spaced\tout  ") == std::vector<std::string>{"spaced", "out"});
  CHECK(tokenize("a , b") == std::vector<std::string>{"a", ",", "b"});
  CHECK(tokenize("").empty());
}

TEST_CASE("split files and caption files load from disk") {
  const auto dir = testutil::scratch("corpus_files");
  testutil::write_file(dir / "caps.txt", "x.jpg#0\tA cat .\nx.jpg#1\tA small cat\n");
  testutil::write_file(dir / "split.txt", "x.jpg\n\n  y.jpg \n");
  CHECK(load_captions(dir / "caps.txt").size() == 2);
  CHECK(load_split(dir / "split.txt") == std::vector<std::string>{"x.jpg", "y.jpg"});
  CHECK(error_of([&] { load_captions(dir / "absent.txt"); }) == Errc::io);
  CHECK(error_of([&] { load_split(dir / "absent.txt"); }) == Errc::io);
}

TEST_CASE("vocabulary keeps words at or above min_freq") {
  CaptionCorpus c;
  c.add({"i1", 0, {"dog", "dog", "dog"}});
  c.add({"i2", 0, {"dog", "dog", "cat"}});
  const auto v = build_vocabulary(c, 5);
  CHECK(v.size() == 5);
  CHECK(v.words() == std::vector<std::string>{"dog"});
  CHECK(v.id_of("dog") == 4);
  CHECK(v.id_of("cat") == Vocabulary::kUnk);

  const auto all = build_vocabulary(c, 1);
  CHECK(all.words() == std::vector<std::string>{"dog", "cat"});
}

TEST_CASE("vocabulary ties break lexicographically and rebuilds are stable") {
  CaptionCorpus c;
  c.add({"i1", 0, {"zebra", "apple", "mango", "mango"}});
  const auto v = build_vocabulary(c, 1);
  CHECK(v.words() == std::vector<std::string>{"mango", "apple", "zebra"});
  CHECK(v.id_of("apple") < v.id_of("zebra"));
  CHECK(build_vocabulary(c, 1) == v);
  CHECK(build_vocabulary(c, 1).fingerprint() == v.fingerprint());
  CHECK(error_of([] { build_vocabulary(CaptionCorpus{}, 1); }) == Errc::missing);
  CHECK(error_of([&] { build_vocabulary(c, 0); }) == Errc::usage);
}

TEST_CASE("special tokens are fixed") {
  Vocabulary v({"a"}, 1);
  CHECK(v.token(Vocabulary::kPad) == "<pad>");
  CHECK(v.token(Vocabulary::kStart) == "<start>");
  CHECK(v.token(Vocabulary::kEnd) == "<end>");
  CHECK(v.token(Vocabulary::kUnk) == "<unk>");
  CHECK(v.find("<end>") == std::nullopt);
  CHECK(Vocabulary::is_special(3));
  CHECK_FALSE(Vocabulary::is_special(4));
  CHECK(error_of([&] { v.token(5); }) == Errc::range);
  CHECK(error_of([&] { v.token(-1); }) == Errc::range);
  CHECK(error_of([] { Vocabulary({"<unk>"}, 1); }) == Errc::format);
  CHECK(error_of([] { Vocabulary({"a", "a"}, 1); }) == Errc::duplicate);
}

TEST_CASE("vocabulary JSON round trip") {
  const auto dir = testutil::scratch("vocab_json");
  Vocabulary v({"the", "dog", "runs"}, 3);
  v.save(dir / "v.json");
  const auto back = Vocabulary::load(dir / "v.json");
  CHECK(back == v);
  CHECK(back.min_freq() == 3);
  CHECK(back.fingerprint() == v.fingerprint());
  CHECK(Vocabulary({"the", "dog"}, 3).fingerprint() != v.fingerprint());
  testutil::write_file(dir / "bad.json", "{\"tokens\": 3}");
  CHECK(error_of([&] { Vocabulary::load(dir / "bad.json"); }) == Errc::format);
  testutil::write_file(dir / "junk.json", "not json");
  CHECK(error_of([&] { Vocabulary::load(dir / "junk.json"); }) == Errc::format);
}

TEST_CASE("encode_caption maps, pads, truncates") {
  Vocabulary v({"a", "dog"}, 1);
  const TokenId a = v.id_of("a"), dog = v.id_of("dog");
  const std::vector<std::string> words{"a", "dog"};
  const auto s = encode_caption(v, words, 6);
  CHECK(ids_of(s) == std::vector<TokenId>{1, a, dog, 2, 0, 0});
  CHECK(s.length == 4);

  const std::vector<std::string> unknown{"zzz"};
  const auto u = encode_caption(v, unknown, 6);
  CHECK(u.ids[1] == Vocabulary::kUnk);
  CHECK(u.length == 3);

  const std::vector<std::string> ten(10, "a");
  const auto t = encode_caption(v, ten, 5);
  CHECK(t.length == 5);
  CHECK(ids_of(t) == std::vector<TokenId>{1, a, a, a, 2});
  CHECK(error_of([&] { encode_caption(v, words, 2); }) == Errc::usage);
}

TEST_CASE("decode_tokens strips specials and stops at end") {
  Vocabulary v({"a", "dog"}, 1);
  const std::vector<TokenId> ids{1, 4, 5, 2, 0};
  CHECK(decode_tokens(v, ids) == std::vector<std::string>{"a", "dog"});
  const std::vector<TokenId> empty{1, 2};
  CHECK(decode_tokens(v, empty).empty());
  const std::vector<TokenId> bad{1, 6, 2};
  CHECK(error_of([&] { decode_tokens(v, bad); }) == Errc::range);

  const std::vector<std::string> sentence{"dog", "a", "dog"};
  const auto enc = encode_caption(v, sentence, 8);
  CHECK(decode_tokens(v, enc.ids) == sentence);
}

TEST_CASE("batches shift targets, mask padding and cover the split") {
  CaptionCorpus c;
  std::vector<std::string> split;
  for (int i = 0; i < 5; ++i) {
    const auto id = "img" + std::to_string(i);
    split.push_back(id);
    c.add({id, 0, {"a", "dog"}});
    c.add({id, 1, std::vector<std::string>(static_cast<std::size_t>(i + 1), "a")});
  }
  Vocabulary v({"a", "dog"}, 1);
  const auto batches = make_batches(c, v, split, 4, 6, 7);
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].size() == 4);
  CHECK(batches[1].size() == 4);
  CHECK(batches[2].size() == 2);

  std::map<std::pair<std::string, std::vector<TokenId>>, int> seen;
  std::size_t mask_total = 0;
  for (const auto& b : batches) {
    for (std::size_t k = 0; k < b.size(); ++k) {
      CHECK(b.inputs[k].size() == 5);
      CHECK(b.inputs[k][0] == Vocabulary::kStart);
      for (std::size_t t = 0; t < 5; ++t) {
        CHECK((b.mask[k][t] == 1) == (b.targets[k][t] != Vocabulary::kPad));
        if (t + 1 < 5 && b.mask[k][t + 1] == 1) CHECK(b.inputs[k][t + 1] == b.targets[k][t]);
        mask_total += b.mask[k][t];
      }
      seen[{b.image_ids[k], b.targets[k]}]++;
    }
    CHECK(b.token_count() > 0);
  }
  // Each caption contributes L - 1 targets: 3 for "a dog", min(i+1,4)+1 for the a-runs.
  CHECK(mask_total == 5 * 3 + (2 + 3 + 4 + 5 + 5));
  CHECK(seen.size() == 10);

  const auto again = make_batches(c, v, split, 4, 6, 7);
  for (std::size_t i = 0; i < batches.size(); ++i) {
    CHECK(again[i].image_ids == batches[i].image_ids);
    CHECK(again[i].targets == batches[i].targets);
  }
}

TEST_CASE("batch of a single sequence matches the shift rule") {
  CaptionCorpus c;
  c.add({"x", 0, {"a", "dog"}});
  Vocabulary v({"a", "dog"}, 1);
  const std::vector<std::string> split{"x"};
  const auto b = make_batches(c, v, split, 1, 4, 0);
  REQUIRE(b.size() == 1);
  CHECK(b[0].inputs[0] == std::vector<TokenId>{1, 4, 5});
  CHECK(b[0].targets[0] == std::vector<TokenId>{4, 5, 2});
  CHECK(b[0].mask[0] == std::vector<std::uint8_t>{1, 1, 1});
}

TEST_CASE("batches for unknown split ids list them") {
  CaptionCorpus c;
  c.add({"x", 0, {"a"}});
  Vocabulary v({"a"}, 1);
  const std::vector<std::string> split{"x", "ghost1", "ghost2"};
  try {
    make_batches(c, v, split, 2, 5, 0);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::missing);
    CHECK(std::string(e.what()).find("ghost1") != std::string::npos);
    CHECK(std::string(e.what()).find("ghost2") != std::string::npos);
  }
  CHECK(error_of([&] { make_batches(c, v, std::vector<std::string>{"x"}, 0, 5, 0); }) == Errc::usage);
}
