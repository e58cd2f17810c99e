#include "capgen/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "capgen/error.hpp"
#include "capgen/util.hpp"

namespace capgen {

namespace {

bool is_punctuation_token(std::string_view token) {
  return !token.empty() && std::all_of(token.begin(), token.end(), [](unsigned char ch) {
    return std::ispunct(ch) != 0;
  });
}

std::string trim(std::string_view s) {
  auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string_view::npos) return {};
  auto end = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(begin, end - begin + 1));
}

}  // namespace

void CaptionCorpus::add(CaptionRecord record) {
  if (record.tokens.empty()) {
    throw Error(Errc::parse, "caption for " + record.image_id + "#" +
                                 std::to_string(record.caption_index) + " has no tokens");
  }
  auto it = by_image_.find(record.image_id);
  if (it == by_image_.end()) {
    image_order_.push_back(record.image_id);
    it = by_image_.emplace(record.image_id, std::map<int, std::size_t>{}).first;
  }
  if (it->second.count(record.caption_index) != 0) {
    throw Error(Errc::duplicate, "duplicate caption " + record.image_id + "#" +
                                     std::to_string(record.caption_index));
  }
  it->second.emplace(record.caption_index, records_.size());
  records_.push_back(std::move(record));
}

bool CaptionCorpus::contains(std::string_view image_id) const {
  return by_image_.find(image_id) != by_image_.end();
}

std::vector<const CaptionRecord*> CaptionCorpus::captions_for(std::string_view image_id) const {
  std::vector<const CaptionRecord*> out;
  auto it = by_image_.find(image_id);
  if (it == by_image_.end()) return out;
  for (const auto& [index, pos] : it->second) out.push_back(&records_[pos]);
  return out;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::istringstream in{std::string(text)};
  std::string word;
  while (in >> word) {
    std::transform(word.begin(), word.end(), word.begin(),
                   [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
    tokens.push_back(std::move(word));
  }
  while (!tokens.empty() && is_punctuation_token(tokens.back())) tokens.pop_back();
  return tokens;
}

CaptionCorpus parse_captions(std::istream& in) {
  CaptionCorpus corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto where = " at line " + std::to_string(line_no);
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw Error(Errc::parse, "missing tab separator" + where);
    const std::string key = trim(std::string_view(line).substr(0, tab));
    const auto hash = key.rfind('#');
    if (hash == std::string::npos || hash == 0 || hash + 1 == key.size()) {
      throw Error(Errc::parse, "expected <image>#<index>" + where);
    }
    const std::string index_text = key.substr(hash + 1);
    if (!std::all_of(index_text.begin(), index_text.end(),
                     [](unsigned char ch) { return std::isdigit(ch) != 0; }) ||
        index_text.size() > 3) {
      throw Error(Errc::parse, "caption index is not a small integer" + where);
    }
    CaptionRecord record;
    record.image_id = key.substr(0, hash);
    record.caption_index = std::stoi(index_text);
    record.tokens = tokenize(std::string_view(line).substr(tab + 1));
    if (record.tokens.empty()) throw Error(Errc::parse, "empty caption" + where);
    try {
      corpus.add(std::move(record));
    } catch (const Error& e) {
      throw Error(e.code(), std::string(e.what()) + where);
    }
  }
  return corpus;
}

CaptionCorpus load_captions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io, "cannot open captions file " + path.string());
  return parse_captions(in);
}

std::vector<std::string> load_split(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io, "cannot open split file " + path.string());
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    auto id = trim(line);
    if (!id.empty()) ids.push_back(std::move(id));
  }
  return ids;
}

// ---------------------------------------------------------------------------
// Vocabulary

namespace {
const std::string kSpecialNames[Vocabulary::kSpecialCount] = {"<pad>", "<start>", "<end>", "<unk>"};
}

Vocabulary::Vocabulary(std::vector<std::string> words, int min_freq)
    : words_(std::move(words)), min_freq_(min_freq) {
  if (min_freq_ < 1) throw Error(Errc::usage, "min_freq must be >= 1");
  index_.reserve(words_.size());
  for (std::size_t i = 0; i < words_.size(); ++i) {
    const auto& w = words_[i];
    if (w.empty()) throw Error(Errc::format, "vocabulary contains an empty word");
    if (std::find(std::begin(kSpecialNames), std::end(kSpecialNames), w) != std::end(kSpecialNames)) {
      throw Error(Errc::format, "vocabulary word collides with special token " + w);
    }
    if (!index_.emplace(w, static_cast<TokenId>(i + kSpecialCount)).second) {
      throw Error(Errc::duplicate, "duplicate vocabulary word " + w);
    }
  }
}

std::optional<TokenId> Vocabulary::find(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::id_of(std::string_view word) const { return find(word).value_or(kUnk); }

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= size()) {
    throw Error(Errc::range, "token id " + std::to_string(id) + " outside vocabulary of size " +
                                 std::to_string(size()));
  }
  if (is_special(id)) return kSpecialNames[id];
  return words_[static_cast<std::size_t>(id) - kSpecialCount];
}

nlohmann::json Vocabulary::to_json() const {
  return nlohmann::json{{"tokens", words_}, {"min_freq", min_freq_}};
}

Vocabulary Vocabulary::from_json(const nlohmann::json& doc) {
  try {
    return Vocabulary(doc.at("tokens").get<std::vector<std::string>>(), doc.at("min_freq").get<int>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::format, std::string("malformed vocabulary document: ") + e.what());
  }
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error(Errc::io, "cannot write vocabulary " + path.string());
  out << to_json().dump(1) << '\n';
  if (!out) throw Error(Errc::io, "failed writing vocabulary " + path.string());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io, "cannot open vocabulary " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::format, "vocabulary " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(doc);
}

std::uint64_t Vocabulary::fingerprint() const {
  Fnv1a h;
  h.update(static_cast<std::uint64_t>(min_freq_));
  for (const auto& w : words_) {
    h.update(w);
    h.update(std::string_view("\0", 1));
  }
  return h.digest();
}

Vocabulary build_vocabulary(const CaptionCorpus& corpus, int min_freq) {
  if (min_freq < 1) throw Error(Errc::usage, "min_freq must be >= 1");
  if (corpus.empty()) throw Error(Errc::missing, "cannot build a vocabulary from an empty corpus");
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& rec : corpus.records()) {
    for (const auto& tok : rec.tokens) ++counts[tok];
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [word, n] : counts) {
    if (n >= static_cast<std::size_t>(min_freq)) kept.emplace_back(word, n);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<std::string> words;
  words.reserve(kept.size());
  for (auto& [word, n] : kept) words.push_back(std::move(word));
  return Vocabulary(std::move(words), min_freq);
}

TokenSequence encode_caption(const Vocabulary& vocab, std::span<const std::string> tokens,
                             std::size_t max_len) {
  if (max_len < 3) throw Error(Errc::usage, "max_len must be >= 3");
  TokenSequence seq;
  seq.ids.reserve(max_len);
  seq.ids.push_back(Vocabulary::kStart);
  const std::size_t keep = std::min(tokens.size(), max_len - 2);
  for (std::size_t i = 0; i < keep; ++i) seq.ids.push_back(vocab.id_of(tokens[i]));
  seq.ids.push_back(Vocabulary::kEnd);
  seq.length = seq.ids.size();
  seq.ids.resize(max_len, Vocabulary::kPad);
  return seq;
}

std::vector<std::string> decode_tokens(const Vocabulary& vocab, std::span<const TokenId> ids) {
  std::vector<std::string> words;
  for (TokenId id : ids) {
    const auto& tok = vocab.token(id);  // range-checks
    if (id == Vocabulary::kEnd) break;
    if (id == Vocabulary::kStart || id == Vocabulary::kPad) continue;
    words.push_back(tok);
  }
  return words;
}

std::size_t Batch::token_count() const {
  std::size_t n = 0;
  for (const auto& row : mask) n += static_cast<std::size_t>(std::count(row.begin(), row.end(), 1));
  return n;
}

std::vector<Batch> make_batches(const CaptionCorpus& corpus, const Vocabulary& vocab,
                                std::span<const std::string> split, std::size_t batch_size,
                                std::size_t max_len, std::uint64_t seed) {
  if (batch_size == 0) throw Error(Errc::usage, "batch_size must be positive");
  if (max_len < 3) throw Error(Errc::usage, "max_len must be >= 3");

  std::vector<std::string> missing;
  std::vector<const CaptionRecord*> pairs;
  for (const auto& id : split) {
    auto caps = corpus.captions_for(id);
    if (caps.empty()) missing.push_back(id);
    pairs.insert(pairs.end(), caps.begin(), caps.end());
  }
  if (!missing.empty()) {
    std::string msg = "split images missing from caption corpus:";
    for (const auto& id : missing) msg += " " + id;
    throw Error(Errc::missing, msg);
  }

  Rng rng(seed);
  for (std::size_t i = pairs.size(); i > 1; --i) {
    std::swap(pairs[i - 1], pairs[rng.below(i)]);
  }

  const std::size_t width = max_len - 1;
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < pairs.size(); start += batch_size) {
    Batch batch;
    const std::size_t end = std::min(pairs.size(), start + batch_size);
    for (std::size_t k = start; k < end; ++k) {
      const auto seq = encode_caption(vocab, pairs[k]->tokens, max_len);
      std::vector<TokenId> in(seq.ids.begin(), seq.ids.begin() + static_cast<std::ptrdiff_t>(width));
      std::vector<TokenId> out(seq.ids.begin() + 1, seq.ids.end());
      std::vector<std::uint8_t> m(width, 0);
      for (std::size_t t = 0; t + 1 < seq.length; ++t) m[t] = 1;
      batch.image_ids.push_back(pairs[k]->image_id);
      batch.inputs.push_back(std::move(in));
      batch.targets.push_back(std::move(out));
      batch.mask.push_back(std::move(m));
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

}  // namespace capgen
