#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace capgen {

using TokenId = std::int32_t;

struct CaptionRecord {
  std::string image_id;
  int caption_index = 0;
  std::vector<std::string> tokens;
};

/// All captions of a dataset, indexed by image. Immutable once loaded.
class CaptionCorpus {
 public:
  /// Throws Errc::duplicate if (image_id, caption_index) is already present
  /// and Errc::parse if the record has no tokens.
  void add(CaptionRecord record);

  const std::vector<CaptionRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  bool contains(std::string_view image_id) const;

  /// Captions of one image ordered by caption index; empty if unknown.
  std::vector<const CaptionRecord*> captions_for(std::string_view image_id) const;

  /// Distinct image ids in order of first appearance.
  const std::vector<std::string>& image_ids() const { return image_order_; }

 private:
  std::vector<CaptionRecord> records_;
  std::map<std::string, std::map<int, std::size_t>, std::less<>> by_image_;
  std::vector<std::string> image_order_;
};

/// Whitespace split, lowercase, trailing punctuation-only tokens dropped.
std::vector<std::string> tokenize(std::string_view text);

/// Parses Flickr8k token lines `<image>#<idx>\t<caption>`; blank lines are
/// skipped. Errors name the 1-based line number.
CaptionCorpus parse_captions(std::istream& in);
CaptionCorpus load_captions(const std::filesystem::path& path);

/// One image id per line; blank lines ignored.
std::vector<std::string> load_split(const std::filesystem::path& path);

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kStart = 1;
  static constexpr TokenId kEnd = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr std::size_t kSpecialCount = 4;

  /// `words` are the non-special entries in id order (id = index + 4).
  Vocabulary(std::vector<std::string> words, int min_freq);

  std::size_t size() const { return kSpecialCount + words_.size(); }
  int min_freq() const { return min_freq_; }
  const std::vector<std::string>& words() const { return words_; }

  std::optional<TokenId> find(std::string_view word) const;
  /// Unknown words map to kUnk.
  TokenId id_of(std::string_view word) const;
  /// Throws Errc::range for ids >= size().
  const std::string& token(TokenId id) const;

  static bool is_special(TokenId id) { return id >= 0 && id < static_cast<TokenId>(kSpecialCount); }

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& doc);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  /// Fingerprint of the id assignment; checkpoints store it.
  std::uint64_t fingerprint() const;

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.min_freq_ == b.min_freq_ && a.words_ == b.words_;
  }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
  int min_freq_;
};

/// Words with corpus frequency >= min_freq, ordered by descending frequency
/// then lexicographically.
Vocabulary build_vocabulary(const CaptionCorpus& corpus, int min_freq);

struct TokenSequence {
  std::vector<TokenId> ids;  // padded to max_len
  std::size_t length = 0;    // start..end inclusive
};

TokenSequence encode_caption(const Vocabulary& vocab, std::span<const std::string> tokens,
                             std::size_t max_len);

/// Drops start/pad tokens and stops at the first end token.
std::vector<std::string> decode_tokens(const Vocabulary& vocab, std::span<const TokenId> ids);

/// Teacher-forcing layout: targets[b][t] is the token after inputs[b][t].
struct Batch {
  std::vector<std::string> image_ids;
  std::vector<std::vector<TokenId>> inputs;
  std::vector<std::vector<TokenId>> targets;
  std::vector<std::vector<std::uint8_t>> mask;

  std::size_t size() const { return image_ids.size(); }
  std::size_t token_count() const;
};

/// Every (image, caption) pair of the split exactly once, shuffled with
/// `seed`. Rows are max_len - 1 wide.
std::vector<Batch> make_batches(const CaptionCorpus& corpus, const Vocabulary& vocab,
                                std::span<const std::string> split, std::size_t batch_size,
                                std::size_t max_len, std::uint64_t seed);

}  // namespace capgen
