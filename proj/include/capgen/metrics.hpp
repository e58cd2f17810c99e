#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "capgen/corpus.hpp"

namespace capgen {

using Words = std::vector<std::string>;

struct EvalInstance {
  std::string image_id;
  Words candidate;
  std::vector<Words> references;
};

/// Corpus BLEU-1..4 (x100): pooled clipped precisions, closest-reference
/// brevity penalty, no smoothing.
std::array<double, 4> bleu(std::span<const EvalInstance> instances);

/// Mean over instances of the best LCS F-measure (beta = 1.2), x100.
double rouge_l(std::span<const EvalInstance> instances, double beta = 1.2);

/// CIDEr-D with clipping and a Gaussian length penalty (sigma = 6), x100.
/// When the corpus has a single image every idf is zero; the score is then 0
/// and a warning is appended if `warnings` is non-null.
double cider(std::span<const EvalInstance> instances, std::vector<std::string>* warnings = nullptr);

struct EncoderInfo {
  std::string cnn_name = "unknown";
  std::int64_t parameter_count_thousands = 0;
};

struct MetricReport {
  double bleu1 = 0, bleu2 = 0, bleu3 = 0, bleu4 = 0;
  double rouge_l = 0;
  double cider = 0;
  std::size_t n_instances = 0;
  EncoderInfo encoder;
  std::string variant;       // empty when unknown
  std::string dataset_hash;  // fingerprint of split ids + references
  std::vector<std::string> warnings;

  nlohmann::json to_json() const;
  static MetricReport from_json(const nlohmann::json& doc);
  static std::string csv_header();
  std::string csv_row() const;
};

/// Runs every metric over the instances.
MetricReport score_instances(std::span<const EvalInstance> instances, const EncoderInfo& encoder = {});

/// Fingerprint of what an evaluation compares against.
std::string dataset_fingerprint(const CaptionCorpus& references, std::span<const std::string> split);

/// Candidates keyed by image id; throws Errc::missing listing split images
/// without a candidate.
MetricReport evaluate_run(const std::map<std::string, Words>& candidates, const CaptionCorpus& references,
                          std::span<const std::string> split, const EncoderInfo& encoder);

/// JSON lines {"image_id", "caption", "log_prob"}; captions are tokenized
/// like the corpus.
std::map<std::string, Words> load_candidates(const std::filesystem::path& path);

}  // namespace capgen
