#include "capgen/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <unordered_map>

#include "capgen/error.hpp"
#include "capgen/util.hpp"

namespace capgen {

namespace {

constexpr std::size_t kMaxOrder = 4;

using NgramCounts = std::unordered_map<std::string, double>;

/// Counts of n-grams of one order; words joined by a unit separator.
NgramCounts count_ngrams(const Words& words, std::size_t n) {
  NgramCounts counts;
  if (words.size() < n) return counts;
  for (std::size_t i = 0; i + n <= words.size(); ++i) {
    std::string key = words[i];
    for (std::size_t k = 1; k < n; ++k) {
      key += '\x1f';
      key += words[i + k];
    }
    counts[key] += 1.0;
  }
  return counts;
}

void require_instances(std::span<const EvalInstance> instances, const char* metric) {
  if (instances.empty()) throw Error(Errc::usage, std::string(metric) + " needs at least one instance");
  for (const auto& inst : instances) {
    if (inst.references.empty()) {
      throw Error(Errc::missing, std::string(metric) + ": instance " + inst.image_id + " has no references");
    }
  }
}

std::size_t lcs_length(const Words& a, const Words& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

std::array<double, 4> bleu(std::span<const EvalInstance> instances) {
  require_instances(instances, "BLEU");
  std::array<double, kMaxOrder> matched{};
  std::array<double, kMaxOrder> total{};
  double cand_len = 0.0;
  double ref_len = 0.0;
  for (const auto& inst : instances) {
    const auto c = inst.candidate.size();
    // Closest reference length; ties go to the shorter reference.
    std::size_t best = inst.references.front().size();
    for (const auto& ref : inst.references) {
      const auto r = ref.size();
      const auto dr = r > c ? r - c : c - r;
      const auto db = best > c ? best - c : c - best;
      if (dr < db || (dr == db && r < best)) best = r;
    }
    cand_len += static_cast<double>(c);
    ref_len += static_cast<double>(best);

    for (std::size_t n = 1; n <= kMaxOrder; ++n) {
      const auto cand = count_ngrams(inst.candidate, n);
      NgramCounts max_ref;
      for (const auto& ref : inst.references) {
        for (const auto& [g, k] : count_ngrams(ref, n)) max_ref[g] = std::max(max_ref[g], k);
      }
      for (const auto& [g, k] : cand) {
        auto it = max_ref.find(g);
        if (it != max_ref.end()) matched[n - 1] += std::min(k, it->second);
      }
      if (c >= n) total[n - 1] += static_cast<double>(c - n + 1);
    }
  }

  std::array<double, 4> scores{};
  if (cand_len == 0.0) return scores;
  const double bp = cand_len < ref_len ? std::exp(1.0 - ref_len / cand_len) : 1.0;
  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t n = 0; n < kMaxOrder; ++n) {
    if (matched[n] == 0.0 || total[n] == 0.0) zero = true;
    if (!zero) log_sum += std::log(matched[n] / total[n]);
    scores[n] = zero ? 0.0 : 100.0 * bp * std::exp(log_sum / static_cast<double>(n + 1));
  }
  return scores;
}

double rouge_l(std::span<const EvalInstance> instances, double beta) {
  require_instances(instances, "ROUGE-L");
  double sum = 0.0;
  for (const auto& inst : instances) {
    double best = 0.0;
    for (const auto& ref : inst.references) {
      const auto lcs = static_cast<double>(lcs_length(inst.candidate, ref));
      if (lcs == 0.0) continue;
      const double p = lcs / static_cast<double>(inst.candidate.size());
      const double r = lcs / static_cast<double>(ref.size());
      const double f = (1.0 + beta * beta) * p * r / (r + beta * beta * p);
      best = std::max(best, f);
    }
    sum += best;
  }
  return 100.0 * sum / static_cast<double>(instances.size());
}

double cider(std::span<const EvalInstance> instances, std::vector<std::string>* warnings) {
  require_instances(instances, "CIDEr");
  constexpr double kSigma = 6.0;

  // Document frequency: number of images whose reference set contains the n-gram.
  std::array<std::unordered_map<std::string, double>, kMaxOrder> df;
  std::vector<std::array<std::vector<NgramCounts>, kMaxOrder>> ref_counts(instances.size());
  for (std::size_t i = 0; i < instances.size(); ++i) {
    for (std::size_t n = 1; n <= kMaxOrder; ++n) {
      std::set<std::string> seen;
      for (const auto& ref : instances[i].references) {
        ref_counts[i][n - 1].push_back(count_ngrams(ref, n));
        for (const auto& [g, k] : ref_counts[i][n - 1].back()) seen.insert(g);
      }
      for (const auto& g : seen) df[n - 1][g] += 1.0;
    }
  }
  if (instances.size() == 1 && warnings != nullptr) {
    warnings->push_back("CIDEr over a single image: every idf is log(1) = 0, score is 0");
  }
  const double log_docs = std::log(static_cast<double>(instances.size()));

  struct Weighted {
    std::array<NgramCounts, kMaxOrder> vec;
    std::array<double, kMaxOrder> norm{};
    double length = 0.0;
  };
  auto weigh = [&](const std::array<NgramCounts, kMaxOrder>& counts, std::size_t length) {
    Weighted w;
    w.length = static_cast<double>(length);
    for (std::size_t n = 0; n < kMaxOrder; ++n) {
      for (const auto& [g, tf] : counts[n]) {
        auto it = df[n].find(g);
        const double doc_freq = it == df[n].end() ? 0.0 : it->second;
        const double v = tf * (log_docs - std::log(std::max(1.0, doc_freq)));
        w.vec[n][g] = v;
        w.norm[n] += v * v;
      }
      w.norm[n] = std::sqrt(w.norm[n]);
    }
    return w;
  };

  double total = 0.0;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto& inst = instances[i];
    std::array<NgramCounts, kMaxOrder> cand_counts;
    for (std::size_t n = 1; n <= kMaxOrder; ++n) cand_counts[n - 1] = count_ngrams(inst.candidate, n);
    const auto cand = weigh(cand_counts, inst.candidate.size());

    std::array<double, kMaxOrder> per_order{};
    for (std::size_t r = 0; r < inst.references.size(); ++r) {
      std::array<NgramCounts, kMaxOrder> counts;
      for (std::size_t n = 0; n < kMaxOrder; ++n) counts[n] = ref_counts[i][n][r];
      const auto ref = weigh(counts, inst.references[r].size());
      const double delta = cand.length - ref.length;
      const double penalty = std::exp(-(delta * delta) / (2.0 * kSigma * kSigma));
      for (std::size_t n = 0; n < kMaxOrder; ++n) {
        double dot = 0.0;
        for (const auto& [g, vc] : cand.vec[n]) {
          auto it = ref.vec[n].find(g);
          if (it != ref.vec[n].end()) dot += std::min(vc, it->second) * it->second;
        }
        if (cand.norm[n] != 0.0 && ref.norm[n] != 0.0) dot /= cand.norm[n] * ref.norm[n];
        per_order[n] += dot * penalty;
      }
    }
    double mean = 0.0;
    for (double v : per_order) mean += v;
    mean /= static_cast<double>(kMaxOrder);
    total += mean / static_cast<double>(inst.references.size());
  }
  // x10 for CIDEr-D's own scale, x10 again for reporting.
  return 100.0 * total / static_cast<double>(instances.size());
}

// --- reports -------------------------------------------------------------------

nlohmann::json MetricReport::to_json() const {
  return nlohmann::json{{"bleu1", bleu1},
                        {"bleu2", bleu2},
                        {"bleu3", bleu3},
                        {"bleu4", bleu4},
                        {"rouge_l", rouge_l},
                        {"cider", cider},
                        {"n_instances", n_instances},
                        {"cnn_name", encoder.cnn_name},
                        {"parameter_count_thousands", encoder.parameter_count_thousands},
                        {"variant", variant},
                        {"dataset_hash", dataset_hash},
                        {"warnings", warnings}};
}

MetricReport MetricReport::from_json(const nlohmann::json& doc) {
  MetricReport r;
  try {
    r.bleu1 = doc.at("bleu1").get<double>();
    r.bleu2 = doc.at("bleu2").get<double>();
    r.bleu3 = doc.at("bleu3").get<double>();
    r.bleu4 = doc.at("bleu4").get<double>();
    r.rouge_l = doc.at("rouge_l").get<double>();
    r.cider = doc.at("cider").get<double>();
    r.n_instances = doc.at("n_instances").get<std::size_t>();
    r.encoder.cnn_name = doc.at("cnn_name").get<std::string>();
    r.encoder.parameter_count_thousands = doc.at("parameter_count_thousands").get<std::int64_t>();
    r.variant = doc.value("variant", std::string{});
    r.dataset_hash = doc.value("dataset_hash", std::string{});
    r.warnings = doc.value("warnings", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::format, std::string("malformed metric report: ") + e.what());
  }
  return r;
}

std::string MetricReport::csv_header() {
  return "cnn_name,parameter_count_thousands,bleu1,bleu2,bleu3,bleu4,rouge_l,cider,variant,n_instances";
}

std::string MetricReport::csv_row() const {
  char buf[256];
  std::snprintf(buf, sizeof buf, ",%lld,%.3f,%.3f,%.3f,%.3f,%.3f,%.3f,%s,%zu",
                static_cast<long long>(encoder.parameter_count_thousands), bleu1, bleu2, bleu3, bleu4, rouge_l,
                cider, variant.c_str(), n_instances);
  return encoder.cnn_name + buf;
}

MetricReport score_instances(std::span<const EvalInstance> instances, const EncoderInfo& encoder) {
  MetricReport report;
  const auto b = bleu(instances);
  report.bleu1 = b[0];
  report.bleu2 = b[1];
  report.bleu3 = b[2];
  report.bleu4 = b[3];
  report.rouge_l = rouge_l(instances);
  report.cider = cider(instances, &report.warnings);
  report.n_instances = instances.size();
  report.encoder = encoder;
  return report;
}

std::string dataset_fingerprint(const CaptionCorpus& references, std::span<const std::string> split) {
  std::vector<std::string> ids(split.begin(), split.end());
  std::sort(ids.begin(), ids.end());
  Fnv1a h;
  for (const auto& id : ids) {
    h.update(id).update(std::string_view("\n", 1));
    for (const auto* rec : references.captions_for(id)) {
      for (const auto& w : rec->tokens) h.update(w).update(std::string_view(" ", 1));
      h.update(std::string_view("\t", 1));
    }
  }
  return to_hex(h.digest());
}

MetricReport evaluate_run(const std::map<std::string, Words>& candidates, const CaptionCorpus& references,
                          std::span<const std::string> split, const EncoderInfo& encoder) {
  if (split.empty()) throw Error(Errc::usage, "evaluation split is empty");
  std::string missing_candidates;
  std::string missing_references;
  std::vector<EvalInstance> instances;
  instances.reserve(split.size());
  for (const auto& id : split) {
    auto it = candidates.find(id);
    const auto refs = references.captions_for(id);
    if (it == candidates.end()) missing_candidates += " " + id;
    if (refs.empty()) missing_references += " " + id;
    if (it == candidates.end() || refs.empty()) continue;
    EvalInstance inst{id, it->second, {}};
    for (const auto* rec : refs) inst.references.push_back(rec->tokens);
    instances.push_back(std::move(inst));
  }
  if (!missing_candidates.empty()) throw Error(Errc::missing, "no candidate caption for:" + missing_candidates);
  if (!missing_references.empty()) throw Error(Errc::missing, "no reference captions for:" + missing_references);
  auto report = score_instances(instances, encoder);
  report.dataset_hash = dataset_fingerprint(references, split);
  return report;
}

std::map<std::string, Words> load_candidates(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io, "cannot open candidates " + path.string());
  std::map<std::string, Words> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = path.string() + " line " + std::to_string(line_no);
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(line);
      auto id = doc.at("image_id").get<std::string>();
      auto words = tokenize(doc.at("caption").get<std::string>());
      if (!out.emplace(std::move(id), std::move(words)).second) {
        throw Error(Errc::duplicate, where + ": duplicate candidate");
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::parse, where + ": " + e.what());
    }
  }
  return out;
}

}  // namespace capgen
