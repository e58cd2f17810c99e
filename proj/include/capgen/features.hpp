#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace capgen {

/// Region vectors of one image, |a| x D row-major.
struct FeatureSet {
  std::string image_id;
  std::size_t regions = 0;
  std::size_t dim = 0;
  std::vector<float> values;

  std::span<const float> region(std::size_t i) const { return {values.data() + i * dim, dim}; }

  /// Throws Errc::shape / Errc::numeric when the invariants do not hold.
  void validate() const;
};

struct ExtractorManifest {
  std::string cnn_name;
  std::int64_t parameter_count_thousands = 0;
  std::uint32_t regions = 0;
  std::uint32_t dim = 0;
  std::string preprocessing;
  std::string extractor_version;

  nlohmann::json to_json() const;
  static ExtractorManifest from_json(const nlohmann::json& doc);
};

/// Feature sets of uniform shape keyed by image id.
class FeatureStore {
 public:
  explicit FeatureStore(ExtractorManifest manifest);

  /// Shape must match the manifest; ids must be unique.
  void add(FeatureSet set);

  const ExtractorManifest& manifest() const { return manifest_; }
  std::size_t regions() const { return manifest_.regions; }
  std::size_t dim() const { return manifest_.dim; }
  std::size_t size() const { return sets_.size(); }
  bool empty() const { return sets_.empty(); }

  bool contains(std::string_view image_id) const;
  const FeatureSet* find(std::string_view image_id) const;
  /// Throws Errc::missing.
  const FeatureSet& at(std::string_view image_id) const;

  /// Insertion order.
  const std::vector<FeatureSet>& sets() const { return sets_; }

 private:
  ExtractorManifest manifest_;
  std::vector<FeatureSet> sets_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline constexpr std::uint32_t kCapfVersion = 1;

/// `F.capf` -> `F.manifest.json`.
std::filesystem::path manifest_path_for(const std::filesystem::path& capf_path);

void write_feature_file(const FeatureStore& store, const std::filesystem::path& path);
FeatureStore read_feature_file(const std::filesystem::path& path);

/// Values uniform in [-1, 1], ids synth_0000.., cnn_name "synthetic".
FeatureStore synthetic_features(std::uint64_t seed, std::size_t n_images, std::size_t regions,
                                std::size_t dim);

/// Component-wise mean over regions, accumulated in double.
std::vector<double> mean_pool(const FeatureSet& set);

}  // namespace capgen
