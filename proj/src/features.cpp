#include "capgen/features.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <limits>

#include "capgen/error.hpp"
#include "capgen/util.hpp"

namespace capgen {

// CAPF layout (all little-endian):
//   "CAPF" | u32 version | u32 record_count | u32 regions | u32 dim
//   record_count x ( u16 id_length | id bytes | u64 payload_offset )
//   payload: per record regions*dim float32, row-major
// payload_offset is an absolute byte offset from the start of the file.

namespace {

constexpr char kMagic[4] = {'C', 'A', 'P', 'F'};
constexpr std::size_t kHeaderBytes = 20;

template <typename T>
void put_le(std::string& out, T value) {
  using U = std::make_unsigned_t<T>;
  auto bits = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
  }
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, const std::filesystem::path& path) : bytes_(bytes), path_(path) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    std::make_unsigned_t<T> v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<std::make_unsigned_t<T>>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  std::string get_string(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw Error(Errc::corruption, path_.string() + ": truncated while reading " + what);
    }
  }

  const std::string& bytes_;
  const std::filesystem::path& path_;
  std::size_t pos_ = 0;
};

std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

void FeatureSet::validate() const {
  if (regions == 0 || dim == 0) throw Error(Errc::shape, "feature set " + image_id + " has an empty shape");
  if (values.size() != regions * dim) {
    throw Error(Errc::shape, "feature set " + image_id + " payload does not match regions x dim");
  }
  for (float v : values) {
    if (!std::isfinite(v)) throw Error(Errc::numeric, "feature set " + image_id + " contains a non-finite value");
  }
}

nlohmann::json ExtractorManifest::to_json() const {
  return nlohmann::json{{"cnn_name", cnn_name},
                        {"parameter_count_thousands", parameter_count_thousands},
                        {"regions", regions},
                        {"dim", dim},
                        {"preprocessing", preprocessing},
                        {"extractor_version", extractor_version}};
}

ExtractorManifest ExtractorManifest::from_json(const nlohmann::json& doc) {
  ExtractorManifest m;
  try {
    m.cnn_name = doc.at("cnn_name").get<std::string>();
    m.parameter_count_thousands = doc.at("parameter_count_thousands").get<std::int64_t>();
    m.regions = doc.at("regions").get<std::uint32_t>();
    m.dim = doc.at("dim").get<std::uint32_t>();
    m.preprocessing = doc.value("preprocessing", std::string{});
    m.extractor_version = doc.value("extractor_version", std::string{});
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::format, std::string("malformed extractor manifest: ") + e.what());
  }
  if (m.parameter_count_thousands <= 0) {
    throw Error(Errc::format, "extractor manifest parameter_count_thousands must be positive");
  }
  return m;
}

FeatureStore::FeatureStore(ExtractorManifest manifest) : manifest_(std::move(manifest)) {
  if (manifest_.regions == 0 || manifest_.dim == 0) {
    throw Error(Errc::shape, "feature store needs regions >= 1 and dim >= 1");
  }
}

void FeatureStore::add(FeatureSet set) {
  set.validate();
  if (set.regions != manifest_.regions || set.dim != manifest_.dim) {
    throw Error(Errc::shape, "feature set " + set.image_id + " is " + std::to_string(set.regions) + "x" +
                                 std::to_string(set.dim) + ", store expects " + std::to_string(manifest_.regions) +
                                 "x" + std::to_string(manifest_.dim));
  }
  if (set.image_id.empty() || set.image_id.size() > std::numeric_limits<std::uint16_t>::max()) {
    throw Error(Errc::format, "feature set image id length out of range");
  }
  if (index_.count(set.image_id) != 0) throw Error(Errc::duplicate, "duplicate feature set " + set.image_id);
  index_.emplace(set.image_id, sets_.size());
  sets_.push_back(std::move(set));
}

bool FeatureStore::contains(std::string_view image_id) const { return find(image_id) != nullptr; }

const FeatureSet* FeatureStore::find(std::string_view image_id) const {
  auto it = index_.find(std::string(image_id));
  return it == index_.end() ? nullptr : &sets_[it->second];
}

const FeatureSet& FeatureStore::at(std::string_view image_id) const {
  const auto* set = find(image_id);
  if (set == nullptr) throw Error(Errc::missing, "no features for image " + std::string(image_id));
  return *set;
}

std::filesystem::path manifest_path_for(const std::filesystem::path& capf_path) {
  auto p = capf_path;
  p.replace_extension(".manifest.json");
  return p;
}

void write_feature_file(const FeatureStore& store, const std::filesystem::path& path) {
  if (store.empty()) throw Error(Errc::shape, "refusing to write an empty feature store");
  for (const auto& set : store.sets()) {
    set.validate();
    if (set.regions != store.regions() || set.dim != store.dim()) {
      throw Error(Errc::shape, "feature store is not uniform at " + set.image_id);
    }
  }

  std::string out;
  out.append(kMagic, 4);
  put_le<std::uint32_t>(out, kCapfVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(store.size()));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(store.regions()));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(store.dim()));

  std::size_t index_bytes = 0;
  for (const auto& set : store.sets()) index_bytes += 2 + set.image_id.size() + 8;
  const std::size_t record_bytes = store.regions() * store.dim() * sizeof(float);
  std::uint64_t offset = kHeaderBytes + index_bytes;
  for (const auto& set : store.sets()) {
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(set.image_id.size()));
    out += set.image_id;
    put_le<std::uint64_t>(out, offset);
    offset += record_bytes;
  }
  out.reserve(static_cast<std::size_t>(offset));
  for (const auto& set : store.sets()) {
    for (float v : set.values) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }

  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(Errc::io, "cannot write " + path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw Error(Errc::io, "failed writing " + path.string());
  }
  auto manifest = store.manifest();
  std::ofstream m(manifest_path_for(path));
  if (!m) throw Error(Errc::io, "cannot write " + manifest_path_for(path).string());
  m << manifest.to_json().dump(2) << '\n';
  if (!m) throw Error(Errc::io, "failed writing " + manifest_path_for(path).string());
}

FeatureStore read_feature_file(const std::filesystem::path& path) {
  const std::string bytes = read_all(path);
  ByteReader r(bytes, path);
  if (bytes.size() < 4 || bytes.compare(0, 4, kMagic, 4) != 0) {
    throw Error(Errc::format, path.string() + ": not a CAPF file (bad magic)");
  }
  r.get_string(4, "magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version == 0 || version > kCapfVersion) {
    throw Error(Errc::version, path.string() + ": CAPF version " + std::to_string(version) +
                                   " is not supported (max " + std::to_string(kCapfVersion) + ")");
  }
  const auto count = r.get<std::uint32_t>("record count");
  const auto regions = r.get<std::uint32_t>("regions");
  const auto dim = r.get<std::uint32_t>("dim");
  if (regions == 0 || dim == 0) throw Error(Errc::format, path.string() + ": zero regions or dim in header");

  const auto mpath = manifest_path_for(path);
  std::ifstream min(mpath);
  if (!min) throw Error(Errc::missing, "missing manifest " + mpath.string());
  nlohmann::json doc;
  try {
    min >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::format, mpath.string() + " is not valid JSON: " + e.what());
  }
  auto manifest = ExtractorManifest::from_json(doc);
  if (manifest.regions != regions || manifest.dim != dim) {
    throw Error(Errc::mismatch, mpath.string() + " disagrees with the CAPF header shape");
  }

  struct Entry {
    std::string id;
    std::uint64_t offset;
  };
  std::vector<Entry> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint16_t>("index entry");
    auto id = r.get_string(len, "index entry");
    const auto offset = r.get<std::uint64_t>("index entry");
    entries.push_back({std::move(id), offset});
  }

  const std::uint64_t record_bytes = std::uint64_t{regions} * dim * sizeof(float);
  FeatureStore store(std::move(manifest));
  for (const auto& e : entries) {
    if (e.offset < r.position() || e.offset > bytes.size() || bytes.size() - e.offset < record_bytes) {
      throw Error(Errc::corruption, path.string() + ": payload for " + e.id + " lies outside the file");
    }
    FeatureSet set;
    set.image_id = e.id;
    set.regions = regions;
    set.dim = dim;
    set.values.resize(static_cast<std::size_t>(regions) * dim);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + e.offset);
    for (std::size_t k = 0; k < set.values.size(); ++k, p += 4) {
      const std::uint32_t bits = std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) |
                                 (std::uint32_t{p[2]} << 16) | (std::uint32_t{p[3]} << 24);
      set.values[k] = std::bit_cast<float>(bits);
    }
    try {
      store.add(std::move(set));
    } catch (const Error& err) {
      throw Error(err.code() == Errc::duplicate ? Errc::corruption : err.code(),
                  path.string() + ": " + err.what());
    }
  }
  return store;
}

FeatureStore synthetic_features(std::uint64_t seed, std::size_t n_images, std::size_t regions,
                                std::size_t dim) {
  if (n_images == 0 || regions == 0 || dim == 0) {
    throw Error(Errc::usage, "synthetic_features needs positive counts");
  }
  ExtractorManifest manifest;
  manifest.cnn_name = "synthetic";
  manifest.parameter_count_thousands = 1;
  manifest.regions = static_cast<std::uint32_t>(regions);
  manifest.dim = static_cast<std::uint32_t>(dim);
  manifest.preprocessing = "uniform random in [-1, 1]";
  manifest.extractor_version = "synthetic-1";
  FeatureStore store(manifest);
  Rng rng(seed);
  for (std::size_t i = 0; i < n_images; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "synth_%04zu", i);
    FeatureSet set{id, regions, dim, {}};
    set.values.resize(regions * dim);
    for (auto& v : set.values) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    store.add(std::move(set));
  }
  return store;
}

std::vector<double> mean_pool(const FeatureSet& set) {
  std::vector<double> out(set.dim, 0.0);
  for (std::size_t i = 0; i < set.regions; ++i) {
    const auto row = set.region(i);
    for (std::size_t d = 0; d < set.dim; ++d) out[d] += row[d];
  }
  const auto n = static_cast<double>(set.regions);
  for (auto& v : out) v /= n;
  return out;
}

}  // namespace capgen
