#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>

#include "capgen/error.hpp"
#include "capgen/training.hpp"
#include "capgen/util.hpp"

namespace capgen {

// Checkpoint layout:
//   "CAPK" | u32 version | u64 header_bytes | header (UTF-8 JSON) | payload
// The payload holds float64 little-endian values for every tensor of the
// parameters, then the Adam first and second moments, each in the declared
// tensor order. The header records shapes, the payload size and an FNV-1a
// digest of the payload.

namespace {

constexpr char kMagic[4] = {'C', 'A', 'P', 'K'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_le(const std::string& bytes, std::size_t pos, int width) {
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + static_cast<std::size_t>(i)])) << (8 * i);
  }
  return v;
}

nlohmann::json encode_double(double v) {
  // JSON has no infinities; the unset best-loss sentinel is one.
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

double decode_double(const nlohmann::json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    throw Error(Errc::format, "bad numeric field '" + s + "' in checkpoint header");
  }
  return j.get<double>();
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  ckpt.params.validate();
  std::string payload;
  nlohmann::json shapes = nlohmann::json::array();
  for (const auto* set : {&ckpt.params, &ckpt.optimizer.m, &ckpt.optimizer.v}) {
    for (const auto& t : set->tensors()) {
      if (set == &ckpt.params) shapes.push_back({{"name", t.name}, {"rows", t.tensor->rows()}, {"cols", t.tensor->cols()}});
      for (double v : t.tensor->values()) put_u64(payload, std::bit_cast<std::uint64_t>(v));
    }
  }
  const auto dims = ckpt.params.dims();
  nlohmann::json header{{"format", "capgen-checkpoint"},
                        {"version", kCheckpointVersion},
                        {"config", ckpt.config.to_json()},
                        {"variant", to_string(ckpt.params.variant)},
                        {"vocab_fingerprint", to_hex(ckpt.vocab_fingerprint)},
                        {"dims",
                         {{"vocab", dims.vocab},
                          {"embed", dims.embed},
                          {"hidden", dims.hidden},
                          {"attention", dims.attention},
                          {"feature_dim", dims.feature_dim}}},
                        {"epoch", ckpt.epoch},
                        {"best_bleu4", encode_double(ckpt.best_bleu4)},
                        {"best_val_loss", encode_double(ckpt.best_val_loss)},
                        {"epochs_since_best", ckpt.epochs_since_best},
                        {"adam_step", ckpt.optimizer.step},
                        {"tensors", shapes},
                        {"payload_bytes", payload.size()},
                        {"payload_fnv1a", to_hex(Fnv1a().update(payload).digest())}};
  const std::string head = header.dump();

  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u64(out, head.size());
  out += head;
  out += payload;

  // Write to a sibling file first so a failed save never leaves a torn checkpoint.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(Errc::io, "cannot write " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw Error(Errc::io, "failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(Errc::io, "cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, std::optional<std::uint64_t> expected_vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto where = path.string() + ": ";

  if (bytes.size() < 16 || bytes.compare(0, 4, kMagic, 4) != 0) throw Error(Errc::format, where + "not a checkpoint");
  const auto version = static_cast<std::uint32_t>(get_le(bytes, 4, 4));
  if (version != kCheckpointVersion) {
    throw Error(Errc::version, where + "checkpoint version " + std::to_string(version) + " is not supported");
  }
  const auto head_bytes = get_le(bytes, 8, 8);
  if (head_bytes > bytes.size() - 16) throw Error(Errc::corruption, where + "truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(head_bytes));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::corruption, where + "unreadable header: " + e.what());
  }

  Checkpoint ckpt;
  std::string payload;
  try {
    ckpt.config = TrainConfig::from_json(header.at("config"));
    ckpt.vocab_fingerprint = std::stoull(header.at("vocab_fingerprint").get<std::string>(), nullptr, 16);
    const auto& d = header.at("dims");
    DecoderDims dims{d.at("vocab").get<std::size_t>(), d.at("embed").get<std::size_t>(),
                     d.at("hidden").get<std::size_t>(), d.at("attention").get<std::size_t>(),
                     d.at("feature_dim").get<std::size_t>()};
    const auto variant = parse_variant(header.at("variant").get<std::string>());
    ckpt.params = zero_params(variant, dims);
    ckpt.optimizer = make_adam_state(ckpt.params);
    ckpt.optimizer.step = header.at("adam_step").get<std::int64_t>();
    ckpt.epoch = header.at("epoch").get<int>();
    ckpt.best_bleu4 = decode_double(header.at("best_bleu4"));
    ckpt.best_val_loss = decode_double(header.at("best_val_loss"));
    ckpt.epochs_since_best = header.at("epochs_since_best").get<int>();

    const auto& shapes = header.at("tensors");
    const auto tensors = ckpt.params.tensors();
    if (shapes.size() != tensors.size()) throw Error(Errc::corruption, where + "tensor list does not match variant");
    for (std::size_t k = 0; k < tensors.size(); ++k) {
      if (shapes[k].at("name").get<std::string>() != tensors[k].name ||
          shapes[k].at("rows").get<std::size_t>() != tensors[k].tensor->rows() ||
          shapes[k].at("cols").get<std::size_t>() != tensors[k].tensor->cols()) {
        throw Error(Errc::corruption, where + "tensor " + tensors[k].name + " has an unexpected shape");
      }
    }
    const auto expected_bytes = header.at("payload_bytes").get<std::size_t>();
    payload = bytes.substr(16 + head_bytes);
    if (payload.size() != expected_bytes || expected_bytes != 3 * ckpt.params.parameter_count() * 8) {
      throw Error(Errc::corruption, where + "payload size does not match the header");
    }
    if (to_hex(Fnv1a().update(payload).digest()) != header.at("payload_fnv1a").get<std::string>()) {
      throw Error(Errc::corruption, where + "payload checksum mismatch");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::corruption, where + "malformed header: " + e.what());
  } catch (const std::logic_error&) {
    throw Error(Errc::corruption, where + "malformed vocabulary fingerprint");
  }

  if (expected_vocab && *expected_vocab != ckpt.vocab_fingerprint) {
    throw Error(Errc::mismatch, where + "checkpoint vocabulary " + to_hex(ckpt.vocab_fingerprint) +
                                    " does not match the supplied vocabulary " + to_hex(*expected_vocab));
  }

  std::size_t pos = 0;
  for (auto* set : {&ckpt.params, &ckpt.optimizer.m, &ckpt.optimizer.v}) {
    for (auto& t : set->tensors()) {
      for (auto& v : t.tensor->values()) {
        v = std::bit_cast<double>(get_le(payload, pos, 8));
        pos += 8;
      }
    }
  }
  for (const auto& t : ckpt.params.tensors()) require_finite(t.tensor->values(), "checkpoint parameters");
  return ckpt;
}

}  // namespace capgen
