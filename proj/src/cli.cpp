#include "capgen/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "capgen/corpus.hpp"
#include "capgen/error.hpp"
#include "capgen/features.hpp"
#include "capgen/inference.hpp"
#include "capgen/metrics.hpp"
#include "capgen/training.hpp"
#include "capgen/util.hpp"

namespace capgen {

namespace fs = std::filesystem;

namespace {

constexpr const char* kConfigFile = "config.json";
constexpr const char* kCheckpointFile = "checkpoint.bin";
constexpr const char* kLastFile = "last.bin";
constexpr const char* kTrainLogFile = "trainlog.csv";
constexpr const char* kReportFile = "report.json";
constexpr const char* kManifestFile = "manifest.json";
constexpr const char* kVocabFile = "vocab.json";

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::parse, path.string() + ": " + e.what());
  }
}

/// Writes through a sibling temporary so a failed command leaves nothing behind.
void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::io, "cannot write " + path.string());
    out << text;
    out.flush();
    if (!out) {
      out.close();
      fs::remove(tmp);
      throw Error(Errc::io, "write failed for " + path.string());
    }
  }
  fs::rename(tmp, path);
}

std::string dump_json(const nlohmann::json& doc) { return doc.dump(2) + "\n"; }

fs::path with_extension(fs::path path, const std::string& ext) {
  path.replace_extension(ext);
  return path;
}

void require_file(const fs::path& path, const char* what) {
  if (!fs::is_regular_file(path)) throw Error(Errc::missing, std::string(what) + " not found: " + path.string());
}

// --- build-vocab ---------------------------------------------------------------

struct VocabArgs {
  std::string captions;
  std::string split;
  int min_freq = 5;
  std::string out;
};

void cmd_build_vocab(const VocabArgs& a, std::ostream& out) {
  if (a.min_freq < 1) throw Error(Errc::usage, "--min-freq must be >= 1");
  auto corpus = load_captions(a.captions);
  if (!a.split.empty()) {
    const auto ids = load_split(a.split);
    CaptionCorpus restricted;
    std::string missing;
    for (const auto& id : ids) {
      const auto caps = corpus.captions_for(id);
      if (caps.empty()) missing += " " + id;
      for (const auto* rec : caps) restricted.add(*rec);
    }
    if (!missing.empty()) throw Error(Errc::missing, "split images without captions:" + missing);
    corpus = std::move(restricted);
  }
  const auto vocab = build_vocabulary(corpus, a.min_freq);
  write_text(a.out, dump_json(vocab.to_json()));
  out << "vocabulary: " << vocab.size() << " tokens (" << vocab.words().size() << " words, min_freq "
      << a.min_freq << ") -> " << a.out << "\n";
}

// --- train -----------------------------------------------------------------------

struct TrainArgs {
  std::string features, vocab, captions, split_train, split_val, config, out;
  std::string variant;
  std::uint64_t seed = 0;
  std::size_t embed = 0, hidden = 0, attention = 0, batch_size = 0, max_len = 0;
  double learning_rate = 0, clip_norm = 0;
  int max_epochs = 0, patience = 0;
  bool no_wall_time = false;
  CLI::App* app = nullptr;
};

bool given(const CLI::App* app, const char* name) { return app->count(name) > 0; }

TrainConfig resolve_config(const TrainArgs& a) {
  TrainConfig config;
  if (!a.config.empty()) config.merge_json(read_json(a.config));
  if (given(a.app, "--variant")) config.variant = parse_variant(a.variant);
  if (given(a.app, "--embed")) config.embed = a.embed;
  if (given(a.app, "--hidden")) config.hidden = a.hidden;
  if (given(a.app, "--attention")) config.attention = a.attention;
  if (given(a.app, "--lr")) config.learning_rate = a.learning_rate;
  if (given(a.app, "--batch-size")) config.batch_size = a.batch_size;
  if (given(a.app, "--max-epochs")) config.max_epochs = a.max_epochs;
  if (given(a.app, "--clip-norm")) config.clip_norm = a.clip_norm;
  if (given(a.app, "--patience")) config.early_stop_patience = a.patience;
  if (given(a.app, "--max-len")) config.max_len = a.max_len;
  config.seed = a.seed;
  config.validate();
  return config;
}

/// Replaces `dir` with the fully written `staging` directory.
void commit_directory(const fs::path& staging, const fs::path& dir) {
  if (fs::exists(dir)) fs::remove_all(dir);
  if (dir.has_parent_path()) fs::create_directories(dir.parent_path());
  fs::rename(staging, dir);
}

void check_run_target(const fs::path& dir) {
  if (!fs::exists(dir)) return;
  if (!fs::is_directory(dir)) throw Error(Errc::usage, "--out exists and is not a directory: " + dir.string());
  const bool empty = fs::directory_iterator(dir) == fs::directory_iterator();
  if (!empty && !fs::exists(dir / kConfigFile)) {
    throw Error(Errc::usage, "--out is a non-empty directory that is not a run directory: " + dir.string());
  }
}

std::map<std::string, Words> decode_split(const DecoderParams& params, const FeatureStore& store,
                                          const Vocabulary& vocab, std::span<const std::string> ids,
                                          std::size_t max_len) {
  std::map<std::string, Words> out;
  for (const auto& id : ids) out[id] = greedy_decode(params, store.at(id), vocab, max_len).words;
  return out;
}

void cmd_train(const TrainArgs& a, std::ostream& out) {
  const auto config = resolve_config(a);
  const fs::path run_dir = a.out;
  check_run_target(run_dir);

  const auto store = read_feature_file(a.features);
  const auto vocab = Vocabulary::load(a.vocab);
  const auto corpus = load_captions(a.captions);
  Splits splits{load_split(a.split_train), load_split(a.split_val)};

  TrainOptions options;
  if (a.no_wall_time) options.clock = [] { return 0.0; };
  options.on_epoch = [&out](const EpochRecord& r) {
    char line[160];
    std::snprintf(line, sizeof line, "epoch %d  train_loss %.4f  val_loss %.4f  val_bleu4 %.2f\n", r.epoch,
                  r.train_loss, r.val_loss, r.val_bleu4);
    out << line << std::flush;
  };
  auto result = train(config, store, corpus, vocab, splits, options);
  const Checkpoint& best = result.best ? *result.best : result.last;

  EncoderInfo encoder{store.manifest().cnn_name, store.manifest().parameter_count_thousands};
  const auto candidates = decode_split(best.params, store, vocab, splits.val, config.max_len);
  auto report = evaluate_run(candidates, corpus, splits.val, encoder);
  report.variant = to_string(config.variant);

  fs::path staging = run_dir;
  staging += ".partial";
  fs::remove_all(staging);
  fs::create_directories(staging);
  try {
    write_text(staging / kConfigFile, dump_json(config.to_json()));
    save_checkpoint(best, staging / kCheckpointFile);
    save_checkpoint(result.last, staging / kLastFile);
    result.log.write_csv(staging / kTrainLogFile);
    write_text(staging / kReportFile, dump_json(report.to_json()));
    write_text(staging / kManifestFile, dump_json(store.manifest().to_json()));
    vocab.save(staging / kVocabFile);
    commit_directory(staging, run_dir);
  } catch (...) {
    fs::remove_all(staging);
    throw;
  }
  char line[200];
  std::snprintf(line, sizeof line, "best epoch %d: val BLEU-4 %.2f, BLEU-1 %.2f -> %s\n", best.epoch,
                report.bleu4, report.bleu1, run_dir.string().c_str());
  out << line;
}

// --- caption ---------------------------------------------------------------------

struct CaptionArgs {
  std::string run, features, split, out;
  std::size_t beam = 1;
  std::size_t max_len = 0;
  CLI::Option* beam_opt = nullptr;
};

struct LoadedRun {
  TrainConfig config;
  Vocabulary vocab;
  Checkpoint checkpoint;
};

LoadedRun load_run(const fs::path& dir) {
  require_file(dir / kConfigFile, "run config");
  require_file(dir / kVocabFile, "run vocabulary");
  require_file(dir / kCheckpointFile, "checkpoint");
  auto config = TrainConfig::from_json(read_json(dir / kConfigFile));
  auto vocab = Vocabulary::load(dir / kVocabFile);
  auto checkpoint = load_checkpoint(dir / kCheckpointFile, vocab.fingerprint());
  return LoadedRun{std::move(config), std::move(vocab), std::move(checkpoint)};
}

void cmd_caption(const CaptionArgs& a, std::ostream& out) {
  if (a.beam < 1) throw Error(Errc::usage, "--beam must be >= 1");
  const auto run = load_run(a.run);
  const auto store = read_feature_file(a.features);
  const auto ids = load_split(a.split);
  const std::size_t max_len = a.max_len > 0 ? a.max_len : run.config.max_len;
  if (max_len < 3) throw Error(Errc::usage, "--max-len must be >= 3");
  const auto dims = run.checkpoint.params.dims();
  if (store.dim() != dims.feature_dim) {
    throw Error(Errc::shape, "feature dim " + std::to_string(store.dim()) + " does not match the model's " +
                                 std::to_string(dims.feature_dim));
  }
  std::string missing;
  for (const auto& id : ids) {
    if (!store.contains(id)) missing += " " + id;
  }
  if (!missing.empty()) throw Error(Errc::missing, "split images without features:" + missing);

  std::string text;
  for (const auto& id : ids) {
    const auto& fs_ = store.at(id);
    DecodedCaption cap = a.beam == 1 ? greedy_decode(run.checkpoint.params, fs_, run.vocab, max_len)
                                     : beam_decode(run.checkpoint.params, fs_, run.vocab, a.beam, max_len).best;
    std::string sentence;
    for (const auto& w : cap.words) sentence += (sentence.empty() ? "" : " ") + w;
    nlohmann::json line{{"image_id", id}, {"caption", sentence}, {"log_prob", cap.log_prob},
                        {"finished", cap.finished}};
    text += line.dump() + "\n";
  }
  write_text(a.out, text);
  out << "captioned " << ids.size() << " images (" << (a.beam == 1 ? std::string("greedy")
                                                                      : "beam " + std::to_string(a.beam))
      << ") -> " << a.out << "\n";
}

// --- evaluate --------------------------------------------------------------------

struct EvaluateArgs {
  std::string candidates, captions, split, out, csv, run, cnn, variant;
  std::int64_t params_k = 0;
};

void cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
  EncoderInfo encoder;
  std::string variant = a.variant;
  if (!a.run.empty()) {
    const fs::path dir = a.run;
    require_file(dir / kManifestFile, "run manifest");
    require_file(dir / kConfigFile, "run config");
    const auto manifest = ExtractorManifest::from_json(read_json(dir / kManifestFile));
    encoder = EncoderInfo{manifest.cnn_name, manifest.parameter_count_thousands};
    if (variant.empty()) variant = to_string(TrainConfig::from_json(read_json(dir / kConfigFile)).variant);
  }
  if (!a.cnn.empty()) encoder.cnn_name = a.cnn;
  if (a.params_k > 0) encoder.parameter_count_thousands = a.params_k;
  if (!variant.empty()) variant = to_string(parse_variant(variant));

  const auto candidates = load_candidates(a.candidates);
  const auto corpus = load_captions(a.captions);
  const auto ids = load_split(a.split);
  auto report = evaluate_run(candidates, corpus, ids, encoder);
  report.variant = variant;

  write_text(a.out, dump_json(report.to_json()));
  if (!a.csv.empty()) write_text(a.csv, MetricReport::csv_header() + "\n" + report.csv_row() + "\n");
  char line[200];
  std::snprintf(line, sizeof line, "BLEU-1 %.2f  BLEU-4 %.2f  ROUGE-L %.2f  CIDEr %.2f  (%zu images)\n",
                report.bleu1, report.bleu4, report.rouge_l, report.cider, report.n_instances);
  out << line;
  for (const auto& w : report.warnings) out << "warning: " << w << "\n";
}

// --- compare ---------------------------------------------------------------------

struct CompareArgs {
  std::vector<std::string> runs;
  std::string out;
};

std::string markdown_table(const std::vector<MetricReport>& rows) {
  std::string md =
      "| CNN | Parameters (in thousands) | BLEU-1 | BLEU-2 | BLEU-3 | BLEU-4 | ROUGE-L | CIDEr | Variant |\n"
      "|---|---:|---:|---:|---:|---:|---:|---:|---|\n";
  for (const auto& r : rows) {
    char buf[200];
    std::snprintf(buf, sizeof buf, " | %lld | %.2f | %.2f | %.2f | %.2f | %.2f | %.2f | ",
                  static_cast<long long>(r.encoder.parameter_count_thousands), r.bleu1, r.bleu2, r.bleu3, r.bleu4,
                  r.rouge_l, r.cider);
    md += "| " + r.encoder.cnn_name + buf + r.variant + " |\n";
  }
  return md;
}

std::string csv_table(const std::vector<MetricReport>& rows) {
  std::string csv = MetricReport::csv_header() + "\n";
  for (const auto& r : rows) csv += r.csv_row() + "\n";
  return csv;
}

void cmd_compare(const CompareArgs& a, std::ostream& out) {
  std::vector<MetricReport> rows;
  for (const auto& run : a.runs) {
    const fs::path dir = run;
    for (const char* file : {kConfigFile, kCheckpointFile, kTrainLogFile, kReportFile}) {
      require_file(dir / file, "run artifact");
    }
    rows.push_back(MetricReport::from_json(read_json(dir / kReportFile)));
  }
  for (const auto& r : rows) {
    if (r.dataset_hash != rows.front().dataset_hash) {
      throw Error(Errc::mismatch, "runs were evaluated on different data (dataset hash " + rows.front().dataset_hash +
                                      " vs " + r.dataset_hash + ")");
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const MetricReport& x, const MetricReport& y) {
    if (x.encoder.parameter_count_thousands != y.encoder.parameter_count_thousands) {
      return x.encoder.parameter_count_thousands < y.encoder.parameter_count_thousands;
    }
    if (x.encoder.cnn_name != y.encoder.cnn_name) return x.encoder.cnn_name < y.encoder.cnn_name;
    return x.variant < y.variant;
  });

  const fs::path md_path = a.out;
  std::map<std::string, std::vector<MetricReport>> by_variant;
  for (const auto& r : rows) by_variant[r.variant].push_back(r);

  write_text(md_path, markdown_table(rows));
  write_text(with_extension(md_path, ".csv"), csv_table(rows));
  if (by_variant.size() > 1) {
    for (const auto& [variant, subset] : by_variant) {
      const std::string tag = variant.empty() ? "unknown" : variant;
      const std::string base = md_path.stem().string() + "." + tag;
      write_text(md_path.parent_path() / (base + ".md"), markdown_table(subset));
      write_text(md_path.parent_path() / (base + ".csv"), csv_table(subset));
    }
  }
  out << "compared " << rows.size() << " runs -> " << md_path.string() << "\n";
}

// --- synth -----------------------------------------------------------------------

struct SynthArgs {
  std::string out_dir;
  std::size_t images = 16, regions = 4, dim = 8, captions_per_image = 2;
  std::uint64_t seed = 0;
};

/// Writes a toy dataset: features, captions and a train/val split.
void cmd_synth(const SynthArgs& a, std::ostream& out) {
  if (a.images < 2) throw Error(Errc::usage, "--images must be >= 2");
  if (a.regions == 0 || a.dim == 0 || a.captions_per_image == 0) {
    throw Error(Errc::usage, "--regions, --dim and --captions must be positive");
  }
  static const std::vector<std::string> subjects = {"a dog", "a cat", "two children", "a man", "a woman"};
  static const std::vector<std::string> verbs = {"runs", "sits", "plays", "jumps"};
  static const std::vector<std::string> places = {"on the grass", "in the water", "on a bench", "in the snow"};

  const fs::path dir = a.out_dir;
  auto store = synthetic_features(a.seed, a.images, a.regions, a.dim);
  Rng rng(mix_seed(a.seed, 7));
  std::string captions, train_ids, val_ids;
  const std::size_t n_val = std::max<std::size_t>(1, a.images / 4);
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& id = store.sets()[i].image_id;
    const auto& subject = subjects[i % subjects.size()];
    for (std::size_t k = 0; k < a.captions_per_image; ++k) {
      captions += id + "#" + std::to_string(k) + "\t" + subject + " " + verbs[rng.below(verbs.size())] + " " +
                  places[rng.below(places.size())] + " .\n";
    }
    (i < store.size() - n_val ? train_ids : val_ids) += id + "\n";
  }
  fs::create_directories(dir);
  write_feature_file(store, dir / "features.capf");
  write_text(dir / "captions.txt", captions);
  write_text(dir / "train.txt", train_ids);
  write_text(dir / "val.txt", val_ids);
  out << "synthetic dataset: " << a.images << " images, " << a.regions << "x" << a.dim << " features -> "
      << dir.string() << "\n";
}

int exit_code_for(Errc code) {
  switch (code) {
    case Errc::usage:
      return kExitUsage;
    case Errc::internal:
      return kExitInternal;
    default:
      return kExitData;
  }
}

std::string one_line(std::string msg) {
  std::replace(msg.begin(), msg.end(), '\n', ' ');
  return msg;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Image caption generator: vocabulary, training, captioning, evaluation"};
  app.name("capgen");
  app.require_subcommand(1);

  VocabArgs vocab_args;
  auto* vocab_cmd = app.add_subcommand("build-vocab", "Build a vocabulary from a captions file");
  vocab_cmd->add_option("--captions", vocab_args.captions, "Captions file (image#k<TAB>text)")->required();
  vocab_cmd->add_option("--split", vocab_args.split, "Only count captions of images listed here");
  vocab_cmd->add_option("--min-freq", vocab_args.min_freq, "Minimum word count")->capture_default_str();
  vocab_cmd->add_option("--out", vocab_args.out, "Output vocabulary JSON")->required();

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train a decoder and write a run directory");
  train_args.app = train_cmd;
  train_cmd->add_option("--features", train_args.features, "CAPF feature file")->required();
  train_cmd->add_option("--vocab", train_args.vocab, "Vocabulary JSON")->required();
  train_cmd->add_option("--captions", train_args.captions, "Captions file")->required();
  train_cmd->add_option("--split-train", train_args.split_train, "Training image ids")->required();
  train_cmd->add_option("--split-val", train_args.split_val, "Validation image ids")->required();
  train_cmd->add_option("--variant", train_args.variant, "baseline or attention");
  train_cmd->add_option("--config", train_args.config, "Training config JSON");
  train_cmd->add_option("--seed", train_args.seed, "Random seed")->required();
  train_cmd->add_option("--out", train_args.out, "Run directory")->required();
  train_cmd->add_option("--embed", train_args.embed, "Embedding width");
  train_cmd->add_option("--hidden", train_args.hidden, "LSTM width");
  train_cmd->add_option("--attention", train_args.attention, "Attention width");
  train_cmd->add_option("--lr", train_args.learning_rate, "Adam learning rate");
  train_cmd->add_option("--batch-size", train_args.batch_size, "Captions per batch");
  train_cmd->add_option("--max-epochs", train_args.max_epochs, "Epoch limit");
  train_cmd->add_option("--clip-norm", train_args.clip_norm, "Global gradient norm limit");
  train_cmd->add_option("--patience", train_args.patience, "Epochs without BLEU-4 improvement before stopping");
  train_cmd->add_option("--max-len", train_args.max_len, "Sequence length including <start> and <end>");
  train_cmd->add_flag("--no-wall-time", train_args.no_wall_time, "Write 0 in the seconds column of trainlog.csv");

  CaptionArgs caption_args;
  auto* caption_cmd = app.add_subcommand("caption", "Caption images with a trained run");
  caption_cmd->add_option("--run", caption_args.run, "Run directory")->required();
  caption_cmd->add_option("--features", caption_args.features, "CAPF feature file")->required();
  caption_cmd->add_option("--split", caption_args.split, "Image ids to caption")->required();
  caption_args.beam_opt = caption_cmd
                              ->add_option("--beam", caption_args.beam,
                                           "Beam width; greedy when absent, 3 when given without a value")
                              ->expected(0, 1)
                              ->default_str("3");
  caption_cmd->add_option("--max-len", caption_args.max_len, "Override the run's max_len");
  caption_cmd->add_option("--out", caption_args.out, "Output JSON lines")->required();

  EvaluateArgs eval_args;
  auto* eval_cmd = app.add_subcommand("evaluate", "Score candidate captions against references");
  eval_cmd->add_option("--candidates", eval_args.candidates, "Candidate JSON lines")->required();
  eval_cmd->add_option("--captions", eval_args.captions, "Reference captions file")->required();
  eval_cmd->add_option("--split", eval_args.split, "Image ids to score")->required();
  eval_cmd->add_option("--out", eval_args.out, "Report JSON")->required();
  eval_cmd->add_option("--csv", eval_args.csv, "Also write the report as a CSV row");
  eval_cmd->add_option("--run", eval_args.run, "Take encoder and variant metadata from this run directory");
  eval_cmd->add_option("--cnn", eval_args.cnn, "Encoder name for the report");
  eval_cmd->add_option("--params", eval_args.params_k, "Encoder parameter count in thousands");
  eval_cmd->add_option("--variant", eval_args.variant, "Decoder variant for the report");

  CompareArgs compare_args;
  auto* compare_cmd = app.add_subcommand("compare", "Tabulate the reports of several runs");
  compare_cmd->add_option("--runs", compare_args.runs, "Run directories")->required()->expected(1, -1);
  compare_cmd->add_option("--out", compare_args.out, "Markdown table; a .csv is written alongside")->required();

  SynthArgs synth_args;
  auto* synth_cmd = app.add_subcommand("synth", "Write a small synthetic dataset");
  synth_cmd->add_option("--out-dir", synth_args.out_dir, "Output directory")->required();
  synth_cmd->add_option("--images", synth_args.images, "Number of images")->capture_default_str();
  synth_cmd->add_option("--regions", synth_args.regions, "Regions per image")->capture_default_str();
  synth_cmd->add_option("--dim", synth_args.dim, "Feature width")->capture_default_str();
  synth_cmd->add_option("--captions", synth_args.captions_per_image, "Captions per image")->capture_default_str();
  synth_cmd->add_option("--seed", synth_args.seed, "Random seed")->capture_default_str();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, er;
    const int code = app.exit(e, o, er);
    out << o.str();
    if (code != 0) {
      err << "error: " << one_line(e.what()) << "\n";
      return kExitUsage;
    }
    return kExitOk;
  }

  try {
    if (vocab_cmd->parsed()) cmd_build_vocab(vocab_args, out);
    if (train_cmd->parsed()) cmd_train(train_args, out);
    if (caption_cmd->parsed()) cmd_caption(caption_args, out);
    if (eval_cmd->parsed()) cmd_evaluate(eval_args, out);
    if (compare_cmd->parsed()) cmd_compare(compare_args, out);
    if (synth_cmd->parsed()) cmd_synth(synth_args, out);
  } catch (const Error& e) {
    err << "error: " << one_line(e.what()) << "\n";
    return exit_code_for(e.code());
  } catch (const fs::filesystem_error& e) {
    err << "error: " << one_line(e.what()) << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "internal error: " << one_line(e.what()) << "\n";
    return kExitInternal;
  }
  return kExitOk;
}

}  // namespace capgen
