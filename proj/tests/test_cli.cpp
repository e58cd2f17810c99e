#include <doctest.h>

#include <filesystem>
#include <sstream>

#include <json.hpp>

#include "capgen/cli.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using capgen::run_cli;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string s(const fs::path& p) { return p.string(); }

/// Synthetic dataset, vocabulary and one tiny trained run, shared by the cases below.
struct Workspace {
  fs::path root, data, vocab, run;

  Workspace() {
    root = testutil::scratch("cli");
    data = root / "data";
    vocab = root / "vocab.json";
    run = root / "run";
    REQUIRE(cli({"synth", "--out-dir", s(data), "--images", "8", "--regions", "3", "--dim", "5"}).code == 0);
    REQUIRE(cli({"build-vocab", "--captions", s(data / "captions.txt"), "--split", s(data / "train.txt"),
                 "--min-freq", "1", "--out", s(vocab)})
                .code == 0);
    REQUIRE(train(run).code == 0);
  }

  Run train(const fs::path& out, const std::string& variant = "baseline") const {
    return cli({"train", "--features", s(data / "features.capf"), "--vocab", s(vocab), "--captions",
                s(data / "captions.txt"), "--split-train", s(data / "train.txt"), "--split-val",
                s(data / "val.txt"), "--variant", variant, "--seed", "5", "--embed", "6", "--hidden", "8",
                "--attention", "4", "--batch-size", "4", "--max-epochs", "2", "--max-len", "12",
                "--no-wall-time", "--out", s(out)});
  }
};

const Workspace& workspace() {
  static const Workspace w;
  return w;
}

void edit_report(const fs::path& run, const std::string& cnn, long long params) {
  auto doc = nlohmann::json::parse(testutil::read_file(run / "report.json"));
  doc["cnn_name"] = cnn;
  doc["parameter_count_thousands"] = params;
  testutil::write_file(run / "report.json", doc.dump(2));
}

void copy_run(const fs::path& from, const fs::path& to) {
  fs::remove_all(to);
  fs::copy(from, to, fs::copy_options::recursive);
}

}  // namespace

TEST_CASE("train writes a complete run directory") {
  const auto& w = workspace();
  for (const char* f : {"config.json", "checkpoint.bin", "last.bin", "trainlog.csv", "report.json", "manifest.json",
                        "vocab.json"}) {
    CHECK(fs::is_regular_file(w.run / f));
  }
  CHECK_FALSE(fs::exists(fs::path(s(w.run) + ".partial")));
  const auto config = nlohmann::json::parse(testutil::read_file(w.run / "config.json"));
  CHECK(config.at("hidden") == 8);
  CHECK(config.at("seed") == 5);
  CHECK(config.at("learning_rate") == 4e-4);
  const auto log = testutil::read_file(w.run / "trainlog.csv");
  CHECK(log.rfind("epoch,train_loss,val_loss,val_bleu4,seconds\n", 0) == 0);
  CHECK(std::count(log.begin(), log.end(), '\n') == 3);
}

TEST_CASE("retraining into the same directory reproduces the log") {
  const auto& w = workspace();
  const auto before = testutil::read_file(w.run / "trainlog.csv");
  const auto other = w.root / "again";
  REQUIRE(w.train(other).code == 0);
  CHECK(testutil::read_file(other / "trainlog.csv") == before);
  REQUIRE(w.train(other).code == 0);
  CHECK(testutil::read_file(other / "trainlog.csv") == before);
  CHECK(testutil::read_file(other / "checkpoint.bin") == testutil::read_file(w.run / "checkpoint.bin"));
}

TEST_CASE("train refuses to overwrite an unrelated directory") {
  const auto& w = workspace();
  const auto target = w.root / "precious";
  fs::create_directories(target);
  testutil::write_file(target / "notes.txt", "keep me");
  CHECK(w.train(target).code == 2);
  CHECK(testutil::read_file(target / "notes.txt") == "keep me");
}

TEST_CASE("a config file sits between defaults and flags") {
  const auto& w = workspace();
  testutil::write_file(w.root / "cfg.json", R"({"hidden": 6, "embed": 7, "max_epochs": 1})");
  const auto out = w.root / "with_config";
  const auto r = cli({"train", "--features", s(w.data / "features.capf"), "--vocab", s(w.vocab), "--captions",
                      s(w.data / "captions.txt"), "--split-train", s(w.data / "train.txt"), "--split-val",
                      s(w.data / "val.txt"), "--config", s(w.root / "cfg.json"), "--hidden", "5", "--seed", "1",
                      "--max-len", "12", "--no-wall-time", "--out", s(out)});
  REQUIRE(r.code == 0);
  const auto config = nlohmann::json::parse(testutil::read_file(out / "config.json"));
  CHECK(config.at("hidden") == 5);
  CHECK(config.at("embed") == 7);
  CHECK(config.at("max_epochs") == 1);
  CHECK(config.at("batch_size") == 32);

  testutil::write_file(w.root / "typo.json", R"({"hiden": 6})");
  const auto bad = cli({"train", "--features", s(w.data / "features.capf"), "--vocab", s(w.vocab), "--captions",
                        s(w.data / "captions.txt"), "--split-train", s(w.data / "train.txt"), "--split-val",
                        s(w.data / "val.txt"), "--config", s(w.root / "typo.json"), "--seed", "1", "--out",
                        s(w.root / "typo_run")});
  CHECK(bad.code == 3);
  CHECK(bad.err.find("hiden") != std::string::npos);
}

TEST_CASE("caption then evaluate") {
  const auto& w = workspace();
  const auto caps = w.root / "caps.jsonl";
  auto r = cli({"caption", "--run", s(w.run), "--features", s(w.data / "features.capf"), "--split",
                s(w.data / "val.txt"), "--out", s(caps)});
  REQUIRE(r.code == 0);
  std::istringstream lines(testutil::read_file(caps));
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) {
    const auto doc = nlohmann::json::parse(line);
    CHECK(doc.contains("image_id"));
    CHECK(doc.at("caption").is_string());
    CHECK(doc.at("log_prob").get<double>() <= 0.0);
    CHECK(doc.at("finished").is_boolean());
    ++n;
  }
  CHECK(n == 2);

  const auto beam = w.root / "beam.jsonl";
  r = cli({"caption", "--run", s(w.run), "--features", s(w.data / "features.capf"), "--split",
           s(w.data / "val.txt"), "--beam", "--out", s(beam)});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("beam 3") != std::string::npos);
  r = cli({"caption", "--run", s(w.run), "--features", s(w.data / "features.capf"), "--split",
           s(w.data / "val.txt"), "--beam", "2", "--out", s(beam)});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("beam 2") != std::string::npos);

  const auto report = w.root / "eval.json";
  r = cli({"evaluate", "--candidates", s(caps), "--captions", s(w.data / "captions.txt"), "--split",
           s(w.data / "val.txt"), "--run", s(w.run), "--out", s(report), "--csv", s(w.root / "eval.csv")});
  REQUIRE(r.code == 0);
  const auto doc = nlohmann::json::parse(testutil::read_file(report));
  CHECK(doc.at("n_instances") == 2);
  CHECK(doc.at("variant") == "baseline");
  CHECK(doc.at("bleu1").get<double>() >= 0.0);
  CHECK(testutil::read_file(w.root / "eval.csv").rfind("cnn_name,", 0) == 0);
}

TEST_CASE("references as candidates score 100") {
  const auto& w = workspace();
  std::istringstream captions(testutil::read_file(w.data / "captions.txt"));
  std::string line, jsonl;
  while (std::getline(captions, line)) {
    const auto tab = line.find('\t');
    const auto hash = line.find('#');
    if (line.compare(hash, 3, "#0\t") != 0) continue;
    jsonl += nlohmann::json{{"image_id", line.substr(0, hash)}, {"caption", line.substr(tab + 1)}}.dump() + "\n";
  }
  testutil::write_file(w.root / "refs.jsonl", jsonl);
  const auto r = cli({"evaluate", "--candidates", s(w.root / "refs.jsonl"), "--captions",
                      s(w.data / "captions.txt"), "--split", s(w.data / "val.txt"), "--cnn", "ResNet18", "--params",
                      "11689", "--out", s(w.root / "self.json")});
  REQUIRE(r.code == 0);
  const auto doc = nlohmann::json::parse(testutil::read_file(w.root / "self.json"));
  CHECK(doc.at("bleu1").get<double>() == doctest::Approx(100.0));
  CHECK(doc.at("rouge_l").get<double>() == doctest::Approx(100.0));
  CHECK(doc.at("parameter_count_thousands") == 11689);
}

TEST_CASE("errors map to exit codes and leave no output") {
  const auto& w = workspace();
  CHECK(cli({}).code == 2);
  CHECK(cli({"train", "--bogus"}).code == 2);
  CHECK(cli({"evaluate", "--out", "x"}).code == 2);
  CHECK(cli({"--help"}).code == 0);

  const auto empty_run = w.root / "no_ckpt";
  fs::create_directories(empty_run);
  fs::copy_file(w.run / "config.json", empty_run / "config.json", fs::copy_options::overwrite_existing);
  fs::copy_file(w.run / "vocab.json", empty_run / "vocab.json", fs::copy_options::overwrite_existing);
  const auto out = w.root / "never.jsonl";
  const auto r = cli({"caption", "--run", s(empty_run), "--features", s(w.data / "features.capf"), "--split",
                      s(w.data / "val.txt"), "--out", s(out)});
  CHECK(r.code == 3);
  CHECK_FALSE(r.err.empty());
  CHECK_FALSE(fs::exists(out));

  CHECK(cli({"caption", "--run", s(w.run), "--features", s(w.data / "features.capf"), "--split",
             s(w.data / "val.txt"), "--beam", "0", "--out", s(out)})
            .code == 2);
  testutil::write_file(w.root / "ghost.txt", "ghost.jpg\n");
  CHECK(cli({"caption", "--run", s(w.run), "--features", s(w.data / "features.capf"), "--split",
             s(w.root / "ghost.txt"), "--out", s(out)})
            .code == 3);
  CHECK_FALSE(fs::exists(out));

  const auto other = w.root / "other_data";
  REQUIRE(cli({"synth", "--out-dir", s(other), "--images", "4", "--dim", "3"}).code == 0);
  CHECK(cli({"caption", "--run", s(w.run), "--features", s(other / "features.capf"), "--split",
             s(other / "val.txt"), "--out", s(out)})
            .code == 3);
  CHECK(cli({"build-vocab", "--captions", s(w.root / "missing.txt"), "--out", s(w.root / "v.json")}).code == 3);
}

TEST_CASE("compare orders rows by encoder size") {
  const auto& w = workspace();
  const auto alex = w.root / "alexnet";
  const auto resnet = w.root / "resnet";
  copy_run(w.run, alex);
  copy_run(w.run, resnet);
  edit_report(alex, "AlexNet", 61101);
  edit_report(resnet, "ResNet18", 11689);
  const auto table = w.root / "table.md";
  REQUIRE(cli({"compare", "--runs", s(alex), s(resnet), "--out", s(table)}).code == 0);
  const auto md = testutil::read_file(table);
  CHECK(md.rfind("| CNN | Parameters (in thousands) | BLEU-1 |", 0) == 0);
  const auto r18 = md.find("| ResNet18 | 11689 |");
  const auto an = md.find("| AlexNet | 61101 |");
  REQUIRE(r18 != std::string::npos);
  REQUIRE(an != std::string::npos);
  CHECK(r18 < an);
  const auto csv = testutil::read_file(w.root / "table.csv");
  CHECK(csv.find("ResNet18,11689,") < csv.find("AlexNet,61101,"));
  CHECK_FALSE(fs::exists(w.root / "table.baseline.md"));

  REQUIRE(cli({"compare", "--runs", s(resnet), "--out", s(w.root / "single.md")}).code == 0);
  const auto single = testutil::read_file(w.root / "single.md");
  CHECK(std::count(single.begin(), single.end(), '\n') == 3);
}

TEST_CASE("compare splits mixed variants and rejects mixed data") {
  const auto& w = workspace();
  const auto att = w.root / "att";
  REQUIRE(w.train(att, "attention").code == 0);
  REQUIRE(cli({"compare", "--runs", s(w.run), s(att), "--out", s(w.root / "mixed.md")}).code == 0);
  CHECK(fs::exists(w.root / "mixed.baseline.md"));
  CHECK(fs::exists(w.root / "mixed.attention.md"));
  CHECK(fs::exists(w.root / "mixed.attention.csv"));
  const auto combined = testutil::read_file(w.root / "mixed.md");
  CHECK(combined.find("attention |") != std::string::npos);
  CHECK(combined.find("baseline |") != std::string::npos);

  const auto odd = w.root / "odd";
  copy_run(w.run, odd);
  auto doc = nlohmann::json::parse(testutil::read_file(odd / "report.json"));
  doc["dataset_hash"] = "0000000000000000";
  testutil::write_file(odd / "report.json", doc.dump());
  const auto r = cli({"compare", "--runs", s(w.run), s(odd), "--out", s(w.root / "bad.md")});
  CHECK(r.code == 3);
  CHECK_FALSE(fs::exists(w.root / "bad.md"));

  fs::remove(odd / "trainlog.csv");
  CHECK(cli({"compare", "--runs", s(odd), "--out", s(w.root / "bad.md")}).code == 3);
}
