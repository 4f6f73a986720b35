#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "bdb/experiments.hpp"
#include "cli.hpp"
#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "bdb");
  std::ostringstream out, err;
  const int code = bdb::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("bdb_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

const std::vector<std::string> kSmall = {"--set",          "data.train_ids=16",   "data.test_ids=10",
                                         "train.total_epochs=3", "train.warmup_epochs=1", "train.decay="};

Outcome small_train(const fs::path& out, std::vector<std::string> extra = {}) {
  std::vector<std::string> args{"train", "--out", out.string()};
  args.insert(args.end(), extra.begin(), extra.end());
  args.insert(args.end(), kSmall.begin(), kSmall.end());
  return run_cli(args);
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("gen-data is deterministic and validates its flags") {
    const fs::path dir = scratch("gen");
    const auto a = run_cli({"gen-data", "--out", (dir / "a.jsonl").string(), "--train-ids", "6", "--test-ids", "4"});
    const auto b = run_cli({"gen-data", "--out", (dir / "b.jsonl").string(), "--train-ids", "6", "--test-ids", "4"});
    CHECK(a.code == 0);
    CHECK(b.code == 0);
    CHECK(slurp(dir / "a.jsonl") == slurp(dir / "b.jsonl"));
    CHECK(a.out.find("train") != std::string::npos);

    const auto cams = run_cli({"gen-data", "--out", (dir / "c.jsonl").string(), "--cameras", "1"});
    CHECK(cams.code == 2);
    CHECK(cams.err.find("cameras") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "c.jsonl"));

    CHECK(run_cli({"gen-data", "--bogus"}).code == 2);
    CHECK(run_cli({"--help"}).code == 0);
    CHECK(run_cli({}).code == 2);
    CHECK(run_cli({"train", "--set", "masks.nope=1"}).code == 2);
    fs::remove_all(dir);
  }

  TEST_CASE("train writes its artifacts and eval reproduces the metrics") {
    const fs::path dir = scratch("train");
    const auto t = small_train(dir / "run");
    REQUIRE(t.code == 0);
    for (const char* f : {"checkpoint.json", "history.csv", "metrics.json"}) CHECK(fs::exists(dir / "run" / f));
    CHECK(lines(slurp(dir / "run" / "history.csv")).size() == 4);

    const std::string ckpt = (dir / "run" / "checkpoint.json").string();
    const auto e1 = run_cli({"eval", "--checkpoint", ckpt, "--max-rank", "20"});
    const auto e2 = run_cli({"eval", "--checkpoint", ckpt, "--max-rank", "20"});
    REQUIRE(e1.code == 0);
    CHECK(e1.out == e2.out);
    const auto m = nlohmann::json::parse(e1.out);
    const auto trained = nlohmann::json::parse(slurp(dir / "run" / "metrics.json"));
    CHECK(m.at("rank1") == trained.at("rank1"));
    CHECK(m.at("map") == trained.at("map"));
    CHECK(m.at("cmc").size() == 20);

    const auto saved = run_cli({"eval", "--checkpoint", ckpt, "--max-rank", "20", "--save-embeddings",
                                (dir / "emb").string()});
    REQUIRE(saved.code == 0);
    const auto from_files =
        run_cli({"eval", "--query-embeddings", (dir / "emb" / "query.emb").string(), "--gallery-embeddings",
                 (dir / "emb" / "gallery.emb").string(), "--max-rank", "20"});
    REQUIRE(from_files.code == 0);
    CHECK(nlohmann::json::parse(from_files.out).at("map") == m.at("map"));

    const auto retrieval = run_cli({"eval", "--checkpoint", ckpt, "--protocol", "retrieval", "--ks", "1,2,4,8"});
    REQUIRE(retrieval.code == 0);
    CHECK(nlohmann::json::parse(retrieval.out).at("recall_at").size() == 4);
    CHECK(run_cli({"eval", "--checkpoint", ckpt, "--protocol", "retrieval", "--ks", "0"}).code == 2);
    CHECK(run_cli({"eval", "--protocol", "other"}).code == 2);
    CHECK(run_cli({"eval"}).code == 2);
    CHECK(run_cli({"eval", "--checkpoint", (dir / "missing.json").string()}).code == 1);
    fs::remove_all(dir);
  }

  TEST_CASE("two identical train runs are byte-identical") {
    const fs::path dir = scratch("repeat");
    const std::vector<std::string> files{"checkpoint.json", "history.csv", "metrics.json"};
    REQUIRE(small_train(dir / "run", {"--drop", "drop_block"}).code == 0);
    std::vector<std::string> first;
    for (const auto& f : files) first.push_back(slurp(dir / "run" / f));
    REQUIRE(small_train(dir / "run", {"--drop", "drop_block"}).code == 0);
    for (std::size_t i = 0; i < files.size(); ++i) {
      CAPTURE(files[i]);
      CHECK(slurp(dir / "run" / files[i]) == first[i]);
    }
    REQUIRE(small_train(dir / "run", {"--drop", "drop_block", "--seed", "2"}).code == 0);
    CHECK(slurp(dir / "run" / "checkpoint.json") != first[0]);
    fs::remove_all(dir);
  }

  TEST_CASE("ablate emits one row per value and is reproducible") {
    const fs::path dir = scratch("ablate");
    std::vector<std::string> args{"ablate", "--sweep", "ratio", "--values", "0.1,0.2,0.3,0.5", "--seeds", "2"};
    args.insert(args.end(), kSmall.begin(), kSmall.end());
    auto first = args, second = args;
    first.insert(first.end(), {"--out", (dir / "a.csv").string()});
    second.insert(second.end(), {"--out", (dir / "b.csv").string()});
    REQUIRE(run_cli(first).code == 0);
    REQUIRE(run_cli(second).code == 0);
    const std::string csv = slurp(dir / "a.csv");
    CHECK(csv == slurp(dir / "b.csv"));
    CHECK(lines(csv).size() == 5);
    CHECK(run_cli({"ablate", "--sweep", "colors"}).code == 2);
    fs::remove_all(dir);
  }

  TEST_CASE("export-activation writes bounded entropies consistent with the grids") {
    const fs::path dir = scratch("act");
    REQUIRE(small_train(dir / "run").code == 0);
    const auto r = run_cli({"export-activation", "--checkpoint", (dir / "run" / "checkpoint.json").string(), "--out",
                            (dir / "act").string()});
    REQUIRE(r.code == 0);
    const auto summary = nlohmann::json::parse(slurp(dir / "act" / "summary.json"));
    CHECK(summary.at("source") == "drop");
    const double max_h = std::log(summary.at("height").get<double>() * summary.at("width").get<double>());
    CHECK(summary.at("max_entropy").get<double>() == doctest::Approx(max_h));

    const auto rows = lines(slurp(dir / "act" / "entropy.csv"));
    REQUIRE(rows.size() == summary.at("samples").get<std::size_t>() + 1);
    double total = 0.0;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const auto comma = rows[i].find(',');
      const std::string id = rows[i].substr(0, comma);
      const double h = std::stod(rows[i].substr(comma + 1));
      CHECK(h >= 0.0);
      CHECK(h <= max_h + 1e-12);
      total += h;

      std::vector<double> grid;
      for (const auto& line : lines(slurp(dir / "act" / "maps" / (id + ".csv")))) {
        std::istringstream cells(line);
        for (std::string c; std::getline(cells, c, ',');) grid.push_back(std::stod(c));
      }
      double s = 0.0, recomputed = 0.0;
      for (double v : grid) s += v;
      for (double v : grid)
        if (v > 0) recomputed -= v / s * std::log(v / s);
      CHECK(recomputed == doctest::Approx(h).epsilon(1e-9));
    }
    CHECK(total / static_cast<double>(rows.size() - 1) ==
          doctest::Approx(summary.at("mean_entropy").get<double>()).epsilon(1e-12));

    CHECK(run_cli({"export-activation", "--checkpoint", (dir / "run" / "checkpoint.json").string(), "--split",
                   "elsewhere", "--out", (dir / "x").string()})
              .code == 2);
    fs::remove_all(dir);
  }

  TEST_CASE("a one-hot activation exports zero entropy") {
    const fs::path dir = scratch("onehot");
    bdb::ActivationExport a;
    a.sample_ids = {"hot"};
    a.maps.batch = 1;
    a.maps.height = 2;
    a.maps.width = 3;
    a.maps.energy = {0, 0, 1, 0, 0, 0};
    a.maps.entropy = {0.0};
    bdb::write_activation(dir, a);
    CHECK(lines(slurp(dir / "entropy.csv")) == std::vector<std::string>{"sample_id,entropy", "hot,0"});
    CHECK(lines(slurp(dir / "maps" / "hot.csv")) == std::vector<std::string>{"0,0,1", "0,0,0"});
    fs::remove_all(dir);
  }

  TEST_CASE("keys lists every setting") {
    const auto k = run_cli({"keys"});
    CHECK(k.code == 0);
    CHECK(k.out.find("masks.r_h") != std::string::npos);
    CHECK(k.out.find("train.decay") != std::string::npos);
  }
}
