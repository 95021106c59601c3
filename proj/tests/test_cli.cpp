#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int run(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(DEEPEDIT_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(WIFEXITED(status));
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
  testutil::TempDir dir;
  const fs::path log = dir.path() / "log.txt";
  CHECK(run("", log) == 2);
  CHECK(run("frobnicate", log) == 2);
  CHECK(run("train --data x", log) == 2);
  CHECK(run("gen-data --out " + (dir.path() / "d").string() + " --shape 8,8", log) == 2);
  CHECK(run("eval --data x --model y --budgets 5,1", log) == 2);
  CHECK(slurp(log).find("budget") != std::string::npos);
  CHECK(run("rank --data x --model y --key loudest", log) == 2);
  CHECK(run("rank --data x --model y --passes 0", log) == 2);
  CHECK(run("--help", log) == 0);
}

TEST_CASE("subcommand help lists flags with defaults") {
  testutil::TempDir dir;
  const fs::path log = dir.path() / "log.txt";
  REQUIRE(run("eval --help", log) == 0);
  const std::string text = slurp(log);
  for (const char* flag : {"--data", "--model", "--budgets", "--reps", "--seed", "--out"}) {
    CHECK(text.find(flag) != std::string::npos);
  }
  CHECK(text.find("[3]") != std::string::npos);
  for (const char* sub : {"gen-data", "train", "rank", "serve"}) CHECK(run(std::string(sub) + " --help", log) == 0);
}

TEST_CASE("gen-data warns about shapes the model depth cannot process") {
  testutil::TempDir dir;
  const fs::path log = dir.path() / "log.txt";
  REQUIRE(run("gen-data --out " + (dir.path() / "d").string() + " --cases 1 --shape 30,32,32 --levels 3", log) == 0);
  CHECK(slurp(log).find("30 is not divisible by 4") != std::string::npos);
}

TEST_CASE("runtime errors exit with 1") {
  testutil::TempDir dir;
  const fs::path log = dir.path() / "log.txt";
  CHECK(run("eval --data " + (dir.path() / "missing").string() + " --model " + (dir.path() / "m.bin").string(), log) ==
        1);
  std::ofstream(dir.path() / "bad.json") << R"({"p_clickfree": 2})";
  CHECK(run("train --data " + dir.path().string() + " --config " + (dir.path() / "bad.json").string() + " --out " +
                (dir.path() / "m.bin").string(),
            log) == 1);
  CHECK(slurp(log).find("p_clickfree") != std::string::npos);
}

TEST_CASE("gen-data, train, eval and rank are reproducible end to end") {
  testutil::TempDir dir;
  const fs::path d = dir.path();
  const fs::path log = d / "log.txt";
  const std::string data = (d / "data").string();
  REQUIRE(run("gen-data --out " + data + " --cases 4 --unlabeled 2 --shape 8,8,8 --levels 2 --seed 5", log) == 0);
  CHECK(slurp(log).find("gen-data seed: 5") != std::string::npos);
  const json manifest = json::parse(slurp(d / "data" / "manifest.json"));
  CHECK(manifest.at("cases").size() == 4);
  CHECK(fs::exists(d / "data" / "labels" / "case_001.lab"));
  CHECK_FALSE(fs::exists(d / "data" / "labels" / "case_002.lab"));

  REQUIRE(run("gen-data --out " + (d / "again").string() + " --cases 4 --unlabeled 2 --shape 8,8,8 --levels 2 --seed 5",
              log) == 0);
  CHECK(slurp(d / "data" / "images" / "case_003.vol") == slurp(d / "again" / "images" / "case_003.vol"));

  std::ofstream(d / "cfg.json") << R"({"base_width": 2, "levels": 2, "epochs": 2, "p_clickfree": 0.5})";
  const std::string train = "train --data " + data + " --config " + (d / "cfg.json").string() + " --out ";
  REQUIRE(run(train + (d / "m1.bin").string(), log) == 0);
  CHECK(slurp(log).find("epoch 2/2") != std::string::npos);
  REQUIRE(run(train + (d / "m2.bin").string(), log) == 0);
  CHECK(slurp(d / "m1.report.json") == slurp(d / "m2.report.json"));
  CHECK(slurp(d / "m1.bin") == slurp(d / "m2.bin"));
  REQUIRE(run(train + (d / "m3.bin").string() + " --seed 9", log) == 0);
  CHECK(slurp(log).find("train seed: 9") != std::string::npos);
  CHECK(slurp(d / "m1.report.json") != slurp(d / "m3.report.json"));

  const std::string eval = "eval --data " + data + " --model " + (d / "m1.bin").string() + " --budgets 0,1,3 --out ";
  REQUIRE(run(eval + (d / "r1.json").string(), log) == 0);
  REQUIRE(run(eval + (d / "r2.json").string(), log) == 0);
  CHECK(slurp(d / "r1.json") == slurp(d / "r2.json"));
  CHECK(slurp(d / "r1.csv") == slurp(d / "r2.csv"));
  CHECK(json::parse(slurp(d / "r1.json")).at("grand_mean").contains("3"));

  const std::string rank = "rank --data " + data + " --model " + (d / "m1.bin").string() + " --passes 3 --out ";
  REQUIRE(run(rank + (d / "k.json").string(), log) == 0);
  const json ranking = json::parse(slurp(d / "k.json"));
  REQUIRE(ranking.at("scores").size() == 2);
  CHECK(ranking.at("scores")[0].at("combined").get<double>() >= ranking.at("scores")[1].at("combined").get<double>());
  REQUIRE(run(rank + (d / "k2.json").string(), log) == 0);
  CHECK(slurp(d / "k.json") == slurp(d / "k2.json"));
}
