#include <gtest/gtest.h>
#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <string>

#include "atlas_match/imagekit.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using atlas_match::read_file_bytes;
using atlas_match::write_file_bytes;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "atlas_match_cli_test";

int run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " \"" + std::string(ATLAS_MATCH_CLI) + "\" " + args + " >" +
                          (kRoot / "stdout.txt").string() + " 2>" + (kRoot / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& f : fs::recursive_directory_iterator(dir)) {
    if (f.is_regular_file()) files[fs::relative(f.path(), dir).string()] = read_file_bytes(f.path());
  }
  return files;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
    ASSERT_EQ(run("gen-data --plates 12 --size 48 --seed 3 --counts 6,4,0,3 --out " + data().string()), 0);
  }

  static fs::path data() { return kRoot / "data"; }
  static std::string manifest() { return (data() / "manifest.tsv").string(); }

  static std::string small_train(const fs::path& out) {
    return "train --manifest " + manifest() + " --out " + out.string() +
           " --input-size 64 --max-iters 6 --validate-every 3 --lr 1e-3 --no-timing";
  }
};

}  // namespace

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("gen-data"), 2);
  EXPECT_EQ(run("gen-data --out x --counts 1,2"), 2);
  EXPECT_EQ(run("gen-data --out x --plates 1"), 2);
  EXPECT_EQ(run("no-such-command"), 2);
  EXPECT_EQ(run(small_train(kRoot / "bad") + " --loss arcface"), 2);
  EXPECT_EQ(run(small_train(kRoot / "bad") + " --batch 20"), 2);
  EXPECT_EQ(run(small_train(kRoot / "bad") + " --input-size 96"), 2);
  EXPECT_EQ(run("train --out x --manifest /nonexistent/manifest.tsv"), 2);
  EXPECT_EQ(run("evaluate --manifest " + manifest()), 2);
  const std::string plate = (data() / "plates" / "plate_000.pgm").string();
  EXPECT_EQ(run("register --fixed " + plate + " --moving " + plate + " --mode regress"), 2);
  EXPECT_EQ(run("register --fixed " + plate + " --moving " + plate + " --mode sideways"), 2);
  EXPECT_EQ(run("gen-data --out x", "ATLAS_MATCH_SEED=abc"), 2);
}

TEST_F(Cli, ConfigFileValidation) {
  const auto bad = kRoot / "bad_config.json";
  write_file_bytes(bad, R"({"model": {"input_size": 64, "dropout": 0.5}})");
  EXPECT_EQ(run("train --config " + bad.string() + " --manifest " + manifest() + " --out x"), 2);
  write_file_bytes(bad, R"({"training": {"max_iterations": "many"}})");
  EXPECT_EQ(run("train --config " + bad.string() + " --manifest " + manifest() + " --out x"), 2);
  write_file_bytes(bad, "{not json");
  EXPECT_EQ(run("train --config " + bad.string()), 2);
}

TEST_F(Cli, GenDataIsDeterministic) {
  const auto a = kRoot / "gen_a", b = kRoot / "gen_b";
  ASSERT_EQ(run("gen-data --plates 6 --size 32 --seed 11 --counts 3,1,1,2 --out " + a.string()), 0);
  ASSERT_EQ(run("gen-data --plates 6 --size 32 --seed 11 --counts 3,1,1,2 --out " + b.string()), 0);
  const auto sa = snapshot(a);
  EXPECT_EQ(sa.size(), 6u + 7u + 1u);
  EXPECT_EQ(sa, snapshot(b));
  // The environment seed stands in for a missing --seed.
  const auto c = kRoot / "gen_c";
  ASSERT_EQ(run("gen-data --plates 6 --size 32 --counts 3,1,1,2 --out " + c.string(), "ATLAS_MATCH_SEED=11"), 0);
  EXPECT_EQ(sa, snapshot(c));
  const auto d = kRoot / "gen_d";
  ASSERT_EQ(run("gen-data --plates 6 --size 32 --seed 12 --counts 3,1,1,2 --out " + d.string()), 0);
  EXPECT_NE(sa, snapshot(d));
}

TEST_F(Cli, TrainRerunIsByteIdentical) {
  const auto out = kRoot / "train_det";
  ASSERT_EQ(run(small_train(out)), 0);
  const auto first = snapshot(out);
  ASSERT_TRUE(first.count("checkpoint.amck"));
  ASSERT_TRUE(first.count("train_log.csv"));
  ASSERT_TRUE(first.count("train_report.json"));
  fs::remove_all(out);
  ASSERT_EQ(run(small_train(out)), 0);
  EXPECT_EQ(first, snapshot(out));
  const auto report = nlohmann::json::parse(first.at("train_report.json"));
  EXPECT_FALSE(report.contains("seconds"));
  EXPECT_EQ(report.at("iterations_run").get<int>(), 6);
  EXPECT_TRUE(report.at("config").at("training").at("final_learning_rate").is_null());
  EXPECT_EQ(first.at("train_log.csv").substr(0, 24), "iteration,loss,val1_mae\n");
}

TEST_F(Cli, FlagsOverrideEnvironmentOverrideConfig) {
  const auto cfg = kRoot / "run.json";
  write_file_bytes(cfg, R"({"model": {"input_size": 64}, "training": {"seed": 1, "max_iterations": 3, "validate_every": 3}})");
  const auto base = "train --config " + cfg.string() + " --manifest " + manifest() + " --no-timing --out ";
  ASSERT_EQ(run(base + (kRoot / "seed_cfg").string()), 0);
  ASSERT_EQ(run(base + (kRoot / "seed_env").string(), "ATLAS_MATCH_SEED=5"), 0);
  ASSERT_EQ(run(base + (kRoot / "seed_flag").string() + " --seed 1", "ATLAS_MATCH_SEED=5"), 0);
  auto seed_of = [](const std::string& dir) {
    const auto r = nlohmann::json::parse(read_file_bytes(kRoot / dir / "train_report.json"));
    return r.at("config").at("training").at("seed").get<int>();
  };
  EXPECT_EQ(seed_of("seed_cfg"), 1);
  EXPECT_EQ(seed_of("seed_env"), 5);
  EXPECT_EQ(seed_of("seed_flag"), 1);
  ASSERT_EQ(run(base + (kRoot / "decay").string() + " --final-lr 1e-5"), 0);
  const auto decay = nlohmann::json::parse(read_file_bytes(kRoot / "decay" / "train_report.json"));
  EXPECT_EQ(decay.at("config").at("training").at("final_learning_rate").get<double>(), 1e-5);
  EXPECT_EQ(read_file_bytes(kRoot / "seed_cfg" / "checkpoint.amck"), read_file_bytes(kRoot / "seed_flag" / "checkpoint.amck"));
  EXPECT_NE(read_file_bytes(kRoot / "seed_cfg" / "checkpoint.amck"), read_file_bytes(kRoot / "seed_env" / "checkpoint.amck"));
}

TEST_F(Cli, EvaluateWritesReport) {
  const auto tr = kRoot / "eval_model";
  ASSERT_EQ(run(small_train(tr)), 0);
  const auto ck = (tr / "checkpoint.amck").string();
  const auto out = kRoot / "eval_out";
  fs::create_directories(out);
  ASSERT_EQ(run("evaluate --manifest " + manifest() + " --checkpoint " + ck + " --out " + out.string()), 0);
  const auto r = nlohmann::json::parse(read_file_bytes(out / "eval_report.json"));
  EXPECT_EQ(r.at("method"), "siamese");
  EXPECT_EQ(r.at("report").at("n").get<int>(), 3);
  EXPECT_TRUE(r.at("report").contains("inference_seconds"));
  ASSERT_EQ(r.at("rankings").size(), 3u);
  EXPECT_EQ(r.at("rankings")[0].at("head").size(), 10u);

  ASSERT_EQ(run("evaluate --split val1 --baseline mi --resolutions 1 --iterations 5 --samples 200 --no-timing --manifest " +
                manifest()),
            0);
  const auto mi = nlohmann::json::parse(read_file_bytes(kRoot / "stdout.txt"));
  EXPECT_EQ(mi.at("method"), "mi");
  EXPECT_EQ(mi.at("report").at("n").get<int>(), 4);
  EXPECT_FALSE(mi.at("report").contains("inference_seconds"));

  const auto broken = kRoot / "broken.amck";
  write_file_bytes(broken, "AMCK\x01");
  EXPECT_EQ(run("evaluate --manifest " + manifest() + " --checkpoint " + broken.string()), 1);
}

TEST_F(Cli, RegisterAndSearchArtifacts) {
  const std::string fixed = (data() / "plates" / "plate_001.pgm").string();
  const std::string moving = (data() / "plates" / "plate_002.pgm").string();
  const auto out = kRoot / "reg";
  ASSERT_EQ(run("register --fixed " + fixed + " --moving " + moving +
                " --resolutions 2 --iterations 20 --samples 500 --out " + out.string()),
            0);
  const auto files = snapshot(out);
  EXPECT_TRUE(files.count("moved.pgm"));
  EXPECT_TRUE(files.count("register_report.json"));
  ASSERT_TRUE(files.count("trace.csv"));
  EXPECT_EQ(std::count(files.at("trace.csv").begin(), files.at("trace.csv").end(), '\n'), 41);

  const auto sout = kRoot / "search";
  ASSERT_EQ(run("search-hparams --fixed " + fixed + " --moving " + moving +
                " --trials 2 --samples 200 --no-timing --out " + sout.string()),
            0);
  const auto lines = read_file_bytes(sout / "trials.jsonl");
  EXPECT_EQ(std::count(lines.begin(), lines.end(), '\n'), 2);
  const auto rep = nlohmann::json::parse(read_file_bytes(sout / "register_report.json"));
  EXPECT_EQ(rep.at("mode"), "search");
  EXPECT_FALSE(rep.at("result").contains("seconds"));
}
