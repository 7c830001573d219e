#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <sys/wait.h>

#include "json.hpp"

#include "cdne/checkpoint.hpp"
#include "cdne/data.hpp"
#include "cdne/mil.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string output;  // stdout and stderr interleaved
};

RunResult run_cli(const std::string& args, const fs::path& cwd) {
  const std::string cmd =
      "cd '" + cwd.string() + "' && '" + CDNE_CLI_PATH + "' " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  RunResult result;
  char buf[512];
  while (std::fgets(buf, sizeof(buf), pipe) != nullptr) result.output += buf;
  const int status = pclose(pipe);
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return result;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// Everything after the first line; used to compare CSVs modulo the timestamp.
std::string body_after_first_line(const fs::path& p) {
  const std::string all = slurp(p);
  const std::size_t nl = all.find('\n');
  return nl == std::string::npos ? std::string() : all.substr(nl + 1);
}

void write_config(const fs::path& path, bool cdne_enabled, std::size_t epochs = 4) {
  json cfg{{"seed", 3},
           {"epochs", epochs},
           {"folds", 2},
           {"learning_rate", 1e-3},
           {"model",
            {{"hidden_dim", 12}, {"embed_dim", 6}, {"attention_dim", 4}, {"projection_dim", 5}}},
           {"cdne", {{"enabled", cdne_enabled}}},
           {"dataset", {{"manifest", "data/manifest.json"}}}};
  std::ofstream(path) << cfg.dump(2);
}

const std::string kGenerate =
    "generate --out data --bags-per-class 5 --dim 6 --k-min 3 --k-max 6 "
    "--separation 3 --seed 11";

}  // namespace

TEST_CASE("generate writes a loadable dataset deterministically") {
  const fs::path dir = fresh_dir("cdne_cli_generate");
  RunResult first = run_cli(kGenerate, dir);
  INFO(first.output);
  CHECK(first.exit_code == 0);
  CHECK(first.output.find("10 bags") != std::string::npos);

  const cdne::Dataset data = cdne::load_dataset(dir / "data" / "manifest.json");
  CHECK(data.bags.size() == 10);
  CHECK(data.feature_dim == 6);

  RunResult second = run_cli(
      "generate --out data2 --bags-per-class 5 --dim 6 --k-min 3 --k-max 6 "
      "--separation 3 --seed 11",
      dir);
  CHECK(second.exit_code == 0);
  CHECK(slurp(dir / "data" / "manifest.json") == slurp(dir / "data2" / "manifest.json"));
  CHECK(slurp(dir / "data" / "features" / "c0-b0000.bin") ==
        slurp(dir / "data2" / "features" / "c0-b0000.bin"));
  fs::remove_all(dir);
}

TEST_CASE("usage and validation failures exit with code 2") {
  const fs::path dir = fresh_dir("cdne_cli_usage");
  CHECK(run_cli("", dir).exit_code == 2);
  CHECK(run_cli("bogus", dir).exit_code == 2);
  CHECK(run_cli("cv", dir).exit_code == 2);  // missing required --config
  CHECK(run_cli("--help", dir).exit_code == 0);
  CHECK(run_cli("generate --out x --witness-ratio 0", dir).exit_code == 2);
  CHECK(run_cli("ablate --config c.json --axis nonsense --out t.csv", dir).exit_code == 2);
  fs::remove_all(dir);
}

TEST_CASE("config problems are reported with the field name") {
  const fs::path dir = fresh_dir("cdne_cli_config");
  REQUIRE(run_cli(kGenerate, dir).exit_code == 0);

  std::ofstream(dir / "typo.json")
      << R"({"cdne": {"lambda_negative": 1}, "dataset": {"manifest": "data/manifest.json"}})";
  RunResult typo = run_cli("cv --config typo.json --out cvout", dir);
  CHECK(typo.exit_code == 2);
  CHECK(typo.output.find("cdne.lambda_negative") != std::string::npos);

  RunResult missing = run_cli("cv --config nowhere.json --out cvout", dir);
  CHECK(missing.exit_code == 1);
  fs::remove_all(dir);
}

TEST_CASE("train writes a log, checkpoint, and result") {
  const fs::path dir = fresh_dir("cdne_cli_train");
  REQUIRE(run_cli(kGenerate, dir).exit_code == 0);
  write_config(dir / "run.json", true);

  RunResult train = run_cli("train --config run.json --out fold0 --fold 0", dir);
  INFO(train.output);
  CHECK(train.exit_code == 0);
  CHECK(fs::exists(dir / "fold0" / "train_log.csv"));
  CHECK(fs::exists(dir / "fold0" / "result.json"));

  const cdne::Checkpoint ckpt = cdne::load_checkpoint(dir / "fold0" / "model.ckpt");
  CHECK(ckpt.model.input_dim == 6);
  CHECK(ckpt.head.has_value());

  json result = json::parse(slurp(dir / "fold0" / "result.json"));
  CHECK(result.at("fold") == 0);
  CHECK(result.at("val_auroc").is_number());

  CHECK(run_cli("train --config run.json --out foldx --fold 9", dir).exit_code == 2);
  fs::remove_all(dir);
}

TEST_CASE("cv outputs are reproducible and internally consistent") {
  const fs::path dir = fresh_dir("cdne_cli_cv");
  REQUIRE(run_cli(kGenerate, dir).exit_code == 0);
  write_config(dir / "run.json", true);

  REQUIRE(run_cli("cv --config run.json --out a", dir).exit_code == 0);
  REQUIRE(run_cli("cv --config run.json --out b --jobs 2", dir).exit_code == 0);

  CHECK(slurp(dir / "a" / "aggregate_cdne.json") == slurp(dir / "b" / "aggregate_cdne.json"));
  for (const char* f : {"fold0_cdne.csv", "fold1_cdne.csv"})
    CHECK(body_after_first_line(dir / "a" / f) == body_after_first_line(dir / "b" / f));

  const json agg = json::parse(slurp(dir / "a" / "aggregate_cdne.json"));
  const auto folds = agg.at("folds");
  REQUIRE(folds.size() == 2);
  const double mean = 0.5 * (folds[0].at("val_auroc").get<double>() +
                             folds[1].at("val_auroc").get<double>());
  CHECK(agg.at("mean_auroc").get<double>() == Catch::Approx(mean).margin(1e-12));
  CHECK(!fs::exists(dir / "a" / "delta.csv"));

  write_config(dir / "base.json", false);
  REQUIRE(run_cli("cv --config base.json --out a", dir).exit_code == 0);
  REQUIRE(fs::exists(dir / "a" / "delta.csv"));
  const std::string delta = slurp(dir / "a" / "delta.csv");
  CHECK(delta.rfind("metric,baseline,cdne,delta\n", 0) == 0);
  CHECK(delta.find("mean_auroc,") != std::string::npos);
  CHECK(delta.find("mean_accuracy,") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("eval checks checkpoint compatibility") {
  const fs::path dir = fresh_dir("cdne_cli_eval");
  REQUIRE(run_cli(kGenerate, dir).exit_code == 0);
  write_config(dir / "run.json", true);
  REQUIRE(run_cli("train --config run.json --out fold0", dir).exit_code == 0);

  RunResult eval = run_cli("eval --config run.json --checkpoint fold0/model.ckpt --out m.json",
                           dir);
  INFO(eval.output);
  CHECK(eval.exit_code == 0);
  const json metrics = json::parse(slurp(dir / "m.json"));
  CHECK(metrics.at("auroc").is_number());
  CHECK(metrics.at("per_class_mean_std").size() == 2);

  // A checkpoint trained on a different input width is refused up front.
  std::mt19937_64 rng(1);
  cdne::Checkpoint other;
  other.model =
      cdne::MilModel::init(cdne::AttentionVariant::attention, 9, 4, 3, 2, 2, rng);
  cdne::save_checkpoint(other, dir / "other.ckpt");
  RunResult mismatch = run_cli("eval --config run.json --checkpoint other.ckpt", dir);
  CHECK(mismatch.exit_code == 2);
  CHECK(mismatch.output.find("input_dim") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("diagnose exports summary, attention maps, and projections") {
  const fs::path dir = fresh_dir("cdne_cli_diag");
  REQUIRE(run_cli(kGenerate, dir).exit_code == 0);
  write_config(dir / "run.json", true);
  REQUIRE(run_cli("train --config run.json --out fold0", dir).exit_code == 0);

  RunResult diag = run_cli(
      "diagnose --config run.json --checkpoint fold0/model.ckpt --out diag", dir);
  INFO(diag.output);
  CHECK(diag.exit_code == 0);

  const json summary = json::parse(slurp(dir / "diag" / "summary.json"));
  CHECK(summary.size() == 4);
  CHECK(summary.contains("per_class_mean_std"));
  CHECK(summary.contains("negative_center_dispersion"));
  CHECK(summary.contains("auroc"));
  CHECK(summary.contains("accuracy"));

  std::size_t csvs = 0;
  for (const auto& entry : fs::directory_iterator(dir / "diag" / "attention"))
    if (entry.path().extension() == ".csv") ++csvs;
  CHECK(csvs == 10);  // every generated bag has coordinates

  const std::string proj = slurp(dir / "diag" / "centers_projection.csv");
  CHECK(proj.rfind("id,label,axis0,axis1\n", 0) == 0);
  CHECK(std::count(proj.begin(), proj.end(), '\n') == 11);
  fs::remove_all(dir);
}

TEST_CASE("ablate writes one row per value") {
  const fs::path dir = fresh_dir("cdne_cli_ablate");
  REQUIRE(run_cli(kGenerate, dir).exit_code == 0);
  write_config(dir / "run.json", true, 2);

  RunResult single = run_cli(
      "ablate --config run.json --axis lambda_pos --values 3 --out single.csv", dir);
  INFO(single.output);
  CHECK(single.exit_code == 0);
  const std::string table = slurp(dir / "single.csv");
  CHECK(table.rfind("value,mean_auroc,mean_accuracy\n", 0) == 0);
  CHECK(std::count(table.begin(), table.end(), '\n') == 2);

  CHECK(run_cli("ablate --config run.json --axis thr --values '' --out t.csv", dir)
            .exit_code == 2);
  CHECK(run_cli("ablate --config run.json --axis thr --values -1 --out t.csv", dir)
            .exit_code == 2);
  fs::remove_all(dir);
}

TEST_CASE("gradcheck passes clean and fails loudly when sabotaged") {
  const fs::path dir = fresh_dir("cdne_cli_gradcheck");
  RunResult clean = run_cli("gradcheck", dir);
  INFO(clean.output);
  CHECK(clean.exit_code == 0);
  CHECK(clean.output.find("max_rel_err") != std::string::npos);

  RunResult faulty = run_cli("gradcheck --inject-fault sqrt", dir);
  CHECK(faulty.exit_code == 1);
  CHECK(faulty.output.find("FAIL") != std::string::npos);
  CHECK(faulty.output.find("sqrt") != std::string::npos);
  fs::remove_all(dir);
}
