#include "osr/experiment.hpp"

#include <catch2/catch_amalgamated.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "fd_check.hpp"

using osr::ExperimentConfig;
using osr::Method;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(OSR_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

ExperimentConfig tiny_config() {
  ExperimentConfig cfg;
  cfg.dataset.synthetic.num_classes = 4;
  cfg.dataset.synthetic.dim = 6;
  cfg.dataset.synthetic.samples_per_class = 30;
  cfg.dataset.synthetic.separation = 8.0;
  cfg.num_known = 2;
  cfg.split_seeds = {1};
  cfg.runs_per_split = 1;
  cfg.model.hidden_dims = {8};
  cfg.model.feature_dim = 4;
  cfg.train.epochs = 4;
  cfg.train.batch_size = 16;
  return cfg;
}

}  // namespace

TEST_CASE("experiment config round-trips through json") {
  ExperimentConfig cfg = tiny_config();
  cfg.methods = {Method::kCbc, Method::kMls};
  cfg.gamma = 0.85;
  cfg.output_path = "x.json";
  const std::string once = osr::config_to_json(cfg).dump();
  ExperimentConfig back = osr::config_from_json(nlohmann::json::parse(once));
  REQUIRE(osr::config_to_json(back).dump() == once);

  ExperimentConfig files = cfg;
  files.dataset.use_synthetic = false;
  files.dataset.train_file = "a.csv";
  files.dataset.test_file = "b.csv";
  const std::string twice = osr::config_to_json(files).dump();
  REQUIRE(osr::config_to_json(osr::config_from_json(
                                  nlohmann::json::parse(twice)))
              .dump() == twice);
}

TEST_CASE("config validation") {
  ExperimentConfig cfg = tiny_config();
  cfg.split_seeds.clear();
  REQUIRE_THROWS_AS(osr::run_protocol(cfg), std::invalid_argument);
  cfg = tiny_config();
  cfg.methods.clear();
  REQUIRE_THROWS_AS(osr::run_protocol(cfg), std::invalid_argument);
  cfg = tiny_config();
  cfg.gamma = 1.0;
  REQUIRE_THROWS_AS(osr::run_protocol(cfg), std::invalid_argument);
}

TEST_CASE("threshold calibration picks a low known quantile") {
  // a model with frozen weights scores a hand-built validation set
  osr::ModelConfig mcfg;
  mcfg.input_dim = 2;
  mcfg.hidden_dims = {};
  mcfg.feature_dim = 2;
  mcfg.num_known = 2;
  osr::ModelParams params = osr::init_model(mcfg);
  // identity extractor, closed head = identity, cbc heads read coordinates
  auto w = params.extractor[0].weight.mutable_values();
  w[0] = 1.0; w[1] = 0.0; w[2] = 0.0; w[3] = 1.0;
  auto cw = params.closed_head.weight.mutable_values();
  cw[0] = 1.0; cw[1] = 0.0; cw[2] = 0.0; cw[3] = 1.0;

  osr::LabeledSet val;
  val.dim = 2;
  val.num_classes = 2;
  for (int i = 0; i < 20; ++i) {
    const double x[2] = {static_cast<double>(i + 1), 0.0};
    val.push_row(x, 0);
  }
  osr::Calibration c = osr::calibrate_thresholds(params, val, 0.05);
  // MLS scores are 1..20; the 5th-percentile nearest rank is the lowest
  REQUIRE(c.mls_threshold == 1.0);
  osr::Calibration c50 = osr::calibrate_thresholds(params, val, 0.5);
  REQUIRE(c50.mls_threshold == 10.0);
}

TEST_CASE("protocol produces one run per split, run, and method") {
  ExperimentConfig cfg = tiny_config();
  cfg.split_seeds = {1, 2};
  cfg.runs_per_split = 2;
  osr::ProtocolReport report = osr::run_protocol(cfg);
  REQUIRE(report.runs.size() == 2 * 2 * cfg.methods.size());
  REQUIRE(report.aggregate.size() == cfg.methods.size());
  for (const auto& a : report.aggregate) REQUIRE(a.closed_acc.count == 4);
  for (const auto& r : report.runs) {
    REQUIRE(r.auroc.has_value());
    REQUIRE(*r.auroc >= 0.0);
    REQUIRE(*r.auroc <= 1.0);
    REQUIRE(r.n_known_test > 0);
    REQUIRE(r.n_unknown_test > 0);
  }
}

TEST_CASE("protocol report is byte-identical across reruns") {
  ExperimentConfig cfg = tiny_config();
  const std::string a = osr::report_to_json(osr::run_protocol(cfg), cfg).dump(2);
  const std::string b = osr::report_to_json(osr::run_protocol(cfg), cfg).dump(2);
  REQUIRE(a == b);
}

TEST_CASE("run json carries the fixed field order") {
  ExperimentConfig cfg = tiny_config();
  osr::ProtocolReport report = osr::run_protocol(cfg);
  const auto j = osr::run_to_json(report.runs[0]);
  const std::string dumped = j.dump();
  const std::size_t method_pos = dumped.find("\"method\"");
  const std::size_t auroc_pos = dumped.find("\"auroc\"");
  const std::size_t closed_pos = dumped.find("\"closed_acc\"");
  const std::size_t open_pos = dumped.find("\"open_acc\"");
  const std::size_t split_pos = dumped.find("\"split_seed\"");
  const std::size_t run_pos = dumped.find("\"run_seed\"");
  REQUIRE(method_pos < auroc_pos);
  REQUIRE(auroc_pos < closed_pos);
  REQUIRE(closed_pos < open_pos);
  REQUIRE(open_pos < split_pos);
  REQUIRE(split_pos < run_pos);
}

TEST_CASE("extreme separation gives a perfect CBC auroc") {
  ExperimentConfig cfg = tiny_config();
  cfg.dataset.synthetic.separation = 50.0;
  cfg.train.epochs = 20;
  osr::ProtocolReport report = osr::run_protocol(cfg);
  for (const auto& a : report.aggregate)
    if (a.method == Method::kCbc) REQUIRE(a.auroc.mean == 1.0);
}

TEST_CASE("evaluate_methods flags a missing unknown set") {
  ExperimentConfig cfg = tiny_config();
  auto [train_full, test_full] = osr::detail::resolve_dataset(cfg.dataset);
  osr::SplitSpec split = osr::make_split(4, 2, 1);
  osr::TrainedRun run = osr::train_single(cfg, train_full, split, 0, 0);

  auto [knowns_test, unknowns_test] = osr::apply_split(test_full, split);
  osr::LabeledSet empty;
  empty.dim = knowns_test.dim;
  empty.num_classes = knowns_test.num_classes;
  auto results =
      osr::evaluate_methods(run.state.params, knowns_test, empty, cfg.methods,
                            cfg.gamma, run.calibration);
  for (const auto& r : results) {
    REQUIRE_FALSE(r.auroc.has_value());
    REQUIRE(r.auroc_reason == "no unknown test samples");
    const auto j = osr::run_to_json(r);
    REQUIRE(j.at("auroc").is_null());
    REQUIRE(j.at("auroc_reason").get<std::string>() ==
            "no unknown test samples");
  }
}

TEST_CASE("ablation rows share seeds and differ only in the loss config") {
  ExperimentConfig cfg = tiny_config();
  osr::AblationReport report = osr::run_ablation(cfg);
  REQUIRE(report.rows.size() == 3);
  REQUIRE(report.rows[0].use_cbc == false);
  REQUIRE(report.rows[0].use_entropy == true);
  REQUIRE(report.rows[1].use_cbc == true);
  REQUIRE(report.rows[1].use_entropy == false);
  REQUIRE(report.rows[2].use_cbc == true);
  REQUIRE(report.rows[2].use_entropy == true);
  for (const auto& row : report.rows) {
    REQUIRE(row.per_split.size() == cfg.split_seeds.size());
    for (auto [seed, mean] : row.per_split)
      REQUIRE(seed == cfg.split_seeds[0]);
  }
}

TEST_CASE("cli: generate, train, eval round trip") {
  const std::string train_csv = temp_path("osr_cli_train.csv");
  const std::string test_csv = temp_path("osr_cli_test.csv");
  const std::string ckpt = temp_path("osr_cli_ckpt.json");
  const std::string report = temp_path("osr_cli_report.json");

  REQUIRE(run_cli("generate --classes 4 --dim 6 --per-class 30 --seed 3"
                  " --out-train " + train_csv + " --out-test " + test_csv) == 0);
  REQUIRE(std::filesystem::exists(train_csv));

  REQUIRE(run_cli("train --train-file " + train_csv +
                  " --split-seed 1 --num-known 2 --epochs 3 --hidden 8"
                  " --feature-dim 4 --checkpoint " + ckpt) == 0);
  REQUIRE(std::filesystem::exists(ckpt));

  REQUIRE(run_cli("eval --checkpoint " + ckpt + " --test-file " + test_csv +
                  " --out " + report) == 0);
  REQUIRE(std::filesystem::exists(report));

  // eval reruns are byte-identical
  const std::string report2 = temp_path("osr_cli_report2.json");
  REQUIRE(run_cli("eval --checkpoint " + ckpt + " --test-file " + test_csv +
                  " --out " + report2) == 0);
  REQUIRE(osr::read_text_file(report) == osr::read_text_file(report2));

  for (const auto& p : {train_csv, test_csv, ckpt, report, report2})
    std::filesystem::remove(p);
}

TEST_CASE("cli: config file with flag overrides") {
  ExperimentConfig cfg = tiny_config();
  cfg.train.epochs = 50;  // the flag below must win over this
  cfg.output_path = temp_path("osr_cli_cfgrep.json");
  const std::string cfg_path = temp_path("osr_cli_cfg.json");
  osr::write_text_file(cfg_path, osr::config_to_json(cfg).dump(2) + "\n");

  REQUIRE(run_cli("protocol --config " + cfg_path + " --epochs 2") == 0);
  auto j = nlohmann::json::parse(osr::read_text_file(cfg.output_path));
  REQUIRE(j["config"]["train"]["epochs"].get<int>() == 2);
  REQUIRE(j["config"]["dataset"]["classes"].get<int>() == 4);
  REQUIRE(j["runs"].size() == cfg.methods.size());

  const std::string abl_path = temp_path("osr_cli_abl.json");
  REQUIRE(run_cli("ablate --config " + cfg_path + " --epochs 2 --out " +
                  abl_path) == 0);
  auto ja = nlohmann::json::parse(osr::read_text_file(abl_path));
  REQUIRE(ja["rows"].size() == 3);

  for (const auto& p : {cfg_path, cfg.output_path, abl_path})
    std::filesystem::remove(p);
}

TEST_CASE("cli: exit codes distinguish failure classes") {
  REQUIRE(run_cli("generate --classes 1") == 2);        // usage
  REQUIRE(run_cli("train --train-file /nonexistent/x.csv") == 3);  // data
  REQUIRE(run_cli("bogus-subcommand") == 2);
  REQUIRE(run_cli("--help") == 0);
}

TEST_CASE("cli: loss log header follows the open-loss flag") {
  const std::string train_csv = temp_path("osr_cli_bce_train.csv");
  const std::string ckpt = temp_path("osr_cli_bce_ckpt.json");
  const std::string log = temp_path("osr_cli_bce_log.csv");
  REQUIRE(run_cli("generate --classes 3 --dim 4 --per-class 20 --seed 1"
                  " --out-train " + train_csv + " --out-test /dev/null") == 0);
  REQUIRE(run_cli("train --train-file " + train_csv +
                  " --epochs 2 --hidden 8 --feature-dim 4 --open-loss bce"
                  " --checkpoint " + ckpt + " --loss-log " + log) == 0);
  std::ifstream in(log);
  std::string header;
  std::getline(in, header);
  REQUIRE(header.find("open_loss=bce") != std::string::npos);
  std::string columns;
  std::getline(in, columns);
  REQUIRE(columns == "step,ce,cbc_or_bce,ent,total");
  for (const auto& p : {train_csv, ckpt, log}) std::filesystem::remove(p);
}
