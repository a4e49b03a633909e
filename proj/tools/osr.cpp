// Command-line front end: dataset generation, training, evaluation, the
// repeated-split protocol, and the loss-configuration ablation grid.
//
// Exit codes: 0 success, 2 usage error, 3 data/file error, 4 numeric abort.

#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "osr/data.hpp"
#include "osr/experiment.hpp"
#include "osr/model.hpp"
#include "osr/openset.hpp"
#include "osr/trainer.hpp"

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename T>
std::vector<T> parse_list(const std::string& csv, const char* what) {
  std::vector<T> out;
  std::size_t start = 0;
  while (start <= csv.size()) {
    std::size_t end = csv.find(',', start);
    if (end == std::string::npos) end = csv.size();
    const std::string tok = csv.substr(start, end - start);
    if (tok.empty())
      throw UsageError(std::string(what) + ": empty entry in list '" + csv + "'");
    try {
      if constexpr (std::is_same_v<T, std::uint64_t>)
        out.push_back(std::stoull(tok));
      else if constexpr (std::is_same_v<T, std::size_t>)
        out.push_back(static_cast<std::size_t>(std::stoull(tok)));
      else
        out.push_back(std::stoi(tok));
    } catch (const std::exception&) {
      throw UsageError(std::string(what) + ": bad entry '" + tok + "'");
    }
    start = end + 1;
  }
  return out;
}

std::vector<osr::Method> parse_methods(const std::string& csv) {
  std::vector<osr::Method> out;
  std::size_t start = 0;
  while (start <= csv.size()) {
    std::size_t end = csv.find(',', start);
    if (end == std::string::npos) end = csv.size();
    const std::string tok = csv.substr(start, end - start);
    try {
      out.push_back(osr::method_from_name(tok));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    start = end + 1;
  }
  return out;
}

void render_double(std::string& s, double v) {
  osr::detail::render_double(s, v);
}

std::string loss_log_text(const osr::TrainState& state,
                          const osr::TrainConfig& cfg) {
  std::string text = "# open_loss=";
  text += cfg.open_loss == osr::OpenLoss::kCbc ? "cbc" : "bce";
  text += " use_entropy=";
  text += cfg.use_entropy ? "1" : "0";
  text += " lambda_ent=";
  render_double(text, cfg.lambda_ent);
  text += "\nstep,ce,cbc_or_bce,ent,total\n";
  for (const osr::StepLoss& r : state.history) {
    text += std::to_string(r.step);
    text += ',';
    render_double(text, r.ce);
    text += ',';
    render_double(text, r.open);
    text += ',';
    render_double(text, r.ent);
    text += ',';
    render_double(text, r.total);
    text += '\n';
  }
  return text;
}

struct SplitFlags {
  std::string known_ids;
  std::uint64_t split_seed = 0;
  std::size_t num_known = 0;
  bool has_known_ids = false;
  bool has_seed = false;
};

osr::SplitSpec resolve_split(const SplitFlags& f, std::size_t num_classes) {
  if (f.has_known_ids) {
    osr::SplitSpec split;
    split.known_ids = parse_list<int>(f.known_ids, "--known-ids");
    std::sort(split.known_ids.begin(), split.known_ids.end());
    if (split.known_ids.size() < 2)
      throw UsageError("--known-ids: need at least 2 known classes");
    for (std::size_t c = 0; c < num_classes; ++c)
      if (!std::binary_search(split.known_ids.begin(), split.known_ids.end(),
                              static_cast<int>(c)))
        split.unknown_ids.push_back(static_cast<int>(c));
    return split;
  }
  if (f.has_seed) {
    if (f.num_known < 2)
      throw UsageError("--split-seed requires --num-known >= 2");
    return osr::make_split(num_classes, f.num_known, f.split_seed);
  }
  return osr::identity_split(num_classes);
}

void print_aggregate(const osr::ProtocolReport& report) {
  std::cout << "method  auroc%            closed%  open%   (n runs)\n";
  for (const auto& a : report.aggregate) {
    std::cout << osr::method_name(a.method) << "     ";
    if (a.auroc.count > 0)
      std::cout << osr::format_percent(a.auroc.mean) << " +/- "
                << osr::format_percent(a.auroc.stddev);
    else
      std::cout << "n/a             ";
    std::cout << "   " << osr::format_percent(a.closed_acc.mean) << "   "
              << osr::format_percent(a.open_acc.mean) << "   ("
              << a.closed_acc.count << ")\n";
  }
}

int cmd_generate(const osr::SyntheticSpec& spec, double test_fraction,
                 const std::string& out_train, const std::string& out_test) {
  if (spec.num_classes < 2)
    throw UsageError("--classes: need at least 2 classes");
  if (test_fraction <= 0.0 || test_fraction >= 1.0)
    throw UsageError("--test-fraction: must lie in (0,1)");
  osr::LabeledSet all = osr::generate_synthetic(spec);
  auto [train, test] = osr::stratified_split(
      all, test_fraction, osr::detail::mix_seed(spec.seed, 0x7e57));
  osr::save_features(train, out_train);
  osr::save_features(test, out_test);
  std::cout << "wrote " << out_train << ": " << train.size() << " samples, "
            << train.num_classes << " classes, dim " << train.dim << "\n";
  std::cout << "wrote " << out_test << ": " << test.size() << " samples, "
            << test.num_classes << " classes, dim " << test.dim << "\n";
  return 0;
}

int cmd_train(const std::string& train_file, const SplitFlags& split_flags,
              osr::ModelConfig mcfg, osr::TrainConfig tcfg,
              double val_fraction, const std::string& checkpoint_path,
              const std::string& loss_log_path) {
  osr::LabeledSet full = osr::load_features(train_file);
  osr::SplitSpec split = resolve_split(split_flags, full.num_classes);
  auto [knowns, ignored] = osr::apply_split(full, split);
  (void)ignored;
  if (knowns.size() == 0) throw UsageError("training set has no known samples");

  osr::LabeledSet fit = knowns;
  osr::LabeledSet val;
  if (val_fraction > 0.0) {
    auto carved = osr::stratified_split(
        knowns, val_fraction, osr::detail::mix_seed(split.seed, 0xca11b));
    fit = std::move(carved.first);
    val = std::move(carved.second);
  }

  mcfg.input_dim = full.dim;
  mcfg.num_known = split.num_known();
  osr::TrainState state = osr::train(fit, mcfg, tcfg);
  osr::Calibration calib = osr::calibrate_thresholds(
      state.params, val.size() > 0 ? val : fit);

  nlohmann::ordered_json ckpt;
  ckpt["format"] = "osr-checkpoint";
  ckpt["model"] = osr::model_to_json(state.params);
  ckpt["split"] = osr::split_to_json(split);
  ckpt["calibration"] = {{"msp_threshold", calib.msp_threshold},
                         {"mls_threshold", calib.mls_threshold},
                         {"quantile", calib.quantile}};
  ckpt["train"] = {{"epochs", tcfg.epochs},
                   {"open_loss",
                    tcfg.open_loss == osr::OpenLoss::kCbc ? "cbc" : "bce"},
                   {"use_entropy", tcfg.use_entropy},
                   {"run_seed", tcfg.run_seed},
                   {"init_seed", mcfg.init_seed}};
  osr::write_text_file(checkpoint_path, ckpt.dump(2) + "\n");
  if (!loss_log_path.empty())
    osr::write_text_file(loss_log_path, loss_log_text(state, tcfg));

  const osr::StepLoss& last = state.history.back();
  std::cout << "trained " << state.epoch << " epochs, " << state.history.size()
            << " steps; final losses ce=" << last.ce << " open=" << last.open
            << " ent=" << last.ent << " total=" << last.total << "\n";
  std::cout << "wrote " << checkpoint_path << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& test_file,
             const SplitFlags& split_flags, const std::string& methods_csv,
             double gamma, const std::string& out_path) {
  nlohmann::json ckpt;
  try {
    ckpt = nlohmann::json::parse(osr::read_text_file(checkpoint_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw osr::DataError("checkpoint '" + checkpoint_path +
                         "': " + e.what());
  }
  osr::ModelParams params = osr::model_from_json(ckpt.at("model"));
  osr::LabeledSet test = osr::load_features(test_file);

  osr::SplitSpec split;
  if (split_flags.has_known_ids || split_flags.has_seed)
    split = resolve_split(split_flags, test.num_classes);
  else if (ckpt.contains("split"))
    split = osr::split_from_json(ckpt.at("split"));
  else
    split = osr::identity_split(test.num_classes);
  if (split.num_known() != params.config.num_known)
    throw UsageError("split has " + std::to_string(split.num_known()) +
                     " known classes but the checkpoint expects " +
                     std::to_string(params.config.num_known));

  osr::Calibration calib;
  if (ckpt.contains("calibration")) {
    calib.msp_threshold = ckpt["calibration"].at("msp_threshold").get<double>();
    calib.mls_threshold = ckpt["calibration"].at("mls_threshold").get<double>();
  }
  auto [knowns_test, unknowns_test] = osr::apply_split(test, split);
  if (knowns_test.size() == 0)
    throw osr::DataError("test file has no samples from the known classes");

  std::vector<osr::Method> methods = parse_methods(methods_csv);
  if (!(gamma > 0.0 && gamma < 1.0))
    throw UsageError("--gamma must lie in (0,1)");

  std::vector<osr::RunResult> results = osr::evaluate_methods(
      params, knowns_test, unknowns_test, methods, gamma, calib);
  std::uint64_t run_seed = 0, init_seed = params.config.init_seed;
  if (ckpt.contains("train")) {
    run_seed = ckpt["train"].value("run_seed", std::uint64_t{0});
    init_seed = ckpt["train"].value("init_seed", init_seed);
  }
  osr::ProtocolReport report;
  for (auto& r : results) {
    r.split = split;
    r.run_seed = run_seed;
    r.init_seed = init_seed;
    report.runs.push_back(std::move(r));
  }
  for (const auto& r : report.runs) {
    osr::MethodAggregate agg;
    agg.method = r.method;
    if (r.auroc) agg.auroc = osr::aggregate(std::vector<double>{*r.auroc});
    agg.closed_acc = osr::aggregate(std::vector<double>{r.closed_acc});
    agg.open_acc = osr::aggregate(std::vector<double>{r.open_acc});
    report.aggregate.push_back(agg);
  }

  nlohmann::ordered_json j;
  j["checkpoint"] = checkpoint_path;
  j["test_file"] = test_file;
  j["gamma"] = gamma;
  j["runs"] = nlohmann::ordered_json::array();
  for (const auto& r : report.runs) j["runs"].push_back(osr::run_to_json(r));
  osr::write_text_file(out_path, j.dump(2) + "\n");
  print_aggregate(report);
  std::cout << "wrote " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-set recognition with per-class binary heads"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "Write synthetic train/test CSVs");
  osr::SyntheticSpec gspec;
  double g_test_fraction = 0.2;
  std::string g_out_train = "train.csv", g_out_test = "test.csv";
  gen->add_option("--classes", gspec.num_classes, "number of classes");
  gen->add_option("--dim", gspec.dim, "feature dimension");
  gen->add_option("--per-class", gspec.samples_per_class, "samples per class");
  gen->add_option("--sigma", gspec.cluster_spread, "cluster spread");
  gen->add_option("--separation", gspec.separation,
                  "pairwise distance between cluster means");
  gen->add_option("--seed", gspec.seed, "generation seed");
  gen->add_option("--test-fraction", g_test_fraction,
                  "per-class share reserved for the test file");
  gen->add_option("--out-train", g_out_train, "training CSV path");
  gen->add_option("--out-test", g_out_test, "test CSV path");

  // shared split flags
  auto add_split_flags = [](CLI::App* sub, SplitFlags& f) {
    sub->add_option("--known-ids", f.known_ids,
                    "comma-separated known class ids");
    sub->add_option("--split-seed", f.split_seed, "seed for a random split");
    sub->add_option("--num-known", f.num_known,
                    "known class count for --split-seed");
  };

  // train
  auto* tr = app.add_subcommand("train", "Train a model and write a checkpoint");
  std::string t_train_file, t_checkpoint = "checkpoint.json", t_loss_log;
  SplitFlags t_split;
  osr::ModelConfig t_mcfg;
  osr::TrainConfig t_tcfg;
  std::string t_hidden = "64,64", t_open_loss = "cbc";
  bool t_no_entropy = false;
  double t_val_fraction = 0.1;
  tr->add_option("--train-file", t_train_file, "training CSV")->required();
  add_split_flags(tr, t_split);
  tr->add_option("--epochs", t_tcfg.epochs, "training epochs");
  tr->add_option("--lr", t_tcfg.learning_rate, "learning rate");
  tr->add_option("--momentum", t_tcfg.momentum, "momentum");
  tr->add_option("--weight-decay", t_tcfg.weight_decay, "weight decay");
  tr->add_option("--batch-size", t_tcfg.batch_size, "batch size");
  tr->add_option("--lambda-ent", t_tcfg.lambda_ent, "entropy loss weight");
  tr->add_option("--open-loss", t_open_loss, "binary-head loss: cbc or bce");
  tr->add_flag("--no-entropy", t_no_entropy, "disable entropy minimization");
  tr->add_option("--run-seed", t_tcfg.run_seed, "batch shuffling seed");
  tr->add_option("--init-seed", t_mcfg.init_seed, "weight init seed");
  tr->add_option("--hidden", t_hidden, "hidden layer widths, comma separated");
  tr->add_option("--feature-dim", t_mcfg.feature_dim, "feature dimension");
  tr->add_option("--val-fraction", t_val_fraction,
                 "known-train share held out for threshold calibration");
  tr->add_option("--checkpoint", t_checkpoint, "checkpoint output path");
  tr->add_option("--loss-log", t_loss_log, "per-step loss log path");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on test data");
  std::string e_checkpoint, e_test_file, e_methods = "CBC,MSP,MLS",
              e_out = "report.json";
  SplitFlags e_split;
  double e_gamma = 0.9;
  ev->add_option("--checkpoint", e_checkpoint, "checkpoint path")->required();
  ev->add_option("--test-file", e_test_file, "test CSV")->required();
  add_split_flags(ev, e_split);
  ev->add_option("--methods", e_methods, "comma-separated methods");
  ev->add_option("--gamma", e_gamma, "CBC rejection threshold");
  ev->add_option("--out", e_out, "report output path");

  // protocol / ablate share the experiment flags
  osr::ExperimentConfig pcfg;
  pcfg.output_path = "protocol.json";
  std::string p_config_file, p_methods, p_split_seeds, p_hidden, p_open_loss;
  bool p_no_entropy = false;
  auto add_experiment_flags = [&](CLI::App* sub) {
    sub->add_option("--config", p_config_file, "experiment config JSON");
    sub->add_option("--classes", pcfg.dataset.synthetic.num_classes, "");
    sub->add_option("--dim", pcfg.dataset.synthetic.dim, "");
    sub->add_option("--per-class", pcfg.dataset.synthetic.samples_per_class, "");
    sub->add_option("--sigma", pcfg.dataset.synthetic.cluster_spread, "");
    sub->add_option("--separation", pcfg.dataset.synthetic.separation, "");
    sub->add_option("--data-seed", pcfg.dataset.synthetic.seed, "");
    sub->add_option("--test-fraction", pcfg.dataset.test_fraction, "");
    sub->add_option("--train-file", pcfg.dataset.train_file,
                    "feature CSV (switches off synthetic data)");
    sub->add_option("--test-file", pcfg.dataset.test_file, "");
    sub->add_option("--num-known", pcfg.num_known, "");
    sub->add_option("--split-seeds", p_split_seeds, "comma-separated seeds");
    sub->add_option("--runs-per-split", pcfg.runs_per_split, "");
    sub->add_option("--epochs", pcfg.train.epochs, "");
    sub->add_option("--lr", pcfg.train.learning_rate, "");
    sub->add_option("--momentum", pcfg.train.momentum, "");
    sub->add_option("--weight-decay", pcfg.train.weight_decay, "");
    sub->add_option("--batch-size", pcfg.train.batch_size, "");
    sub->add_option("--lambda-ent", pcfg.train.lambda_ent, "");
    sub->add_option("--open-loss", p_open_loss, "cbc or bce");
    sub->add_flag("--no-entropy", p_no_entropy, "");
    sub->add_option("--run-seed", pcfg.train.run_seed, "");
    sub->add_option("--init-seed", pcfg.model.init_seed, "");
    sub->add_option("--hidden", p_hidden, "");
    sub->add_option("--feature-dim", pcfg.model.feature_dim, "");
    sub->add_option("--methods", p_methods, "");
    sub->add_option("--gamma", pcfg.gamma, "");
    sub->add_option("--val-fraction", pcfg.val_fraction, "");
    sub->add_option("--out", pcfg.output_path, "report path");
  };
  auto* proto = app.add_subcommand(
      "protocol", "Repeated-split training and evaluation");
  add_experiment_flags(proto);
  auto* abl = app.add_subcommand(
      "ablate", "Loss ablation grid under identical seeds");
  add_experiment_flags(abl);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  auto finish_experiment_config = [&](CLI::App* sub) {
    if (sub->count("--config")) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(osr::read_text_file(p_config_file));
      } catch (const nlohmann::json::parse_error& e) {
        throw osr::DataError("config '" + p_config_file + "': " + e.what());
      }
      osr::ExperimentConfig file_cfg;
      try {
        file_cfg = osr::config_from_json(j);
      } catch (const nlohmann::json::exception& e) {
        throw osr::DataError("config '" + p_config_file + "': " + e.what());
      }
      // flags given on the command line win over file values
      auto keep = [&](const char* flag) { return sub->count(flag) > 0; };
      osr::ExperimentConfig merged = file_cfg;
      if (keep("--classes"))
        merged.dataset.synthetic.num_classes = pcfg.dataset.synthetic.num_classes;
      if (keep("--dim")) merged.dataset.synthetic.dim = pcfg.dataset.synthetic.dim;
      if (keep("--per-class"))
        merged.dataset.synthetic.samples_per_class =
            pcfg.dataset.synthetic.samples_per_class;
      if (keep("--sigma"))
        merged.dataset.synthetic.cluster_spread =
            pcfg.dataset.synthetic.cluster_spread;
      if (keep("--separation"))
        merged.dataset.synthetic.separation = pcfg.dataset.synthetic.separation;
      if (keep("--data-seed"))
        merged.dataset.synthetic.seed = pcfg.dataset.synthetic.seed;
      if (keep("--test-fraction"))
        merged.dataset.test_fraction = pcfg.dataset.test_fraction;
      if (keep("--train-file")) merged.dataset.train_file = pcfg.dataset.train_file;
      if (keep("--test-file")) merged.dataset.test_file = pcfg.dataset.test_file;
      if (keep("--num-known")) merged.num_known = pcfg.num_known;
      if (keep("--runs-per-split")) merged.runs_per_split = pcfg.runs_per_split;
      if (keep("--epochs")) merged.train.epochs = pcfg.train.epochs;
      if (keep("--lr")) merged.train.learning_rate = pcfg.train.learning_rate;
      if (keep("--momentum")) merged.train.momentum = pcfg.train.momentum;
      if (keep("--weight-decay"))
        merged.train.weight_decay = pcfg.train.weight_decay;
      if (keep("--batch-size")) merged.train.batch_size = pcfg.train.batch_size;
      if (keep("--lambda-ent")) merged.train.lambda_ent = pcfg.train.lambda_ent;
      if (keep("--run-seed")) merged.train.run_seed = pcfg.train.run_seed;
      if (keep("--init-seed")) merged.model.init_seed = pcfg.model.init_seed;
      if (keep("--feature-dim")) merged.model.feature_dim = pcfg.model.feature_dim;
      if (keep("--gamma")) merged.gamma = pcfg.gamma;
      if (keep("--val-fraction")) merged.val_fraction = pcfg.val_fraction;
      if (keep("--out")) merged.output_path = pcfg.output_path;
      pcfg = merged;
    }
    if (sub->count("--split-seeds"))
      pcfg.split_seeds = parse_list<std::uint64_t>(p_split_seeds, "--split-seeds");
    if (sub->count("--methods")) pcfg.methods = parse_methods(p_methods);
    if (sub->count("--hidden"))
      pcfg.model.hidden_dims = parse_list<std::size_t>(p_hidden, "--hidden");
    if (sub->count("--open-loss")) {
      if (p_open_loss != "cbc" && p_open_loss != "bce")
        throw UsageError("--open-loss must be cbc or bce");
      pcfg.train.open_loss =
          p_open_loss == "bce" ? osr::OpenLoss::kBce : osr::OpenLoss::kCbc;
    }
    if (sub->count("--no-entropy") && p_no_entropy)
      pcfg.train.use_entropy = false;
    if (sub->count("--train-file")) pcfg.dataset.use_synthetic = false;
    if (!pcfg.dataset.use_synthetic &&
        (pcfg.dataset.train_file.empty() || pcfg.dataset.test_file.empty()))
      throw UsageError("file datasets need both --train-file and --test-file");
    try {
      osr::detail::validate(pcfg);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  };

  try {
    if (gen->parsed())
      return cmd_generate(gspec, g_test_fraction, g_out_train, g_out_test);
    if (tr->parsed()) {
      if (t_open_loss != "cbc" && t_open_loss != "bce")
        throw UsageError("--open-loss must be cbc or bce");
      t_tcfg.open_loss =
          t_open_loss == "bce" ? osr::OpenLoss::kBce : osr::OpenLoss::kCbc;
      t_tcfg.use_entropy = !t_no_entropy;
      t_mcfg.hidden_dims = parse_list<std::size_t>(t_hidden, "--hidden");
      t_split.has_known_ids = tr->count("--known-ids") > 0;
      t_split.has_seed = tr->count("--split-seed") > 0;
      return cmd_train(t_train_file, t_split, t_mcfg, t_tcfg, t_val_fraction,
                       t_checkpoint, t_loss_log);
    }
    if (ev->parsed()) {
      e_split.has_known_ids = ev->count("--known-ids") > 0;
      e_split.has_seed = ev->count("--split-seed") > 0;
      return cmd_eval(e_checkpoint, e_test_file, e_split, e_methods, e_gamma,
                      e_out);
    }
    if (proto->parsed()) {
      finish_experiment_config(proto);
      osr::ProtocolReport report = osr::run_protocol(pcfg);
      osr::write_text_file(pcfg.output_path,
                           osr::report_to_json(report, pcfg).dump(2) + "\n");
      print_aggregate(report);
      std::cout << "wrote " << pcfg.output_path << "\n";
      return 0;
    }
    if (abl->parsed()) {
      finish_experiment_config(abl);
      osr::AblationReport report = osr::run_ablation(pcfg);
      osr::write_text_file(pcfg.output_path,
                           osr::ablation_to_json(report, pcfg).dump(2) + "\n");
      std::cout << "cbc  em   auroc%\n";
      for (const auto& row : report.rows)
        std::cout << (row.use_cbc ? "yes" : "no ") << "  "
                  << (row.use_entropy ? "yes" : "no ") << "  "
                  << osr::format_percent(row.auroc.mean) << " +/- "
                  << osr::format_percent(row.auroc.stddev) << "\n";
      std::cout << "wrote " << pcfg.output_path << "\n";
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const osr::DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const osr::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
