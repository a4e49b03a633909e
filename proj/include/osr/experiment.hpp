#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "osr/data.hpp"
#include "osr/eval.hpp"
#include "osr/model.hpp"
#include "osr/openset.hpp"
#include "osr/trainer.hpp"

// The repeated-split experiment protocol: for every split seed, partition
// the classes into knowns and unknowns, train one model per run seed on
// the known training data, and evaluate each scoring method on the known
// plus unknown test data. Results aggregate to mean and sample standard
// deviation per method. Everything is a pure function of the config, so
// reports are byte-identical across reruns.

namespace osr {

using ordered_json = nlohmann::ordered_json;

struct DatasetSource {
  bool use_synthetic = true;
  SyntheticSpec synthetic;
  double test_fraction = 0.2;  // synthetic train/test division, stratified
  std::string train_file;
  std::string test_file;
};

struct ExperimentConfig {
  DatasetSource dataset;
  std::size_t num_known = 5;
  std::vector<std::uint64_t> split_seeds{1, 2, 3};
  std::size_t runs_per_split = 3;
  ModelConfig model;   // input_dim is derived from the data
  TrainConfig train;
  std::vector<Method> methods{Method::kCbc, Method::kMsp, Method::kMls};
  double gamma = 0.9;
  double val_fraction = 0.1;  // known-train share held out for calibration
  std::string output_path;
};

// Per-method rejection thresholds for the open-set accuracy evaluation.
// The CBC threshold is the externally supplied gamma; MSP and MLS have no
// published threshold, so they use a low quantile of held-out known
// validation scores.
struct Calibration {
  double msp_threshold = 0.0;
  double mls_threshold = 0.0;
  double quantile = 0.05;
};

struct RunResult {
  Method method = Method::kCbc;
  std::optional<double> auroc;
  std::string auroc_reason;  // set when auroc is omitted
  double closed_acc = 0.0;
  double open_acc = 0.0;
  std::size_t n_known_test = 0;
  std::size_t n_unknown_test = 0;
  SplitSpec split;
  std::uint64_t run_seed = 0;
  std::uint64_t init_seed = 0;
};

struct MethodAggregate {
  Method method = Method::kCbc;
  Stats auroc;
  Stats closed_acc;
  Stats open_acc;
};

struct ProtocolReport {
  std::vector<RunResult> runs;
  std::vector<MethodAggregate> aggregate;
};

struct InferenceLogits {
  Tensor closed;
  Tensor cbc;
};

inline InferenceLogits forward_inference(const ModelParams& params,
                                         const LabeledSet& data) {
  Tensor x = data.feature_tensor();
  Tensor z = extract(params, x);
  return {closed_logits(params, z), cbc_logits(params, z)};
}

namespace detail {

inline std::span<const double> row_of(const Tensor& m, std::size_t i) {
  return m.values().subspan(i * m.cols(), m.cols());
}

// Nearest-rank lower quantile of a score list.
inline double score_quantile(std::vector<double> scores, double q) {
  if (scores.empty())
    throw std::invalid_argument("score_quantile: empty score list");
  std::sort(scores.begin(), scores.end());
  const double pos = q * static_cast<double>(scores.size());
  auto idx = static_cast<std::size_t>(std::ceil(pos));
  if (idx > 0) --idx;
  if (idx >= scores.size()) idx = scores.size() - 1;
  return scores[idx];
}

}  // namespace detail

inline Calibration calibrate_thresholds(const ModelParams& params,
                                        const LabeledSet& val_knowns,
                                        double quantile = 0.05) {
  if (val_knowns.size() == 0)
    throw std::invalid_argument("calibrate_thresholds: empty validation set");
  InferenceLogits lg = forward_inference(params, val_knowns);
  std::vector<double> msp, mls;
  msp.reserve(val_knowns.size());
  mls.reserve(val_knowns.size());
  for (std::size_t i = 0; i < val_knowns.size(); ++i) {
    auto closed = detail::row_of(lg.closed, i);
    msp.push_back(msp_score(closed).score);
    mls.push_back(mls_score(closed).score);
  }
  Calibration c;
  c.quantile = quantile;
  c.msp_threshold = detail::score_quantile(std::move(msp), quantile);
  c.mls_threshold = detail::score_quantile(std::move(mls), quantile);
  return c;
}

inline double threshold_for(Method m, double gamma, const Calibration& c) {
  switch (m) {
    case Method::kCbc: return gamma;
    case Method::kMsp: return c.msp_threshold;
    case Method::kMls: return c.mls_threshold;
  }
  throw std::logic_error("threshold_for: bad method");
}

// Scores every sample of both test sets once and derives AUROC, closed-set
// accuracy, and open-set accuracy per requested method.
inline std::vector<RunResult> evaluate_methods(
    const ModelParams& params, const LabeledSet& knowns_test,
    const LabeledSet& unknowns_test, std::span<const Method> methods,
    double gamma, const Calibration& calib) {
  if (knowns_test.size() == 0)
    throw std::invalid_argument("evaluate_methods: empty known test set");
  InferenceLogits known_lg = forward_inference(params, knowns_test);
  std::optional<InferenceLogits> unknown_lg;
  if (unknowns_test.size() > 0)
    unknown_lg = forward_inference(params, unknowns_test);

  std::vector<RunResult> out;
  for (Method m : methods) {
    RunResult r;
    r.method = m;
    r.n_known_test = knowns_test.size();
    r.n_unknown_test = unknowns_test.size();
    const double thr = threshold_for(m, gamma, calib);

    std::vector<double> known_scores;
    std::vector<int> predictions;
    std::vector<Decision> decisions;
    std::vector<int> open_labels;
    known_scores.reserve(knowns_test.size());
    for (std::size_t i = 0; i < knowns_test.size(); ++i) {
      ScorePair sp = score_row(m, detail::row_of(known_lg.closed, i),
                               detail::row_of(known_lg.cbc, i));
      known_scores.push_back(sp.score);
      predictions.push_back(sp.predicted);
      decisions.push_back(decide(sp, thr, m));
      open_labels.push_back(knowns_test.labels[i]);
    }
    r.closed_acc = closed_accuracy(predictions, knowns_test.labels);

    if (unknown_lg) {
      std::vector<double> unknown_scores;
      unknown_scores.reserve(unknowns_test.size());
      for (std::size_t i = 0; i < unknowns_test.size(); ++i) {
        ScorePair sp = score_row(m, detail::row_of(unknown_lg->closed, i),
                                 detail::row_of(unknown_lg->cbc, i));
        unknown_scores.push_back(sp.score);
        decisions.push_back(decide(sp, thr, m));
        open_labels.push_back(kUnknownClass);
      }
      r.auroc = auroc(known_scores, unknown_scores);
    } else {
      r.auroc_reason = "no unknown test samples";
    }
    r.open_acc = open_accuracy(decisions, open_labels);
    out.push_back(std::move(r));
  }
  return out;
}

namespace detail {

inline void validate(const ExperimentConfig& cfg) {
  if (cfg.split_seeds.empty())
    throw std::invalid_argument("experiment config: need at least one split seed");
  if (cfg.methods.empty())
    throw std::invalid_argument("experiment config: need at least one method");
  if (!(cfg.gamma > 0.0 && cfg.gamma < 1.0))
    throw std::invalid_argument("experiment config: gamma must lie in (0,1)");
  if (cfg.runs_per_split < 1)
    throw std::invalid_argument("experiment config: runs_per_split >= 1");
  if (cfg.val_fraction < 0.0 || cfg.val_fraction >= 1.0)
    throw std::invalid_argument("experiment config: val_fraction in [0,1)");
}

// (train, test) with original labels, either generated or loaded.
inline std::pair<LabeledSet, LabeledSet> resolve_dataset(
    const DatasetSource& ds) {
  if (ds.use_synthetic) {
    LabeledSet all = generate_synthetic(ds.synthetic);
    return stratified_split(all, ds.test_fraction,
                            mix_seed(ds.synthetic.seed, 0x7e57));
  }
  LabeledSet train = load_features(ds.train_file);
  LabeledSet test = load_features(ds.test_file);
  if (train.dim != test.dim)
    throw DataError("train file dim " + std::to_string(train.dim) +
                    " does not match test file dim " +
                    std::to_string(test.dim));
  const std::size_t classes = std::max(train.num_classes, test.num_classes);
  train.num_classes = test.num_classes = classes;
  return {std::move(train), std::move(test)};
}

}  // namespace detail

// One trained model plus everything needed to evaluate it.
struct TrainedRun {
  TrainState state;
  Calibration calibration;
  SplitSpec split;
  std::uint64_t run_seed = 0;
  std::uint64_t init_seed = 0;
};

// Trains on the known part of `train_full` under `split`, holding out a
// stratified validation share for threshold calibration.
inline TrainedRun train_single(const ExperimentConfig& cfg,
                               const LabeledSet& train_full,
                               const SplitSpec& split, std::uint64_t init_seed,
                               std::uint64_t run_seed) {
  auto [knowns_train, unused_unknowns] = apply_split(train_full, split);
  (void)unused_unknowns;
  if (knowns_train.size() == 0)
    throw std::invalid_argument("train_single: split leaves no training data");

  LabeledSet fit = knowns_train;
  LabeledSet val;
  if (cfg.val_fraction > 0.0) {
    auto carved = stratified_split(knowns_train, cfg.val_fraction,
                                   detail::mix_seed(split.seed, 0xca11b));
    fit = std::move(carved.first);
    val = std::move(carved.second);
  }

  ModelConfig mcfg = cfg.model;
  mcfg.input_dim = train_full.dim;
  mcfg.num_known = split.num_known();
  mcfg.init_seed = init_seed;
  TrainConfig tcfg = cfg.train;
  tcfg.run_seed = run_seed;

  TrainedRun run;
  run.state = train(fit, mcfg, tcfg);
  run.calibration =
      calibrate_thresholds(run.state.params, val.size() > 0 ? val : fit);
  run.split = split;
  run.run_seed = run_seed;
  run.init_seed = init_seed;
  return run;
}

inline ProtocolReport run_protocol(const ExperimentConfig& cfg) {
  detail::validate(cfg);
  auto [train_full, test_full] = detail::resolve_dataset(cfg.dataset);

  ProtocolReport report;
  for (std::uint64_t split_seed : cfg.split_seeds) {
    SplitSpec split =
        make_split(train_full.num_classes, cfg.num_known, split_seed);
    auto [knowns_test, unknowns_test] = apply_split(test_full, split);
    for (std::size_t r = 0; r < cfg.runs_per_split; ++r) {
      const std::uint64_t init_seed = cfg.model.init_seed + r;
      const std::uint64_t run_seed = cfg.train.run_seed + r;
      TrainedRun run =
          train_single(cfg, train_full, split, init_seed, run_seed);
      std::vector<RunResult> results =
          evaluate_methods(run.state.params, knowns_test, unknowns_test,
                           cfg.methods, cfg.gamma, run.calibration);
      for (auto& res : results) {
        res.split = split;
        res.run_seed = run_seed;
        res.init_seed = init_seed;
        report.runs.push_back(std::move(res));
      }
    }
  }

  for (Method m : cfg.methods) {
    MethodAggregate agg;
    agg.method = m;
    std::vector<double> aurocs, closed, open;
    for (const RunResult& r : report.runs) {
      if (r.method != m) continue;
      if (r.auroc) aurocs.push_back(*r.auroc);
      closed.push_back(r.closed_acc);
      open.push_back(r.open_acc);
    }
    if (!aurocs.empty()) agg.auroc = aggregate(aurocs);
    agg.closed_acc = aggregate(closed);
    agg.open_acc = aggregate(open);
    report.aggregate.push_back(agg);
  }
  return report;
}

// Ablation grid over the loss configuration, every row under identical
// seeds and splits: plain BCE with entropy minimization, the hard-negative
// loss alone, and the hard-negative loss with entropy minimization.
struct AblationRow {
  bool use_cbc = false;
  bool use_entropy = false;
  Stats auroc;  // of the binary-head score across all runs
  std::vector<std::pair<std::uint64_t, double>> per_split;  // split seed -> mean
};

struct AblationReport {
  std::vector<AblationRow> rows;
};

inline AblationReport run_ablation(const ExperimentConfig& cfg) {
  detail::validate(cfg);
  const std::pair<bool, bool> grid[] = {
      {false, true}, {true, false}, {true, true}};
  AblationReport report;
  for (auto [use_cbc, use_em] : grid) {
    ExperimentConfig c = cfg;
    c.train.open_loss = use_cbc ? OpenLoss::kCbc : OpenLoss::kBce;
    c.train.use_entropy = use_em;
    c.methods = {Method::kCbc};
    ProtocolReport pr = run_protocol(c);

    AblationRow row;
    row.use_cbc = use_cbc;
    row.use_entropy = use_em;
    std::vector<double> all;
    for (std::uint64_t seed : cfg.split_seeds) {
      std::vector<double> per;
      for (const RunResult& r : pr.runs)
        if (r.split.seed == seed && r.auroc) per.push_back(*r.auroc);
      if (!per.empty()) {
        row.per_split.emplace_back(seed, aggregate(per).mean);
        all.insert(all.end(), per.begin(), per.end());
      }
    }
    if (!all.empty()) row.auroc = aggregate(all);
    report.rows.push_back(std::move(row));
  }
  return report;
}

// Serialization. Field names and order are fixed so reruns diff cleanly.

inline ordered_json split_to_json(const SplitSpec& s) {
  return {{"known_ids", s.known_ids},
          {"unknown_ids", s.unknown_ids},
          {"seed", s.seed}};
}

inline SplitSpec split_from_json(const nlohmann::json& j) {
  SplitSpec s;
  s.known_ids = j.at("known_ids").get<std::vector<int>>();
  s.unknown_ids = j.at("unknown_ids").get<std::vector<int>>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

inline ordered_json config_to_json(const ExperimentConfig& cfg) {
  ordered_json j;
  if (cfg.dataset.use_synthetic) {
    const auto& s = cfg.dataset.synthetic;
    j["dataset"] = {{"type", "synthetic"},
                    {"classes", s.num_classes},
                    {"dim", s.dim},
                    {"per_class", s.samples_per_class},
                    {"sigma", s.cluster_spread},
                    {"separation", s.separation},
                    {"seed", s.seed},
                    {"test_fraction", cfg.dataset.test_fraction}};
  } else {
    j["dataset"] = {{"type", "files"},
                    {"train_file", cfg.dataset.train_file},
                    {"test_file", cfg.dataset.test_file}};
  }
  j["num_known"] = cfg.num_known;
  j["split_seeds"] = cfg.split_seeds;
  j["runs_per_split"] = cfg.runs_per_split;
  j["model"] = {{"hidden_dims", cfg.model.hidden_dims},
                {"feature_dim", cfg.model.feature_dim},
                {"init_seed", cfg.model.init_seed}};
  j["train"] = {{"epochs", cfg.train.epochs},
                {"learning_rate", cfg.train.learning_rate},
                {"momentum", cfg.train.momentum},
                {"weight_decay", cfg.train.weight_decay},
                {"batch_size", cfg.train.batch_size},
                {"lambda_ent", cfg.train.lambda_ent},
                {"open_loss",
                 cfg.train.open_loss == OpenLoss::kCbc ? "cbc" : "bce"},
                {"use_entropy", cfg.train.use_entropy},
                {"run_seed", cfg.train.run_seed}};
  std::vector<std::string> names;
  for (Method m : cfg.methods) names.emplace_back(method_name(m));
  j["methods"] = names;
  j["gamma"] = cfg.gamma;
  j["val_fraction"] = cfg.val_fraction;
  j["output"] = cfg.output_path;
  return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  const auto& d = j.at("dataset");
  const std::string type = d.at("type").get<std::string>();
  if (type == "synthetic") {
    cfg.dataset.use_synthetic = true;
    auto& s = cfg.dataset.synthetic;
    s.num_classes = d.at("classes").get<std::size_t>();
    s.dim = d.at("dim").get<std::size_t>();
    s.samples_per_class = d.at("per_class").get<std::size_t>();
    s.cluster_spread = d.at("sigma").get<double>();
    s.separation = d.at("separation").get<double>();
    s.seed = d.at("seed").get<std::uint64_t>();
    cfg.dataset.test_fraction = d.at("test_fraction").get<double>();
  } else if (type == "files") {
    cfg.dataset.use_synthetic = false;
    cfg.dataset.train_file = d.at("train_file").get<std::string>();
    cfg.dataset.test_file = d.at("test_file").get<std::string>();
  } else {
    throw std::invalid_argument("config: dataset type must be 'synthetic' or 'files'");
  }
  cfg.num_known = j.at("num_known").get<std::size_t>();
  cfg.split_seeds = j.at("split_seeds").get<std::vector<std::uint64_t>>();
  cfg.runs_per_split = j.at("runs_per_split").get<std::size_t>();
  const auto& m = j.at("model");
  cfg.model.hidden_dims = m.at("hidden_dims").get<std::vector<std::size_t>>();
  cfg.model.feature_dim = m.at("feature_dim").get<std::size_t>();
  cfg.model.init_seed = m.at("init_seed").get<std::uint64_t>();
  const auto& t = j.at("train");
  cfg.train.epochs = t.at("epochs").get<std::size_t>();
  cfg.train.learning_rate = t.at("learning_rate").get<double>();
  cfg.train.momentum = t.at("momentum").get<double>();
  cfg.train.weight_decay = t.at("weight_decay").get<double>();
  cfg.train.batch_size = t.at("batch_size").get<std::size_t>();
  cfg.train.lambda_ent = t.at("lambda_ent").get<double>();
  cfg.train.open_loss = t.at("open_loss").get<std::string>() == "bce"
                            ? OpenLoss::kBce
                            : OpenLoss::kCbc;
  cfg.train.use_entropy = t.at("use_entropy").get<bool>();
  cfg.train.run_seed = t.at("run_seed").get<std::uint64_t>();
  cfg.methods.clear();
  for (const auto& name : j.at("methods"))
    cfg.methods.push_back(method_from_name(name.get<std::string>()));
  cfg.gamma = j.at("gamma").get<double>();
  cfg.val_fraction = j.at("val_fraction").get<double>();
  cfg.output_path = j.at("output").get<std::string>();
  return cfg;
}

inline ordered_json run_to_json(const RunResult& r) {
  ordered_json j;
  j["method"] = method_name(r.method);
  if (r.auroc)
    j["auroc"] = *r.auroc;
  else {
    j["auroc"] = nullptr;
    j["auroc_reason"] = r.auroc_reason;
  }
  j["closed_acc"] = r.closed_acc;
  j["open_acc"] = r.open_acc;
  j["split_seed"] = r.split.seed;
  j["run_seed"] = r.run_seed;
  j["init_seed"] = r.init_seed;
  j["n_known_test"] = r.n_known_test;
  j["n_unknown_test"] = r.n_unknown_test;
  j["split"] = split_to_json(r.split);
  return j;
}

inline ordered_json report_to_json(const ProtocolReport& report,
                                   const ExperimentConfig& cfg) {
  ordered_json j;
  j["config"] = config_to_json(cfg);
  j["runs"] = ordered_json::array();
  for (const RunResult& r : report.runs) j["runs"].push_back(run_to_json(r));
  j["aggregate"] = ordered_json::array();
  for (const MethodAggregate& a : report.aggregate) {
    ordered_json ja;
    ja["method"] = method_name(a.method);
    if (a.auroc.count > 0) {
      ja["auroc_mean"] = a.auroc.mean;
      ja["auroc_std"] = a.auroc.stddev;
    } else {
      ja["auroc_mean"] = nullptr;
      ja["auroc_std"] = nullptr;
    }
    ja["closed_acc_mean"] = a.closed_acc.mean;
    ja["closed_acc_std"] = a.closed_acc.stddev;
    ja["open_acc_mean"] = a.open_acc.mean;
    ja["open_acc_std"] = a.open_acc.stddev;
    ja["n_runs"] = a.closed_acc.count;
    j["aggregate"].push_back(ja);
  }
  return j;
}

inline ordered_json ablation_to_json(const AblationReport& report,
                                     const ExperimentConfig& cfg) {
  ordered_json j;
  j["config"] = config_to_json(cfg);
  j["rows"] = ordered_json::array();
  for (const AblationRow& row : report.rows) {
    ordered_json jr;
    jr["cbc"] = row.use_cbc;
    jr["em"] = row.use_entropy;
    jr["auroc_mean"] = row.auroc.mean;
    jr["auroc_std"] = row.auroc.stddev;
    jr["per_split"] = ordered_json::array();
    for (auto [seed, mean] : row.per_split)
      jr["per_split"].push_back({{"split_seed", seed}, {"auroc_mean", mean}});
    j["rows"].push_back(jr);
  }
  return j;
}

inline void write_text_file(const std::string& path,
                            const std::string& contents) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << contents;
  if (!out) throw DataError("write to '" + path + "' failed");
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Percentage with two decimals for console tables; stored values keep
// full precision.
inline std::string format_percent(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * x);
  return buf;
}

}  // namespace osr
