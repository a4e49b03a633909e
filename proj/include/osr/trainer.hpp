#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "osr/data.hpp"
#include "osr/losses.hpp"
#include "osr/model.hpp"

// End-to-end optimization of the total loss with classical momentum SGD.
// A training run is a pure function of (data, model config, train config):
// both the parameter trajectory and the recorded loss values are
// reproducible bit for bit.

namespace osr {

// Non-finite losses or gradients abort the run; the CLI maps this to its
// own exit code.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class OpenLoss { kCbc, kBce };

// Diagnostic modes for the binary-head branch: kFrozen computes the open
// loss on detached features and updates no head, kOff skips it entirely.
// Training per the method uses kTrain.
enum class OpenBranch { kTrain, kFrozen, kOff };

struct TrainConfig {
  std::size_t epochs = 20;
  double learning_rate = 0.001;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  std::size_t batch_size = 32;
  double lambda_ent = 0.1;
  OpenLoss open_loss = OpenLoss::kCbc;
  bool use_entropy = true;
  OpenBranch open_branch = OpenBranch::kTrain;
  std::uint64_t run_seed = 0;
};

struct StepLoss {
  std::size_t step = 0;
  double ce = 0.0;
  double open = 0.0;  // cbc or bce per config; 0 when the branch is off
  double ent = 0.0;   // 0 when entropy minimization is disabled
  double total = 0.0;
};

struct TrainState {
  ModelParams params;
  std::vector<std::vector<double>> velocity;  // mirrors the trained tensors
  std::size_t epoch = 0;
  std::vector<StepLoss> history;
};

namespace detail {

inline void validate(const TrainConfig& c) {
  if (c.epochs < 1) throw std::invalid_argument("train config: epochs >= 1");
  if (c.learning_rate <= 0.0)
    throw std::invalid_argument("train config: learning_rate must be positive");
  if (c.momentum < 0.0 || c.momentum >= 1.0)
    throw std::invalid_argument("train config: momentum must lie in [0,1)");
  if (c.weight_decay < 0.0)
    throw std::invalid_argument("train config: weight_decay must be nonnegative");
  if (c.lambda_ent < 0.0)
    throw std::invalid_argument("train config: lambda_ent must be nonnegative");
  if (c.batch_size < 1)
    throw std::invalid_argument("train config: batch_size >= 1");
}

}  // namespace detail

// Seed for the epoch's batch shuffle, derived so epochs draw distinct
// permutations from one run seed.
inline std::uint64_t data_shuffle_seed(std::uint64_t run_seed,
                                       std::size_t epoch) {
  return detail::mix_seed(run_seed, epoch);
}

// One momentum update over the given parameters: g' = g + wd * theta,
// v <- mu * v + g', theta <- theta - lr * v. Weight decay applies to
// weights and biases alike.
inline void sgd_step(std::span<Tensor* const> params,
                     std::vector<std::vector<double>>& velocity,
                     const TrainConfig& cfg) {
  if (params.size() != velocity.size())
    throw std::invalid_argument("sgd_step: velocity buffers do not mirror params");
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor& theta = *params[t];
    auto g = theta.grad();
    auto& v = velocity[t];
    if (v.size() != g.size())
      throw std::invalid_argument("sgd_step: velocity shape mismatch");
    auto w = theta.mutable_values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (!std::isfinite(g[i]))
        throw NumericError("sgd_step: non-finite gradient");
      const double adj = g[i] + cfg.weight_decay * w[i];
      v[i] = cfg.momentum * v[i] + adj;
      w[i] -= cfg.learning_rate * v[i];
    }
  }
}

inline TrainState train(const LabeledSet& knowns, const ModelConfig& mcfg,
                        const TrainConfig& tcfg) {
  detail::validate(tcfg);
  if (knowns.size() == 0)
    throw std::invalid_argument("train: empty training set");
  if (knowns.dim != mcfg.input_dim)
    throw std::invalid_argument("train: data dim " +
                                std::to_string(knowns.dim) +
                                " does not match input_dim " +
                                std::to_string(mcfg.input_dim));
  if (knowns.num_classes != mcfg.num_known)
    throw std::invalid_argument("train: data has " +
                                std::to_string(knowns.num_classes) +
                                " classes but the model expects " +
                                std::to_string(mcfg.num_known));
  for (int y : knowns.labels)
    if (y < 0 || static_cast<std::size_t>(y) >= mcfg.num_known)
      throw std::invalid_argument("train: label " + std::to_string(y) +
                                  " outside [0, num_known)");

  TrainState state;
  state.params = init_model(mcfg);
  std::vector<Tensor*> trained = state.params.parameter_list();
  if (tcfg.open_branch != OpenBranch::kTrain) {
    // only extractor + closed head learn in the diagnostic modes
    trained.resize(2 * state.params.extractor.size() + 2);
  }
  state.velocity.reserve(trained.size());
  for (Tensor* t : trained)
    state.velocity.emplace_back(t->numel(), 0.0);

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
    const std::uint64_t shuffle_seed =
        data_shuffle_seed(tcfg.run_seed, epoch);
    for (const Batch& batch : batches(knowns, tcfg.batch_size, shuffle_seed)) {
      Tape tape;
      for (Tensor* t : trained) tape.watch(*t);

      Tensor z = extract(state.params, batch.features);
      Tensor closed = closed_logits(state.params, z);
      Tensor ce = cross_entropy_loss(closed, batch.labels);
      Tensor loss = ce;

      StepLoss rec;
      rec.step = step;
      rec.ce = ce.item();

      if (tcfg.open_branch != OpenBranch::kOff) {
        Tensor zo = tcfg.open_branch == OpenBranch::kFrozen ? z.detach() : z;
        Tensor open_lg = cbc_logits(state.params, zo);
        Tensor open = tcfg.open_loss == OpenLoss::kCbc
                          ? cbc_loss(open_lg, batch.labels)
                          : bce_loss(open_lg, batch.labels);
        rec.open = open.item();
        loss = add(loss, open);
      }
      if (tcfg.use_entropy && tcfg.lambda_ent != 0.0) {
        Tensor ent = entropy_loss(closed);
        rec.ent = ent.item();
        loss = add(loss, scale(ent, tcfg.lambda_ent));
      }
      rec.total = loss.item();
      if (!std::isfinite(rec.total))
        throw NumericError("train: non-finite loss at step " +
                           std::to_string(step) + " (ce=" +
                           std::to_string(rec.ce) + ", open=" +
                           std::to_string(rec.open) + ", ent=" +
                           std::to_string(rec.ent) + ")");

      tape.backward(loss);
      sgd_step(trained, state.velocity, tcfg);
      state.history.push_back(rec);
      ++step;
    }
    state.epoch = epoch + 1;
  }
  return state;
}

}  // namespace osr
