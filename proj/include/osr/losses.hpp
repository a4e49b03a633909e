#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "osr/tensor.hpp"

// Training objectives for the open-set classifier. The closed-set head is
// trained with cross-entropy plus an optional entropy-minimization
// regularizer; the per-class binary heads are trained either with the
// hard-negative CBC loss (each sample updates its positive head and the
// single most confusable negative head) or with plain one-vs-rest BCE.
// All losses are batch means of per-sample terms, implemented as fused
// tape nodes with analytic gradients.

namespace osr {

struct LossWeights {
  double lambda_ent = 0.1;
};

namespace detail {

inline void check_labels(std::span<const int> labels, std::size_t batch,
                         std::size_t num_classes, const char* who) {
  if (labels.size() != batch)
    throw std::invalid_argument(std::string(who) + ": got " +
                                std::to_string(labels.size()) +
                                " labels for a batch of " +
                                std::to_string(batch));
  for (std::size_t b = 0; b < labels.size(); ++b)
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= num_classes)
      throw std::invalid_argument(std::string(who) + ": label " +
                                  std::to_string(labels[b]) + " at row " +
                                  std::to_string(b) + " is outside [0, " +
                                  std::to_string(num_classes) + ")");
}

inline const std::shared_ptr<TensorNode>& logits_2d(const Tensor& t,
                                                    const char* who) {
  const auto& n = OpAccess::node(t);
  if (n->shape.size() != 2)
    throw std::invalid_argument(std::string(who) + ": logits must be B x N, got " +
                                detail::shape_str(n->shape));
  return n;
}

}  // namespace detail

// Mean over the batch of -log softmax(logits)[y], in fused log-sum-exp form.
inline Tensor cross_entropy_loss(const Tensor& logits,
                                 std::span<const int> labels) {
  const auto& ln = detail::logits_2d(logits, "cross_entropy_loss");
  const std::size_t m = ln->shape[0], n = ln->shape[1];
  detail::check_labels(labels, m, n, "cross_entropy_loss");
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double* z = ln->value.data() + i * n;
    total += detail::log_sum_exp(z, n) - z[labels[i]];
  }
  Tensor loss = OpAccess::make({1}, {total / static_cast<double>(m)});
  Tape* tape = OpAccess::joint_tape({&logits});
  auto out = OpAccess::node(loss).get();
  std::vector<int> y(labels.begin(), labels.end());
  OpAccess::record(tape, loss, {logits}, [out, m, n, y = std::move(y)] {
    auto& pl = *out->parents[0];
    pl.ensure_grad();
    const double g = out->grad[0] / static_cast<double>(m);
    std::vector<double> p(n);
    for (std::size_t i = 0; i < m; ++i) {
      detail::softmax_row(pl.value.data() + i * n, p.data(), n);
      for (std::size_t j = 0; j < n; ++j) pl.grad[i * n + j] += g * p[j];
      pl.grad[i * n + y[i]] -= g;
    }
  });
  return loss;
}

// Mean over the batch of the Shannon entropy of softmax(logits). Minimizing
// it sharpens closed-set predictions on known samples; the label plays no
// role in the term.
inline Tensor entropy_loss(const Tensor& logits) {
  const auto& ln = detail::logits_2d(logits, "entropy_loss");
  const std::size_t m = ln->shape[0], n = ln->shape[1];
  std::vector<double> probs(m * n);
  std::vector<double> row_entropy(m);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double* p = probs.data() + i * n;
    detail::softmax_row(ln->value.data() + i * n, p, n);
    double h = 0.0;
    for (std::size_t j = 0; j < n; ++j) h -= p[j] * detail::clamped_log(p[j]);
    row_entropy[i] = h;
    total += h;
  }
  Tensor loss = OpAccess::make({1}, {total / static_cast<double>(m)});
  Tape* tape = OpAccess::joint_tape({&logits});
  auto out = OpAccess::node(loss).get();
  OpAccess::record(tape, loss, {logits},
                   [out, m, n, probs = std::move(probs),
                    row_entropy = std::move(row_entropy)] {
                     auto& pl = *out->parents[0];
                     pl.ensure_grad();
                     const double g = out->grad[0] / static_cast<double>(m);
                     for (std::size_t i = 0; i < m; ++i) {
                       const double* p = probs.data() + i * n;
                       for (std::size_t j = 0; j < n; ++j)
                         pl.grad[i * n + j] +=
                             g * p[j] *
                             (-detail::clamped_log(p[j]) - row_entropy[i]);
                     }
                   });
  return loss;
}

namespace detail {

// Per-sample binary terms shared by the CBC and BCE losses. The positive
// term is -log sigma(z_y); a negative term is -log(1 - sigma(z_i)). The
// clamp keeps the reported value finite on saturated sigmoids; gradients
// use the smooth closed forms (p - 1 and p), which are already stable at
// any logit, so a head that starts saturated can still recover.
inline double positive_term(double z, double& dgrad) {
  const double p = logistic(z);
  dgrad = p - 1.0;
  return -clamped_log(p);
}

inline double negative_term(double z, double& dgrad) {
  const double p = logistic(z);
  dgrad = p;
  return -clamped_log(1.0 - p);
}

}  // namespace detail

// Hard-negative binary loss: each sample trains its positive head against
// the single negative head with the highest positive probability. Ties on
// the negative pick the lowest index.
inline Tensor cbc_loss(const Tensor& logits, std::span<const int> labels) {
  const auto& ln = detail::logits_2d(logits, "cbc_loss");
  const std::size_t m = ln->shape[0], n = ln->shape[1];
  if (n < 2)
    throw std::invalid_argument(
        "cbc_loss: needs at least 2 classes, got " + std::to_string(n));
  detail::check_labels(labels, m, n, "cbc_loss");
  std::vector<int> hard(m);
  std::vector<double> dpos(m), dneg(m);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double* z = ln->value.data() + i * n;
    const int y = labels[i];
    int best = -1;
    for (std::size_t j = 0; j < n; ++j) {
      if (static_cast<int>(j) == y) continue;
      if (best < 0 || z[j] > z[best]) best = static_cast<int>(j);
    }
    hard[i] = best;
    total += detail::positive_term(z[y], dpos[i]) +
             detail::negative_term(z[best], dneg[i]);
  }
  Tensor loss = OpAccess::make({1}, {total / static_cast<double>(m)});
  Tape* tape = OpAccess::joint_tape({&logits});
  auto out = OpAccess::node(loss).get();
  std::vector<int> y(labels.begin(), labels.end());
  OpAccess::record(tape, loss, {logits},
                   [out, m, n, y = std::move(y), hard = std::move(hard),
                    dpos = std::move(dpos), dneg = std::move(dneg)] {
                     auto& pl = *out->parents[0];
                     pl.ensure_grad();
                     const double g = out->grad[0] / static_cast<double>(m);
                     for (std::size_t i = 0; i < m; ++i) {
                       pl.grad[i * n + y[i]] += g * dpos[i];
                       pl.grad[i * n + hard[i]] += g * dneg[i];
                     }
                   });
  return loss;
}

// One-vs-rest BCE: every negative head contributes. The ablation
// counterpart of cbc_loss; identical to it when there are two classes.
inline Tensor bce_loss(const Tensor& logits, std::span<const int> labels) {
  const auto& ln = detail::logits_2d(logits, "bce_loss");
  const std::size_t m = ln->shape[0], n = ln->shape[1];
  detail::check_labels(labels, m, n, "bce_loss");
  std::vector<double> dgrad(m * n);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double* z = ln->value.data() + i * n;
    const int y = labels[i];
    double row = detail::positive_term(z[y], dgrad[i * n + y]);
    for (std::size_t j = 0; j < n; ++j)
      if (static_cast<int>(j) != y)
        row += detail::negative_term(z[j], dgrad[i * n + j]);
    total += row;
  }
  Tensor loss = OpAccess::make({1}, {total / static_cast<double>(m)});
  Tape* tape = OpAccess::joint_tape({&logits});
  auto out = OpAccess::node(loss).get();
  OpAccess::record(tape, loss, {logits},
                   [out, m, n, dgrad = std::move(dgrad)] {
                     auto& pl = *out->parents[0];
                     pl.ensure_grad();
                     const double g = out->grad[0] / static_cast<double>(m);
                     for (std::size_t i = 0; i < m * n; ++i)
                       pl.grad[i] += g * dgrad[i];
                   });
  return loss;
}

// ce + open + lambda * entropy on the same logits. `use_cbc` selects the
// hard-negative loss over plain BCE for the binary heads.
inline Tensor total_loss(const Tensor& closed_logits, const Tensor& cbc_logits,
                         std::span<const int> labels, const LossWeights& w,
                         bool use_cbc = true) {
  if (OpAccess::node(closed_logits)->shape[0] !=
      OpAccess::node(cbc_logits)->shape[0])
    throw std::invalid_argument("total_loss: batch sizes disagree");
  if (w.lambda_ent < 0.0)
    throw std::invalid_argument("total_loss: lambda_ent must be nonnegative");
  Tensor open = use_cbc ? cbc_loss(cbc_logits, labels)
                        : bce_loss(cbc_logits, labels);
  Tensor loss = add(cross_entropy_loss(closed_logits, labels), open);
  if (w.lambda_ent != 0.0)
    loss = add(loss, scale(entropy_loss(closed_logits), w.lambda_ent));
  return loss;
}

}  // namespace osr
