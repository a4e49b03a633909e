#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "osr/openset.hpp"

// Metrics for the repeated-split protocol: exact rank-based AUROC with
// known as the positive class, closed-set accuracy over known test
// samples, and accuracy of the (num_known + 1)-way decision with all
// unknown classes merged into one rejection class.

namespace osr {

// Exact Mann-Whitney statistic: the fraction of (known, unknown) pairs
// where the known sample scores higher, ties counting one half. Computed
// from tie-averaged ranks in integer half-units, so the result is
// bit-identical to brute-force pair counting.
inline double auroc(std::span<const double> known_scores,
                    std::span<const double> unknown_scores) {
  if (known_scores.empty() || unknown_scores.empty())
    throw std::invalid_argument(
        "auroc: both score lists must be nonempty");
  struct Entry {
    double score;
    bool known;
  };
  std::vector<Entry> all;
  all.reserve(known_scores.size() + unknown_scores.size());
  for (double s : known_scores) all.push_back({s, true});
  for (double s : unknown_scores) all.push_back({s, false});
  std::sort(all.begin(), all.end(),
            [](const Entry& a, const Entry& b) { return a.score < b.score; });

  // 2 * (sum of average ranks of known samples); integer by construction
  // since a tie block spanning 1-based ranks [i+1, j] averages (i+j+1)/2.
  std::int64_t rank2_known = 0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    const std::int64_t rank2 = static_cast<std::int64_t>(i + j + 1);
    for (std::size_t k = i; k < j; ++k)
      if (all[k].known) rank2_known += rank2;
    i = j;
  }
  const auto nk = static_cast<std::int64_t>(known_scores.size());
  const auto nu = static_cast<std::int64_t>(unknown_scores.size());
  const std::int64_t u2 = rank2_known - nk * (nk + 1);
  return static_cast<double>(u2) / static_cast<double>(2 * nk * nu);
}

inline double closed_accuracy(std::span<const int> predictions,
                              std::span<const int> labels) {
  if (predictions.size() != labels.size() || predictions.empty())
    throw std::invalid_argument("closed_accuracy: need matching nonempty lists");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (predictions[i] == labels[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

// Labels use kUnknownClass for every unknown-class sample.
inline double open_accuracy(std::span<const Decision> decisions,
                            std::span<const int> labels) {
  if (decisions.size() != labels.size() || decisions.empty())
    throw std::invalid_argument("open_accuracy: need matching nonempty lists");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (decisions[i].predicted_class == labels[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

struct Stats {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation, 0 for a single run
  std::size_t count = 0;
};

inline Stats aggregate(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("aggregate: no runs");
  Stats s;
  s.count = values.size();
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) /
           static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

}  // namespace osr
