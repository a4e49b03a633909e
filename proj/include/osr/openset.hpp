#pragma once

#include <algorithm>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

#include "osr/tensor.hpp"

// Test-time scoring. All three methods classify with the closed-set
// argmax; they differ in the confidence score that gates the
// known/unknown decision: the selected binary head's sigmoid (CBC), the
// maximum softmax probability (MSP), or the maximum raw logit (MLS).

namespace osr {

inline constexpr int kUnknownClass = -1;

enum class Method { kCbc, kMsp, kMls };

inline std::string_view method_name(Method m) {
  switch (m) {
    case Method::kCbc: return "CBC";
    case Method::kMsp: return "MSP";
    case Method::kMls: return "MLS";
  }
  return "?";
}

inline Method method_from_name(std::string_view name) {
  if (name == "CBC" || name == "cbc") return Method::kCbc;
  if (name == "MSP" || name == "msp") return Method::kMsp;
  if (name == "MLS" || name == "mls") return Method::kMls;
  throw std::invalid_argument("unknown method '" + std::string(name) + "'");
}

struct ScorePair {
  int predicted = 0;  // closed-set argmax
  double score = 0.0; // higher = more confidently known
};

struct Decision {
  int predicted_class = kUnknownClass;
  double score = 0.0;
  Method method = Method::kCbc;
};

namespace detail {

// Lowest index wins ties.
inline int argmax(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("argmax: empty row");
  int best = 0;
  for (std::size_t j = 1; j < v.size(); ++j)
    if (v[j] > v[best]) best = static_cast<int>(j);
  return best;
}

}  // namespace detail

inline ScorePair cbc_score(std::span<const double> closed_row,
                           std::span<const double> cbc_row) {
  if (closed_row.size() != cbc_row.size())
    throw std::invalid_argument("cbc_score: row widths disagree");
  const int yhat = detail::argmax(closed_row);
  const double s = std::clamp(detail::logistic(cbc_row[yhat]), kProbEps,
                              1.0 - kProbEps);
  return {yhat, s};
}

inline ScorePair msp_score(std::span<const double> closed_row) {
  const int yhat = detail::argmax(closed_row);
  std::vector<double> p(closed_row.size());
  detail::softmax_row(closed_row.data(), p.data(), closed_row.size());
  return {yhat, p[yhat]};
}

inline ScorePair mls_score(std::span<const double> closed_row) {
  const int yhat = detail::argmax(closed_row);
  return {yhat, closed_row[yhat]};
}

inline ScorePair score_row(Method m, std::span<const double> closed_row,
                           std::span<const double> cbc_row) {
  switch (m) {
    case Method::kCbc: return cbc_score(closed_row, cbc_row);
    case Method::kMsp: return msp_score(closed_row);
    case Method::kMls: return mls_score(closed_row);
  }
  throw std::logic_error("score_row: bad method");
}

// Scores at or above the threshold keep the closed-set prediction.
inline Decision decide(const ScorePair& sp, double threshold,
                       Method method = Method::kCbc) {
  Decision d;
  d.method = method;
  d.score = sp.score;
  d.predicted_class = sp.score < threshold ? kUnknownClass : sp.predicted;
  return d;
}

}  // namespace osr
