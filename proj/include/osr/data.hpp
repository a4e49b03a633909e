#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "osr/tensor.hpp"

// Datasets, known/unknown class splits, batching, and the CSV feature
// format. Every randomized operation here is a pure function of its seed.

namespace osr {

// File- and format-level failures; the CLI maps these to their own exit code.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LabeledSet {
  std::size_t dim = 0;
  std::size_t num_classes = 0;
  std::vector<double> features;  // row-major [size() x dim]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }

  std::span<const double> row(std::size_t i) const {
    return {features.data() + i * dim, dim};
  }

  void push_row(std::span<const double> x, int label) {
    features.insert(features.end(), x.begin(), x.end());
    labels.push_back(label);
  }

  Tensor feature_tensor() const {
    return Tensor::matrix(size(), dim, features);
  }
};

struct SplitSpec {
  std::vector<int> known_ids;    // ascending original class ids
  std::vector<int> unknown_ids;  // ascending, disjoint from known_ids
  std::uint64_t seed = 0;

  std::size_t num_known() const { return known_ids.size(); }

  // Original id -> contiguous label in [0, num_known), or -1 if unknown.
  std::vector<int> remap_table(std::size_t num_classes) const {
    std::vector<int> table(num_classes, -1);
    for (std::size_t i = 0; i < known_ids.size(); ++i) {
      if (known_ids[i] < 0 ||
          static_cast<std::size_t>(known_ids[i]) >= num_classes)
        throw std::invalid_argument("split: class id " +
                                    std::to_string(known_ids[i]) +
                                    " out of range for " +
                                    std::to_string(num_classes) + " classes");
      table[known_ids[i]] = static_cast<int>(i);
    }
    return table;
  }
};

struct SyntheticSpec {
  std::size_t num_classes = 8;
  std::size_t dim = 16;
  std::size_t samples_per_class = 400;
  double cluster_spread = 1.0;
  double separation = 8.0;  // pairwise distance between cluster means
  std::uint64_t seed = 0;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline double next_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;  // [0,1)
}

// Box-Muller pair; explicit so sampling stays reproducible bit for bit.
inline std::pair<double, double> next_gaussian_pair(std::mt19937_64& rng) {
  const double u1 =
      (static_cast<double>(rng() >> 11) + 1.0) * 0x1.0p-53;  // (0,1]
  const double u2 = next_uniform(rng);
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double t = 2.0 * std::numbers::pi * u2;
  return {r * std::cos(t), r * std::sin(t)};
}

template <typename T>
inline void seeded_shuffle(std::vector<T>& v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = v.size(); i > 1; --i)
    std::swap(v[i - 1], v[rng() % i]);
}

}  // namespace detail

// Deterministic cluster mean for class `c`: scaled basis vertices, every
// pair of means exactly `separation` apart.
inline std::vector<double> synthetic_mean(const SyntheticSpec& spec,
                                          std::size_t c) {
  std::vector<double> mu(spec.dim, 0.0);
  mu[c] = spec.separation / std::numbers::sqrt2;
  return mu;
}

// Isotropic Gaussian clusters, one per class, around the vertex means
// above; only the sample noise is random.
inline LabeledSet generate_synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes == 0 || spec.dim == 0 || spec.samples_per_class == 0)
    throw std::invalid_argument("synthetic spec: counts must be positive");
  if (spec.cluster_spread < 0.0 || spec.separation < 0.0)
    throw std::invalid_argument("synthetic spec: scales must be nonnegative");
  if (spec.num_classes > spec.dim)
    throw std::invalid_argument(
        "synthetic spec: the axis-per-class layout needs dim >= classes, "
        "got dim " +
        std::to_string(spec.dim) + " for " +
        std::to_string(spec.num_classes) + " classes");

  std::mt19937_64 rng(spec.seed);
  LabeledSet out;
  out.dim = spec.dim;
  out.num_classes = spec.num_classes;
  out.features.reserve(spec.num_classes * spec.samples_per_class * spec.dim);
  std::vector<double> x(spec.dim);
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    const std::vector<double> mu = synthetic_mean(spec, c);
    for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
      for (std::size_t d = 0; d < spec.dim; d += 2) {
        auto [g0, g1] = detail::next_gaussian_pair(rng);
        x[d] = g0;
        if (d + 1 < spec.dim) x[d + 1] = g1;
      }
      for (std::size_t d = 0; d < spec.dim; ++d)
        x[d] = mu[d] + spec.cluster_spread * x[d];
      out.push_row(x, static_cast<int>(c));
    }
  }
  return out;
}

inline SplitSpec make_split(std::size_t num_classes, std::size_t num_known,
                            std::uint64_t seed) {
  if (num_known < 2 || num_known >= num_classes)
    throw std::invalid_argument("make_split: need 2 <= num_known < " +
                                std::to_string(num_classes) + ", got " +
                                std::to_string(num_known));
  std::vector<int> ids(num_classes);
  for (std::size_t i = 0; i < num_classes; ++i) ids[i] = static_cast<int>(i);
  detail::seeded_shuffle(ids, seed);
  SplitSpec split;
  split.seed = seed;
  split.known_ids.assign(ids.begin(), ids.begin() + num_known);
  split.unknown_ids.assign(ids.begin() + num_known, ids.end());
  std::sort(split.known_ids.begin(), split.known_ids.end());
  std::sort(split.unknown_ids.begin(), split.unknown_ids.end());
  return split;
}

// Degenerate split with every class known; used when training on a file
// whose labels are already the classes of interest.
inline SplitSpec identity_split(std::size_t num_classes) {
  SplitSpec split;
  for (std::size_t i = 0; i < num_classes; ++i)
    split.known_ids.push_back(static_cast<int>(i));
  return split;
}

// Partitions into (knowns with remapped labels, unknowns with original
// labels). Every sample lands on exactly one side.
inline std::pair<LabeledSet, LabeledSet> apply_split(const LabeledSet& data,
                                                     const SplitSpec& split) {
  const std::vector<int> table = split.remap_table(data.num_classes);
  for (int id : split.unknown_ids)
    if (id < 0 || static_cast<std::size_t>(id) >= data.num_classes)
      throw std::invalid_argument("split: class id " + std::to_string(id) +
                                  " out of range for " +
                                  std::to_string(data.num_classes) +
                                  " classes");
  LabeledSet knowns, unknowns;
  knowns.dim = unknowns.dim = data.dim;
  knowns.num_classes = split.known_ids.size();
  unknowns.num_classes = data.num_classes;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const int remapped = table[data.labels[i]];
    if (remapped >= 0)
      knowns.push_row(data.row(i), remapped);
    else
      unknowns.push_row(data.row(i), data.labels[i]);
  }
  return {std::move(knowns), std::move(unknowns)};
}

// Seeded per-class partition; `fraction` of each class goes to the second
// set (rounded to nearest).
inline std::pair<LabeledSet, LabeledSet> stratified_split(
    const LabeledSet& data, double fraction, std::uint64_t seed) {
  if (fraction < 0.0 || fraction > 1.0)
    throw std::invalid_argument("stratified_split: fraction outside [0,1]");
  std::vector<std::vector<std::size_t>> by_class(data.num_classes);
  for (std::size_t i = 0; i < data.size(); ++i)
    by_class[data.labels[i]].push_back(i);
  std::vector<bool> in_second(data.size(), false);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    detail::seeded_shuffle(idx, detail::mix_seed(seed, c));
    const auto take = static_cast<std::size_t>(
        std::llround(fraction * static_cast<double>(idx.size())));
    for (std::size_t k = 0; k < take; ++k) in_second[idx[k]] = true;
  }
  LabeledSet first, second;
  first.dim = second.dim = data.dim;
  first.num_classes = second.num_classes = data.num_classes;
  for (std::size_t i = 0; i < data.size(); ++i)
    (in_second[i] ? second : first).push_row(data.row(i), data.labels[i]);
  return {std::move(first), std::move(second)};
}

struct Batch {
  Tensor features;
  std::vector<int> labels;
};

// One epoch of seeded-shuffled batches; the last partial batch is kept.
inline std::vector<Batch> batches(const LabeledSet& data,
                                  std::size_t batch_size,
                                  std::uint64_t shuffle_seed) {
  if (batch_size == 0)
    throw std::invalid_argument("batches: batch_size must be at least 1");
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  detail::seeded_shuffle(order, shuffle_seed);
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, order.size() - start);
    std::vector<double> feats;
    feats.reserve(n * data.dim);
    std::vector<int> labels;
    labels.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t i = order[start + k];
      auto r = data.row(i);
      feats.insert(feats.end(), r.begin(), r.end());
      labels.push_back(data.labels[i]);
    }
    out.push_back({Tensor::matrix(n, data.dim, std::move(feats)),
                   std::move(labels)});
  }
  return out;
}

// CSV feature files: header `label,f0,...,f{d-1}`, doubles rendered with
// shortest round-trip precision.

namespace detail {

inline void render_double(std::string& line, double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  line.append(buf, p);
  (void)ec;
}

inline double parse_double(std::string_view tok, std::size_t line_no) {
  double v = 0.0;
  auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc{} || p != tok.data() + tok.size())
    throw DataError("line " + std::to_string(line_no) +
                    ": malformed number '" + std::string(tok) + "'");
  return v;
}

inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      out.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

}  // namespace detail

inline void save_features(const LabeledSet& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  std::string line = "label";
  for (std::size_t d = 0; d < data.dim; ++d)
    line += ",f" + std::to_string(d);
  out << line << '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    line = std::to_string(data.labels[i]);
    for (double v : data.row(i)) {
      line += ',';
      detail::render_double(line, v);
    }
    out << line << '\n';
  }
  if (!out) throw DataError("write to '" + path + "' failed");
}

inline LabeledSet load_features(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line.empty())
    throw DataError("'" + path + "': missing header line");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  auto header = detail::split_fields(line);
  if (header.size() < 2 || header[0] != "label")
    throw DataError("'" + path +
                    "': malformed header, expected 'label,f0,...'");
  for (std::size_t d = 1; d < header.size(); ++d)
    if (header[d] != "f" + std::to_string(d - 1))
      throw DataError("'" + path + "': malformed header, expected column f" +
                      std::to_string(d - 1) + ", got '" +
                      std::string(header[d]) + "'");

  LabeledSet data;
  data.dim = header.size() - 1;
  std::size_t line_no = 1;
  std::vector<double> row(data.dim);
  int max_label = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = detail::split_fields(line);
    if (fields.size() != data.dim + 1)
      throw DataError("'" + path + "' line " + std::to_string(line_no) +
                      ": expected " + std::to_string(data.dim + 1) +
                      " fields, got " + std::to_string(fields.size()));
    int label = 0;
    auto [p, ec] =
        std::from_chars(fields[0].data(), fields[0].data() + fields[0].size(),
                        label);
    if (ec != std::errc{} || p != fields[0].data() + fields[0].size() ||
        label < 0)
      throw DataError("'" + path + "' line " + std::to_string(line_no) +
                      ": label out of range: '" + std::string(fields[0]) +
                      "'");
    for (std::size_t d = 0; d < data.dim; ++d)
      row[d] = detail::parse_double(fields[d + 1], line_no);
    data.push_row(row, label);
    max_label = std::max(max_label, label);
  }
  data.num_classes = static_cast<std::size_t>(max_label + 1);
  if (data.size() == 0)
    throw DataError("'" + path + "': no data rows");
  return data;
}

}  // namespace osr
