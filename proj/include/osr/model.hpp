#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "osr/tensor.hpp"

// The network: an MLP feature extractor, an affine closed-set head over
// the feature vector, and one independent affine binary head per known
// class. All heads consume the same raw features; nothing is shared
// between the closed head and the binary heads except the extractor.

namespace osr {

struct ModelConfig {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden_dims{64, 64};
  std::size_t feature_dim = 32;
  std::size_t num_known = 0;  // >= 2: the hard-negative loss needs a negative
  std::uint64_t init_seed = 0;
};

struct LinearLayer {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]
};

struct ModelParams {
  ModelConfig config;
  std::vector<LinearLayer> extractor;
  LinearLayer closed_head;                 // [feature_dim x num_known]
  std::vector<LinearLayer> binary_heads;   // num_known of [feature_dim x 1]

  // Stable flat ordering used by the optimizer and the checkpoint format.
  std::vector<Tensor*> parameter_list() {
    std::vector<Tensor*> out;
    for (auto& l : extractor) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    out.push_back(&closed_head.weight);
    out.push_back(&closed_head.bias);
    for (auto& h : binary_heads) {
      out.push_back(&h.weight);
      out.push_back(&h.bias);
    }
    return out;
  }
};

namespace detail {

inline void validate(const ModelConfig& c) {
  if (c.input_dim == 0 || c.feature_dim == 0)
    throw std::invalid_argument("model config: dimensions must be positive");
  for (std::size_t h : c.hidden_dims)
    if (h == 0)
      throw std::invalid_argument("model config: hidden dims must be positive");
  if (c.num_known < 2)
    throw std::invalid_argument("model config: num_known must be at least 2");
}

// Uniform in [-a, a] with a = sqrt(6 / (fan_in + fan_out)), mapped from
// raw 64-bit draws so initialization is reproducible bit for bit.
inline LinearLayer glorot_layer(std::mt19937_64& rng, std::size_t fan_in,
                                std::size_t fan_out) {
  const double a =
      std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> w(fan_in * fan_out);
  for (auto& v : w) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;  // [0,1)
    v = a * (2.0 * u - 1.0);
  }
  return {Tensor::matrix(fan_in, fan_out, std::move(w)),
          Tensor::from({fan_out}, std::vector<double>(fan_out, 0.0))};
}

}  // namespace detail

inline ModelParams init_model(const ModelConfig& config) {
  detail::validate(config);
  std::mt19937_64 rng(config.init_seed);
  ModelParams p;
  p.config = config;
  std::size_t in = config.input_dim;
  for (std::size_t h : config.hidden_dims) {
    p.extractor.push_back(detail::glorot_layer(rng, in, h));
    in = h;
  }
  p.extractor.push_back(detail::glorot_layer(rng, in, config.feature_dim));
  p.closed_head =
      detail::glorot_layer(rng, config.feature_dim, config.num_known);
  for (std::size_t i = 0; i < config.num_known; ++i)
    p.binary_heads.push_back(detail::glorot_layer(rng, config.feature_dim, 1));
  return p;
}

// Z = MLP(batch): ReLU after every layer except the last, raw features out.
inline Tensor extract(const ModelParams& p, const Tensor& batch) {
  if (batch.rank() != 2 || batch.cols() != p.config.input_dim)
    throw std::invalid_argument(
        "extract: batch width " +
        std::to_string(batch.rank() == 2 ? batch.cols() : 0) +
        " does not match input_dim " + std::to_string(p.config.input_dim));
  Tensor h = batch;
  for (std::size_t i = 0; i < p.extractor.size(); ++i) {
    h = add_bias(matmul(h, p.extractor[i].weight), p.extractor[i].bias);
    if (i + 1 < p.extractor.size()) h = relu(h);
  }
  return h;
}

inline Tensor closed_logits(const ModelParams& p, const Tensor& features) {
  if (features.rank() != 2 || features.cols() != p.config.feature_dim)
    throw std::invalid_argument("closed_logits: feature width mismatch");
  return add_bias(matmul(features, p.closed_head.weight), p.closed_head.bias);
}

// Column i is the affine score of binary head i on the shared features.
inline Tensor cbc_logits(const ModelParams& p, const Tensor& features) {
  if (features.rank() != 2 || features.cols() != p.config.feature_dim)
    throw std::invalid_argument("cbc_logits: feature width mismatch");
  std::vector<Tensor> cols;
  cols.reserve(p.binary_heads.size());
  for (const auto& h : p.binary_heads)
    cols.push_back(add_bias(matmul(features, h.weight), h.bias));
  return hstack(cols);
}

inline void watch_all(Tape& tape, ModelParams& p) {
  for (Tensor* t : p.parameter_list()) tape.watch(*t);
}

// Checkpoint document. JSON keeps 64-bit values bit-exact across a
// write/read round trip.

namespace detail {

inline nlohmann::ordered_json layer_to_json(const LinearLayer& l) {
  nlohmann::ordered_json j;
  j["w_shape"] = l.weight.shape();
  j["w"] = std::vector<double>(l.weight.values().begin(),
                               l.weight.values().end());
  j["b"] = std::vector<double>(l.bias.values().begin(), l.bias.values().end());
  return j;
}

inline LinearLayer layer_from_json(const nlohmann::json& j) {
  std::vector<std::size_t> shape = j.at("w_shape").get<std::vector<std::size_t>>();
  std::vector<double> w = j.at("w").get<std::vector<double>>();
  std::vector<double> b = j.at("b").get<std::vector<double>>();
  if (shape.size() != 2 || shape[0] * shape[1] != w.size() ||
      shape[1] != b.size())
    throw std::invalid_argument("checkpoint: inconsistent layer shapes");
  const std::size_t bias_len = b.size();
  return {Tensor::matrix(shape[0], shape[1], std::move(w)),
          Tensor::from({bias_len}, std::move(b))};
}

}  // namespace detail

inline nlohmann::ordered_json model_to_json(const ModelParams& p) {
  nlohmann::ordered_json j;
  j["config"] = {{"input_dim", p.config.input_dim},
                 {"hidden_dims", p.config.hidden_dims},
                 {"feature_dim", p.config.feature_dim},
                 {"num_known", p.config.num_known},
                 {"init_seed", p.config.init_seed}};
  j["extractor"] = nlohmann::ordered_json::array();
  for (const auto& l : p.extractor) j["extractor"].push_back(detail::layer_to_json(l));
  j["closed_head"] = detail::layer_to_json(p.closed_head);
  j["binary_heads"] = nlohmann::ordered_json::array();
  for (const auto& h : p.binary_heads)
    j["binary_heads"].push_back(detail::layer_to_json(h));
  return j;
}

inline ModelParams model_from_json(const nlohmann::json& j) {
  ModelParams p;
  const auto& c = j.at("config");
  p.config.input_dim = c.at("input_dim").get<std::size_t>();
  p.config.hidden_dims = c.at("hidden_dims").get<std::vector<std::size_t>>();
  p.config.feature_dim = c.at("feature_dim").get<std::size_t>();
  p.config.num_known = c.at("num_known").get<std::size_t>();
  p.config.init_seed = c.at("init_seed").get<std::uint64_t>();
  detail::validate(p.config);
  for (const auto& l : j.at("extractor")) p.extractor.push_back(detail::layer_from_json(l));
  p.closed_head = detail::layer_from_json(j.at("closed_head"));
  for (const auto& h : j.at("binary_heads"))
    p.binary_heads.push_back(detail::layer_from_json(h));
  if (p.binary_heads.size() != p.config.num_known)
    throw std::invalid_argument(
        "checkpoint: binary head count does not match num_known");
  return p;
}

}  // namespace osr
