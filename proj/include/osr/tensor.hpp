#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

// Dense row-major tensors of doubles with reverse-mode autodiff.
//
// A Tape records every operation whose inputs include at least one
// tape-attached tensor. Nodes are appended in execution order, so the
// record is topologically sorted by construction; backward() walks it
// once in reverse. A tape lives for a single forward/backward pass;
// destroying it detaches surviving tensors (parameters keep their
// gradients and can be watched again on the next tape).

namespace osr {

using Shape = std::vector<std::size_t>;

// Lower clamp for probabilities fed to log(); keeps losses finite on
// saturated sigmoids/softmaxes.
inline constexpr double kProbEps = 1e-12;

class Tape;

namespace detail {

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  if (s.empty()) os << "scalar";
  return os.str();
}

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until watched or reached by backward
  Tape* tape = nullptr;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backprop;  // null for leaves

  std::size_t numel() const { return value.size(); }

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return Tensor(std::move(shape), {});
  }

  static Tensor from(Shape shape, std::vector<double> values) {
    return Tensor(std::move(shape), std::move(values));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values) {
    return from({rows, cols}, std::move(values));
  }

  static Tensor vector(std::vector<double> values) {
    Shape s{values.size()};
    return from(std::move(s), std::move(values));
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  const Shape& shape() const { return node()->shape; }
  std::size_t numel() const { return node()->numel(); }
  std::size_t rank() const { return node()->shape.size(); }

  std::size_t rows() const {
    require_rank2("rows");
    return node()->shape[0];
  }
  std::size_t cols() const {
    require_rank2("cols");
    return node()->shape[1];
  }

  std::span<const double> values() const {
    return {node()->value.data(), node()->value.size()};
  }
  std::span<double> mutable_values() {
    return {node()->value.data(), node()->value.size()};
  }

  double at(std::size_t r, std::size_t c) const {
    require_rank2("at");
    return node()->value[r * node()->shape[1] + c];
  }

  double item() const {
    if (numel() != 1)
      throw std::invalid_argument("item: tensor has " +
                                  std::to_string(numel()) + " elements");
    return node()->value[0];
  }

  bool has_grad() const { return !node()->grad.empty(); }

  std::span<const double> grad() const {
    const auto& g = node()->grad;
    if (g.empty())
      throw std::logic_error("grad: no gradient recorded for this tensor");
    return {g.data(), g.size()};
  }

  bool attached() const { return node()->tape != nullptr; }
  Tape* tape() const { return node()->tape; }

  // Value copy with no tape link.
  Tensor detach() const {
    return Tensor(node()->shape, node()->value);
  }

  bool valid() const { return node_ != nullptr; }

 private:
  friend class Tape;
  friend struct OpAccess;

  Tensor(Shape shape, std::vector<double> values) {
    const std::size_t n = detail::shape_numel(shape);
    if (shape.empty() || n == 0)
      throw std::invalid_argument("tensor shape must have positive extents");
    if (!values.empty() && values.size() != n)
      throw std::invalid_argument("tensor data length " +
                                  std::to_string(values.size()) +
                                  " does not match shape " +
                                  detail::shape_str(shape));
    node_ = std::make_shared<detail::TensorNode>();
    node_->shape = std::move(shape);
    if (values.empty())
      node_->value.assign(n, 0.0);
    else
      node_->value = std::move(values);
  }

  explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}

  const std::shared_ptr<detail::TensorNode>& node() const {
    if (!node_) throw std::logic_error("operation on empty tensor handle");
    return node_;
  }

  void require_rank2(const char* what) const {
    if (node()->shape.size() != 2)
      throw std::invalid_argument(std::string(what) + ": tensor is " +
                                  detail::shape_str(node()->shape) +
                                  ", expected a matrix");
  }

  std::shared_ptr<detail::TensorNode> node_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  ~Tape() {
    for (auto& n : nodes_) {
      n->tape = nullptr;
      n->backprop = nullptr;
      n->parents.clear();
    }
  }

  // Registers a leaf. Gradients are zeroed so each tape accumulates from
  // scratch; re-watching on the same tape is a no-op.
  void watch(Tensor& t) {
    auto& n = t.node();
    if (n->tape == this) {
      n->grad.assign(n->numel(), 0.0);
      return;
    }
    if (n->tape != nullptr)
      throw std::invalid_argument("watch: tensor is attached to another tape");
    n->tape = this;
    n->grad.assign(n->numel(), 0.0);
    nodes_.push_back(n);
  }

  void backward(const Tensor& loss) {
    if (backward_done_)
      throw std::logic_error("backward: already run on this tape");
    const auto& ln = loss.node();
    if (ln->tape != this)
      throw std::invalid_argument(
          "backward: loss is detached from this tape");
    if (ln->numel() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got " +
                                  detail::shape_str(ln->shape));
    for (auto& n : nodes_) n->ensure_grad();
    ln->grad[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
      if ((*it)->backprop) (*it)->backprop();
    backward_done_ = true;
  }

  std::size_t node_count() const { return nodes_.size(); }
  bool backward_done() const { return backward_done_; }

 private:
  friend struct OpAccess;

  void record(const std::shared_ptr<detail::TensorNode>& n) {
    n->tape = this;
    nodes_.push_back(n);
  }

  std::vector<std::shared_ptr<detail::TensorNode>> nodes_;
  bool backward_done_ = false;
};

// Shared plumbing for operation definitions. Ops live as free functions;
// this accessor keeps Tensor/Tape internals out of their public surface.
struct OpAccess {
  static const std::shared_ptr<detail::TensorNode>& node(const Tensor& t) {
    return t.node();
  }

  static Tensor make(Shape shape, std::vector<double> values) {
    return Tensor(std::move(shape), std::move(values));
  }

  // Tape shared by the attached inputs, or null when all are detached.
  // Mixing two live tapes in one op is an error.
  static Tape* joint_tape(std::initializer_list<const Tensor*> ins) {
    Tape* tape = nullptr;
    for (const Tensor* t : ins) {
      Tape* tt = t->node()->tape;
      if (tt == nullptr) continue;
      if (tape == nullptr)
        tape = tt;
      else if (tape != tt)
        throw std::invalid_argument("operands belong to different tapes");
    }
    return tape;
  }

  // Attaches `out` to `tape` with the given parents and backward rule.
  // No-op when tape is null (pure inference).
  static void record(Tape* tape, Tensor& out,
                     std::vector<Tensor> parents,
                     std::function<void()> backprop) {
    if (tape == nullptr) return;
    auto& n = out.node();
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backprop = std::move(backprop);
    tape->record(n);
  }
};

inline void backward(const Tensor& loss) {
  Tape* t = loss.tape();
  if (t == nullptr)
    throw std::invalid_argument("backward: loss tensor is detached");
  t->backward(loss);
}

namespace detail {

// Numerically safe log of a probability.
inline double clamped_log(double p) {
  return std::log(std::clamp(p, kProbEps, 1.0 - kProbEps));
}

inline double logistic(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                  : std::exp(x) / (1.0 + std::exp(x));
}

// In-place rowwise softmax of one row, max-shifted.
inline void softmax_row(const double* z, double* p, std::size_t n) {
  double m = z[0];
  for (std::size_t j = 1; j < n; ++j) m = std::max(m, z[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    p[j] = std::exp(z[j] - m);
    sum += p[j];
  }
  for (std::size_t j = 0; j < n; ++j) p[j] /= sum;
}

inline double log_sum_exp(const double* z, std::size_t n) {
  double m = z[0];
  for (std::size_t j = 1; j < n; ++j) m = std::max(m, z[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) sum += std::exp(z[j] - m);
  return m + std::log(sum);
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& an = OpAccess::node(a);
  const auto& bn = OpAccess::node(b);
  if (an->shape.size() != 2 || bn->shape.size() != 2 ||
      an->shape[1] != bn->shape[0])
    throw std::invalid_argument("matmul: incompatible shapes " +
                                detail::shape_str(an->shape) + " and " +
                                detail::shape_str(bn->shape));
  const std::size_t m = an->shape[0], k = an->shape[1], n = bn->shape[1];
  std::vector<double> out(m * n, 0.0);
  const double* A = an->value.data();
  const double* B = bn->value.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * B[p * n + j];
    }
  Tensor c = OpAccess::make({m, n}, std::move(out));
  Tape* tape = OpAccess::joint_tape({&a, &b});
  auto cn = OpAccess::node(c).get();
  OpAccess::record(tape, c, {a, b}, [cn, m, k, n] {
    auto& pa = *cn->parents[0];
    auto& pb = *cn->parents[1];
    pa.ensure_grad();
    pb.ensure_grad();
    const double* G = cn->grad.data();
    const double* A = pa.value.data();
    const double* B = pb.value.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double g = G[i * n + j];
        if (g == 0.0) continue;
        for (std::size_t p = 0; p < k; ++p) {
          pa.grad[i * k + p] += g * B[p * n + j];
          pb.grad[p * n + j] += g * A[i * k + p];
        }
      }
  });
  return c;
}

inline Tensor add_bias(const Tensor& a, const Tensor& bias) {
  const auto& an = OpAccess::node(a);
  const auto& bn = OpAccess::node(bias);
  if (an->shape.size() != 2 || bn->shape.size() != 1 ||
      an->shape[1] != bn->shape[0])
    throw std::invalid_argument("add_bias: trailing dimension mismatch, " +
                                detail::shape_str(an->shape) + " vs " +
                                detail::shape_str(bn->shape));
  const std::size_t m = an->shape[0], n = an->shape[1];
  std::vector<double> out(an->value);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bn->value[j];
  Tensor c = OpAccess::make({m, n}, std::move(out));
  Tape* tape = OpAccess::joint_tape({&a, &bias});
  auto cn = OpAccess::node(c).get();
  OpAccess::record(tape, c, {a, bias}, [cn, m, n] {
    auto& pa = *cn->parents[0];
    auto& pb = *cn->parents[1];
    pa.ensure_grad();
    pb.ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double g = cn->grad[i * n + j];
        pa.grad[i * n + j] += g;
        pb.grad[j] += g;  // bias gradient is the column sum
      }
  });
  return c;
}

inline Tensor relu(const Tensor& a) {
  const auto& an = OpAccess::node(a);
  std::vector<double> out(an->value.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = an->value[i] > 0.0 ? an->value[i] : 0.0;
  Tensor c = OpAccess::make(an->shape, std::move(out));
  Tape* tape = OpAccess::joint_tape({&a});
  auto cn = OpAccess::node(c).get();
  OpAccess::record(tape, c, {a}, [cn] {
    auto& pa = *cn->parents[0];
    pa.ensure_grad();
    for (std::size_t i = 0; i < cn->value.size(); ++i)
      if (cn->value[i] > 0.0) pa.grad[i] += cn->grad[i];  // subgradient 0 at 0
  });
  return c;
}

inline Tensor softmax(const Tensor& a) {
  const auto& an = OpAccess::node(a);
  if (an->shape.size() != 2 || an->shape[1] < 1)
    throw std::invalid_argument("softmax: expected a matrix, got " +
                                detail::shape_str(an->shape));
  const std::size_t m = an->shape[0], n = an->shape[1];
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    detail::softmax_row(an->value.data() + i * n, out.data() + i * n, n);
  Tensor c = OpAccess::make({m, n}, std::move(out));
  Tape* tape = OpAccess::joint_tape({&a});
  auto cn = OpAccess::node(c).get();
  OpAccess::record(tape, c, {a}, [cn, m, n] {
    auto& pa = *cn->parents[0];
    pa.ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      const double* p = cn->value.data() + i * n;
      const double* g = cn->grad.data() + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[j] * p[j];
      for (std::size_t j = 0; j < n; ++j)
        pa.grad[i * n + j] += p[j] * (g[j] - dot);
    }
  });
  return c;
}

inline Tensor sigmoid(const Tensor& a) {
  const auto& an = OpAccess::node(a);
  std::vector<double> out(an->value.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::clamp(detail::logistic(an->value[i]), kProbEps,
                        1.0 - kProbEps);
  Tensor c = OpAccess::make(an->shape, std::move(out));
  Tape* tape = OpAccess::joint_tape({&a});
  auto cn = OpAccess::node(c).get();
  OpAccess::record(tape, c, {a}, [cn] {
    auto& pa = *cn->parents[0];
    pa.ensure_grad();
    for (std::size_t i = 0; i < cn->value.size(); ++i) {
      const double s = cn->value[i];
      pa.grad[i] += cn->grad[i] * s * (1.0 - s);
    }
  });
  return c;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  const auto& an = OpAccess::node(a);
  const auto& bn = OpAccess::node(b);
  if (an->shape != bn->shape)
    throw std::invalid_argument("add: shape mismatch " +
                                detail::shape_str(an->shape) + " vs " +
                                detail::shape_str(bn->shape));
  std::vector<double> out(an->value.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = an->value[i] + bn->value[i];
  Tensor c = OpAccess::make(an->shape, std::move(out));
  Tape* tape = OpAccess::joint_tape({&a, &b});
  auto cn = OpAccess::node(c).get();
  OpAccess::record(tape, c, {a, b}, [cn] {
    auto& pa = *cn->parents[0];
    auto& pb = *cn->parents[1];
    pa.ensure_grad();
    pb.ensure_grad();
    for (std::size_t i = 0; i < cn->value.size(); ++i) {
      pa.grad[i] += cn->grad[i];
      pb.grad[i] += cn->grad[i];
    }
  });
  return c;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  const auto& an = OpAccess::node(a);
  const auto& bn = OpAccess::node(b);
  if (an->shape != bn->shape)
    throw std::invalid_argument("mul: shape mismatch " +
                                detail::shape_str(an->shape) + " vs " +
                                detail::shape_str(bn->shape));
  std::vector<double> out(an->value.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = an->value[i] * bn->value[i];
  Tensor c = OpAccess::make(an->shape, std::move(out));
  Tape* tape = OpAccess::joint_tape({&a, &b});
  auto cn = OpAccess::node(c).get();
  OpAccess::record(tape, c, {a, b}, [cn] {
    auto& pa = *cn->parents[0];
    auto& pb = *cn->parents[1];
    pa.ensure_grad();
    pb.ensure_grad();
    for (std::size_t i = 0; i < cn->value.size(); ++i) {
      pa.grad[i] += cn->grad[i] * pb.value[i];
      pb.grad[i] += cn->grad[i] * pa.value[i];
    }
  });
  return c;
}

inline Tensor scale(const Tensor& a, double factor) {
  const auto& an = OpAccess::node(a);
  std::vector<double> out(an->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->value[i] * factor;
  Tensor c = OpAccess::make(an->shape, std::move(out));
  Tape* tape = OpAccess::joint_tape({&a});
  auto cn = OpAccess::node(c).get();
  OpAccess::record(tape, c, {a}, [cn, factor] {
    auto& pa = *cn->parents[0];
    pa.ensure_grad();
    for (std::size_t i = 0; i < cn->value.size(); ++i)
      pa.grad[i] += cn->grad[i] * factor;
  });
  return c;
}

inline Tensor sum(const Tensor& a) {
  const auto& an = OpAccess::node(a);
  double s = 0.0;
  for (double v : an->value) s += v;
  Tensor c = OpAccess::make({1}, {s});
  Tape* tape = OpAccess::joint_tape({&a});
  auto cn = OpAccess::node(c).get();
  OpAccess::record(tape, c, {a}, [cn] {
    auto& pa = *cn->parents[0];
    pa.ensure_grad();
    const double g = cn->grad[0];
    for (std::size_t i = 0; i < pa.value.size(); ++i) pa.grad[i] += g;
  });
  return c;
}

// Column-wise concatenation of matrices with equal row counts.
inline Tensor hstack(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("hstack: no inputs");
  const std::size_t m = OpAccess::node(parts[0])->shape[0];
  std::size_t total = 0;
  for (const Tensor& t : parts) {
    const auto& tn = OpAccess::node(t);
    if (tn->shape.size() != 2 || tn->shape[0] != m)
      throw std::invalid_argument("hstack: row count mismatch at " +
                                  detail::shape_str(tn->shape));
    total += tn->shape[1];
  }
  std::vector<double> out(m * total);
  std::vector<std::size_t> widths;
  widths.reserve(parts.size());
  std::size_t col = 0;
  for (const Tensor& t : parts) {
    const auto& tn = OpAccess::node(t);
    const std::size_t w = tn->shape[1];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j)
        out[i * total + col + j] = tn->value[i * w + j];
    widths.push_back(w);
    col += w;
  }
  Tensor c = OpAccess::make({m, total}, std::move(out));
  std::vector<const Tensor*> ptrs;
  ptrs.reserve(parts.size());
  for (const Tensor& t : parts) ptrs.push_back(&t);
  Tape* tape = nullptr;
  for (const Tensor* t : ptrs) {
    Tape* tt = t->tape();
    if (tt == nullptr) continue;
    if (tape == nullptr)
      tape = tt;
    else if (tape != tt)
      throw std::invalid_argument("hstack: operands belong to different tapes");
  }
  auto cn = OpAccess::node(c).get();
  OpAccess::record(tape, c, {parts.begin(), parts.end()},
                   [cn, m, total, widths = std::move(widths)] {
                     std::size_t col = 0;
                     for (std::size_t p = 0; p < cn->parents.size(); ++p) {
                       auto& pp = *cn->parents[p];
                       pp.ensure_grad();
                       const std::size_t w = widths[p];
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < w; ++j)
                           pp.grad[i * w + j] += cn->grad[i * total + col + j];
                       col += w;
                     }
                   });
  return c;
}

}  // namespace osr
