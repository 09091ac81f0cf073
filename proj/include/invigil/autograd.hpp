#pragma once

// Reverse-mode automatic differentiation over a recorded tape.
//
// Every operation appends one node holding its forward value, the ids of
// its inputs and a closure that maps the node's gradient onto its inputs.
// Ids are assigned in recording order, so the tape is already a
// topological order and backward() is a single reverse sweep.

#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "invigil/kernels.hpp"
#include "invigil/tensor.hpp"

namespace invigil {

template <typename T>
class Tape;

/// Handle to a node on a tape.
template <typename T>
class Var {
public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  std::size_t id() const noexcept { return id_; }
  Tape<T>& tape() const noexcept { return *tape_; }
  const Tensor<T>& value() const { return tape_->value(*this); }
  const Shape& shape() const { return value().shape(); }
  Tensor<T> grad() const { return tape_->grad(*this); }

private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
public:
  using Backward = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  struct Node {
    std::string op;
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<std::size_t> inputs;
    Backward backward;
    bool requires_grad = false;
    bool leaf = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
    check_finite(value, "leaf");
    Node node;
    node.op = "leaf";
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    node.leaf = true;
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Append an operation node. The closure is dropped when no input needs
  /// a gradient.
  Var<T> record(std::string op, Tensor<T> value, std::vector<std::size_t> inputs,
                Backward backward) {
    check_finite(value, op);
    Node node;
    node.op = std::move(op);
    node.value = std::move(value);
    for (auto id : inputs) {
      if (id >= nodes_.size()) throw Error("tape: input id does not precede its consumer");
      node.requires_grad = node.requires_grad || nodes_[id].requires_grad;
    }
    node.inputs = std::move(inputs);
    if (node.requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id()).value; }
  const Node& node(Var<T> v) const { return nodes_.at(v.id()); }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient of the last backward() target w.r.t. `v`; zeros when `v` is
  /// not on any path to it.
  Tensor<T> grad(Var<T> v) const {
    const Node& node = nodes_.at(v.id());
    if (node.grad.empty()) return Tensor<T>::zeros(node.value.shape());
    return node.grad;
  }

  void accumulate(std::size_t id, const Tensor<T>& g) {
    Node& node = nodes_.at(id);
    if (!node.requires_grad) return;
    node.value.require_same_shape(g, ("gradient for " + node.op).c_str());
    if (node.grad.empty()) {
      node.grad = g;
    } else {
      node.grad += g;
    }
  }

  void accumulate(std::size_t id, Tensor<T>&& g) {
    Node& node = nodes_.at(id);
    if (!node.requires_grad) return;
    if (node.grad.empty()) {
      node.value.require_same_shape(g, ("gradient for " + node.op).c_str());
      node.grad = std::move(g);
    } else {
      node.grad += g;
    }
  }

  /// Reverse sweep from a scalar node. Intermediate gradients are released
  /// once propagated; leaf gradients are kept.
  void backward(Var<T> loss) {
    Node& root = nodes_.at(loss.id());
    if (root.value.size() != 1) {
      throw ShapeError("backward: loss node must be scalar, got shape " +
                       shape_string(root.value.shape()));
    }
    for (auto& node : nodes_) node.grad = Tensor<T>();
    if (!root.requires_grad) return;
    root.grad = Tensor<T>(root.value.shape(), T{1});
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (node.leaf || !node.requires_grad || node.grad.empty() || !node.backward) continue;
      node.backward(*this, node.grad);
      node.grad = Tensor<T>();
    }
  }

private:
  static void check_finite(const Tensor<T>& value, const std::string& op) {
    if (!value.all_finite()) throw NumericError("non-finite value produced by " + op);
  }

  // deque keeps references to earlier nodes valid while recording.
  std::deque<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Differentiable operations.

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, std::type_identity_t<std::optional<Var<T>>> bias,
              int stride, int pad) {
  Tape<T>& tape = input.tape();
  const Tensor<T>* b = bias ? &bias->value() : nullptr;
  auto out = kernels::conv2d_forward(input.value(), kernel.value(), b, stride, pad);
  std::vector<std::size_t> ins{input.id(), kernel.id()};
  if (bias) ins.push_back(bias->id());
  const std::size_t xi = input.id(), ki = kernel.id();
  const std::optional<std::size_t> bi = bias ? std::optional(bias->id()) : std::nullopt;
  return tape.record("conv2d", std::move(out), ins,
                     [xi, ki, bi, stride, pad](Tape<T>& t, const Tensor<T>& g) {
                       auto grads = kernels::conv2d_backward(
                           t.value(Var<T>(&t, xi)), t.value(Var<T>(&t, ki)), g, stride, pad,
                           t.requires_grad(xi), t.requires_grad(ki),
                           bi && t.requires_grad(*bi));
                       if (!grads.input.empty()) t.accumulate(xi, std::move(grads.input));
                       if (!grads.kernel.empty()) t.accumulate(ki, std::move(grads.kernel));
                       if (bi && !grads.bias.empty()) t.accumulate(*bi, std::move(grads.bias));
                     });
}

/// Batch normalization over N, H, W per channel. Train mode normalizes with
/// batch statistics and updates `state`; eval mode reads `state` only.
template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormState<T>& state, Mode mode,
                  T momentum = static_cast<T>(kBatchNormMomentum),
                  T eps = static_cast<T>(kBatchNormEps)) {
  kernels::check_batch_norm_shapes(x.shape(), gamma.shape(), beta.shape(),
                                   state.running_mean.size(), state.running_var.size());
  if (!(eps > T{0})) throw std::invalid_argument("batch_norm: eps must be positive");
  const bool batch_stats = mode == Mode::train;
  auto saved = batch_stats ? kernels::batch_norm_train_stats(x.value(), state, momentum, eps)
                           : kernels::batch_norm_eval_stats(state, eps);
  auto out = kernels::batch_norm_apply(x.value(), gamma.value(), beta.value(), saved);
  const std::size_t xi = x.id(), gi = gamma.id(), bi = beta.id();
  return x.tape().record(
      "batch_norm", std::move(out), {xi, gi, bi},
      [xi, gi, bi, batch_stats, saved = std::move(saved)](Tape<T>& t, const Tensor<T>& g) {
        auto grads = kernels::batch_norm_backward(t.value(Var<T>(&t, xi)),
                                                  t.value(Var<T>(&t, gi)), saved, g,
                                                  batch_stats);
        t.accumulate(xi, std::move(grads.input));
        t.accumulate(gi, std::move(grads.gamma));
        t.accumulate(bi, std::move(grads.beta));
      });
}

/// Eval-mode batch normalization against read-only statistics.
template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, const BatchNormState<T>& state,
                  T eps = static_cast<T>(kBatchNormEps)) {
  BatchNormState<T> copy = state;
  return batch_norm(x, gamma, beta, copy, Mode::eval, T{0}, eps);
}

template <typename T>
Var<T> relu(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = v > T{0} ? v : T{0};
  const std::size_t xi = x.id();
  const std::size_t self = x.tape().size();
  return x.tape().record("relu", std::move(out), {xi},
                         [xi, self](Tape<T>& t, const Tensor<T>& g) {
                           const Tensor<T>& y = t.value(Var<T>(&t, self));
                           Tensor<T> gx(g.shape());
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             gx[i] = y[i] > T{0} ? g[i] : T{0};
                           }
                           t.accumulate(xi, std::move(gx));
                         });
}

template <typename T>
Var<T> concat_channels(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: need at least one part");
  std::vector<const Tensor<T>*> values;
  std::vector<std::size_t> ids, extents;
  for (const auto& p : parts) {
    values.push_back(&p.value());
    ids.push_back(p.id());
  }
  auto out = kernels::concat_channels<T>(values);
  for (const auto& p : parts) extents.push_back(p.shape()[1]);
  return parts[0].tape().record(
      "concat_channels", std::move(out), ids,
      [ids, extents](Tape<T>& t, const Tensor<T>& g) {
        auto pieces = kernels::split_channels<T>(g, extents);
        for (std::size_t i = 0; i < ids.size(); ++i) t.accumulate(ids[i], std::move(pieces[i]));
      });
}

template <typename T>
Var<T> concat_channels(std::initializer_list<Var<T>> parts) {
  std::vector<Var<T>> list(parts);
  return concat_channels<T>(std::span<const Var<T>>(list));
}

template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  auto out = kernels::global_avg_pool(x.value());
  const std::size_t xi = x.id();
  Shape in_shape = x.shape();
  if (in_shape[2] * in_shape[3] == 0) throw ShapeError("global_avg_pool: empty plane");
  return x.tape().record("global_avg_pool", std::move(out), {xi},
                         [xi, in_shape](Tape<T>& t, const Tensor<T>& g) {
                           t.accumulate(xi, kernels::global_avg_pool_backward(in_shape, g));
                         });
}

template <typename T>
Var<T> fully_connected(Var<T> x, Var<T> weight, Var<T> bias) {
  auto out = kernels::fully_connected(x.value(), weight.value(), bias.value());
  const std::size_t xi = x.id(), wi = weight.id(), bi = bias.id();
  return x.tape().record("fully_connected", std::move(out), {xi, wi, bi},
                         [xi, wi, bi](Tape<T>& t, const Tensor<T>& g) {
                           auto grads = kernels::fully_connected_backward(
                               t.value(Var<T>(&t, xi)), t.value(Var<T>(&t, wi)), g);
                           t.accumulate(xi, std::move(grads.input));
                           t.accumulate(wi, std::move(grads.weight));
                           t.accumulate(bi, std::move(grads.bias));
                         });
}

template <typename T, typename Rng>
Var<T> dropout(Var<T> x, T p, Mode mode, Rng& rng) {
  if (!(p >= T{0} && p < T{1})) throw std::invalid_argument("dropout: p must be in [0, 1)");
  if (mode == Mode::eval || p == T{0}) {
    const std::size_t xi = x.id();
    return x.tape().record("dropout", x.value(), {xi},
                           [xi](Tape<T>& t, const Tensor<T>& g) { t.accumulate(xi, g); });
  }
  std::vector<std::uint8_t> keep;
  auto out = kernels::dropout_train(x.value(), p, rng, keep);
  const std::size_t xi = x.id();
  const T keep_prob = T{1} - p;
  return x.tape().record("dropout", std::move(out), {xi},
                         [xi, keep = std::move(keep), keep_prob](Tape<T>& t,
                                                                 const Tensor<T>& g) {
                           Tensor<T> gx(g.shape());
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             gx[i] = keep[i] ? g[i] / keep_prob : T{0};
                           }
                           t.accumulate(xi, std::move(gx));
                         });
}

template <typename T>
struct LossOutput {
  Var<T> loss;
  Tensor<T> probabilities;
};

/// Mean categorical cross entropy over the batch together with the softmax
/// probabilities. d loss / d logits = (softmax - one_hot) / N.
template <typename T>
LossOutput<T> softmax_cross_entropy(Var<T> logits, std::span<const int> labels) {
  const T loss = kernels::cross_entropy(logits.value(), labels);
  auto probs = kernels::softmax(logits.value());
  const std::size_t li = logits.id();
  std::vector<int> targets(labels.begin(), labels.end());
  auto node = logits.tape().record(
      "softmax_cross_entropy", Tensor<T>::scalar(loss), {li},
      [li, probs, targets = std::move(targets)](Tape<T>& t, const Tensor<T>& g) {
        const std::size_t rows = probs.dim(0), k = probs.dim(1);
        Tensor<T> gz = probs;
        for (std::size_t r = 0; r < rows; ++r) gz[r * k + targets[r]] -= T{1};
        const T scale = g[0] / static_cast<T>(rows);
        for (auto& v : gz.values()) v *= scale;
        t.accumulate(li, std::move(gz));
      });
  return {node, std::move(probs)};
}

/// Sum of all elements.
template <typename T>
Var<T> sum(Var<T> x) {
  T total{0};
  for (auto v : x.value().values()) total += v;
  const std::size_t xi = x.id();
  Shape shape = x.shape();
  return x.tape().record("sum", Tensor<T>::scalar(total), {xi},
                         [xi, shape](Tape<T>& t, const Tensor<T>& g) {
                           t.accumulate(xi, Tensor<T>(shape, g[0]));
                         });
}

/// Sum of x * weights with fixed weights.
template <typename T>
Var<T> weighted_sum(Var<T> x, const Tensor<T>& weights) {
  x.value().require_same_shape(weights, "weighted_sum");
  T total{0};
  for (std::size_t i = 0; i < weights.size(); ++i) total += x.value()[i] * weights[i];
  const std::size_t xi = x.id();
  return x.tape().record("weighted_sum", Tensor<T>::scalar(total), {xi},
                         [xi, weights](Tape<T>& t, const Tensor<T>& g) {
                           Tensor<T> gx = weights;
                           for (auto& v : gx.values()) v *= g[0];
                           t.accumulate(xi, std::move(gx));
                         });
}

template <typename T>
Var<T> square(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v *= v;
  const std::size_t xi = x.id();
  return x.tape().record("square", std::move(out), {xi},
                         [xi](Tape<T>& t, const Tensor<T>& g) {
                           const Tensor<T>& xv = t.value(Var<T>(&t, xi));
                           Tensor<T> gx(g.shape());
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] = 2 * xv[i] * g[i];
                           t.accumulate(xi, std::move(gx));
                         });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  a.value().require_same_shape(b.value(), "add");
  Tensor<T> out = a.value();
  out += b.value();
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record("add", std::move(out), {ai, bi},
                         [ai, bi](Tape<T>& t, const Tensor<T>& g) {
                           t.accumulate(ai, g);
                           t.accumulate(bi, g);
                         });
}

} // namespace invigil
