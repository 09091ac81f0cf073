#pragma once

// Single-dense-block convolutional classifier:
//
//   stem conv3x3 (input_channels -> initial_channels)
//   dense block of L layers, each  BN -> ReLU -> conv3x3 (-> K) -> dropout,
//     its output concatenated onto everything before it
//   BN -> ReLU -> global average pool -> fully connected -> logits
//
// There are no transition, bottleneck or compression stages.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "invigil/autograd.hpp"
#include "invigil/error.hpp"

namespace invigil {

struct ModelConfig {
  int growth_rate = 12;
  int dense_layers = 16;
  double dropout = 0.2;
  int num_classes = 2;
  int initial_channels = 24;
  int input_size = 32;
  int input_channels = 3;

  void validate() const {
    if (growth_rate < 1) throw ConfigError("growth_rate must be positive");
    if (dense_layers < 0) throw ConfigError("dense_layers must be non-negative");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
    if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
    if (initial_channels < 1) throw ConfigError("initial_channels must be positive");
    if (input_size < 1) throw ConfigError("input_size must be positive");
    if (input_channels < 1) throw ConfigError("input_channels must be positive");
  }

  /// Channels entering dense layer `layer` (0-based).
  int layer_input_channels(int layer) const { return initial_channels + layer * growth_rate; }

  /// Channels leaving the dense block.
  int feature_width() const { return initial_channels + dense_layers * growth_rate; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  /// Conv and fully-connected weights take weight decay; norms and biases do not.
  bool decay = false;
};

template <typename T>
struct NormLayer {
  std::string name;
  BatchNormState<T> state;
};

template <typename T>
class Model {
public:
  /// Weights ~ N(0, 2 / fan_in), biases 0, BN gamma 1 and beta 0.
  static Model build(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Model model;
    model.config_ = config;
    Rng rng(seed);
    const auto c0 = static_cast<std::size_t>(config.initial_channels);
    const auto in_c = static_cast<std::size_t>(config.input_channels);
    const auto k = static_cast<std::size_t>(config.growth_rate);

    model.add_weight("stem.conv.weight", {c0, in_c, 3, 3}, in_c * 9, rng);
    for (int l = 0; l < config.dense_layers; ++l) {
      const auto c = static_cast<std::size_t>(config.layer_input_channels(l));
      const std::string prefix = "block0.layer" + std::to_string(l);
      model.add_norm(prefix + ".norm", c);
      model.add_weight(prefix + ".conv.weight", {k, c, 3, 3}, c * 9, rng);
    }
    const auto width = static_cast<std::size_t>(config.feature_width());
    const auto classes = static_cast<std::size_t>(config.num_classes);
    model.add_norm("head.norm", width);
    model.add_weight("classifier.weight", {width, classes}, width, rng);
    model.add_param("classifier.bias", Tensor<T>::zeros({classes}), false);
    return model;
  }

  const ModelConfig& config() const noexcept { return config_; }
  std::vector<Parameter<T>>& parameters() noexcept { return params_; }
  const std::vector<Parameter<T>>& parameters() const noexcept { return params_; }
  std::vector<NormLayer<T>>& norms() noexcept { return norms_; }
  const std::vector<NormLayer<T>>& norms() const noexcept { return norms_; }

  const Parameter<T>& parameter(std::string_view name) const {
    for (const auto& p : params_) {
      if (p.name == name) return p;
    }
    throw std::out_of_range("no parameter named " + std::string(name));
  }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& p : params_) total += p.value.size();
    return total;
  }

  /// One gradient-tracking leaf per parameter, in parameters() order.
  std::vector<Var<T>> bind(Tape<T>& tape) const {
    std::vector<Var<T>> vars;
    vars.reserve(params_.size());
    for (const auto& p : params_) vars.push_back(tape.leaf(p.value, true));
    return vars;
  }

  /// Train mode applies dropout and updates running statistics.
  Var<T> forward(Tape<T>& tape, std::span<const Var<T>> params, const Tensor<T>& batch,
                 Mode mode, Rng& rng) {
    return run(tape, params, batch, mode, &rng, mode == Mode::train ? &norms_ : nullptr);
  }

  Var<T> forward(Tape<T>& tape, std::span<const Var<T>> params, const Tensor<T>& batch) const {
    return run(tape, params, batch, Mode::eval, nullptr, nullptr);
  }

  /// Eval-mode logits without gradient tracking.
  Tensor<T> logits(const Tensor<T>& batch) const {
    Tape<T> tape;
    std::vector<Var<T>> vars;
    vars.reserve(params_.size());
    for (const auto& p : params_) vars.push_back(tape.constant(p.value));
    return forward(tape, vars, batch).value();
  }

  void store_gradients(std::span<const Var<T>> params) {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].grad = params[i].grad();
  }

  void zero_grad() {
    for (auto& p : params_) p.grad = Tensor<T>::zeros(p.value.shape());
  }

  template <typename U>
  Model<U> cast() const {
    Model<U> out;
    out.config_ = config_;
    for (const auto& p : params_) {
      out.params_.push_back({p.name, p.value.template cast<U>(),
                             Tensor<U>::zeros(p.value.shape()), p.decay});
    }
    for (const auto& n : norms_) {
      out.norms_.push_back({n.name, {n.state.running_mean.template cast<U>(),
                                     n.state.running_var.template cast<U>()}});
    }
    return out;
  }

  /// FNV-1a over every parameter value and running statistic.
  std::uint64_t state_hash() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const Tensor<T>& t) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
      for (std::size_t i = 0; i < t.size() * sizeof(T); ++i) {
        h ^= bytes[i];
        h *= 1099511628211ull;
      }
    };
    for (const auto& p : params_) mix(p.value);
    for (const auto& n : norms_) {
      mix(n.state.running_mean);
      mix(n.state.running_var);
    }
    return h;
  }

private:
  template <typename U>
  friend class Model;

  void add_param(std::string name, Tensor<T> value, bool decay) {
    Tensor<T> grad = Tensor<T>::zeros(value.shape());
    params_.push_back({std::move(name), std::move(value), std::move(grad), decay});
  }

  void add_weight(std::string name, Shape shape, std::size_t fan_in, Rng& rng) {
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    Tensor<T> w(std::move(shape));
    for (auto& v : w.values()) v = static_cast<T>(normal(rng));
    add_param(std::move(name), std::move(w), true);
  }

  void add_norm(const std::string& name, std::size_t channels) {
    add_param(name + ".weight", Tensor<T>::ones({channels}), false);
    add_param(name + ".bias", Tensor<T>::zeros({channels}), false);
    norms_.push_back({name, BatchNormState<T>::init(channels)});
  }

  void check_batch(const Tensor<T>& batch) const {
    const auto c = static_cast<std::size_t>(config_.input_channels);
    const auto s = static_cast<std::size_t>(config_.input_size);
    if (batch.rank() != 4 || batch.dim(1) != c || batch.dim(2) != s || batch.dim(3) != s) {
      throw ShapeError("model expects a batch of shape (N," + std::to_string(c) + "," +
                       std::to_string(s) + "," + std::to_string(s) + "), got " +
                       shape_string(batch.shape()));
    }
  }

  Var<T> run(Tape<T>& tape, std::span<const Var<T>> params, const Tensor<T>& batch, Mode mode,
             Rng* rng, std::vector<NormLayer<T>>* mutable_norms) const {
    check_batch(batch);
    if (params.size() != params_.size()) {
      throw ShapeError("model forward: expected " + std::to_string(params_.size()) +
                       " parameter handles, got " + std::to_string(params.size()));
    }
    std::size_t next_param = 0, next_norm = 0;
    auto take = [&]() { return params[next_param++]; };
    auto normalize = [&](Var<T> x) {
      Var<T> gamma = take();
      Var<T> beta = take();
      const std::size_t index = next_norm++;
      if (mutable_norms) {
        return batch_norm(x, gamma, beta, (*mutable_norms)[index].state, Mode::train);
      }
      return batch_norm(x, gamma, beta, norms_[index].state);
    };

    Var<T> input = tape.constant(batch);
    Var<T> features = conv2d<T>(input, take(), std::nullopt, 1, 1);
    const T p = static_cast<T>(config_.dropout);
    for (int l = 0; l < config_.dense_layers; ++l) {
      Var<T> h = relu(normalize(features));
      h = conv2d<T>(h, take(), std::nullopt, 1, 1);
      if (mode == Mode::train && p > T{0}) h = dropout(h, p, Mode::train, *rng);
      features = concat_channels<T>({features, h});
    }
    Var<T> pooled = global_avg_pool(relu(normalize(features)));
    Var<T> weight = take();
    Var<T> bias = take();
    return fully_connected(pooled, weight, bias);
  }

  ModelConfig config_;
  std::vector<Parameter<T>> params_;
  std::vector<NormLayer<T>> norms_;
};

} // namespace invigil
