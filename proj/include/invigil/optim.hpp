#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "invigil/error.hpp"
#include "invigil/model.hpp"

namespace invigil {

struct Hyper {
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  int epochs = 40;
  int batch_size = 64;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (!(beta1 > 0.0 && beta1 < 1.0)) throw ConfigError("beta1 must lie in (0, 1)");
    if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("beta2 must lie in (0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  }
};

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::int64_t t = 0;

  static AdamState init(const std::vector<Parameter<T>>& params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.push_back(Tensor<T>::zeros(p.value.shape()));
      s.v.push_back(Tensor<T>::zeros(p.value.shape()));
    }
    return s;
  }
};

/// One Adam step with coupled L2 decay on parameters flagged `decay`:
///   g = grad + wd * value;  m = b1 m + (1 - b1) g;  v = b2 v + (1 - b2) g^2
///   value -= lr * m_hat / (sqrt(v_hat) + eps)
template <typename T>
void adam_step(std::vector<Parameter<T>>& params, AdamState<T>& state, const Hyper& hyper) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam_step: optimizer state holds " + std::to_string(state.m.size()) +
                     " tensors for " + std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& shape = params[i].value.shape();
    if (params[i].grad.shape() != shape || state.m[i].shape() != shape || state.v[i].shape() != shape) {
      throw ShapeError("adam_step: shape mismatch for " + params[i].name);
    }
  }
  ++state.t;
  const double t = static_cast<double>(state.t);
  const T b1 = static_cast<T>(hyper.beta1), b2 = static_cast<T>(hyper.beta2);
  const T c1 = static_cast<T>(1.0 / (1.0 - std::pow(hyper.beta1, t)));
  const T c2 = static_cast<T>(1.0 / (1.0 - std::pow(hyper.beta2, t)));
  const T lr = static_cast<T>(hyper.learning_rate), eps = static_cast<T>(hyper.adam_eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    const T wd = p.decay ? static_cast<T>(hyper.weight_decay) : T{0};
    T* value = p.value.data();
    const T* grad = p.grad.data();
    T* m = state.m[i].data();
    T* v = state.v[i].data();
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const T g = grad[k] + wd * value[k];
      m[k] = b1 * m[k] + (T{1} - b1) * g;
      v[k] = b2 * v[k] + (T{1} - b2) * g * g;
      value[k] -= lr * (m[k] * c1) / (std::sqrt(v[k] * c2) + eps);
    }
  }
}

} // namespace invigil
