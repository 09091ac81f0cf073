#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "invigil/autograd.hpp"

namespace invigil {

struct GradCheckOptions {
  double step = 1e-5;
  /// Coordinates sampled per input; 0 checks every coordinate.
  std::size_t max_coords_per_input = 0;
  std::uint64_t seed = 0;
  /// Denominator floor so gradients near zero are judged absolutely.
  double floor = 1e-4;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates_checked = 0;
};

inline double gradient_relative_error(double analytic, double numeric, double floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

/// Compare reverse-mode gradients of a scalar function against central
/// differences (f(x+h) - f(x-h)) / 2h, one coordinate at a time.
///
/// `fn(tape, vars)` must build a scalar node from `vars`, one leaf per
/// entry of `inputs`, and be deterministic.
template <typename Fn>
GradCheckResult finite_difference_check(Fn&& fn, const std::vector<Tensor<double>>& inputs,
                                        const GradCheckOptions& options = {}) {
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& in : inputs) vars.push_back(tape.leaf(in));
    Var<double> out = fn(tape, std::span<const Var<double>>(vars));
    tape.backward(out);
    for (const auto& v : vars) analytic.push_back(v.grad());
  }

  auto evaluate = [&](const std::vector<Tensor<double>>& values) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& in : values) vars.push_back(tape.leaf(in));
    return fn(tape, std::span<const Var<double>>(vars)).value()[0];
  };

  GradCheckResult result;
  std::mt19937_64 rng(options.seed);
  std::vector<Tensor<double>> probe = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<std::size_t> coords(inputs[i].size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_input && coords.size() > options.max_coords_per_input) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_input);
    }
    for (auto c : coords) {
      const double original = inputs[i][c];
      const double up = original + options.step;
      const double down = original - options.step;
      probe[i][c] = up;
      const double f_up = evaluate(probe);
      probe[i][c] = down;
      const double f_down = evaluate(probe);
      probe[i][c] = original;
      const double numeric = (f_up - f_down) / (up - down);
      const double err = gradient_relative_error(analytic[i][c], numeric, options.floor);
      ++result.coordinates_checked;
      if (err >= result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_input = i;
        result.worst_index = c;
        result.analytic = analytic[i][c];
        result.numeric = numeric;
      }
    }
  }
  return result;
}

} // namespace invigil
