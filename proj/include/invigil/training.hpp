#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "invigil/manifest.hpp"
#include "invigil/memory.hpp"
#include "invigil/metrics.hpp"
#include "invigil/model.hpp"
#include "invigil/optim.hpp"
#include "invigil/patch.hpp"

namespace invigil {

/// Normalized patches with their labels, in manifest order.
struct Dataset {
  std::vector<std::vector<float>> patches;
  std::vector<int> labels;

  std::size_t size() const noexcept { return patches.size(); }

  Tensor<float> batch(std::span<const std::size_t> indices) const {
    std::vector<std::vector<float>> chosen;
    chosen.reserve(indices.size());
    for (auto i : indices) chosen.push_back(patches[i]);
    return stack_patches(chosen);
  }
};

/// Loads and normalizes every record of `split`. Unlabeled records are an
/// error naming the first one.
inline Dataset load_dataset(const DatasetManifest& m, Split split) {
  Dataset d;
  for (const auto* r : records_in(m, split)) {
    if (!r->label) throw ManifestError("patch " + r->patch_id() + " is unlabeled");
    d.patches.push_back(normalize_patch(load_patch(m, *r)));
    d.labels.push_back(*r->label);
  }
  return d;
}

/// Index of the larger logit; ties go to class 0.
inline int argmax_class(const float* logits, std::size_t classes) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < classes; ++c) {
    if (logits[c] > logits[best]) best = c;
  }
  return static_cast<int>(best);
}

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0.0;
  double accuracy = 0.0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;

  double final_loss() const { return epochs.empty() ? 0.0 : epochs.back().mean_loss; }
  double final_accuracy() const { return epochs.empty() ? 0.0 : epochs.back().accuracy; }
};

using EpochCallback = std::function<void(const EpochStats&)>;

/// Seeded mini-batch training. Each epoch shuffles the sample order, walks
/// it in batches (the last may be short), and takes one Adam step per batch.
/// Loss and accuracy are averaged over samples from the train-mode forward
/// passes. The result depends only on the model, dataset order, hyper and
/// seed.
inline TrainHistory train(Model<float>& model, const Dataset& data, const Hyper& hyper,
                          const EpochCallback& on_epoch = {}) {
  hyper.validate();
  if (data.size() == 0) throw TrainingError("training set is empty");
  retain_freed_memory();
  std::mt19937_64 shuffle_rng(hyper.seed);
  Rng dropout_rng(hyper.seed ^ 0x9e3779b97f4a7c15ull);
  auto state = AdamState<float>::init(model.parameters());
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto batch_size = static_cast<std::size_t>(hyper.batch_size);
  TrainHistory history;
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0, b = 0; start < order.size(); start += batch_size, ++b) {
      const std::span<const std::size_t> indices(order.data() + start,
                                                 std::min(batch_size, order.size() - start));
      std::vector<int> labels;
      for (auto i : indices) labels.push_back(data.labels[i]);
      try {
        Tape<float> tape;
        auto vars = model.bind(tape);
        auto logits = model.forward(tape, vars, data.batch(indices), Mode::train, dropout_rng);
        auto out = softmax_cross_entropy(logits, labels);
        const float loss = out.loss.value()[0];
        if (!std::isfinite(loss)) throw NumericError("loss is not finite");
        tape.backward(out.loss);
        model.store_gradients(vars);
        loss_sum += static_cast<double>(loss) * static_cast<double>(indices.size());
        const auto& lv = logits.value();
        for (std::size_t r = 0; r < indices.size(); ++r) {
          correct += argmax_class(lv.data() + r * 2, 2) == labels[r];
        }
      } catch (const NumericError& e) {
        throw TrainingError("non-finite value at epoch " + std::to_string(epoch + 1) + ", batch " +
                            std::to_string(b + 1) + ": " + e.what());
      }
      adam_step(model.parameters(), state, hyper);
    }
    EpochStats stats{epoch + 1, loss_sum / static_cast<double>(data.size()),
                     static_cast<double>(correct) / static_cast<double>(data.size())};
    history.epochs.push_back(stats);
    if (on_epoch) on_epoch(stats);
  }
  return history;
}

struct Prediction {
  int label = 0;
  std::array<float, 2> probabilities{};  // (normal, abnormal)

  friend bool operator==(const Prediction&, const Prediction&) = default;
};

inline constexpr std::size_t kInferBatch = 64;

/// Eval-mode predictions, batched. Every operation is per-sample in eval
/// mode, so the result does not depend on how patches are grouped.
inline std::vector<Prediction> infer(const Model<float>& model,
                                     std::span<const std::vector<float>> patches) {
  const auto& cfg = model.config();
  if (cfg.input_size != static_cast<int>(kPatchSize) || cfg.input_channels != static_cast<int>(kPatchChannels) ||
      cfg.num_classes != 2) {
    throw ShapeError("model expects " + std::to_string(cfg.input_channels) + "x" +
                     std::to_string(cfg.input_size) + "x" + std::to_string(cfg.input_size) + " inputs and " +
                     std::to_string(cfg.num_classes) + " classes; patches are 3x32x32 with 2 classes");
  }
  std::vector<Prediction> out;
  out.reserve(patches.size());
  for (std::size_t start = 0; start < patches.size(); start += kInferBatch) {
    const auto chunk = patches.subspan(start, std::min(kInferBatch, patches.size() - start));
    const auto logits = model.logits(stack_patches(chunk));
    const auto probs = kernels::softmax(logits);
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      out.push_back({argmax_class(logits.data() + r * 2, 2), {probs[r * 2], probs[r * 2 + 1]}});
    }
  }
  return out;
}

inline ConfusionMatrix evaluate(const Model<float>& model, const Dataset& data) {
  if (data.size() == 0) throw TrainingError("test set is empty");
  ConfusionMatrix cm;
  const auto predictions = infer(model, data.patches);
  for (std::size_t i = 0; i < data.size(); ++i) cm.add(data.labels[i], predictions[i].label);
  return cm;
}

/// Separable synthetic patches in [0, 1], CHW. Class 0 is a smooth colour
/// gradient; class 1 is a gradient with a bright square placed off centre.
inline std::vector<float> synthetic_patch(int label, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double n = static_cast<double>(kPatchSize - 1);
  std::vector<float> px(kPatchValues);
  for (std::size_t c = 0; c < kPatchChannels; ++c) {
    const double base = 0.2 + 0.3 * unit(rng);
    const double gx = (unit(rng) - 0.5) * 0.4, gy = (unit(rng) - 0.5) * 0.4;
    for (std::size_t y = 0; y < kPatchSize; ++y) {
      for (std::size_t x = 0; x < kPatchSize; ++x) {
        px[(c * kPatchSize + y) * kPatchSize + x] =
            static_cast<float>(base + gx * (static_cast<double>(x) / n) + gy * (static_cast<double>(y) / n));
      }
    }
  }
  if (label == 1) {
    const std::size_t side = 8;
    std::uniform_int_distribution<std::size_t> corner(2, 6);
    std::bernoulli_distribution flip(0.5);
    std::size_t x0 = corner(rng), y0 = corner(rng);
    if (flip(rng)) x0 = kPatchSize - side - x0;
    if (flip(rng)) y0 = kPatchSize - side - y0;
    for (std::size_t c = 0; c < kPatchChannels; ++c) {
      for (std::size_t y = y0; y < y0 + side; ++y) {
        for (std::size_t x = x0; x < x0 + side; ++x) px[(c * kPatchSize + y) * kPatchSize + x] = 1.0f;
      }
    }
  }
  return px;
}

/// `count` normalized synthetic patches with alternating labels.
inline Dataset synthetic_dataset(std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Dataset d;
  for (std::size_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % 2);
    d.patches.push_back(normalize_patch(synthetic_patch(label, rng)));
    d.labels.push_back(label);
  }
  return d;
}

} // namespace invigil
