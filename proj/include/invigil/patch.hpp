#pragma once

// 32x32 RGB patches around an anchor point. Pixels are stored CHW as floats
// in [0, 1]; standardization happens when a patch is read for the model.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "invigil/error.hpp"
#include "invigil/image.hpp"
#include "invigil/tensor.hpp"

namespace invigil {

inline constexpr std::size_t kPatchSize = 32;
inline constexpr std::size_t kPatchChannels = 3;
inline constexpr std::size_t kPatchValues = kPatchSize * kPatchSize * kPatchChannels;
inline constexpr double kNormalizeEps = 1e-6;

/// Top-left corner of the crop window and the clamped centre it came from.
struct PatchWindow {
  std::size_t x0 = 0;
  std::size_t y0 = 0;
  double center_x = 0.0;
  double center_y = 0.0;
};

namespace detail {

inline double clamp_center(double c, std::size_t extent) {
  const double half = static_cast<double>(kPatchSize / 2);
  // Undersized axes are edge-replicated up to the patch size first.
  const double hi = static_cast<double>(std::max(extent, kPatchSize)) - half;
  if (!std::isfinite(c)) return c > 0 ? hi : half;
  return std::clamp(c, half, hi);
}

} // namespace detail

/// Window [cx-16, cx+16) x [cy-16, cy+16) after clamping the centre into the
/// frame; fractional centres are floored.
inline PatchWindow patch_window(std::size_t width, std::size_t height, double cx, double cy) {
  PatchWindow w;
  w.center_x = detail::clamp_center(cx, width);
  w.center_y = detail::clamp_center(cy, height);
  w.x0 = static_cast<std::size_t>(std::floor(w.center_x)) - kPatchSize / 2;
  w.y0 = static_cast<std::size_t>(std::floor(w.center_y)) - kPatchSize / 2;
  return w;
}

/// The 8-bit crop. Coordinates past the right or bottom edge repeat the last
/// row or column, which only happens for frames smaller than the patch.
inline Image crop_patch(const Image& frame, const PatchWindow& w) {
  if (frame.width == 0 || frame.height == 0) throw ImageError("crop_patch: empty frame");
  Image out(kPatchSize, kPatchSize);
  for (std::size_t y = 0; y < kPatchSize; ++y) {
    const std::size_t sy = std::min(w.y0 + y, frame.height - 1);
    for (std::size_t x = 0; x < kPatchSize; ++x) {
      const std::size_t sx = std::min(w.x0 + x, frame.width - 1);
      for (std::size_t c = 0; c < 3; ++c) out.at(x, y, c) = frame.at(sx, sy, c);
    }
  }
  return out;
}

/// Interleaved 8-bit RGB to CHW floats in [0, 1].
inline std::vector<float> patch_pixels(const Image& patch) {
  if (patch.width != kPatchSize || patch.height != kPatchSize) {
    throw ImageError("patch must be 32x32, got " + std::to_string(patch.width) + "x" +
                     std::to_string(patch.height));
  }
  std::vector<float> out(kPatchValues);
  const std::size_t plane = kPatchSize * kPatchSize;
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) out[c * plane + i] = patch.rgb[i * 3 + c] / 255.0f;
  }
  return out;
}

struct ExtractedPatch {
  Image image;                 // 32x32 8-bit crop, what gets stored
  std::vector<float> pixels;   // CHW in [0, 1]
  PatchWindow window;
};

inline ExtractedPatch extract_patch(const Image& frame, double cx, double cy) {
  ExtractedPatch p;
  p.window = patch_window(frame.width, frame.height, cx, cy);
  p.image = crop_patch(frame, p.window);
  p.pixels = patch_pixels(p.image);
  return p;
}

/// (p - mean) / (std + 1e-6) over all values, population std.
inline std::vector<float> normalize_patch(std::span<const float> pixels) {
  if (pixels.empty()) return {};
  double sum = 0.0;
  for (float v : pixels) sum += v;
  const double mean = sum / static_cast<double>(pixels.size());
  double sq = 0.0;
  for (float v : pixels) sq += (v - mean) * (v - mean);
  const double scale = 1.0 / (std::sqrt(sq / static_cast<double>(pixels.size())) + kNormalizeEps);
  std::vector<float> out(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    out[i] = static_cast<float>((pixels[i] - mean) * scale);
  }
  return out;
}

/// Stack normalized patches into an (N, 3, 32, 32) batch.
inline Tensor<float> stack_patches(std::span<const std::vector<float>> patches) {
  if (patches.empty()) throw ShapeError("stack_patches: no patches");
  Tensor<float> batch({patches.size(), kPatchChannels, kPatchSize, kPatchSize});
  for (std::size_t i = 0; i < patches.size(); ++i) {
    if (patches[i].size() != kPatchValues) {
      throw ShapeError("stack_patches: patch " + std::to_string(i) + " has " +
                       std::to_string(patches[i].size()) + " values");
    }
    std::copy(patches[i].begin(), patches[i].end(), batch.data() + i * kPatchValues);
  }
  return batch;
}

} // namespace invigil
