#pragma once

// Forward and backward kernels for the network layers. These are plain
// functions over tensors; autograd.hpp wires them into the tape.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "invigil/tensor.hpp"

namespace invigil {

enum class Mode { train, eval };

/// Seeded generator used for initialization, shuffling and dropout masks.
using Rng = std::mt19937_64;

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

/// Per-channel running statistics of a batch-normalized layer.
template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  static BatchNormState init(std::size_t channels) {
    return {Tensor<T>::zeros({channels}), Tensor<T>::ones({channels})};
  }

  friend bool operator==(const BatchNormState&, const BatchNormState&) = default;
};

namespace kernels {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

inline void require_rank(const Shape& shape, std::size_t rank, const char* what) {
  if (shape.size() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) +
                     ", got " + shape_string(shape));
  }
}

// ---------------------------------------------------------------------------
// conv2d

struct ConvGeometry {
  std::size_t batch, in_channels, in_h, in_w;
  std::size_t out_channels, kernel;
  std::size_t stride, pad;
  std::size_t out_h, out_w;

  std::size_t patch_rows() const { return in_channels * kernel * kernel; }
  std::size_t out_pixels() const { return out_h * out_w; }
};

inline ConvGeometry conv_geometry(const Shape& input, const Shape& kernel,
                                  int stride, int pad) {
  require_rank(input, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (pad < 0) throw ShapeError("conv2d: pad must be >= 0");
  if (kernel[2] != kernel[3]) throw ShapeError("conv2d: kernel must be square");
  if (input[1] != kernel[1]) {
    throw ShapeError("conv2d: input has " + std::to_string(input[1]) +
                     " channels but kernel expects " + std::to_string(kernel[1]));
  }
  ConvGeometry g{input[0], input[1], input[2], input[3], kernel[0], kernel[2],
                 static_cast<std::size_t>(stride), static_cast<std::size_t>(pad), 0, 0};
  const auto padded_h = static_cast<long>(g.in_h + 2 * g.pad);
  const auto padded_w = static_cast<long>(g.in_w + 2 * g.pad);
  const auto k = static_cast<long>(g.kernel);
  if (padded_h < k || padded_w < k) {
    throw ShapeError("conv2d: non-positive output extent for input " +
                     shape_string(input) + " and kernel " + shape_string(kernel));
  }
  g.out_h = static_cast<std::size_t>((padded_h - k) / stride + 1);
  g.out_w = static_cast<std::size_t>((padded_w - k) / stride + 1);
  return g;
}

/// Unfold one sample into a (C*k*k) x (out_h*out_w) matrix.
template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* col) {
  const std::size_t k = g.kernel;
  const std::size_t pixels = g.out_pixels();
  const long in_h = static_cast<long>(g.in_h), in_w = static_cast<long>(g.in_w);
  const long pad = static_cast<long>(g.pad);
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    const T* plane = image + c * g.in_h * g.in_w;
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = col + ((c * k + ki) * k + kj) * pixels;
        // Output columns [lo, hi) read inside the image for this tap.
        const long shift = static_cast<long>(kj) - pad;
        long lo = 0, hi = static_cast<long>(g.out_w);
        if (g.stride == 1) {
          lo = std::clamp(-shift, 0L, hi);
          hi = std::clamp(in_w - shift, lo, hi);
        }
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - pad;
          T* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= in_h) {
            std::fill(dst, dst + g.out_w, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(ih) * g.in_w;
          if (g.stride == 1) {
            std::fill(dst, dst + lo, T{0});
            std::copy(src + lo + shift, src + hi + shift, dst + lo);
            std::fill(dst + hi, dst + g.out_w, T{0});
            continue;
          }
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride) + shift;
            dst[ow] = (iw < 0 || iw >= in_w) ? T{0} : src[static_cast<std::size_t>(iw)];
          }
        }
      }
    }
  }
}

/// Fold a column matrix back onto one sample, accumulating overlaps.
template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* image) {
  const std::size_t k = g.kernel;
  const std::size_t pixels = g.out_pixels();
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    T* plane = image + c * g.in_h * g.in_w;
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = col + ((c * k + ki) * k + kj) * pixels;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.pad);
          if (ih < 0 || ih >= static_cast<long>(g.in_h)) continue;
          T* dst = plane + static_cast<std::size_t>(ih) * g.in_w;
          const T* src = row + oh * g.out_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.pad);
            if (iw < 0 || iw >= static_cast<long>(g.in_w)) continue;
            dst[static_cast<std::size_t>(iw)] += src[ow];
          }
        }
      }
    }
  }
}

/// Direct 3x3 stride-1 correlation of one sample, written to `out`
/// (out_channels x (h + 2 pad - 2) x (w + 2 pad - 2)). `kernel` is
/// (out_channels, channels, 3, 3); `padded` is scratch.
template <typename T>
void conv3x3_sample(const T* image, std::size_t channels, std::size_t h, std::size_t w,
                    const T* kernel, std::size_t out_channels, std::size_t pad, T* out,
                    std::vector<T>& padded) {
  const std::size_t ph = h + 2 * pad, pw = w + 2 * pad;
  const std::size_t oh = ph - 2, ow = pw - 2;
  padded.assign(ph * pw, T{0});
  std::fill(out, out + out_channels * oh * ow, T{0});
  for (std::size_t c = 0; c < channels; ++c) {
    const T* src = image + c * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      std::copy(src + y * w, src + (y + 1) * w, padded.data() + (y + pad) * pw + pad);
    }
    for (std::size_t o = 0; o < out_channels; ++o) {
      const T* k = kernel + (o * channels + c) * 9;
      const T k0 = k[0], k1 = k[1], k2 = k[2], k3 = k[3], k4 = k[4], k5 = k[5], k6 = k[6],
              k7 = k[7], k8 = k[8];
      T* plane = out + o * oh * ow;
      for (std::size_t y = 0; y < oh; ++y) {
        const T* r0 = padded.data() + y * pw;
        const T* r1 = r0 + pw;
        const T* r2 = r1 + pw;
        T* row = plane + y * ow;
        for (std::size_t x = 0; x < ow; ++x) {
          row[x] += k0 * r0[x] + k1 * r0[x + 1] + k2 * r0[x + 2] + k3 * r1[x] + k4 * r1[x + 1] +
                    k5 * r1[x + 2] + k6 * r2[x] + k7 * r2[x + 1] + k8 * r2[x + 2];
        }
      }
    }
  }
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& kernel,
                         const Tensor<T>* bias, int stride, int pad) {
  const auto g = conv_geometry(input.shape(), kernel.shape(), stride, pad);
  if (bias && (bias->rank() != 1 || bias->dim(0) != g.out_channels)) {
    throw ShapeError("conv2d: bias shape " + shape_string(bias->shape()) +
                     " does not match " + std::to_string(g.out_channels) + " outputs");
  }
  Tensor<T> out({g.batch, g.out_channels, g.out_h, g.out_w});
  const bool direct = g.kernel == 3 && g.stride == 1;
  std::vector<T> col(direct ? 0 : g.patch_rows() * g.out_pixels());
  ConstMatrixMap<T> weights(kernel.data(), g.out_channels, g.patch_rows());
  ConstMatrixMap<T> cols(col.data(), g.patch_rows(), g.out_pixels());
  const std::size_t in_stride = g.in_channels * g.in_h * g.in_w;
  const std::size_t out_stride = g.out_channels * g.out_pixels();
  for (std::size_t n = 0; n < g.batch; ++n) {
    MatrixMap<T> result(out.data() + n * out_stride, g.out_channels, g.out_pixels());
    if (direct) {
      conv3x3_sample(input.data() + n * in_stride, g.in_channels, g.in_h, g.in_w,
                     kernel.data(), g.out_channels, g.pad, result.data(), col);
    } else {
      im2col(input.data() + n * in_stride, g, col.data());
      result.noalias() = weights * cols;
    }
    if (bias) {
      for (std::size_t o = 0; o < g.out_channels; ++o) {
        result.row(static_cast<Eigen::Index>(o)).array() += (*bias)[o];
      }
    }
  }
  return out;
}

template <typename T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> kernel;
  Tensor<T> bias;
};

/// Gradients of conv2d. Pieces not requested are left empty.
template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& kernel,
                             const Tensor<T>& grad_out, int stride, int pad,
                             bool want_input, bool want_kernel, bool want_bias) {
  const auto g = conv_geometry(input.shape(), kernel.shape(), stride, pad);
  ConvGrads<T> grads;
  if (want_input) grads.input = Tensor<T>::zeros(input.shape());
  if (want_kernel) grads.kernel = Tensor<T>::zeros(kernel.shape());
  if (want_bias) grads.bias = Tensor<T>::zeros({g.out_channels});

  ConstMatrixMap<T> weights(kernel.data(), g.out_channels, g.patch_rows());
  const std::size_t in_stride = g.in_channels * g.in_h * g.in_w;
  const std::size_t out_stride = g.out_channels * g.out_pixels();

  // Stride 1: dx is a correlation of dy with the flipped kernel, channels
  // swapped, under padding k - 1 - pad. Its unfolded dy is small.
  const bool transposed = want_input && g.stride == 1 && g.pad < g.kernel;
  ConvGeometry tg{};
  RowMatrix<T> flipped;
  std::vector<T> tcol;
  if (transposed) {
    const std::size_t k = g.kernel, taps = k * k;
    tg = ConvGeometry{1, g.out_channels, g.out_h, g.out_w, g.in_channels, k,
                      1, k - 1 - g.pad, g.in_h, g.in_w};
    flipped.resize(static_cast<Eigen::Index>(g.in_channels),
                   static_cast<Eigen::Index>(g.out_channels * taps));
    for (std::size_t o = 0; o < g.out_channels; ++o)
      for (std::size_t c = 0; c < g.in_channels; ++c)
        for (std::size_t t = 0; t < taps; ++t) {
          flipped(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(o * taps + t)) =
              kernel[(o * g.in_channels + c) * taps + taps - 1 - t];
        }
    tcol.resize(tg.patch_rows() * tg.out_pixels());
  }

  std::vector<T> col;
  if (want_kernel || (want_input && !transposed)) col.resize(g.patch_rows() * g.out_pixels());

  for (std::size_t n = 0; n < g.batch; ++n) {
    ConstMatrixMap<T> gout(grad_out.data() + n * out_stride, g.out_channels, g.out_pixels());
    if (want_kernel) {
      im2col(input.data() + n * in_stride, g, col.data());
      ConstMatrixMap<T> cols(col.data(), g.patch_rows(), g.out_pixels());
      MatrixMap<T> gk(grads.kernel.data(), g.out_channels, g.patch_rows());
      gk.noalias() += gout * cols.transpose();
    }
    if (transposed) {
      im2col(grad_out.data() + n * out_stride, tg, tcol.data());
      ConstMatrixMap<T> unfolded(tcol.data(), tg.patch_rows(), tg.out_pixels());
      MatrixMap<T> gx(grads.input.data() + n * in_stride, g.in_channels, g.in_h * g.in_w);
      gx.noalias() = flipped * unfolded;
    } else if (want_input) {
      MatrixMap<T> gcol(col.data(), g.patch_rows(), g.out_pixels());
      gcol.noalias() = weights.transpose() * gout;
      col2im(col.data(), g, grads.input.data() + n * in_stride);
    }
    if (want_bias) {
      for (std::size_t o = 0; o < g.out_channels; ++o) {
        grads.bias[o] += gout.row(static_cast<Eigen::Index>(o)).sum();
      }
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// batch_norm

template <typename T>
struct BatchNormSaved {
  std::vector<T> mean;     // per channel, the statistics used to normalize
  std::vector<T> inv_std;  // 1 / sqrt(var + eps)
};

inline void check_batch_norm_shapes(const Shape& x, const Shape& gamma, const Shape& beta,
                                    std::size_t mean_len, std::size_t var_len) {
  require_rank(x, 4, "batch_norm input");
  const std::size_t c = x[1];
  if (gamma != Shape{c} || beta != Shape{c} || mean_len != c || var_len != c) {
    throw ShapeError("batch_norm: channel-count mismatch, input has " + std::to_string(c) +
                     " channels, gamma " + shape_string(gamma) + ", beta " +
                     shape_string(beta) + ", state " + std::to_string(mean_len));
  }
}

template <typename T>
Tensor<T> batch_norm_apply(const Tensor<T>& x, const Tensor<T>& gamma,
                           const Tensor<T>& beta, const BatchNormSaved<T>& saved) {
  Tensor<T> out(x.shape());
  const std::size_t n_count = x.dim(0), channels = x.dim(1);
  const std::size_t plane = x.dim(2) * x.dim(3);
  for (std::size_t n = 0; n < n_count; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (n * channels + c) * plane;
      const T scale = gamma[c] * saved.inv_std[c];
      const T shift = beta[c] - saved.mean[c] * scale;
      for (std::size_t i = 0; i < plane; ++i) {
        out[base + i] = x[base + i] * scale + shift;
      }
    }
  }
  return out;
}

/// Plane reductions in independent lanes so the loops vectorize; the
/// summation order is fixed, so results are reproducible.
template <typename T>
double plane_sum(const T* p, std::size_t count) {
  constexpr std::size_t lanes = 16;
  T acc[lanes] = {};
  const std::size_t whole = count - count % lanes;
  for (std::size_t i = 0; i < whole; i += lanes)
    for (std::size_t j = 0; j < lanes; ++j) acc[j] += p[i + j];
  double total = 0.0;
  for (T a : acc) total += a;
  for (std::size_t i = whole; i < count; ++i) total += p[i];
  return total;
}

template <typename T>
double plane_squared_deviation(const T* p, std::size_t count, T centre) {
  constexpr std::size_t lanes = 16;
  T acc[lanes] = {};
  const std::size_t whole = count - count % lanes;
  for (std::size_t i = 0; i < whole; i += lanes)
    for (std::size_t j = 0; j < lanes; ++j) {
      const T d = p[i + j] - centre;
      acc[j] += d * d;
    }
  double total = 0.0;
  for (T a : acc) total += a;
  for (std::size_t i = whole; i < count; ++i) {
    const double d = static_cast<double>(p[i]) - static_cast<double>(centre);
    total += d * d;
  }
  return total;
}

template <typename T>
double plane_centred_dot(const T* g, const T* p, std::size_t count, T centre) {
  constexpr std::size_t lanes = 16;
  T acc[lanes] = {};
  const std::size_t whole = count - count % lanes;
  for (std::size_t i = 0; i < whole; i += lanes)
    for (std::size_t j = 0; j < lanes; ++j) acc[j] += g[i + j] * (p[i + j] - centre);
  double total = 0.0;
  for (T a : acc) total += a;
  for (std::size_t i = whole; i < count; ++i) {
    total += static_cast<double>(g[i]) * (static_cast<double>(p[i]) - static_cast<double>(centre));
  }
  return total;
}

/// Batch statistics (biased variance) and an exponential-moving-average
/// update of `state`: running = momentum * running + (1 - momentum) * batch.
/// The running variance uses the unbiased batch estimate.
template <typename T>
BatchNormSaved<T> batch_norm_train_stats(const Tensor<T>& x, BatchNormState<T>& state,
                                         T momentum, T eps) {
  const std::size_t n_count = x.dim(0), channels = x.dim(1);
  const std::size_t plane = x.dim(2) * x.dim(3);
  const std::size_t m = n_count * plane;
  BatchNormSaved<T> saved{std::vector<T>(channels), std::vector<T>(channels)};
  for (std::size_t c = 0; c < channels; ++c) {
    double sum = 0.0;
    for (std::size_t n = 0; n < n_count; ++n) {
      sum += plane_sum(x.data() + (n * channels + c) * plane, plane);
    }
    const double mean = sum / static_cast<double>(m);
    double sq = 0.0;
    for (std::size_t n = 0; n < n_count; ++n) {
      sq += plane_squared_deviation(x.data() + (n * channels + c) * plane, plane,
                                    static_cast<T>(mean));
    }
    const double var = sq / static_cast<double>(m);
    saved.mean[c] = static_cast<T>(mean);
    saved.inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + eps));
    const double unbiased = m > 1 ? sq / static_cast<double>(m - 1) : var;
    state.running_mean[c] =
        static_cast<T>(momentum * state.running_mean[c] + (1.0 - momentum) * mean);
    state.running_var[c] =
        static_cast<T>(momentum * state.running_var[c] + (1.0 - momentum) * unbiased);
  }
  return saved;
}

template <typename T>
BatchNormSaved<T> batch_norm_eval_stats(const BatchNormState<T>& state, T eps) {
  const std::size_t channels = state.running_mean.size();
  BatchNormSaved<T> saved{std::vector<T>(channels), std::vector<T>(channels)};
  for (std::size_t c = 0; c < channels; ++c) {
    saved.mean[c] = state.running_mean[c];
    saved.inv_std[c] = T{1} / std::sqrt(state.running_var[c] + eps);
  }
  return saved;
}

template <typename T>
struct BatchNormGrads {
  Tensor<T> input;
  Tensor<T> gamma;
  Tensor<T> beta;
};

/// With `batch_stats` the statistics are functions of x and contribute to
/// dx; otherwise they are constants (eval mode).
template <typename T>
BatchNormGrads<T> batch_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma,
                                      const BatchNormSaved<T>& saved,
                                      const Tensor<T>& grad_out, bool batch_stats) {
  const std::size_t n_count = x.dim(0), channels = x.dim(1);
  const std::size_t plane = x.dim(2) * x.dim(3);
  const T m = static_cast<T>(n_count * plane);
  BatchNormGrads<T> grads{Tensor<T>(x.shape()), Tensor<T>({channels}), Tensor<T>({channels})};
  for (std::size_t c = 0; c < channels; ++c) {
    const T mean = saved.mean[c], inv_std = saved.inv_std[c];
    double sum_dy = 0.0, sum_dy_centred = 0.0;
    for (std::size_t n = 0; n < n_count; ++n) {
      const std::size_t base = (n * channels + c) * plane;
      sum_dy += plane_sum(grad_out.data() + base, plane);
      sum_dy_centred += plane_centred_dot(grad_out.data() + base, x.data() + base, plane, mean);
    }
    const T sum_dy_xhat = static_cast<T>(sum_dy_centred * inv_std);
    grads.gamma[c] = sum_dy_xhat;
    grads.beta[c] = static_cast<T>(sum_dy);
    const T scale = gamma[c] * inv_std;
    const T mean_dy = static_cast<T>(sum_dy) / m, mean_dy_xhat = sum_dy_xhat / m;
    for (std::size_t n = 0; n < n_count; ++n) {
      const std::size_t base = (n * channels + c) * plane;
      const T* g = grad_out.data() + base;
      const T* xp = x.data() + base;
      T* out = grads.input.data() + base;
      if (batch_stats) {
        for (std::size_t i = 0; i < plane; ++i) {
          const T xhat = (xp[i] - mean) * inv_std;
          out[i] = scale * (g[i] - mean_dy - xhat * mean_dy_xhat);
        }
      } else {
        for (std::size_t i = 0; i < plane; ++i) out[i] = scale * g[i];
      }
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// concat / split along channels

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>* const> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: need at least one part");
  const Shape& first = parts[0]->shape();
  require_rank(first, 4, "concat_channels part");
  std::size_t channels = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Shape& s = parts[i]->shape();
    require_rank(s, 4, "concat_channels part");
    if (s[0] != first[0] || s[2] != first[2] || s[3] != first[3]) {
      throw ShapeError("concat_channels: part " + std::to_string(i) + " shape " +
                       shape_string(s) + " disagrees with " + shape_string(first));
    }
    channels += s[1];
  }
  const std::size_t plane = first[2] * first[3];
  Tensor<T> out({first[0], channels, first[2], first[3]});
  T* dst = out.data();
  for (std::size_t n = 0; n < first[0]; ++n) {
    for (const Tensor<T>* part : parts) {
      const std::size_t block = part->dim(1) * plane;
      const T* src = part->data() + n * block;
      dst = std::copy(src, src + block, dst);
    }
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& x, std::span<const std::size_t> extents) {
  require_rank(x.shape(), 4, "split_channels input");
  const std::size_t total = std::accumulate(extents.begin(), extents.end(), std::size_t{0});
  if (total != x.dim(1)) {
    throw ShapeError("split_channels: extents sum to " + std::to_string(total) +
                     " but input has " + std::to_string(x.dim(1)) + " channels");
  }
  const std::size_t plane = x.dim(2) * x.dim(3);
  std::vector<Tensor<T>> parts;
  parts.reserve(extents.size());
  for (auto e : extents) parts.emplace_back(Shape{x.dim(0), e, x.dim(2), x.dim(3)});
  const T* src = x.data();
  for (std::size_t n = 0; n < x.dim(0); ++n) {
    for (std::size_t i = 0; i < extents.size(); ++i) {
      const std::size_t block = extents[i] * plane;
      std::copy(src, src + block, parts[i].data() + n * block);
      src += block;
    }
  }
  return parts;
}

// ---------------------------------------------------------------------------
// pooling, fully connected

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "global_avg_pool input");
  const std::size_t rows = x.dim(0) * x.dim(1);
  const std::size_t plane = x.dim(2) * x.dim(3);
  Tensor<T> out({x.dim(0), x.dim(1)});
  for (std::size_t r = 0; r < rows; ++r) {
    T sum{0};
    const T* p = x.data() + r * plane;
    for (std::size_t i = 0; i < plane; ++i) sum += p[i];
    out[r] = sum / static_cast<T>(plane);
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Shape& input_shape, const Tensor<T>& grad_out) {
  Tensor<T> grad(input_shape);
  const std::size_t plane = input_shape[2] * input_shape[3];
  const T inv = T{1} / static_cast<T>(plane);
  for (std::size_t r = 0; r < grad_out.size(); ++r) {
    std::fill_n(grad.data() + r * plane, plane, grad_out[r] * inv);
  }
  return grad;
}

inline void check_fully_connected(const Shape& x, const Shape& w, const Shape& b) {
  require_rank(x, 2, "fully_connected input");
  require_rank(w, 2, "fully_connected weight");
  if (x[1] != w[0] || b != Shape{w[1]}) {
    throw ShapeError("fully_connected: dimension mismatch " + shape_string(x) + " x " +
                     shape_string(w) + " + " + shape_string(b));
  }
}

// Plain loops keep each output row independent of the batch size, so
// batched and single-sample inference agree bit for bit.
template <typename T>
Tensor<T> fully_connected(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  check_fully_connected(x.shape(), w.shape(), b.shape());
  const std::size_t n_count = x.dim(0), d_in = x.dim(1), d_out = w.dim(1);
  Tensor<T> out({n_count, d_out});
  for (std::size_t n = 0; n < n_count; ++n) {
    for (std::size_t j = 0; j < d_out; ++j) {
      T acc = b[j];
      for (std::size_t d = 0; d < d_in; ++d) acc += x[n * d_in + d] * w[d * d_out + j];
      out[n * d_out + j] = acc;
    }
  }
  return out;
}

template <typename T>
struct LinearGrads {
  Tensor<T> input;
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
LinearGrads<T> fully_connected_backward(const Tensor<T>& x, const Tensor<T>& w,
                                        const Tensor<T>& grad_out) {
  const std::size_t n_count = x.dim(0), d_in = x.dim(1), d_out = w.dim(1);
  LinearGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(w.shape()), Tensor<T>({d_out})};
  for (std::size_t n = 0; n < n_count; ++n) {
    for (std::size_t j = 0; j < d_out; ++j) {
      const T go = grad_out[n * d_out + j];
      g.bias[j] += go;
      for (std::size_t d = 0; d < d_in; ++d) {
        g.input[n * d_in + d] += go * w[d * d_out + j];
        g.weight[d * d_out + j] += x[n * d_in + d] * go;
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// softmax / cross entropy

/// Row-wise softmax using the max-shifted form.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  require_rank(logits.shape(), 2, "softmax input");
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  Tensor<T> probs(logits.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* z = logits.data() + r * k;
    T* p = probs.data() + r * k;
    const T top = *std::max_element(z, z + k);
    T sum{0};
    for (std::size_t j = 0; j < k; ++j) {
      p[j] = std::exp(z[j] - top);
      sum += p[j];
    }
    for (std::size_t j = 0; j < k; ++j) p[j] /= sum;
  }
  return probs;
}

/// Mean negative log-likelihood via log-sum-exp.
template <typename T>
T cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_rank(logits.shape(), 2, "cross_entropy logits");
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  if (labels.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(rows) + " rows");
  }
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int label = labels[r];
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(label) +
                              " at row " + std::to_string(r) + " outside [0, " +
                              std::to_string(k) + ")");
    }
    const T* z = logits.data() + r * k;
    const T top = *std::max_element(z, z + k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(static_cast<double>(z[j] - top));
    total += static_cast<double>(top) + std::log(sum) - static_cast<double>(z[label]);
  }
  return static_cast<T>(total / static_cast<double>(rows));
}

// ---------------------------------------------------------------------------
// dropout

/// Inverted dropout: survivors are divided by (1 - p). Returns the output;
/// `keep` receives one flag per element.
template <typename T, typename Rng>
Tensor<T> dropout_train(const Tensor<T>& x, T p, Rng& rng, std::vector<std::uint8_t>& keep) {
  const T keep_prob = T{1} - p;
  Tensor<T> out(x.shape());
  keep.assign(x.size(), 1);
  if (p == T{0}) {
    out = x;
    return out;
  }
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    keep[i] = uniform(rng) >= static_cast<double>(p) ? 1 : 0;
    out[i] = keep[i] ? x[i] / keep_prob : T{0};
  }
  return out;
}

} // namespace kernels
} // namespace invigil
