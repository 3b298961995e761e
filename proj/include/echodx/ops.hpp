#pragma once

#include <array>
#include <cstddef>
#include <span>

#include "echodx/autodiff.hpp"
#include "echodx/tensor.hpp"

namespace echodx {

enum class Mode { Train, Infer };

/// Kernel/stride/zero-padding per (T, H, W) axis.
struct ConvGeometry {
  std::array<std::size_t, 3> kernel{1, 1, 1};
  std::array<std::size_t, 3> stride{1, 1, 1};
  std::array<std::size_t, 3> padding{0, 0, 0};

  /// 1 x d x d kernel, stride (1, s, s), padding (0, d/2, d/2).
  static ConvGeometry spatial(std::size_t d, std::size_t s = 1);
  /// t x 1 x 1 kernel, stride (s, 1, 1), padding (t/2, 0, 0).
  static ConvGeometry temporal(std::size_t t, std::size_t s = 1);
  /// 1 x 1 x 1 projection with the same stride on every axis.
  static ConvGeometry pointwise(std::size_t s = 1);

  std::size_t taps() const { return kernel[0] * kernel[1] * kernel[2]; }
  /// Output shape for an input [N, Cin, T, H, W] and `out_channels` filters.
  Shape output_shape(const Shape& input, std::size_t out_channels) const;
  void validate() const;
};

// ---- plain kernels (no tape) ----------------------------------------------

/// x [N, Cin, T, H, W], w [Cout, Cin, kt, kh, kw] -> [N, Cout, T', H', W'].
template <typename T>
BasicTensor<T> conv3d(const BasicTensor<T>& x, const BasicTensor<T>& w, const ConvGeometry& g);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);

/// Per-channel running statistics of a batch-norm layer.
template <typename T>
struct BatchNormStats {
  BasicTensor<T> running_mean;
  BasicTensor<T> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormStats(std::size_t channels = 1)
      : running_mean(Shape{channels}, T{0}), running_var(Shape{channels}, T{1}) {}
};

/// Inference-mode batch norm as a folded per-channel affine map.
template <typename T>
struct FoldedNorm {
  std::vector<T> scale;
  std::vector<T> shift;
};

template <typename T>
FoldedNorm<T> fold_batchnorm(const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                             const BatchNormStats<T>& stats);

// ---- taped ops ------------------------------------------------------------

template <typename T>
Var conv3d(Tape<T>& tape, Var x, Var w, const ConvGeometry& g);

template <typename T>
Var relu(Tape<T>& tape, Var x);

/// DeepLIFT Rescale nonlinearity on a stacked batch [inputs; references].
/// Forward is ReLU; the reverse sweep multiplies by
/// (relu(x) - relu(x0)) / (x - x0) for the first half of the batch, with the
/// local derivative where |x - x0| < 1e-7. Gradients reaching the reference
/// half are dropped.
template <typename T>
Var rescale_relu(Tape<T>& tape, Var x);

/// Train mode normalizes with batch statistics over N, T, H, W and updates
/// `stats`; Infer mode applies the folded running-statistics affine map.
template <typename T>
Var batchnorm(Tape<T>& tape, Var x, Var gamma, Var beta, BatchNormStats<T>& stats, Mode mode);

/// y = x W^T + b for x [N, D], W [K, D], b [K].
template <typename T>
Var affine(Tape<T>& tape, Var x, Var w, Var b);

/// Mean over T, H, W: [N, C, T, H, W] -> [N, C].
template <typename T>
Var global_avg_pool(Tape<T>& tape, Var x);

template <typename T>
Var add(Tape<T>& tape, Var a, Var b);

/// Mean over the batch of -log softmax(logits)[label]; returns shape [1].
template <typename T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, std::span<const int> labels);

/// Row-wise softmax of [N, K] logits.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits);

}  // namespace echodx
