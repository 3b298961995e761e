#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "echodx/autodiff.hpp"
#include "echodx/ops.hpp"
#include "echodx/tensor.hpp"

namespace echodx {

/// Nonlinearity used between layers. Rescale is the DeepLIFT variant that
/// expects a stacked [inputs; references] batch; Identity makes the whole
/// network linear.
enum class Activation { Relu, Rescale, Identity };

template <typename T>
Var activate(Tape<T>& tape, Var x, Activation act);

/// Midplane width that gives a (2+1)D factorization of a t x d x d
/// convolution roughly the parameter count of the full 3D kernel.
std::size_t factorized_midplanes(std::size_t t, std::size_t d, std::size_t in_channels,
                                 std::size_t out_channels);

struct NetworkConfig {
  std::vector<std::size_t> stage_channels{64, 128, 256, 512};
  std::vector<std::size_t> blocks_per_stage{2, 2, 2, 2};
  std::size_t stem_midplane = 45;
  std::size_t num_classes = 3;
  /// Frames, height, width of one single-channel clip.
  std::array<std::size_t, 3> input_shape{30, 112, 112};
  /// Replace every nonlinearity by the identity.
  bool linear = false;

  /// Small configuration used for desk-scale runs and tests.
  static NetworkConfig desk();

  std::size_t feature_dim() const { return stage_channels.empty() ? 0 : stage_channels.back(); }
  Shape batch_shape(std::size_t n) const { return {n, 1, input_shape[0], input_shape[1], input_shape[2]}; }
  void validate() const;

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

template <typename T>
struct ConvLayer {
  Parameter<T> weight;
  ConvGeometry geometry;

  Var forward(Tape<T>& tape, Var x) { return conv3d(tape, x, tape.parameter(weight), geometry); }
};

template <typename T>
struct BatchNorm {
  Parameter<T> gamma;
  Parameter<T> beta;
  BatchNormStats<T> stats;

  Var forward(Tape<T>& tape, Var x, Mode mode) {
    return batchnorm(tape, x, tape.parameter(gamma), tape.parameter(beta), stats, mode);
  }
};

/// Spatial 1 x d x d convolution, optional norm, activation, then temporal
/// t x 1 x 1 convolution.
template <typename T>
struct Conv2Plus1d {
  ConvLayer<T> spatial;
  std::optional<BatchNorm<T>> norm;
  ConvLayer<T> temporal;
};

template <typename T>
Var conv2plus1d(Tape<T>& tape, Var x, Conv2Plus1d<T>& block, Mode mode, Activation act);

template <typename T>
struct ResidualBlock {
  Conv2Plus1d<T> conv1;
  BatchNorm<T> bn1;
  Conv2Plus1d<T> conv2;
  BatchNorm<T> bn2;
  std::optional<ConvLayer<T>> shortcut;
  std::optional<BatchNorm<T>> shortcut_bn;
};

/// Extents after the stem and after every stage for a batch of n clips.
std::vector<Shape> stage_shapes(const NetworkConfig& config, std::size_t n);

using NamedTensors = std::map<std::string, Tensor>;

/// Factorized (2+1)D residual classifier: stem, residual stages, global
/// average pooling (the feature tap) and an affine classification head.
template <typename T>
class BasicNetwork {
 public:
  static BasicNetwork build(const NetworkConfig& config, std::uint64_t seed);

  const NetworkConfig& config() const { return config_; }

  Var forward_features(Tape<T>& tape, Var input, Mode mode, Activation act = Activation::Relu);
  Var forward_logits(Tape<T>& tape, Var input, Mode mode, Activation act = Activation::Relu);
  Var head(Tape<T>& tape, Var features);

  /// Inference-mode conveniences.
  BasicTensor<T> logits(const BasicTensor<T>& batch);
  BasicTensor<T> features(const BasicTensor<T>& batch);
  BasicTensor<T> head_logits(const BasicTensor<T>& features);

  /// Visits parameters in construction order.
  void for_each_parameter(const std::function<void(Parameter<T>&)>& fn);
  std::vector<Parameter<T>*> parameters();
  std::size_t parameter_count();
  void zero_grad();

  /// Parameters and running statistics keyed by name.
  NamedTensors state() const;
  /// Replaces every named tensor; names and shapes must match exactly.
  void load_state(const NamedTensors& state);

  template <typename U>
  BasicNetwork<U> cast() const {
    auto other = BasicNetwork<U>::build(config_, 0);
    other.load_state(state());
    return other;
  }

  /// Per-layer helpers exposed for tests.
  ResidualBlock<T>& block(std::size_t stage, std::size_t index) { return stages_.at(stage).at(index); }
  Parameter<T>& head_weight() { return head_weight_; }
  Parameter<T>& head_bias() { return head_bias_; }

 private:
  template <typename F>
  void visit(F&& fn) const;
  template <typename F>
  void visit_mut(F&& fn);

  Var run_block(Tape<T>& tape, Var x, ResidualBlock<T>& block, Mode mode, Activation act);
  void check_input(const Shape& shape) const;

  NetworkConfig config_;
  Conv2Plus1d<T> stem_;
  BatchNorm<T> stem_bn_;
  std::vector<std::vector<ResidualBlock<T>>> stages_;
  Parameter<T> head_weight_;
  Parameter<T> head_bias_;
};

using Network = BasicNetwork<float>;
using NetworkD = BasicNetwork<double>;

extern template class BasicNetwork<float>;
extern template class BasicNetwork<double>;

}  // namespace echodx
