#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "echodx/network.hpp"

namespace echodx {

enum class LayerKind { Affine, Convolution, Pooling, FoldedNorm, Relu };

/// Dense view of a layer y = W x + b at fixed statistics; W is [out, in].
struct LinearLayer {
  LayerKind kind = LayerKind::Affine;
  std::size_t out = 0;
  std::size_t in = 0;
  std::vector<double> weight;
};

/// Redistributes output relevance onto inputs in proportion to w_ij * dx_j.
/// Outputs with |dy_i| < 1e-7 pass relevance_out_i * w_ij * dx_j instead.
std::vector<double> linear_rule(const LinearLayer& layer, std::span<const double> delta_x,
                                std::span<const double> relevance_out);

/// Rescale multiplier (relu(x) - relu(x0)) / (x - x0), local derivative when
/// |x - x0| < 1e-7.
double rescale_multiplier(double x, double x0);

std::vector<double> rescale_rule(std::span<const double> x, std::span<const double> x0,
                                 std::span<const double> relevance_out);

template <typename T>
struct BasicAttribution {
  BasicTensor<T> values;  // same shape as one input clip
  int target_class = 0;
  std::string baseline_id = "zero";
  std::string sample_id;
  T delta_logit = T{0};
};

using AttributionMap = BasicAttribution<float>;

/// Multiplier propagation from the target logit; `clip` and `baseline` are
/// single clips shaped like the network input without the batch axis. An
/// empty baseline means all zeros. `seed` scales the starting relevance.
template <typename T>
BasicAttribution<T> deeplift_attribute(BasicNetwork<T>& net, const BasicTensor<T>& clip, int target_class,
                                       const BasicTensor<T>& baseline = {}, T seed = T{1});

/// Plain input gradient of the target logit times (x - x0), for comparison.
template <typename T>
BasicTensor<T> gradient_times_delta(BasicNetwork<T>& net, const BasicTensor<T>& clip, int target_class,
                                    const BasicTensor<T>& baseline = {});

/// Positive part min-max scaled over the clip to 0..255 per voxel.
std::vector<std::uint8_t> heatmap_levels(const Tensor& values);

/// Writes frame_00.pgm ... one binary PGM per frame plus attribution.ect.
void export_heatmaps(const AttributionMap& map, const std::filesystem::path& out_dir);

void write_pgm(const std::filesystem::path& path, std::size_t rows, std::size_t cols, const std::uint8_t* pixels);

}  // namespace echodx
