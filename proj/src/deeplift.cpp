#include "echodx/deeplift.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "echodx/ect_io.hpp"

namespace echodx {

std::vector<double> linear_rule(const LinearLayer& layer, std::span<const double> delta_x,
                                std::span<const double> relevance_out) {
  if (layer.kind == LayerKind::Relu) throw ConfigError("linear_rule applies to linear layers only");
  if (layer.weight.size() != layer.out * layer.in || delta_x.size() != layer.in || relevance_out.size() != layer.out)
    throw ShapeError("linear_rule operand sizes do not match the layer");
  std::vector<double> rin(layer.in, 0.0);
  for (std::size_t i = 0; i < layer.out; ++i) {
    const double* w = layer.weight.data() + i * layer.in;
    double dy = 0.0;
    for (std::size_t j = 0; j < layer.in; ++j) dy += w[j] * delta_x[j];
    if (std::abs(dy) >= 1e-7) {
      const double scale = relevance_out[i] / dy;
      for (std::size_t j = 0; j < layer.in; ++j) rin[j] += scale * w[j] * delta_x[j];
      continue;
    }
    // degenerate output: first-order share from the plain gradient
    for (std::size_t j = 0; j < layer.in; ++j) rin[j] += relevance_out[i] * w[j] * delta_x[j];
  }
  return rin;
}

double rescale_multiplier(double x, double x0) {
  const double d = x - x0;
  if (std::abs(d) < 1e-7) return x > 0.0 ? 1.0 : 0.0;
  return (std::max(x, 0.0) - std::max(x0, 0.0)) / d;
}

std::vector<double> rescale_rule(std::span<const double> x, std::span<const double> x0,
                                 std::span<const double> relevance_out) {
  if (x.size() != x0.size() || x.size() != relevance_out.size()) throw ShapeError("rescale_rule operand sizes differ");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = rescale_multiplier(x[i], x0[i]) * relevance_out[i];
  return out;
}

namespace {

template <typename T>
BasicTensor<T> resolve_baseline(const BasicTensor<T>& clip, const BasicTensor<T>& baseline) {
  if (baseline.empty()) return BasicTensor<T>(clip.shape());
  require_shape(baseline.shape(), clip.shape(), "baseline");
  return baseline;
}

template <typename T>
void check_clip(const BasicNetwork<T>& net, const BasicTensor<T>& clip, int target) {
  const auto& cfg = net.config();
  const Shape expected{1, cfg.input_shape[0], cfg.input_shape[1], cfg.input_shape[2]};
  require_shape(clip.shape(), expected, "attribution clip");
  if (target < 0 || static_cast<std::size_t>(target) >= cfg.num_classes)
    throw ConfigError("target class " + std::to_string(target) + " out of range");
}

}  // namespace

template <typename T>
BasicAttribution<T> deeplift_attribute(BasicNetwork<T>& net, const BasicTensor<T>& clip, int target_class,
                                       const BasicTensor<T>& baseline, T seed) {
  check_clip(net, clip, target_class);
  const auto x0 = resolve_baseline(clip, baseline);
  const auto& cfg = net.config();
  const auto each = clip.size();
  BasicTensor<T> stacked(cfg.batch_shape(2));
  std::copy(clip.ptr(), clip.ptr() + each, stacked.ptr());
  std::copy(x0.ptr(), x0.ptr() + each, stacked.ptr() + each);

  Tape<T> tape;
  const auto in = tape.input(std::move(stacked));
  const auto logits = net.forward_logits(tape, in, Mode::Infer, Activation::Rescale);
  const auto k = cfg.num_classes;
  BasicTensor<T> start(Shape{2, k});
  start[static_cast<std::size_t>(target_class)] = seed;
  tape.backward(logits, start);

  const auto& lv = tape.value(logits);
  const auto& g = tape.grad(in);
  BasicAttribution<T> out;
  out.values = BasicTensor<T>(clip.shape());
  if (!g.empty())
    for (std::size_t i = 0; i < each; ++i) out.values[i] = g[i] * (clip[i] - x0[i]);
  out.target_class = target_class;
  out.baseline_id = baseline.empty() ? "zero" : "custom";
  out.delta_logit = lv[static_cast<std::size_t>(target_class)] - lv[k + static_cast<std::size_t>(target_class)];
  return out;
}

template <typename T>
BasicTensor<T> gradient_times_delta(BasicNetwork<T>& net, const BasicTensor<T>& clip, int target_class,
                                    const BasicTensor<T>& baseline) {
  check_clip(net, clip, target_class);
  const auto x0 = resolve_baseline(clip, baseline);
  Tape<T> tape;
  const auto in = tape.input(clip.reshaped(net.config().batch_shape(1)));
  const auto logits = net.forward_logits(tape, in, Mode::Infer);
  BasicTensor<T> start(Shape{1, net.config().num_classes});
  start[static_cast<std::size_t>(target_class)] = T{1};
  tape.backward(logits, start);
  const auto& g = tape.grad(in);
  BasicTensor<T> out(clip.shape());
  if (!g.empty())
    for (std::size_t i = 0; i < clip.size(); ++i) out[i] = g[i] * (clip[i] - x0[i]);
  return out;
}

template BasicAttribution<float> deeplift_attribute(Network&, const Tensor&, int, const Tensor&, float);
template BasicAttribution<double> deeplift_attribute(NetworkD&, const TensorD&, int, const TensorD&, double);
template Tensor gradient_times_delta(Network&, const Tensor&, int, const Tensor&);
template TensorD gradient_times_delta(NetworkD&, const TensorD&, int, const TensorD&);

std::vector<std::uint8_t> heatmap_levels(const Tensor& values) {
  std::vector<std::uint8_t> out(values.size(), 0);
  if (values.empty()) return out;
  double lo = std::max(0.0f, values[0]), hi = lo;
  for (float v : values.data()) {
    const double p = std::max(0.0f, v);
    lo = std::min(lo, p);
    hi = std::max(hi, p);
  }
  if (!(hi > lo)) return out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double p = std::max(0.0f, values[i]);
    out[i] = static_cast<std::uint8_t>(std::lround((p - lo) / (hi - lo) * 255.0));
  }
  return out;
}

void write_pgm(const std::filesystem::path& path, std::size_t rows, std::size_t cols, const std::uint8_t* pixels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << cols << ' ' << rows << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels), static_cast<std::streamsize>(rows * cols));
  if (!out) throw IoError("failed writing " + path.string());
}

void export_heatmaps(const AttributionMap& map, const std::filesystem::path& out_dir) {
  auto values = map.values;
  if (values.rank() == 4 && values.dim(0) == 1) values = values.reshaped({values.dim(1), values.dim(2), values.dim(3)});
  if (values.rank() != 3) throw ShapeError("heatmap export expects [T, H, W] attribution values");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) throw IoError("cannot create " + out_dir.string());
  const auto levels = heatmap_levels(values);
  const auto t = values.dim(0), rows = values.dim(1), cols = values.dim(2);
  for (std::size_t f = 0; f < t; ++f) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%02zu.pgm", f);
    write_pgm(out_dir / name, rows, cols, levels.data() + f * rows * cols);
  }
  save_ect(out_dir / "attribution.ect", map.values);
}

}  // namespace echodx
