#include "echodx/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "echodx/ect_io.hpp"
#include "echodx/parallel.hpp"

namespace echodx {

namespace {

double distance_to_segment(double r, double c, double r0, double c0, double r1, double c1) {
  const double dr = r1 - r0, dc = c1 - c0;
  const double len2 = dr * dr + dc * dc;
  double s = len2 > 0.0 ? ((r - r0) * dr + (c - c0) * dc) / len2 : 0.0;
  s = std::clamp(s, 0.0, 1.0);
  return std::hypot(r - (r0 + s * dr), c - (c0 + s * dc));
}

}  // namespace

void PhantomParams::validate() const {
  if (size < 8 || frames < 2) throw ConfigError("phantom size and frame count are too small");
  sector.validate(size, size);
  for (double a : amplitude)
    if (!(a >= 0.0 && a < 1.0)) throw ConfigError("contraction amplitude must be in [0, 1)");
  if (!(noise_sigma >= 0.0)) throw ConfigError("noise sigma must be non-negative");
  if (!(rest_radius > 0.0 && thickness > 0.0)) throw ConfigError("annulus radius and thickness must be positive");
  const double reach = rest_radius + jitter_radius + thickness + jitter_center;
  const double n = static_cast<double>(size);
  if (center_row - reach < 0.0 || center_col - reach < 0.0 || center_row + reach > n - 1.0 ||
      center_col + reach > n - 1.0)
    throw ConfigError("annulus extends outside the frame");
  if (leaflet || task == PhantomTask::Valve) {
    const double ext = leaflet_length + 1.0;
    if (hinge_row - ext < 0.0 || hinge_col - ext < 0.0 || hinge_row + ext > n - 1.0 || hinge_col + ext > n - 1.0)
      throw ConfigError("leaflet extends outside the frame");
  }
  if (overlay[0] + overlay[2] > size || overlay[1] + overlay[3] > size)
    throw ConfigError("overlay block extends outside the frame");
}

PhantomParams PhantomParams::noiseless() const {
  PhantomParams p = *this;
  p.speckle = false;
  p.noise_sigma = 0.0;
  p.jitter_center = 0.0;
  p.jitter_radius = 0.0;
  p.jitter_amplitude = 0.0;
  p.gain = {1.0, 1.0};
  return p;
}

PhantomInstance draw_instance(const PhantomParams& params, int class_id, Rng& rng) {
  if (class_id < 0 || class_id > 2) throw ConfigError("phantom class must be 0, 1 or 2");
  const auto k = static_cast<std::size_t>(class_id);
  PhantomInstance inst;
  inst.center_row = params.center_row + uniform(rng, -params.jitter_center, params.jitter_center);
  inst.center_col = params.center_col + uniform(rng, -params.jitter_center, params.jitter_center);
  inst.rest_radius = params.rest_radius + uniform(rng, -params.jitter_radius, params.jitter_radius);
  const bool lv = params.task == PhantomTask::Lv;
  const double a = lv ? params.amplitude[k] : params.amplitude[0];
  inst.amplitude = std::clamp(a + uniform(rng, -params.jitter_amplitude, params.jitter_amplitude), 0.0, 0.99);
  inst.flutter_deg = lv ? 0.0 : params.flutter[k];
  inst.gain = uniform(rng, params.gain[0], params.gain[1]);
  return inst;
}

Tensor render_frame(const PhantomParams& params, const PhantomInstance& inst, long t) {
  const auto n = params.size;
  const double period = static_cast<double>(params.frames);
  const double phase = 2.0 * std::numbers::pi * static_cast<double>(t) / period;
  const double inner = inst.rest_radius * (1.0 - inst.amplitude * (1.0 - std::cos(phase)) / 2.0);
  const double outer = inner + params.thickness;
  const bool leaflet = params.leaflet || params.task == PhantomTask::Valve;
  const double angle = (params.leaflet_angle_deg + inst.flutter_deg * std::sin(params.flutter_cycles * phase)) *
                       std::numbers::pi / 180.0;
  const double tip_r = params.hinge_row + params.leaflet_length * std::cos(angle);
  const double tip_c = params.hinge_col + params.leaflet_length * std::sin(angle);

  Tensor frame(Shape{n, n});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      const double y = static_cast<double>(r), x = static_cast<double>(c);
      double v = 0.0;
      if (params.sector.contains(y, x)) {
        v = params.background;
        const double d = std::hypot(y - inst.center_row, x - inst.center_col);
        if (d >= inner && d < outer) v = params.wall;
        if (leaflet && distance_to_segment(y, x, params.hinge_row, params.hinge_col, tip_r, tip_c) <= 1.0)
          v = params.leaflet_value;
        v *= inst.gain;
      } else if (r >= params.overlay[0] && r < params.overlay[0] + params.overlay[2] && c >= params.overlay[1] &&
                 c < params.overlay[1] + params.overlay[3]) {
        v = params.overlay_value;
      }
      frame[r * n + c] = static_cast<float>(v);
    }
  return frame;
}

PhantomClip generate_phantom_clip(const PhantomParams& params, int class_id, std::uint64_t seed,
                                  const std::string& sample_id) {
  params.validate();
  auto rng = sample_stream(seed, sample_id, 0);
  const auto inst = draw_instance(params, class_id, rng);
  const auto n = params.size;
  const auto plane = n * n;
  Tensor clean(Shape{params.frames, n, n});
  for (std::size_t t = 0; t < params.frames; ++t) {
    const auto f = render_frame(params, inst, static_cast<long>(t));
    std::copy(f.ptr(), f.ptr() + plane, clean.ptr() + t * plane);
  }

  PhantomClip out;
  out.motion_mask = Tensor(Shape{n, n});
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t t = 1; t < params.frames; ++t)
      if (clean[t * plane + p] != clean[p]) {
        out.motion_mask[p] = 1.0f;
        break;
      }

  const auto sector = params.sector.mask(n, n);
  // one speckle field per clip, fresh additive noise per frame
  std::vector<double> speckle(plane, 1.0);
  if (params.speckle)
    for (std::size_t p = 0; p < plane; ++p)
      if (sector[p]) speckle[p] = uniform(rng, 0.8, 1.2);
  Tensor frames = clean;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (!sector[i % plane]) continue;
    double v = frames[i] * speckle[i % plane];
    if (params.noise_sigma > 0.0) v += params.noise_sigma * normal01(rng);
    frames[i] = static_cast<float>(std::clamp(v, 0.0, 255.0));
  }
  out.clip.frames = std::move(frames);
  out.clip.cycle_start = 0;
  out.clip.cycle_len = params.frames;
  out.clip.sample_id = sample_id;
  return out;
}

Tensor moving_region_mask(const Tensor& frames, double tau) {
  if (frames.rank() != 3) throw ShapeError("moving_region_mask expects frames [T, H, W]");
  const auto t = frames.dim(0), rows = frames.dim(1), cols = frames.dim(2);
  const auto plane = rows * cols;
  Tensor mask(Shape{rows, cols});
  for (std::size_t p = 0; p < plane; ++p) {
    double sum = 0.0;
    for (std::size_t f = 0; f < t; ++f) sum += frames[f * plane + p];
    const double mean = sum / static_cast<double>(t);
    double sq = 0.0;
    for (std::size_t f = 0; f < t; ++f) {
      const double d = frames[f * plane + p] - mean;
      sq += d * d;
    }
    if (sq / static_cast<double>(t) > tau) mask[p] = 1.0f;
  }
  return mask;
}

std::filesystem::path mask_path_for(const std::filesystem::path& clip_path) {
  auto p = clip_path;
  p.replace_extension(".mask.ect");
  return p;
}

std::vector<ManifestRecord> generate_dataset(std::size_t per_class, const PhantomParams& params,
                                             const std::filesystem::path& out_dir, std::uint64_t seed) {
  if (per_class < 3) throw ConfigError("per_class must be at least 3");
  params.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) throw IoError("cannot create output directory " + out_dir.string());

  std::vector<ManifestRecord> records;
  for (int k = 0; k < 3; ++k)
    for (std::size_t i = 0; i < per_class; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "c%d_%03zu.ect", k, i);
      ManifestRecord r;
      r.path = name;
      r.label = k;
      r.cycle_start = 0;
      r.cycle_len = params.frames;
      records.push_back(r);
    }
  parallel_for(records.size(), [&](std::size_t i) {
    const auto& r = records[i];
    const auto clip = generate_phantom_clip(params, r.label, seed, r.sample_id());
    save_ect(out_dir / r.path, clip.clip.frames);
    save_ect(mask_path_for(out_dir / r.path), clip.motion_mask);
  });
  write_manifest(out_dir / "manifest.tsv", records);
  return records;
}

}  // namespace echodx
