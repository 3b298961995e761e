#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "echodx/preprocess.hpp"

namespace echodx {

/// Which class axis the generated labels follow.
enum class PhantomTask { Lv, Valve };

struct PhantomParams {
  std::size_t size = kClipSide;
  std::size_t frames = kClipFrames;
  SectorGeometry sector = SectorGeometry::phantom();

  double center_row = 60.0;
  double center_col = 55.5;
  double rest_radius = 24.0;
  double thickness = 6.0;
  double background = 30.0;
  double wall = 160.0;

  /// Contraction amplitude per class (normal, mild, severe).
  std::array<double, 3> amplitude{0.35, 0.20, 0.08};

  /// Leaflet hinge, length, rest angle from the downward axis (degrees).
  bool leaflet = false;
  double hinge_row = 40.0;
  double hinge_col = 55.5;
  double leaflet_length = 14.0;
  double leaflet_angle_deg = 60.0;
  double leaflet_value = 150.0;
  /// Flutter amplitude (degrees) per class for the valve task.
  std::array<double, 3> flutter{0.0, 10.0, 25.0};
  /// Flutter oscillations per cycle.
  double flutter_cycles = 3.0;

  /// Static bright overlay block outside the sector (rows, cols, height, width).
  std::array<std::size_t, 4> overlay{2, 2, 10, 24};
  double overlay_value = 230.0;

  /// Multiplicative speckle in [0.8, 1.2], fixed per pixel for the whole clip.
  bool speckle = true;
  double noise_sigma = 8.0;

  /// Per-clip random perturbations.
  double jitter_center = 3.0;
  double jitter_radius = 2.0;
  double jitter_amplitude = 0.02;
  std::array<double, 2> gain{0.85, 1.15};

  PhantomTask task = PhantomTask::Lv;

  void validate() const;
  /// Same geometry with speckle, noise and jitter switched off.
  PhantomParams noiseless() const;
};

/// Clip-level draw of the jittered geometry.
struct PhantomInstance {
  double center_row = 0.0;
  double center_col = 0.0;
  double rest_radius = 0.0;
  double amplitude = 0.0;
  double flutter_deg = 0.0;
  double gain = 1.0;
};

PhantomInstance draw_instance(const PhantomParams& params, int class_id, Rng& rng);

/// Noiseless rendering of frame t (any integer; the cycle repeats every `frames`).
Tensor render_frame(const PhantomParams& params, const PhantomInstance& inst, long t);

struct PhantomClip {
  CineLoop clip;
  /// [H, W], 1 where the noiseless rendering changes over the cycle.
  Tensor motion_mask;
};

PhantomClip generate_phantom_clip(const PhantomParams& params, int class_id, std::uint64_t seed,
                                  const std::string& sample_id = "phantom");

/// Pixels with temporal variance above tau.
Tensor moving_region_mask(const Tensor& frames, double tau = 1.0);

/// Writes <id>.ect clips, <id>.mask.ect ground truth and manifest.tsv.
std::vector<ManifestRecord> generate_dataset(std::size_t per_class, const PhantomParams& params,
                                             const std::filesystem::path& out_dir, std::uint64_t seed);

std::filesystem::path mask_path_for(const std::filesystem::path& clip_path);

}  // namespace echodx
