#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "echodx/random.hpp"
#include "echodx/tensor.hpp"

namespace echodx {

inline constexpr std::size_t kClipFrames = 30;
inline constexpr std::size_t kClipSide = 112;
inline constexpr std::size_t kCropSide = 549;
inline constexpr std::size_t kLevels = 256;

/// Fan-shaped field of view opening downward from the apex.
struct SectorGeometry {
  double apex_row = 0.0;
  double apex_col = 55.5;
  double radius = 115.0;
  double half_angle_deg = 50.0;

  /// Default fan for 112 x 112 phantom frames.
  static SectorGeometry phantom() { return {}; }

  /// Pixel centers are at integer coordinates.
  bool contains(double row, double col) const;
  void validate(std::size_t rows, std::size_t cols) const;
  /// 1 for in-sector pixels of a rows x cols frame.
  std::vector<std::uint8_t> mask(std::size_t rows, std::size_t cols) const;
};

struct CineLoop {
  Tensor frames;  // [T, H, W], values in [0, 255]
  std::size_t cycle_start = 0;
  std::size_t cycle_len = kClipFrames;
  std::string sample_id;

  std::size_t frame_count() const { return frames.empty() ? 0 : frames.dim(0); }
  void validate() const;
};

/// Zeroes everything outside the sector. With `zero_static_bright`, also
/// zeroes in-sector pixels that never change and are brighter than 200.
CineLoop mask_overlay(const CineLoop& clip, const SectorGeometry& geometry, bool zero_static_bright = false);

/// Linear resampling of one cardiac cycle onto `target` frames.
Tensor resample_cycle(const CineLoop& clip, std::size_t target = kClipFrames);

enum class SampleMode { Train, Eval };

/// Random clip start in [0, frames) for training, 0 for evaluation.
std::size_t sample_clip_start(SampleMode mode, Rng& rng, std::size_t frames = kClipFrames);

/// Circular shift along time: output frame k is input frame (k + s) mod T.
Tensor roll_frames(const Tensor& clip, std::size_t s);

/// Pooled 256-bin intensity histogram of in-sector training pixels.
class ReferenceHistogram {
 public:
  ReferenceHistogram() : counts_(kLevels, 0.0) {}
  explicit ReferenceHistogram(std::vector<double> counts);

  /// Adds pixels of frames [T, H, W] where mask is set (all pixels if empty).
  /// Values are binned by rounding to the nearest level.
  void add(const Tensor& frames, const std::vector<std::uint8_t>& mask = {});

  const std::vector<double>& counts() const { return counts_; }
  double total() const;
  /// Cumulative distribution G with G(255) = 1.
  std::vector<double> cdf() const;

  Tensor to_tensor() const;
  static ReferenceHistogram from_tensor(const Tensor& t);

 private:
  std::vector<double> counts_;
};

/// Level mapping m(v) = min{u : G(u) >= F(v)} with F the empirical
/// distribution of the selected pixels. Pixels outside the mask are kept.
Tensor histogram_match(const Tensor& frames, const ReferenceHistogram& reference,
                       const std::vector<std::uint8_t>& mask = {});

/// Top-left corner of the centered crop window.
std::array<std::size_t, 2> crop_origin(std::size_t rows, std::size_t cols, std::size_t side = kCropSide);

/// Bilinear resize of a [H, W] frame with pixel-center alignment.
Tensor resize_bilinear(const Tensor& frame, std::size_t out_rows, std::size_t out_cols);

/// Center 549 x 549 crop, bilinear resize to 112 x 112, scale by 1/255.
Tensor crop_and_downsample(const Tensor& frame);

/// Applies crop_and_downsample per frame of [T, H, W]; frames that are
/// already 112 x 112 are only rescaled.
Tensor prepare_frames(const Tensor& frames);

struct AugmentParams {
  double shift_row = 0.0;
  double shift_col = 0.0;
  double rotation_deg = 0.0;
};

AugmentParams sample_augment(Rng& rng, double max_shift = 8.0, double max_rotation_deg = 10.0);

/// Same rigid transform on every frame, bilinear sampling, zero fill.
Tensor augment(const Tensor& clip, const AugmentParams& params);

struct PreprocessOptions {
  SectorGeometry geometry;
  bool zero_static_bright = true;
  double max_shift = 8.0;
  double max_rotation_deg = 10.0;
};

/// Masked, cycle-resampled clip at the source resolution (before matching).
Tensor masked_cycle(const CineLoop& clip, const PreprocessOptions& options);

/// Train-mode tail applied to an eval-mode clip: start offset and augmentation
/// drawn from sample_stream(seed, sample_id, epoch).
Tensor randomize_clip(const Tensor& prepared, const std::string& sample_id, const PreprocessOptions& options,
                      std::uint64_t seed, std::uint64_t epoch);

/// Full chain to a [30, 112, 112] clip in [0, 1]. Train mode is the eval-mode
/// clip passed through randomize_clip.
Tensor preprocess_clip(const CineLoop& clip, const ReferenceHistogram& reference, const PreprocessOptions& options,
                       SampleMode mode, std::uint64_t seed, std::uint64_t epoch);

struct ManifestRecord {
  std::string path;
  int label = 0;
  std::size_t cycle_start = 0;
  std::size_t cycle_len = kClipFrames;

  std::string sample_id() const;
};

/// Tab-separated `path label cycle_start cycle_len`; `#` lines are comments.
/// Relative paths resolve against the manifest's directory.
std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records);

CineLoop load_cine(const ManifestRecord& record);

}  // namespace echodx
