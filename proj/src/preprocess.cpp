#include "echodx/preprocess.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "echodx/ect_io.hpp"

namespace echodx {

namespace {

double radians(double deg) { return deg * std::numbers::pi / 180.0; }

std::size_t frame_pixels(const Tensor& frames) { return frames.dim(1) * frames.dim(2); }

void require_frames(const Tensor& frames, const char* what) {
  if (frames.rank() != 3) throw ShapeError(std::string(what) + " expects frames [T, H, W], got " +
                                           shape_string(frames.shape()));
}

/// Zero-filled bilinear lookup in a [H, W] plane.
float sample_zero(const float* plane, std::size_t rows, std::size_t cols, double r, double c) {
  const double fr = std::floor(r), fc = std::floor(c);
  const double wr = r - fr, wc = c - fc;
  const long r0 = static_cast<long>(fr), c0 = static_cast<long>(fc);
  auto at = [&](long i, long j) -> double {
    if (i < 0 || j < 0 || i >= static_cast<long>(rows) || j >= static_cast<long>(cols)) return 0.0;
    return plane[static_cast<std::size_t>(i) * cols + static_cast<std::size_t>(j)];
  };
  double v = 0.0;
  if (wr != 1.0 && wc != 1.0) v += (1.0 - wr) * (1.0 - wc) * at(r0, c0);
  if (wr != 1.0 && wc != 0.0) v += (1.0 - wr) * wc * at(r0, c0 + 1);
  if (wr != 0.0 && wc != 1.0) v += wr * (1.0 - wc) * at(r0 + 1, c0);
  if (wr != 0.0 && wc != 0.0) v += wr * wc * at(r0 + 1, c0 + 1);
  return static_cast<float>(v);
}

}  // namespace

bool SectorGeometry::contains(double row, double col) const {
  const double dr = row - apex_row;
  const double dc = col - apex_col;
  if (dr * dr + dc * dc > radius * radius) return false;
  if (dr == 0.0 && dc == 0.0) return true;
  return std::atan2(std::abs(dc), dr) <= radians(half_angle_deg) + 1e-12;
}

void SectorGeometry::validate(std::size_t rows, std::size_t cols) const {
  if (!(radius > 0.0)) throw ConfigError("sector radius must be positive");
  if (!(half_angle_deg > 0.0 && half_angle_deg < 90.0)) throw ConfigError("sector half angle must be in (0, 90)");
  if (apex_row < 0.0 || apex_col < 0.0 || apex_row > static_cast<double>(rows) - 1.0 ||
      apex_col > static_cast<double>(cols) - 1.0)
    throw ConfigError("sector apex lies outside the frame");
}

std::vector<std::uint8_t> SectorGeometry::mask(std::size_t rows, std::size_t cols) const {
  std::vector<std::uint8_t> m(rows * cols, 0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      m[r * cols + c] = contains(static_cast<double>(r), static_cast<double>(c)) ? 1 : 0;
  return m;
}

void CineLoop::validate() const {
  require_frames(frames, "cine loop");
  const auto t = frames.dim(0);
  if (cycle_len < 2) throw ConfigError("cycle length must be at least 2 frames");
  if (cycle_start >= t || cycle_start + cycle_len > t)
    throw ConfigError("cycle [" + std::to_string(cycle_start) + ", +" + std::to_string(cycle_len) +
                      ") does not fit " + std::to_string(t) + " frames");
}

CineLoop mask_overlay(const CineLoop& clip, const SectorGeometry& geometry, bool zero_static_bright) {
  require_frames(clip.frames, "mask_overlay");
  const auto t = clip.frames.dim(0), rows = clip.frames.dim(1), cols = clip.frames.dim(2);
  geometry.validate(rows, cols);
  CineLoop out = clip;
  auto keep = geometry.mask(rows, cols);
  const auto plane = rows * cols;
  if (zero_static_bright) {
    for (std::size_t p = 0; p < plane; ++p) {
      if (!keep[p]) continue;
      double sum = 0.0, sq = 0.0;
      for (std::size_t f = 0; f < t; ++f) sum += clip.frames[f * plane + p];
      const double mean = sum / static_cast<double>(t);
      for (std::size_t f = 0; f < t; ++f) {
        const double d = clip.frames[f * plane + p] - mean;
        sq += d * d;
      }
      if (sq / static_cast<double>(t) < 1e-6 && mean > 200.0) keep[p] = 0;
    }
  }
  for (std::size_t f = 0; f < t; ++f)
    for (std::size_t p = 0; p < plane; ++p)
      if (!keep[p]) out.frames[f * plane + p] = 0.0f;
  return out;
}

Tensor resample_cycle(const CineLoop& clip, std::size_t target) {
  if (clip.cycle_len < 2) throw ConfigError("cycle length must be at least 2 frames");
  clip.validate();
  if (target == 0) throw ConfigError("resample target must be positive");
  const auto total = clip.frames.dim(0);
  const auto plane = frame_pixels(clip.frames);
  const auto end = clip.cycle_start + clip.cycle_len;
  // the frame after the cycle is read when present; otherwise wrap to its start
  auto source = [&](std::size_t i) {
    if (i < end) return i;
    if (i == end && end < total) return i;
    return clip.cycle_start + (i - clip.cycle_start) % clip.cycle_len;
  };
  Tensor out(Shape{target, clip.frames.dim(1), clip.frames.dim(2)});
  for (std::size_t k = 0; k < target; ++k) {
    const auto num = k * clip.cycle_len;
    const auto i0 = clip.cycle_start + num / target;
    const auto rem = num % target;
    const float* a = clip.frames.ptr() + source(i0) * plane;
    float* dst = out.ptr() + k * plane;
    if (rem == 0) {
      std::copy(a, a + plane, dst);
      continue;
    }
    const double w = static_cast<double>(rem) / static_cast<double>(target);
    const float* b = clip.frames.ptr() + source(i0 + 1) * plane;
    for (std::size_t p = 0; p < plane; ++p) dst[p] = static_cast<float>(a[p] + w * (b[p] - a[p]));
  }
  return out;
}

std::size_t sample_clip_start(SampleMode mode, Rng& rng, std::size_t frames) {
  if (mode == SampleMode::Eval) return 0;
  return static_cast<std::size_t>(uniform_index(rng, frames));
}

Tensor roll_frames(const Tensor& clip, std::size_t s) {
  require_frames(clip, "roll_frames");
  const auto t = clip.dim(0);
  const auto plane = frame_pixels(clip);
  Tensor out(clip.shape());
  for (std::size_t k = 0; k < t; ++k) {
    const float* src = clip.ptr() + ((k + s) % t) * plane;
    std::copy(src, src + plane, out.ptr() + k * plane);
  }
  return out;
}

ReferenceHistogram::ReferenceHistogram(std::vector<double> counts) : counts_(std::move(counts)) {
  if (counts_.size() != kLevels) throw ShapeError("reference histogram needs 256 bins");
  for (double c : counts_)
    if (!(c >= 0.0)) throw ConfigError("reference histogram counts must be non-negative");
}

void ReferenceHistogram::add(const Tensor& frames, const std::vector<std::uint8_t>& mask) {
  require_frames(frames, "reference histogram");
  const auto plane = frame_pixels(frames);
  if (!mask.empty() && mask.size() != plane) throw ShapeError("histogram mask does not match the frame size");
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (!mask.empty() && !mask[i % plane]) continue;
    const auto level = std::clamp(std::lround(frames[i]), 0L, 255L);
    counts_[static_cast<std::size_t>(level)] += 1.0;
  }
}

double ReferenceHistogram::total() const {
  double s = 0.0;
  for (double c : counts_) s += c;
  return s;
}

std::vector<double> ReferenceHistogram::cdf() const {
  const double n = total();
  if (!(n > 0.0)) throw ConfigError("reference histogram is empty");
  std::vector<double> g(kLevels);
  double run = 0.0;
  for (std::size_t u = 0; u < kLevels; ++u) {
    run += counts_[u];
    g[u] = run / n;
  }
  g.back() = 1.0;
  return g;
}

Tensor ReferenceHistogram::to_tensor() const {
  std::vector<float> v(counts_.begin(), counts_.end());
  return Tensor(Shape{kLevels}, std::move(v));
}

ReferenceHistogram ReferenceHistogram::from_tensor(const Tensor& t) {
  if (t.rank() != 1 || t.size() != kLevels) throw ShapeError("reference histogram tensor must have shape [256]");
  return ReferenceHistogram(std::vector<double>(t.storage().begin(), t.storage().end()));
}

Tensor histogram_match(const Tensor& frames, const ReferenceHistogram& reference, const std::vector<std::uint8_t>& mask) {
  if (frames.empty()) throw ConfigError("histogram matching of an empty clip");
  require_frames(frames, "histogram_match");
  const auto plane = frame_pixels(frames);
  if (!mask.empty() && mask.size() != plane) throw ShapeError("histogram mask does not match the frame size");
  auto selected = [&](std::size_t i) { return mask.empty() || mask[i % plane]; };

  std::vector<float> sorted;
  sorted.reserve(frames.size());
  for (std::size_t i = 0; i < frames.size(); ++i)
    if (selected(i)) sorted.push_back(frames[i]);
  if (sorted.empty()) throw ConfigError("histogram matching selected no pixels");
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  const auto g = reference.cdf();

  Tensor out = frames;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (!selected(i)) continue;
    const auto rank = std::upper_bound(sorted.begin(), sorted.end(), frames[i]) - sorted.begin();
    const double f = static_cast<double>(rank) / n;
    const auto u = std::lower_bound(g.begin(), g.end(), f - 1e-12) - g.begin();
    out[i] = static_cast<float>(std::min<std::ptrdiff_t>(u, kLevels - 1));
  }
  return out;
}

std::array<std::size_t, 2> crop_origin(std::size_t rows, std::size_t cols, std::size_t side) {
  if (rows < side || cols < side)
    throw ShapeError("frame " + std::to_string(rows) + "x" + std::to_string(cols) + " is smaller than the " +
                     std::to_string(side) + " crop window");
  return {(rows - side) / 2, (cols - side) / 2};
}

Tensor resize_bilinear(const Tensor& frame, std::size_t out_rows, std::size_t out_cols) {
  if (frame.rank() != 2) throw ShapeError("resize expects a [H, W] frame");
  const auto rows = frame.dim(0), cols = frame.dim(1);
  Tensor out(Shape{out_rows, out_cols});
  const double sr = static_cast<double>(rows) / static_cast<double>(out_rows);
  const double sc = static_cast<double>(cols) / static_cast<double>(out_cols);
  auto coord = [](std::size_t i, double scale, std::size_t n) {
    const double x = (static_cast<double>(i) + 0.5) * scale - 0.5;
    return std::clamp(x, 0.0, static_cast<double>(n - 1));
  };
  for (std::size_t i = 0; i < out_rows; ++i) {
    const double y = coord(i, sr, rows);
    const auto y0 = static_cast<std::size_t>(y);
    const auto y1 = std::min(y0 + 1, rows - 1);
    const double wy = y - static_cast<double>(y0);
    for (std::size_t j = 0; j < out_cols; ++j) {
      const double x = coord(j, sc, cols);
      const auto x0 = static_cast<std::size_t>(x);
      const auto x1 = std::min(x0 + 1, cols - 1);
      const double wx = x - static_cast<double>(x0);
      const double top = frame[y0 * cols + x0] + wx * (frame[y0 * cols + x1] - frame[y0 * cols + x0]);
      const double bot = frame[y1 * cols + x0] + wx * (frame[y1 * cols + x1] - frame[y1 * cols + x0]);
      out[i * out_cols + j] = static_cast<float>(top + wy * (bot - top));
    }
  }
  return out;
}

Tensor crop_and_downsample(const Tensor& frame) {
  if (frame.rank() != 2) throw ShapeError("crop expects a [H, W] frame");
  const auto [r0, c0] = crop_origin(frame.dim(0), frame.dim(1));
  const auto cols = frame.dim(1);
  Tensor crop(Shape{kCropSide, kCropSide});
  for (std::size_t r = 0; r < kCropSide; ++r)
    std::copy_n(frame.ptr() + (r0 + r) * cols + c0, kCropSide, crop.ptr() + r * kCropSide);
  auto out = resize_bilinear(crop, kClipSide, kClipSide);
  for (auto& v : out.data()) v /= 255.0f;
  return out;
}

Tensor prepare_frames(const Tensor& frames) {
  require_frames(frames, "prepare_frames");
  const auto t = frames.dim(0), rows = frames.dim(1), cols = frames.dim(2);
  Tensor out(Shape{t, kClipSide, kClipSide});
  const auto plane = kClipSide * kClipSide;
  if (rows == kClipSide && cols == kClipSide) {
    for (std::size_t i = 0; i < frames.size(); ++i) out[i] = frames[i] / 255.0f;
    return out;
  }
  for (std::size_t f = 0; f < t; ++f) {
    Tensor frame(Shape{rows, cols}, std::vector<float>(frames.ptr() + f * rows * cols,
                                                       frames.ptr() + (f + 1) * rows * cols));
    const auto small = crop_and_downsample(frame);
    std::copy(small.ptr(), small.ptr() + plane, out.ptr() + f * plane);
  }
  return out;
}

AugmentParams sample_augment(Rng& rng, double max_shift, double max_rotation_deg) {
  AugmentParams p;
  p.shift_row = uniform(rng, -max_shift, max_shift);
  p.shift_col = uniform(rng, -max_shift, max_shift);
  p.rotation_deg = uniform(rng, -max_rotation_deg, max_rotation_deg);
  return p;
}

Tensor augment(const Tensor& clip, const AugmentParams& params) {
  require_frames(clip, "augment");
  if (params.shift_row == 0.0 && params.shift_col == 0.0 && params.rotation_deg == 0.0) return clip;
  const auto t = clip.dim(0), rows = clip.dim(1), cols = clip.dim(2);
  const auto plane = rows * cols;
  const double cr = (static_cast<double>(rows) - 1.0) / 2.0;
  const double cc = (static_cast<double>(cols) - 1.0) / 2.0;
  const double th = radians(params.rotation_deg);
  const double cs = std::cos(th), sn = std::sin(th);
  // inverse map: output pixel -> source position
  std::vector<std::array<double, 2>> src(plane);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const double y = static_cast<double>(r) - cr - params.shift_row;
      const double x = static_cast<double>(c) - cc - params.shift_col;
      src[r * cols + c] = {cs * y - sn * x + cr, sn * y + cs * x + cc};
    }
  Tensor out(clip.shape());
  for (std::size_t f = 0; f < t; ++f) {
    const float* in = clip.ptr() + f * plane;
    float* dst = out.ptr() + f * plane;
    for (std::size_t p = 0; p < plane; ++p) dst[p] = sample_zero(in, rows, cols, src[p][0], src[p][1]);
  }
  return out;
}

Tensor masked_cycle(const CineLoop& clip, const PreprocessOptions& options) {
  CineLoop masked = mask_overlay(clip, options.geometry, options.zero_static_bright);
  return resample_cycle(masked, kClipFrames);
}

Tensor preprocess_clip(const CineLoop& clip, const ReferenceHistogram& reference, const PreprocessOptions& options,
                       SampleMode mode, std::uint64_t seed, std::uint64_t epoch) {
  const auto cycle = masked_cycle(clip, options);
  const auto sector = options.geometry.mask(cycle.dim(1), cycle.dim(2));
  auto x = prepare_frames(histogram_match(cycle, reference, sector));
  if (mode == SampleMode::Eval) return x;
  return randomize_clip(x, clip.sample_id, options, seed, epoch);
}

Tensor randomize_clip(const Tensor& prepared, const std::string& sample_id, const PreprocessOptions& options,
                      std::uint64_t seed, std::uint64_t epoch) {
  auto rng = sample_stream(seed, sample_id, epoch);
  const auto start = sample_clip_start(SampleMode::Train, rng);
  return augment(roll_frames(prepared, start), sample_augment(rng, options.max_shift, options.max_rotation_deg));
}

std::string ManifestRecord::sample_id() const { return std::filesystem::path(path).stem().string(); }

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  const auto base = path.parent_path();
  std::vector<ManifestRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    auto bad = [&]() { return IoError("manifest " + path.string() + ":" + std::to_string(lineno) + ": malformed record"); };
    if (fields.size() != 4) throw bad();
    ManifestRecord r;
    std::filesystem::path p(fields[0]);
    r.path = (p.is_relative() ? base / p : p).string();
    auto num = [&](const std::string& s, auto& out) {
      const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
      if (ec != std::errc() || end != s.data() + s.size()) throw bad();
    };
    num(fields[1], r.label);
    num(fields[2], r.cycle_start);
    num(fields[3], r.cycle_len);
    if (r.label < 0) throw bad();
    records.push_back(std::move(r));
  }
  return records;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << "# path\tlabel\tcycle_start\tcycle_len\n";
  for (const auto& r : records) out << r.path << '\t' << r.label << '\t' << r.cycle_start << '\t' << r.cycle_len << '\n';
  if (!out) throw IoError("failed writing manifest " + path.string());
}

CineLoop load_cine(const ManifestRecord& record) {
  CineLoop clip;
  clip.frames = load_ect(record.path);
  clip.cycle_start = record.cycle_start;
  clip.cycle_len = record.cycle_len;
  clip.sample_id = record.sample_id();
  clip.validate();
  return clip;
}

}  // namespace echodx
