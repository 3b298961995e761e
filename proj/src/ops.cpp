#include "echodx/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "echodx/parallel.hpp"

namespace echodx {

ConvGeometry ConvGeometry::spatial(std::size_t d, std::size_t s) {
  return ConvGeometry{{1, d, d}, {1, s, s}, {0, d / 2, d / 2}};
}

ConvGeometry ConvGeometry::temporal(std::size_t t, std::size_t s) {
  return ConvGeometry{{t, 1, 1}, {s, 1, 1}, {t / 2, 0, 0}};
}

ConvGeometry ConvGeometry::pointwise(std::size_t s) { return ConvGeometry{{1, 1, 1}, {s, s, s}, {0, 0, 0}}; }

void ConvGeometry::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (kernel[a] == 0 || kernel[a] % 2 == 0) throw ShapeError("convolution kernel extents must be odd");
    if (stride[a] == 0) throw ShapeError("convolution strides must be >= 1");
  }
}

Shape ConvGeometry::output_shape(const Shape& input, std::size_t out_channels) const {
  if (input.size() != 5) throw ShapeError("convolution input must be [N, C, T, H, W], got " + shape_string(input));
  Shape out{input[0], out_channels, 0, 0, 0};
  for (int a = 0; a < 3; ++a) {
    const auto padded = input[2 + a] + 2 * padding[a];
    if (padded < kernel[a]) throw ShapeError("convolution kernel larger than padded input");
    out[2 + a] = (padded - kernel[a]) / stride[a] + 1;
  }
  return out;
}

namespace {

/// Output indices o in [lo, hi) for which o*s + k - p lands inside [0, in).
struct TapRange {
  std::size_t lo = 0;
  std::size_t hi = 0;
  bool contains(std::size_t o) const { return o >= lo && o < hi; }
};

TapRange tap_range(std::size_t in, std::size_t out, std::size_t k, std::size_t s, std::size_t p) {
  const long top = static_cast<long>(in) - 1 + static_cast<long>(p) - static_cast<long>(k);
  if (top < 0) return {};
  const std::size_t lo = k >= p ? 0 : (p - k + s - 1) / s;
  const std::size_t hi = std::min<std::size_t>(out, static_cast<std::size_t>(top) / s + 1);
  return {std::min(lo, hi), hi};
}

struct ConvDims {
  std::size_t n, ci, co, ti, hi, wi, to, ho, wo;
  std::size_t kt, kh, kw;
  std::vector<TapRange> rt, rh, rw;

  ConvDims(const Shape& x, const Shape& w, const ConvGeometry& g) {
    if (x.size() != 5) throw ShapeError("convolution input must be rank 5, got " + shape_string(x));
    if (w.size() != 5) throw ShapeError("convolution weight must be rank 5, got " + shape_string(w));
    g.validate();
    if (w[1] != x[1])
      throw ShapeError("convolution channel mismatch: input has " + std::to_string(x[1]) +
                       " channels, weight expects " + std::to_string(w[1]));
    if (w[2] != g.kernel[0] || w[3] != g.kernel[1] || w[4] != g.kernel[2])
      throw ShapeError("convolution weight " + shape_string(w) + " does not match kernel geometry");
    const auto out = g.output_shape(x, w[0]);
    n = x[0];
    ci = x[1];
    co = w[0];
    ti = x[2];
    hi = x[3];
    wi = x[4];
    to = out[2];
    ho = out[3];
    wo = out[4];
    kt = w[2];
    kh = w[3];
    kw = w[4];
    for (std::size_t a = 0; a < kt; ++a) rt.push_back(tap_range(ti, to, a, g.stride[0], g.padding[0]));
    for (std::size_t b = 0; b < kh; ++b) rh.push_back(tap_range(hi, ho, b, g.stride[1], g.padding[1]));
    for (std::size_t c = 0; c < kw; ++c) rw.push_back(tap_range(wi, wo, c, g.stride[2], g.padding[2]));
  }

  std::size_t taps() const { return kt * kh * kw; }
  std::size_t in_volume() const { return ti * hi * wi; }
  std::size_t out_volume() const { return to * ho * wo; }
};

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

/// Scratch buffer reused by the calling thread.
template <typename T>
std::vector<T>& scratch(std::size_t n) {
  thread_local std::vector<T> buffer;
  if (buffer.size() < n) buffer.resize(n);
  return buffer;
}

template <typename T>
Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> slice(T* p, std::size_t n) {
  return {p, static_cast<Eigen::Index>(n)};
}
template <typename T>
Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> slice(const T* p, std::size_t n) {
  return {p, static_cast<Eigen::Index>(n)};
}

template <typename T>
using StridedMap = Eigen::Map<RowMatrix<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMatrix<T>, 0, Eigen::OuterStride<>>;

/// Unfolds output rows [p0, p1) (p = to * Ho + ho) of one sample [Ci, T, H, W]
/// into columns [Ci * taps, (p1 - p0) * Wo].
template <typename T>
void im2col(const T* x, T* col, const ConvDims& d, const ConvGeometry& g, std::size_t p0, std::size_t p1) {
  const auto st = g.stride[0], sh = g.stride[1], sw = g.stride[2];
  const long pt = static_cast<long>(g.padding[0]), ph = static_cast<long>(g.padding[1]),
             pw = static_cast<long>(g.padding[2]);
  const auto width = (p1 - p0) * d.wo;
  for (std::size_t ci = 0; ci < d.ci; ++ci) {
    const T* xin = x + ci * d.in_volume();
    for (std::size_t a = 0; a < d.kt; ++a)
      for (std::size_t b = 0; b < d.kh; ++b)
        for (std::size_t c = 0; c < d.kw; ++c) {
          T* row = col + (((ci * d.kt + a) * d.kh + b) * d.kw + c) * width;
          const auto [lo, hi] = d.rw[c];
          for (std::size_t p = p0; p < p1; ++p) {
            const auto to = p / d.ho, ho = p % d.ho;
            T* dst = row + (p - p0) * d.wo;
            if (!d.rt[a].contains(to) || !d.rh[b].contains(ho) || lo >= hi) {
              std::fill(dst, dst + d.wo, T{0});
              continue;
            }
            const auto t_in = static_cast<std::size_t>(static_cast<long>(to * st + a) - pt);
            const auto h_in = static_cast<std::size_t>(static_cast<long>(ho * sh + b) - ph);
            const T* src = xin + (t_in * d.hi + h_in) * d.wi + (static_cast<long>(lo * sw + c) - pw);
            std::fill(dst, dst + lo, T{0});
            if (sw == 1) {
              std::copy(src, src + (hi - lo), dst + lo);
            } else {
              for (std::size_t j = 0; j < hi - lo; ++j) dst[lo + j] = src[j * sw];
            }
            std::fill(dst + hi, dst + d.wo, T{0});
          }
        }
  }
}

/// Adjoint of im2col over the same row range: scatters columns onto x.
template <typename T>
void col2im(const T* col, T* x, const ConvDims& d, const ConvGeometry& g, std::size_t p0, std::size_t p1) {
  const auto st = g.stride[0], sh = g.stride[1], sw = g.stride[2];
  const long pt = static_cast<long>(g.padding[0]), ph = static_cast<long>(g.padding[1]),
             pw = static_cast<long>(g.padding[2]);
  const auto width = (p1 - p0) * d.wo;
  for (std::size_t ci = 0; ci < d.ci; ++ci) {
    T* xin = x + ci * d.in_volume();
    for (std::size_t a = 0; a < d.kt; ++a)
      for (std::size_t b = 0; b < d.kh; ++b)
        for (std::size_t c = 0; c < d.kw; ++c) {
          const T* row = col + (((ci * d.kt + a) * d.kh + b) * d.kw + c) * width;
          const auto [lo, hi] = d.rw[c];
          if (lo >= hi) continue;
          for (std::size_t p = p0; p < p1; ++p) {
            const auto to = p / d.ho, ho = p % d.ho;
            if (!d.rt[a].contains(to) || !d.rh[b].contains(ho)) continue;
            const T* src = row + (p - p0) * d.wo + lo;
            const auto t_in = static_cast<std::size_t>(static_cast<long>(to * st + a) - pt);
            const auto h_in = static_cast<std::size_t>(static_cast<long>(ho * sh + b) - ph);
            T* dst = xin + (t_in * d.hi + h_in) * d.wi + (static_cast<long>(lo * sw + c) - pw);
            if (sw == 1) {
              for (std::size_t j = 0; j < hi - lo; ++j) dst[j] += src[j];
            } else {
              for (std::size_t j = 0; j < hi - lo; ++j) dst[j * sw] += src[j];
            }
          }
        }
  }
}

bool is_identity_unfold(const ConvDims& d, const ConvGeometry& g) {
  return d.taps() == 1 && g.stride == std::array<std::size_t, 3>{1, 1, 1} &&
         g.padding == std::array<std::size_t, 3>{0, 0, 0};
}

/// Output rows per unfolded chunk, sized so a chunk stays cache resident.
std::size_t chunk_rows(const ConvDims& d) {
  constexpr std::size_t kChunkElements = 1 << 15;
  const auto per_row = d.ci * d.taps() * d.wo;
  return std::max<std::size_t>(1, kChunkElements / std::max<std::size_t>(1, per_row));
}

template <typename T>
void conv_forward_kernel(const T* x, const T* w, T* y, const ConvDims& d, const ConvGeometry& g) {
  const auto rows = d.ci * d.taps();
  const auto vol = d.out_volume();
  const auto positions = d.to * d.ho;
  const auto step = chunk_rows(d);
  ConstMatrixMap<T> wm(w, d.co, rows);
  parallel_for(d.n, [&](std::size_t n) {
    const T* xs = x + n * d.ci * d.in_volume();
    T* ys = y + n * d.co * vol;
    if (is_identity_unfold(d, g)) {
      MatrixMap<T>(ys, d.co, vol).noalias() = wm * ConstMatrixMap<T>(xs, rows, vol);
      return;
    }
    auto& buf = scratch<T>(rows * step * d.wo);
    for (std::size_t p0 = 0; p0 < positions; p0 += step) {
      const auto p1 = std::min(positions, p0 + step);
      const auto width = (p1 - p0) * d.wo;
      im2col(xs, buf.data(), d, g, p0, p1);
      StridedMap<T>(ys + p0 * d.wo, d.co, width, Eigen::OuterStride<>(vol)).noalias() =
          wm * ConstMatrixMap<T>(buf.data(), rows, width);
    }
  });
}

template <typename T>
void conv_backward_input_kernel(const T* gy, const T* w, T* gx, const ConvDims& d, const ConvGeometry& g) {
  const auto rows = d.ci * d.taps();
  const auto vol = d.out_volume();
  const auto positions = d.to * d.ho;
  const auto step = chunk_rows(d);
  ConstMatrixMap<T> wm(w, d.co, rows);
  parallel_for(d.n, [&](std::size_t n) {
    const T* gys = gy + n * d.co * vol;
    T* gxs = gx + n * d.ci * d.in_volume();
    if (is_identity_unfold(d, g)) {
      MatrixMap<T>(gxs, rows, vol).noalias() = wm.transpose() * ConstMatrixMap<T>(gys, d.co, vol);
      return;
    }
    std::fill(gxs, gxs + d.ci * d.in_volume(), T{0});
    auto& buf = scratch<T>(rows * step * d.wo);
    for (std::size_t p0 = 0; p0 < positions; p0 += step) {
      const auto p1 = std::min(positions, p0 + step);
      const auto width = (p1 - p0) * d.wo;
      MatrixMap<T>(buf.data(), rows, width).noalias() =
          wm.transpose() * ConstStridedMap<T>(gys + p0 * d.wo, d.co, width, Eigen::OuterStride<>(vol));
      col2im(buf.data(), gxs, d, g, p0, p1);
    }
  });
}

template <typename T>
void conv_backward_weight_kernel(const T* x, const T* gy, T* gw, const ConvDims& d, const ConvGeometry& g) {
  const auto rows = d.ci * d.taps();
  const auto vol = d.out_volume();
  const auto positions = d.to * d.ho;
  const auto step = chunk_rows(d);
  const auto per_sample = d.co * rows;
  // one partial per sample, reduced over samples in fixed order
  std::vector<T> partial(d.n * per_sample, T{0});
  parallel_for(d.n, [&](std::size_t n) {
    const T* xs = x + n * d.ci * d.in_volume();
    const T* gys = gy + n * d.co * vol;
    MatrixMap<T> pm(partial.data() + n * per_sample, d.co, rows);
    if (is_identity_unfold(d, g)) {
      pm.noalias() = ConstMatrixMap<T>(gys, d.co, vol) * ConstMatrixMap<T>(xs, rows, vol).transpose();
      return;
    }
    auto& buf = scratch<T>(rows * step * d.wo);
    for (std::size_t p0 = 0; p0 < positions; p0 += step) {
      const auto p1 = std::min(positions, p0 + step);
      const auto width = (p1 - p0) * d.wo;
      im2col(xs, buf.data(), d, g, p0, p1);
      pm.noalias() += ConstStridedMap<T>(gys + p0 * d.wo, d.co, width, Eigen::OuterStride<>(vol)) *
                      ConstMatrixMap<T>(buf.data(), rows, width).transpose();
    }
  });
  for (std::size_t i = 0; i < per_sample; ++i) {
    T s{0};
    for (std::size_t n = 0; n < d.n; ++n) s += partial[n * per_sample + i];
    gw[i] = s;
  }
}

template <typename T>
void add_into(BasicTensor<T>& dst, const BasicTensor<T>& src) {
  auto a = dst.data();
  auto b = src.data();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

std::size_t channel_stride(const Shape& s) {
  std::size_t inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
  return inner;
}

}  // namespace

template <typename T>
BasicTensor<T> conv3d(const BasicTensor<T>& x, const BasicTensor<T>& w, const ConvGeometry& g) {
  ConvDims d(x.shape(), w.shape(), g);
  BasicTensor<T> y(g.output_shape(x.shape(), d.co));
  conv_forward_kernel(x.ptr(), w.ptr(), y.ptr(), d, g);
  return y;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  BasicTensor<T> y = x;
  for (auto& v : y.data()) v = v > T{0} ? v : T{0};
  return y;
}

template <typename T>
FoldedNorm<T> fold_batchnorm(const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                             const BatchNormStats<T>& stats) {
  const auto c = gamma.size();
  if (beta.size() != c || stats.running_mean.size() != c || stats.running_var.size() != c)
    throw ShapeError("batch-norm parameter sizes disagree");
  FoldedNorm<T> f{std::vector<T>(c), std::vector<T>(c)};
  for (std::size_t k = 0; k < c; ++k) {
    const T inv = T{1} / std::sqrt(stats.running_var[k] + static_cast<T>(stats.eps));
    f.scale[k] = gamma[k] * inv;
    f.shift[k] = beta[k] - gamma[k] * stats.running_mean[k] * inv;
  }
  return f;
}

template <typename T>
Var conv3d(Tape<T>& tape, Var x, Var w, const ConvGeometry& g) {
  ConvDims d(tape.value(x).shape(), tape.value(w).shape(), g);
  auto y = conv3d(tape.value(x), tape.value(w), g);
  return tape.record(std::move(y), {x, w}, [x, w, g, d](Tape<T>& t, const BasicTensor<T>& gy) {
    if (t.requires_grad(x)) {
      BasicTensor<T> gx(t.value(x).shape());
      conv_backward_input_kernel(gy.ptr(), t.value(w).ptr(), gx.ptr(), d, g);
      t.accumulate(x, gx);
    }
    if (t.requires_grad(w)) {
      BasicTensor<T> gw(t.value(w).shape());
      conv_backward_weight_kernel(t.value(x).ptr(), gy.ptr(), gw.ptr(), d, g);
      t.accumulate(w, gw);
    }
  });
}

template <typename T>
Var relu(Tape<T>& tape, Var x) {
  return tape.record(relu(tape.value(x)), {x}, [x](Tape<T>& t, const BasicTensor<T>& gy) {
    const auto& xv = t.value(x);
    auto& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < gy.size(); ++i)
      if (xv[i] > T{0}) gx[i] += gy[i];
  });
}

template <typename T>
Var rescale_relu(Tape<T>& tape, Var x) {
  const auto& xv = tape.value(x);
  if (xv.rank() < 1 || xv.dim(0) % 2 != 0)
    throw ShapeError("rescale_relu expects a stacked [inputs; references] batch");
  return tape.record(relu(xv), {x}, [x](Tape<T>& t, const BasicTensor<T>& gy) {
    const auto& v = t.value(x);
    const auto half = v.size() / 2;
    auto& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < half; ++i) {
      const T xp = v[i];
      const T xr = v[i + half];
      const T delta = xp - xr;
      T m;
      if (std::abs(delta) < T(1e-7)) {
        m = xp > T{0} ? T{1} : T{0};
      } else {
        m = ((xp > T{0} ? xp : T{0}) - (xr > T{0} ? xr : T{0})) / delta;
      }
      gx[i] += m * gy[i];
    }
  });
}

template <typename T>
Var batchnorm(Tape<T>& tape, Var x, Var gamma, Var beta, BatchNormStats<T>& stats, Mode mode) {
  const auto& xv = tape.value(x);
  const auto& gv = tape.value(gamma);
  const auto& bv = tape.value(beta);
  if (xv.rank() < 2) throw ShapeError("batch-norm input must have a channel axis");
  const auto n = xv.dim(0);
  const auto c = xv.dim(1);
  if (gv.size() != c || bv.size() != c || stats.running_mean.size() != c)
    throw ShapeError("batch-norm channel mismatch: input has " + std::to_string(c) + " channels, gamma/beta have " +
                     std::to_string(gv.size()));
  const auto inner = channel_stride(xv.shape());
  const auto count = n * inner;
  BasicTensor<T> y(xv.shape());

  if (mode == Mode::Infer) {
    const auto folded = fold_batchnorm(gv, bv, stats);
    std::vector<double> mean(c), inv(c);
    for (std::size_t k = 0; k < c; ++k) {
      mean[k] = stats.running_mean[k];
      inv[k] = 1.0 / std::sqrt(static_cast<double>(stats.running_var[k]) + stats.eps);
    }
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t k = 0; k < c; ++k) {
        const T* src = xv.ptr() + (s * c + k) * inner;
        T* dst = y.ptr() + (s * c + k) * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] = folded.scale[k] * src[i] + folded.shift[k];
      }
    return tape.record(std::move(y), {x, gamma, beta},
                       [x, gamma, beta, folded, mean, inv, n, c, inner](Tape<T>& t, const BasicTensor<T>& gy) {
                         const auto& xv = t.value(x);
                         if (t.requires_grad(x)) {
                           auto& gx = t.grad_buffer(x);
                           for (std::size_t s = 0; s < n; ++s)
                             for (std::size_t k = 0; k < c; ++k) {
                               const auto off = (s * c + k) * inner;
                               for (std::size_t i = 0; i < inner; ++i)
                                 gx[off + i] += folded.scale[k] * gy[off + i];
                             }
                         }
                         BasicTensor<T> gg(Shape{c}), gb(Shape{c});
                         for (std::size_t k = 0; k < c; ++k) {
                           double sg = 0.0, sgx = 0.0;
                           for (std::size_t s = 0; s < n; ++s) {
                             const auto off = (s * c + k) * inner;
                             for (std::size_t i = 0; i < inner; ++i) {
                               sg += gy[off + i];
                               sgx += gy[off + i] * (xv[off + i] - mean[k]) * inv[k];
                             }
                           }
                           gg[k] = static_cast<T>(sgx);
                           gb[k] = static_cast<T>(sg);
                         }
                         t.accumulate(gamma, gg);
                         t.accumulate(beta, gb);
                       });
  }

  BasicTensor<T> xhat(xv.shape());
  std::vector<T> inv_std(c);
  parallel_for(c, [&](std::size_t k) {
    double sum = 0.0;
    for (std::size_t s = 0; s < n; ++s) sum += slice(xv.ptr() + (s * c + k) * inner, inner).template cast<double>().sum();
    const double mean = sum / static_cast<double>(count);
    double sq = 0.0;
    for (std::size_t s = 0; s < n; ++s)
      sq += (slice(xv.ptr() + (s * c + k) * inner, inner).template cast<double>() - mean).square().sum();
    const double var = sq / static_cast<double>(count);
    const double inv = 1.0 / std::sqrt(var + stats.eps);
    inv_std[k] = static_cast<T>(inv);
    for (std::size_t s = 0; s < n; ++s) {
      const auto off = (s * c + k) * inner;
      auto xh = slice(xhat.ptr() + off, inner);
      xh = ((slice(xv.ptr() + off, inner).template cast<double>() - mean) * inv).template cast<T>();
      slice(y.ptr() + off, inner) = gv[k] * xh + bv[k];
    }
    const double m = stats.momentum;
    const double unbiased = count > 1 ? var * static_cast<double>(count) / static_cast<double>(count - 1) : var;
    stats.running_mean[k] = static_cast<T>((1.0 - m) * stats.running_mean[k] + m * mean);
    stats.running_var[k] = static_cast<T>((1.0 - m) * stats.running_var[k] + m * unbiased);
  });

  return tape.record(std::move(y), {x, gamma, beta},
                     [x, gamma, beta, xhat = std::move(xhat), inv_std, n, c, inner, count](
                         Tape<T>& t, const BasicTensor<T>& gy) {
                       const auto& gv = t.value(gamma);
                       BasicTensor<T> gg(Shape{c}), gb(Shape{c});
                       const bool need_x = t.requires_grad(x);
                       BasicTensor<T>* gx = need_x ? &t.grad_buffer(x) : nullptr;
                       parallel_for(c, [&](std::size_t k) {
                         double sg = 0.0, sgx = 0.0;
                         for (std::size_t s = 0; s < n; ++s) {
                           const auto off = (s * c + k) * inner;
                           const auto g = slice(gy.ptr() + off, inner).template cast<double>();
                           sg += g.sum();
                           sgx += (g * slice(xhat.ptr() + off, inner).template cast<double>()).sum();
                         }
                         gg[k] = static_cast<T>(sgx);
                         gb[k] = static_cast<T>(sg);
                         if (!gx) return;
                         const double scale = static_cast<double>(gv[k]) * inv_std[k] / static_cast<double>(count);
                         const auto a = static_cast<T>(scale * static_cast<double>(count));
                         const auto b = static_cast<T>(-scale * sg);
                         const auto cx = static_cast<T>(-scale * sgx);
                         for (std::size_t s = 0; s < n; ++s) {
                           const auto off = (s * c + k) * inner;
                           slice(gx->ptr() + off, inner) +=
                               a * slice(gy.ptr() + off, inner) + b + cx * slice(xhat.ptr() + off, inner);
                         }
                       });
                       t.accumulate(gamma, gg);
                       t.accumulate(beta, gb);
                     });
}

template <typename T>
Var affine(Tape<T>& tape, Var x, Var w, Var b) {
  const auto& xv = tape.value(x);
  const auto& wv = tape.value(w);
  const auto& bv = tape.value(b);
  if (xv.rank() != 2 || wv.rank() != 2) throw ShapeError("affine expects x [N, D] and W [K, D]");
  const auto n = xv.dim(0), dd = xv.dim(1), k = wv.dim(0);
  if (wv.dim(1) != dd)
    throw ShapeError("affine dimension mismatch: x has D=" + std::to_string(dd) + ", W has D=" +
                     std::to_string(wv.dim(1)));
  if (bv.size() != k) throw ShapeError("affine bias length does not match W rows");
  BasicTensor<T> y(Shape{n, k});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < k; ++o) {
      T s = bv[o];
      for (std::size_t j = 0; j < dd; ++j) s += xv[i * dd + j] * wv[o * dd + j];
      y[i * k + o] = s;
    }
  return tape.record(std::move(y), {x, w, b}, [x, w, b, n, dd, k](Tape<T>& t, const BasicTensor<T>& gy) {
    if (t.requires_grad(x)) {
      const auto& wv = t.value(w);
      auto& gx = t.grad_buffer(x);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < k; ++o)
          for (std::size_t j = 0; j < dd; ++j) gx[i * dd + j] += gy[i * k + o] * wv[o * dd + j];
    }
    if (t.requires_grad(w)) {
      const auto& xv = t.value(x);
      auto& gw = t.grad_buffer(w);
      for (std::size_t o = 0; o < k; ++o)
        for (std::size_t j = 0; j < dd; ++j) {
          T s{0};
          for (std::size_t i = 0; i < n; ++i) s += gy[i * k + o] * xv[i * dd + j];
          gw[o * dd + j] += s;
        }
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad_buffer(b);
      for (std::size_t o = 0; o < k; ++o) {
        T s{0};
        for (std::size_t i = 0; i < n; ++i) s += gy[i * k + o];
        gb[o] += s;
      }
    }
  });
}

template <typename T>
Var global_avg_pool(Tape<T>& tape, Var x) {
  const auto& xv = tape.value(x);
  if (xv.rank() < 2) throw ShapeError("global_avg_pool expects [N, C, ...]");
  const auto n = xv.dim(0), c = xv.dim(1);
  const auto inner = channel_stride(xv.shape());
  BasicTensor<T> y(Shape{n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    const T* src = xv.ptr() + i * inner;
    for (std::size_t j = 0; j < inner; ++j) s += src[j];
    y[i] = static_cast<T>(s / static_cast<double>(inner));
  }
  return tape.record(std::move(y), {x}, [x, n, c, inner](Tape<T>& t, const BasicTensor<T>& gy) {
    auto& gx = t.grad_buffer(x);
    const T scale = T{1} / static_cast<T>(inner);
    for (std::size_t i = 0; i < n * c; ++i) {
      const T g = gy[i] * scale;
      T* dst = gx.ptr() + i * inner;
      for (std::size_t j = 0; j < inner; ++j) dst[j] += g;
    }
  });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  require_shape(tape.value(b).shape(), tape.value(a).shape(), "add");
  BasicTensor<T> y = tape.value(a);
  add_into(y, tape.value(b));
  return tape.record(std::move(y), {a, b}, [a, b](Tape<T>& t, const BasicTensor<T>& gy) {
    t.accumulate(a, gy);
    t.accumulate(b, gy);
  });
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax expects [N, K] logits");
  const auto n = logits.dim(0), k = logits.dim(1);
  BasicTensor<T> p(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.ptr() + i * k;
    const T mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    for (std::size_t j = 0; j < k; ++j) p[i * k + j] = static_cast<T>(std::exp(static_cast<double>(row[j] - mx)) / z);
  }
  return p;
}

template <typename T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, std::span<const int> labels) {
  const auto& lv = tape.value(logits);
  if (lv.rank() != 2) throw ShapeError("softmax_cross_entropy expects [N, K] logits");
  const auto n = lv.dim(0), k = lv.dim(1);
  if (labels.size() != n) throw ShapeError("label count does not match batch size");
  std::vector<int> owned(labels.begin(), labels.end());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (owned[i] < 0 || static_cast<std::size_t>(owned[i]) >= k)
      throw Error("label " + std::to_string(owned[i]) + " out of range [0, " + std::to_string(k) + ")");
    const T* row = lv.ptr() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    total += mx + std::log(z) - static_cast<double>(row[owned[i]]);
  }
  BasicTensor<T> loss(Shape{1}, static_cast<T>(total / static_cast<double>(n)));
  return tape.record(std::move(loss), {logits}, [logits, owned = std::move(owned), n, k](Tape<T>& t, const BasicTensor<T>& gy) {
    auto p = softmax(t.value(logits));
    auto& g = t.grad_buffer(logits);
    const T scale = gy[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        const T onehot = static_cast<std::size_t>(owned[i]) == j ? T{1} : T{0};
        g[i * k + j] += (p[i * k + j] - onehot) * scale;
      }
  });
}

#define ECHODX_INSTANTIATE(T)                                                                       \
  template BasicTensor<T> conv3d(const BasicTensor<T>&, const BasicTensor<T>&, const ConvGeometry&); \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                              \
  template FoldedNorm<T> fold_batchnorm(const BasicTensor<T>&, const BasicTensor<T>&,               \
                                        const BatchNormStats<T>&);                                  \
  template Var conv3d(Tape<T>&, Var, Var, const ConvGeometry&);                                     \
  template Var relu(Tape<T>&, Var);                                                                 \
  template Var rescale_relu(Tape<T>&, Var);                                                         \
  template Var batchnorm(Tape<T>&, Var, Var, Var, BatchNormStats<T>&, Mode);                        \
  template Var affine(Tape<T>&, Var, Var, Var);                                                     \
  template Var global_avg_pool(Tape<T>&, Var);                                                      \
  template Var add(Tape<T>&, Var, Var);                                                             \
  template Var softmax_cross_entropy(Tape<T>&, Var, std::span<const int>);                          \
  template BasicTensor<T> softmax(const BasicTensor<T>&);

ECHODX_INSTANTIATE(float)
ECHODX_INSTANTIATE(double)

}  // namespace echodx
