#include "echodx/tsne.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>

#include "echodx/parallel.hpp"
#include "echodx/random.hpp"
#include "echodx/tensor.hpp"

namespace echodx {

std::vector<double> squared_distances(const DataMatrix& x) {
  const auto n = x.rows;
  std::vector<double> d(n * n, 0.0);
  parallel_for(n, [&](std::size_t i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double s = 0.0;
      const double* a = x.row(i);
      const double* b = x.row(j);
      for (std::size_t k = 0; k < x.cols; ++k) {
        const double t = a[k] - b[k];
        s += t * t;
      }
      d[i * n + j] = s;
    }
  });
  return d;
}

namespace {

/// Conditional row for precision beta over distances shifted by their minimum.
double row_entropy_bits(const double* dist, std::size_t n, std::size_t self, double dmin, double beta, double* p) {
  double z = 0.0, weighted = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    if (j == self) {
      p[j] = 0.0;
      continue;
    }
    const double shifted = dist[j] - dmin;
    p[j] = std::exp(-beta * shifted);
    z += p[j];
    weighted += p[j] * shifted;
  }
  for (std::size_t j = 0; j < n; ++j) p[j] /= z;
  return (std::log(z) + beta * weighted / z) / std::numbers::ln2;
}

}  // namespace

AffinityMatrix calibrate_affinities(const DataMatrix& x, double perplexity) {
  const auto n = x.rows;
  if (n < 3) throw ConfigError("tSNE needs at least 3 points");
  if (x.values.size() != n * x.cols) throw ShapeError("data matrix size does not match its extents");
  if (!(perplexity > 0.0) || perplexity >= static_cast<double>(n))
    throw ConfigError("perplexity must be in (0, n)");
  const auto dist = squared_distances(x);
  if (*std::max_element(dist.begin(), dist.end()) == 0.0) throw ConfigError("all input rows are identical");

  const double target = std::log2(perplexity);
  std::vector<double> cond(n * n, 0.0);
  AffinityMatrix out;
  out.n = n;
  out.perplexity = perplexity;
  out.sigma.assign(n, 0.0);
  out.entropy_bits.assign(n, 0.0);
  parallel_for(n, [&](std::size_t i) {
    const double* di = dist.data() + i * n;
    double dmin = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) dmin = std::min(dmin, di[j]);
    double* p = cond.data() + i * n;
    // bisection on log(beta); entropy decreases as beta grows
    double lo = -60.0, hi = 60.0, log_beta = 0.0;
    double h = row_entropy_bits(di, n, i, dmin, 1.0, p);
    for (int it = 0; it < 64 && std::abs(h - target) >= 1e-6; ++it) {
      if (h > target) {
        lo = log_beta;
      } else {
        hi = log_beta;
      }
      log_beta = 0.5 * (lo + hi);
      h = row_entropy_bits(di, n, i, dmin, std::exp(log_beta), p);
    }
    out.entropy_bits[i] = h;
    out.sigma[i] = std::sqrt(1.0 / (2.0 * std::exp(log_beta)));
  });

  out.p.assign(n * n, 0.0);
  const double denom = 2.0 * static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) out.p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / denom;
  return out;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ShapeError("KL operands differ in size");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) s += p[i] * std::log(p[i] / q[i]);
  return s;
}

std::vector<double> student_t_affinities(std::span<const double> y, std::size_t n) {
  std::vector<double> q(n * n, 0.0);
  std::vector<double> row_sum(n, 0.0);
  parallel_for(n, [&](std::size_t i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dx = y[2 * i] - y[2 * j], dy = y[2 * i + 1] - y[2 * j + 1];
      q[i * n + j] = 1.0 / (1.0 + dx * dx + dy * dy);
      s += q[i * n + j];
    }
    row_sum[i] = s;
  });
  double z = 0.0;
  for (double s : row_sum) z += s;
  for (auto& v : q) v /= z;
  return q;
}

Embedding tsne_optimize(const AffinityMatrix& affinities, std::uint64_t seed, const TsneOptions& options) {
  const auto n = affinities.n;
  if (n < 2 || affinities.p.size() != n * n) throw ShapeError("affinity matrix is malformed");
  Embedding out;
  out.n = n;
  out.points.resize(2 * n);
  Rng rng(splitmix64(seed));
  for (auto& v : out.points) v = options.init_sigma * normal01(rng);
  auto& y = out.points;
  out.initial_kl = kl_divergence(affinities.p, student_t_affinities(y, n));

  std::vector<double> velocity(2 * n, 0.0), gains(2 * n, 1.0), grad(2 * n, 0.0);
  std::vector<double> num(n * n, 0.0), row_sum(n, 0.0);
  for (std::size_t it = 0; it < options.iterations; ++it) {
    const double exaggeration = it < options.exaggeration_iters ? options.exaggeration : 1.0;
    const double momentum = it < options.momentum_switch ? options.initial_momentum : options.final_momentum;
    parallel_for(n, [&](std::size_t i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double dx = y[2 * i] - y[2 * j], dy = y[2 * i + 1] - y[2 * j + 1];
        num[i * n + j] = 1.0 / (1.0 + dx * dx + dy * dy);
        s += num[i * n + j];
      }
      row_sum[i] = s;
    });
    double z = 0.0;
    for (double s : row_sum) z += s;
    parallel_for(n, [&](std::size_t i) {
      double gx = 0.0, gy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double w = (exaggeration * affinities.p[i * n + j] - num[i * n + j] / z) * num[i * n + j];
        gx += w * (y[2 * i] - y[2 * j]);
        gy += w * (y[2 * i + 1] - y[2 * j + 1]);
      }
      grad[2 * i] = 4.0 * gx;
      grad[2 * i + 1] = 4.0 * gy;
    });
    for (std::size_t k = 0; k < 2 * n; ++k) {
      if (!std::isfinite(grad[k])) throw Error("non-finite tSNE gradient at iteration " + std::to_string(it));
      // adaptive gains: grow when the step direction flips
      gains[k] = (grad[k] > 0.0) != (velocity[k] > 0.0) ? gains[k] + 0.2 : gains[k] * 0.8;
      gains[k] = std::max(gains[k], 0.01);
      velocity[k] = momentum * velocity[k] - options.learning_rate * gains[k] * grad[k];
      y[k] += velocity[k];
    }
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mx += y[2 * i];
      my += y[2 * i + 1];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[2 * i] -= mx;
      y[2 * i + 1] -= my;
    }
  }
  out.final_kl = kl_divergence(affinities.p, student_t_affinities(y, n));
  return out;
}

double nearest_neighbor_agreement(std::span<const double> points, std::size_t dims, std::span<const int> labels) {
  const auto n = labels.size();
  if (points.size() != n * dims || n < 2) throw ShapeError("points and labels do not line up");
  std::size_t agree = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = i;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double s = 0.0;
      for (std::size_t k = 0; k < dims; ++k) {
        const double t = points[i * dims + k] - points[j * dims + k];
        s += t * t;
      }
      if (s < best) {
        best = s;
        arg = j;
      }
    }
    if (labels[arg] == labels[i]) ++agree;
  }
  return static_cast<double>(agree) / static_cast<double>(n);
}

std::pair<double, double> intra_inter_distance(std::span<const double> points, std::size_t dims,
                                               std::span<const int> labels) {
  const auto n = labels.size();
  if (points.size() != n * dims) throw ShapeError("points and labels do not line up");
  double intra = 0.0, inter = 0.0;
  std::size_t ni = 0, no = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < dims; ++k) {
        const double t = points[i * dims + k] - points[j * dims + k];
        s += t * t;
      }
      const double d = std::sqrt(s);
      if (labels[i] == labels[j]) {
        intra += d;
        ++ni;
      } else {
        inter += d;
        ++no;
      }
    }
  return {ni ? intra / static_cast<double>(ni) : 0.0, no ? inter / static_cast<double>(no) : 0.0};
}

void write_embedding_tsv(const std::filesystem::path& path, const std::vector<std::string>& ids,
                         const Embedding& embedding, std::span<const int> labels) {
  if (ids.size() != embedding.n || labels.size() != embedding.n) throw ShapeError("embedding rows do not match ids");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "sample_id\tx\ty\tlabel\n";
  char buf[64];
  for (std::size_t i = 0; i < embedding.n; ++i) {
    std::snprintf(buf, sizeof buf, "\t%.9g\t%.9g\t", embedding.points[2 * i], embedding.points[2 * i + 1]);
    out << ids[i] << buf << labels[i] << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace echodx
