#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace echodx {

/// Row-major n x d data.
struct DataMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  const double* row(std::size_t i) const { return values.data() + i * cols; }
};

struct AffinityMatrix {
  std::size_t n = 0;
  double perplexity = 0.0;
  /// Symmetric joint probabilities, n x n, zero diagonal, summing to 1.
  std::vector<double> p;
  /// Gaussian bandwidth per point, sigma_i = sqrt(1 / (2 beta_i)).
  std::vector<double> sigma;
  /// Entropy of each conditional distribution, in bits.
  std::vector<double> entropy_bits;
};

std::vector<double> squared_distances(const DataMatrix& x);

AffinityMatrix calibrate_affinities(const DataMatrix& x, double perplexity);

/// Sum over entries with p > 0 of p * ln(p / q).
double kl_divergence(std::span<const double> p, std::span<const double> q);

/// Student-t joint probabilities of an n x 2 embedding (zero diagonal).
std::vector<double> student_t_affinities(std::span<const double> y, std::size_t n);

struct TsneOptions {
  std::size_t iterations = 1000;
  double learning_rate = 200.0;
  double initial_momentum = 0.5;
  double final_momentum = 0.8;
  std::size_t momentum_switch = 250;
  double exaggeration = 12.0;
  std::size_t exaggeration_iters = 250;
  double init_sigma = 1e-4;
};

struct Embedding {
  std::size_t n = 0;
  /// n x 2 row-major coordinates.
  std::vector<double> points;
  double initial_kl = 0.0;
  double final_kl = 0.0;
};

Embedding tsne_optimize(const AffinityMatrix& affinities, std::uint64_t seed, const TsneOptions& options = {});

/// Fraction of points whose nearest other point shares their label.
double nearest_neighbor_agreement(std::span<const double> points, std::size_t dims, std::span<const int> labels);

/// Mean pairwise distance within classes and across classes.
std::pair<double, double> intra_inter_distance(std::span<const double> points, std::size_t dims,
                                               std::span<const int> labels);

/// `sample_id x y label` lines.
void write_embedding_tsv(const std::filesystem::path& path, const std::vector<std::string>& ids,
                         const Embedding& embedding, std::span<const int> labels);

}  // namespace echodx
