#include <doctest.h>

#include <cmath>
#include <fstream>
#include <numeric>

#include "echodx/random.hpp"
#include "echodx/tsne.hpp"
#include "support.hpp"

using namespace echodx;

namespace {

DataMatrix gaussian_rows(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  DataMatrix x{n, d, std::vector<double>(n * d)};
  for (auto& v : x.values) v = normal01(rng);
  return x;
}

DataMatrix clusters(std::size_t per, std::size_t d, std::vector<int>& labels, std::uint64_t seed) {
  Rng rng(seed);
  DataMatrix x{3 * per, d, {}};
  for (int k = 0; k < 3; ++k) {
    std::vector<double> center(d);
    for (auto& c : center) c = 10.0 * normal01(rng);
    for (std::size_t i = 0; i < per; ++i) {
      for (std::size_t j = 0; j < d; ++j) x.values.push_back(center[j] + normal01(rng));
      labels.push_back(k);
    }
  }
  return x;
}

}  // namespace

TEST_SUITE("tsne") {
  TEST_CASE("equidistant neighbours") {
    DataMatrix x{3, 1, {0.0, -1.0, 1.0}};
    auto a = calibrate_affinities(x, 2.0);
    CHECK(std::abs(a.entropy_bits[0] - 1.0) < 1e-4);
    // row 0 conditionals are (1/2, 1/2); P_01 = (P_{1|0} + P_{0|1}) / 6
    CHECK(a.p[1] == doctest::Approx(a.p[2]));
    CHECK(a.p[0] == 0.0);
  }

  TEST_CASE("entropy calibration") {
    auto x = gaussian_rows(20, 5, 3);
    auto a = calibrate_affinities(x, 5.0);
    for (auto h : a.entropy_bits) CHECK(std::abs(h - std::log2(5.0)) < 1e-4);
    double sum = 0.0;
    for (std::size_t i = 0; i < 20; ++i) {
      CHECK(a.p[i * 20 + i] == 0.0);
      for (std::size_t j = 0; j < 20; ++j) {
        sum += a.p[i * 20 + j];
        CHECK(a.p[i * 20 + j] >= 0.0);
        CHECK(std::abs(a.p[i * 20 + j] - a.p[j * 20 + i]) < 1e-8);
      }
    }
    CHECK(std::abs(sum - 1.0) < 1e-8);
  }

  TEST_CASE("affinity errors and duplicates") {
    CHECK_THROWS(calibrate_affinities(gaussian_rows(2, 3, 1), 1.0));
    CHECK_THROWS(calibrate_affinities(gaussian_rows(10, 3, 1), 10.0));
    CHECK_THROWS(calibrate_affinities(DataMatrix{4, 2, std::vector<double>(8, 1.5)}, 2.0));
    auto x = gaussian_rows(10, 3, 2);
    std::copy(x.row(0), x.row(0) + 3, x.values.begin() + 3);
    auto a = calibrate_affinities(x, 3.0);
    CHECK(a.p[1] > 0.0);
    for (auto h : a.entropy_bits) CHECK(std::abs(h - std::log2(3.0)) < 1e-4);
  }

  TEST_CASE("kl divergence") {
    std::vector<double> p{0.6, 0.4}, q{0.5, 0.5};
    CHECK(kl_divergence(p, q) == doctest::Approx(0.6 * std::log(1.2) + 0.4 * std::log(0.8)).epsilon(1e-12));
    CHECK(kl_divergence(p, q) == doctest::Approx(0.020136).epsilon(1e-4));
    CHECK(kl_divergence(p, p) == 0.0);
    std::vector<double> z{0.0, 1.0};
    CHECK(kl_divergence(z, q) == doctest::Approx(std::log(2.0)));
    Rng rng(4);
    for (int t = 0; t < 20; ++t) {
      std::vector<double> a(6), b(6);
      for (auto& v : a) v = uniform01(rng);
      for (auto& v : b) v = uniform01(rng) + 1e-3;
      const double sa = std::accumulate(a.begin(), a.end(), 0.0), sb = std::accumulate(b.begin(), b.end(), 0.0);
      for (auto& v : a) v /= sa;
      for (auto& v : b) v /= sb;
      CHECK(kl_divergence(a, b) >= 0.0);
    }
  }

  TEST_CASE("kl is rigid-motion invariant") {
    auto x = gaussian_rows(12, 4, 5);
    auto a = calibrate_affinities(x, 4.0);
    Rng rng(6);
    std::vector<double> y(24);
    for (auto& v : y) v = normal01(rng);
    const double k0 = kl_divergence(a.p, student_t_affinities(y, 12));
    const double th = 0.7;
    std::vector<double> moved(24);
    for (std::size_t i = 0; i < 12; ++i) {
      moved[2 * i] = std::cos(th) * y[2 * i] - std::sin(th) * y[2 * i + 1] + 3.0;
      moved[2 * i + 1] = std::sin(th) * y[2 * i] + std::cos(th) * y[2 * i + 1] - 1.5;
    }
    CHECK(std::abs(kl_divergence(a.p, student_t_affinities(moved, 12)) - k0) < 1e-8);
  }

  TEST_CASE("optimization") {
    std::vector<int> labels;
    auto x = clusters(50, 50, labels, 9);
    auto a = calibrate_affinities(x, 30.0);
    auto e1 = tsne_optimize(a, 7);
    auto e2 = tsne_optimize(a, 7);
    CHECK(e1.points == e2.points);
    CHECK(e1.points.size() == 300);
    for (auto v : e1.points) CHECK(std::isfinite(v));
    CHECK(e1.final_kl < e1.initial_kl);
    const double agree = nearest_neighbor_agreement(e1.points, 2, labels);
    MESSAGE("1-NN agreement " << agree);
    CHECK(agree >= 0.95);
    auto [intra, inter] = intra_inter_distance(e1.points, 2, labels);
    CHECK(intra < inter);
  }

  TEST_CASE("embedding tsv") {
    const auto dir = testing::scratch_dir("tsne");
    Embedding e{2, {0.5, -1.0, 2.0, 3.25}, 0.0, 0.0};
    std::vector<int> labels{0, 2};
    write_embedding_tsv(dir / "embedding.tsv", {"a", "b"}, e, labels);
    std::ifstream in(dir / "embedding.tsv");
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(in, line)) lines.push_back(line);
    REQUIRE(lines.size() == 3);
    CHECK(lines[1] == "a\t0.5\t-1\t0");
    CHECK(lines[2] == "b\t2\t3.25\t2");
  }
}
