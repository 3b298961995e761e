#include <doctest.h>

#include <fstream>
#include <iterator>
#include <numeric>

#include "echodx/deeplift.hpp"
#include "echodx/ect_io.hpp"
#include "support.hpp"

using namespace echodx;

namespace {

NetworkConfig tiny(bool linear) {
  auto c = NetworkConfig::desk();
  c.input_shape = {30, 24, 24};
  c.linear = linear;
  return c;
}

/// Push running statistics away from their defaults so folded norms are non-trivial.
void perturb_stats(NetworkD& net, std::uint64_t seed) {
  Rng rng(seed);
  auto state = net.state();
  for (auto& [name, t] : state) {
    const bool var = name.find("running_var") != std::string::npos;
    const bool mean = name.find("running_mean") != std::string::npos;
    const bool beta = name.find(".beta") != std::string::npos;
    for (auto& v : t.data()) {
      if (var) v = static_cast<float>(uniform(rng, 0.5, 2.0));
      if (mean || beta) v = static_cast<float>(uniform(rng, -0.2, 0.2));
    }
  }
  net.load_state(state);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_SUITE("deeplift") {
  TEST_CASE("rescale multipliers") {
    CHECK(rescale_multiplier(1.0, -1.0) == 0.5);
    CHECK(rescale_multiplier(3.0, 1.0) == 1.0);
    CHECK(rescale_multiplier(-1.0, -3.0) == 0.0);
    CHECK(rescale_multiplier(2.0, 2.0) == 1.0);
    CHECK(rescale_multiplier(-2.0, -2.0) == 0.0);
    std::vector<double> x{1.0, 3.0}, x0{-1.0, 1.0}, r{2.0, 4.0};
    CHECK(rescale_rule(x, x0, r) == std::vector<double>{1.0, 4.0});
  }

  TEST_CASE("linear rule") {
    Rng rng(3);
    LinearLayer layer{LayerKind::Affine, 4, 6, {}};
    for (int i = 0; i < 24; ++i) layer.weight.push_back(uniform(rng, -1, 1));
    std::vector<double> dx(6), rout(4);
    for (auto& v : dx) v = uniform(rng, -1, 1);
    for (auto& v : rout) v = uniform(rng, -1, 1);
    auto rin = linear_rule(layer, dx, rout);
    CHECK(std::abs(std::accumulate(rin.begin(), rin.end(), 0.0) - std::accumulate(rout.begin(), rout.end(), 0.0)) < 1e-6);

    // one output carrying its own difference: attribution = w * x with x0 = 0
    LinearLayer row{LayerKind::Affine, 1, 6, std::vector<double>(layer.weight.begin(), layer.weight.begin() + 6)};
    std::vector<double> dy{0.0};
    for (int j = 0; j < 6; ++j) dy[0] += row.weight[j] * dx[j];
    auto wx = linear_rule(row, dx, dy);
    for (int j = 0; j < 6; ++j) CHECK(wx[j] == doctest::Approx(row.weight[j] * dx[j]).epsilon(1e-12));

    auto zero = linear_rule(layer, std::vector<double>(6, 0.0), rout);
    for (auto v : zero) CHECK(v == 0.0);
    const std::vector<double> one{1.0};
    CHECK_THROWS(linear_rule(LinearLayer{LayerKind::Relu, 1, 1, {1.0}}, one, one));
    CHECK_THROWS(linear_rule(layer, std::vector<double>(5), rout));
  }

  TEST_CASE("completeness on the desk network") {
    auto net = Network::build(tiny(false), 3).cast<double>();
    perturb_stats(net, 4);
    Rng rng(5);
    for (int trial = 0; trial < 3; ++trial) {
      auto clip = testing::random_tensor<double>(Shape{1, 30, 24, 24}, rng, 0, 1);
      TensorD baseline;
      if (trial == 2) baseline = testing::random_tensor<double>(Shape{1, 30, 24, 24}, rng, 0, 0.5);
      const int target = trial;
      auto map = deeplift_attribute(net, clip, target, baseline);
      CHECK(map.values.shape() == clip.shape());
      auto x = clip.reshaped({1, 1, 30, 24, 24});
      auto x0 = baseline.empty() ? TensorD(x.shape()) : baseline.reshaped(x.shape());
      const double delta = net.logits(x)[target] - net.logits(x0)[target];
      const double sum = std::accumulate(map.values.data().begin(), map.values.data().end(), 0.0);
      CHECK(std::abs(sum - delta) <= 1e-4 * std::max(1.0, std::abs(delta)));
      CHECK(std::abs(map.delta_logit - delta) <= 1e-9 * std::max(1.0, std::abs(delta)));

      // seed linearity
      auto scaled = deeplift_attribute(net, clip, target, baseline, 2.5);
      for (std::size_t i = 0; i < map.values.size(); i += 97)
        CHECK(std::abs(scaled.values[i] - 2.5 * map.values[i]) <= 1e-6 * std::max(1.0, std::abs(map.values[i])));
    }
    auto clip = testing::random_tensor<double>(Shape{1, 30, 24, 24}, rng, 0, 1);
    auto self = deeplift_attribute(net, clip, 1, clip);
    for (auto v : self.values.data()) CHECK(v == 0.0);
    CHECK_THROWS(deeplift_attribute(net, clip, 3));
    CHECK_THROWS(deeplift_attribute(net, clip, -1));
  }

  TEST_CASE("float path keeps completeness") {
    auto net = Network::build(NetworkConfig::desk(), 8);
    Rng rng(9);
    auto clip = testing::random_tensor<float>(Shape{1, 30, 112, 112}, rng, 0, 1);
    auto map = deeplift_attribute(net, clip, 0);
    const double sum = std::accumulate(map.values.data().begin(), map.values.data().end(), 0.0);
    CHECK(std::abs(sum - map.delta_logit) <= 1e-4 * std::max(1.0, std::abs(static_cast<double>(map.delta_logit))));
  }

  TEST_CASE("linear network equals gradient times delta") {
    auto net = Network::build(tiny(true), 6).cast<double>();
    perturb_stats(net, 7);
    Rng rng(8);
    auto clip = testing::random_tensor<double>(Shape{1, 30, 24, 24}, rng, 0, 1);
    auto base = testing::random_tensor<double>(Shape{1, 30, 24, 24}, rng, 0, 0.3);
    auto map = deeplift_attribute(net, clip, 2, base);
    auto gxd = gradient_times_delta(net, clip, 2, base);
    REQUIRE(gxd.shape() == map.values.shape());
    for (std::size_t i = 0; i < gxd.size(); ++i) CHECK(std::abs(map.values[i] - gxd[i]) < 1e-5);
  }

  TEST_CASE("heatmap export") {
    const auto dir = testing::scratch_dir("heatmaps");
    AttributionMap zero;
    zero.values = Tensor(Shape{1, 30, 112, 112});
    export_heatmaps(zero, dir / "zero");
    for (int f = 0; f < 30; ++f) {
      char name[32];
      std::snprintf(name, sizeof name, "frame_%02d.pgm", f);
      const auto bytes = slurp(dir / "zero" / name);
      const std::string header = "P5\n112 112\n255\n";
      REQUIRE(bytes.size() == header.size() + 12544);
      CHECK(bytes.substr(0, header.size()) == header);
      CHECK(bytes.find_first_not_of('\0', header.size()) == std::string::npos);
    }
    CHECK(load_ect(dir / "zero" / "attribution.ect") == zero.values);

    AttributionMap one = zero;
    one.values[5 * 12544 + 40 * 112 + 60] = 0.3f;
    one.values[7] = -2.0f;
    auto levels = heatmap_levels(one.values);
    for (std::size_t i = 0; i < levels.size(); ++i) CHECK(levels[i] == (i == 5 * 12544 + 40 * 112 + 60 ? 255 : 0));
    export_heatmaps(one, dir / "one");
    const auto bytes = slurp(dir / "one" / "frame_05.pgm");
    CHECK(static_cast<unsigned char>(bytes[15 + 40 * 112 + 60]) == 255);
    CHECK_THROWS(export_heatmaps(one, "/proc/forbidden/heat"));
  }
}
