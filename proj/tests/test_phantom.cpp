#include <doctest.h>

#include <fstream>
#include <iterator>

#include "echodx/phantom.hpp"
#include "echodx/train.hpp"
#include "support.hpp"

using namespace echodx;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

double band_variance(const Tensor& frames) {
  const auto plane = frames.dim(1) * frames.dim(2);
  const auto t = frames.dim(0);
  double total = 0.0;
  for (std::size_t p = 0; p < plane; ++p) {
    double s = 0.0, q = 0.0;
    for (std::size_t f = 0; f < t; ++f) {
      s += frames[f * plane + p];
      q += static_cast<double>(frames[f * plane + p]) * frames[f * plane + p];
    }
    total += q / t - (s / t) * (s / t);
  }
  return total;
}

}  // namespace

TEST_SUITE("phantom") {
  TEST_CASE("static phantom") {
    auto p = PhantomParams{}.noiseless();
    p.amplitude = {0.0, 0.0, 0.0};
    p.task = PhantomTask::Valve;
    p.flutter = {0.0, 0.0, 0.0};
    auto clip = generate_phantom_clip(p, 1, 4).clip.frames;
    const auto plane = 112 * 112;
    for (std::size_t f = 1; f < 30; ++f)
      CHECK(std::equal(clip.ptr(), clip.ptr() + plane, clip.ptr() + f * plane));
    const auto mask = moving_region_mask(clip);
    for (auto v : mask.data()) CHECK(v == 0.0f);
  }

  TEST_CASE("cycle periodicity") {
    const auto p = PhantomParams{}.noiseless();
    Rng rng(1);
    auto inst = draw_instance(p, 0, rng);
    CHECK(render_frame(p, inst, 0) == render_frame(p, inst, 30));
    CHECK(render_frame(p, inst, 7) == render_frame(p, inst, 37));
    CHECK(render_frame(p, inst, 0) != render_frame(p, inst, 15));
  }

  TEST_CASE("motion mask") {
    const auto p = PhantomParams{};
    for (int cls = 0; cls < 3; ++cls) {
      auto out = generate_phantom_clip(p, cls, 11, "m" + std::to_string(cls));
      double area = 0.0;
      for (auto v : out.motion_mask.data()) area += v;
      CHECK(area > 0.0);
      CHECK(area / (112.0 * 112.0) <= 0.25);
    }
    // noiseless generator output against the variance mask
    for (auto task : {PhantomTask::Lv, PhantomTask::Valve}) {
      auto q = PhantomParams{}.noiseless();
      q.task = task;
      auto out = generate_phantom_clip(q, 2, 5);
      CHECK(moving_region_mask(out.clip.frames) == out.motion_mask);
    }
    Tensor blink(Shape{4, 3, 3});
    for (std::size_t f = 0; f < 4; ++f) blink[f * 9 + 4] = f % 2 ? 255.0f : 0.0f;
    auto m = moving_region_mask(blink);
    for (std::size_t i = 0; i < 9; ++i) CHECK(m[i] == (i == 4 ? 1.0f : 0.0f));
  }

  TEST_CASE("amplitude orders temporal variance") {
    const auto p = PhantomParams{}.noiseless();
    const double v0 = band_variance(generate_phantom_clip(p, 0, 3).clip.frames);
    const double v1 = band_variance(generate_phantom_clip(p, 1, 3).clip.frames);
    const double v2 = band_variance(generate_phantom_clip(p, 2, 3).clip.frames);
    CHECK(v0 > v1);
    CHECK(v1 > v2);
  }

  TEST_CASE("value range and determinism") {
    const auto p = PhantomParams{};
    auto a = generate_phantom_clip(p, 1, 21, "x");
    auto b = generate_phantom_clip(p, 1, 21, "x");
    auto c = generate_phantom_clip(p, 1, 21, "y");
    CHECK(a.clip.frames == b.clip.frames);
    CHECK(a.clip.frames != c.clip.frames);
    for (auto v : a.clip.frames.data()) CHECK((v >= 0.0f && v <= 255.0f));
    CHECK(a.clip.cycle_start == 0);
    CHECK(a.clip.cycle_len == 30);
  }

  TEST_CASE("parameter validation") {
    auto p = PhantomParams{};
    p.amplitude[0] = 1.0;
    CHECK_THROWS_AS(p.validate(), ConfigError);
    p = PhantomParams{};
    p.noise_sigma = -1.0;
    CHECK_THROWS_AS(p.validate(), ConfigError);
    p = PhantomParams{};
    p.center_row = 100.0;
    CHECK_THROWS_AS(p.validate(), ConfigError);
    CHECK_THROWS_AS(generate_phantom_clip(PhantomParams{}, 3, 1), ConfigError);
  }

  TEST_CASE("dataset") {
    const auto d1 = testing::scratch_dir("phantom_a");
    const auto d2 = testing::scratch_dir("phantom_b");
    auto r1 = generate_dataset(4, PhantomParams{}, d1, 7);
    auto r2 = generate_dataset(4, PhantomParams{}, d2, 7);
    REQUIRE(r1.size() == 12);
    CHECK(read_manifest(d1 / "manifest.tsv").size() == 12);
    std::array<int, 3> per{};
    for (std::size_t i = 0; i < r1.size(); ++i) {
      ++per[r1[i].label];
      CHECK(r1[i].cycle_start == 0);
      CHECK(r1[i].cycle_len == 30);
      const auto name = std::filesystem::path(r1[i].path).filename();
      CHECK(slurp(d1 / name) == slurp(d2 / name));
      CHECK(std::filesystem::exists(mask_path_for(d1 / r1[i].path)));
    }
    CHECK(per == std::array<int, 3>{4, 4, 4});
    CHECK(slurp(d1 / "manifest.tsv").substr(0, 1) == "#");
    CHECK_THROWS(generate_dataset(2, PhantomParams{}, d1, 7));
    CHECK_THROWS(generate_dataset(3, PhantomParams{}, "/proc/forbidden/x", 7));

    const auto c = split_counts(60, {0.7, 0.1, 0.2});
    CHECK(c.train == 42);
    CHECK(c.val == 6);
    CHECK(c.test == 12);
  }
}
