#include <doctest.h>

#include <cmath>
#include <fstream>

#include "echodx/phantom.hpp"
#include "echodx/preprocess.hpp"
#include "support.hpp"

using namespace echodx;

namespace {

CineLoop ramp_clip(std::size_t frames, std::size_t cycle_len, std::size_t rows = 2, std::size_t cols = 3) {
  CineLoop c;
  c.frames = Tensor(Shape{frames, rows, cols});
  for (std::size_t f = 0; f < frames; ++f)
    for (std::size_t p = 0; p < rows * cols; ++p) c.frames[f * rows * cols + p] = static_cast<float>(f);
  c.cycle_len = cycle_len;
  return c;
}

double bilinear_oracle(const Tensor& img, double r, double c) {
  const auto rows = img.dim(0), cols = img.dim(1);
  r = std::clamp(r, 0.0, rows - 1.0);
  c = std::clamp(c, 0.0, cols - 1.0);
  const auto r0 = static_cast<std::size_t>(std::floor(r)), c0 = static_cast<std::size_t>(std::floor(c));
  const auto r1 = std::min(r0 + 1, rows - 1), c1 = std::min(c0 + 1, cols - 1);
  const double a = r - r0, b = c - c0;
  return (1 - a) * (1 - b) * img[r0 * cols + c0] + (1 - a) * b * img[r0 * cols + c1] + a * (1 - b) * img[r1 * cols + c0] +
         a * b * img[r1 * cols + c1];
}

}  // namespace

TEST_SUITE("preprocess") {
  TEST_CASE("sector mask") {
    const auto g = SectorGeometry::phantom();
    CineLoop c;
    c.frames = Tensor(Shape{30, 112, 112}, 100.0f);
    auto out = mask_overlay(c, g).frames;
    const auto plane = 112 * 112;
    // on the axis at radius / 2
    CHECK(out[57 * 112 + 55] == 100.0f);
    CHECK(g.contains(57.5, 55.5));
    // 60 degrees off axis
    const double th = 60.0 * M_PI / 180.0;
    CHECK_FALSE(g.contains(50.0 * std::cos(th), 55.5 + 50.0 * std::sin(th)));
    for (std::size_t r = 0; r < 112; ++r)
      for (std::size_t col = 0; col < 112; ++col) {
        const bool in = g.contains(static_cast<double>(r), static_cast<double>(col));
        for (std::size_t f : {0, 29}) CHECK(out[f * plane + r * 112 + col] == (in ? 100.0f : 0.0f));
      }
    CHECK_THROWS_AS(mask_overlay(c, SectorGeometry{0, 55.5, 115, 95}), ConfigError);
  }

  TEST_CASE("static bright overlay removed") {
    auto params = PhantomParams{};
    auto clip = generate_phantom_clip(params, 0, 3, "x").clip;
    const auto g = SectorGeometry::phantom();
    const auto plane = 112 * 112;
    // the rendered text block sits outside the sector
    const auto [r0, c0, h, w] = params.overlay;
    for (std::size_t r = r0; r < r0 + h; ++r)
      for (std::size_t c = c0; c < c0 + w; ++c) {
        CHECK_FALSE(g.contains(static_cast<double>(r), static_cast<double>(c)));
        CHECK(clip.frames[r * 112 + c] == static_cast<float>(params.overlay_value));
      }
    auto out = mask_overlay(clip, g, true);
    for (std::size_t f = 0; f < 30; ++f)
      for (std::size_t p = 0; p < plane; ++p) {
        const bool in = g.contains(static_cast<double>(p / 112), static_cast<double>(p % 112));
        CHECK(out.frames[f * plane + p] == (in ? clip.frames[f * plane + p] : 0.0f));
      }

    // a static bright block inside the sector goes too when asked
    CineLoop c;
    c.frames = Tensor(Shape{4, 112, 112}, 50.0f);
    for (std::size_t f = 0; f < 4; ++f) c.frames[f * plane + 60 * 112 + 55] = 220.0f;
    c.cycle_len = 4;
    CHECK(mask_overlay(c, g, true).frames[60 * 112 + 55] == 0.0f);
    CHECK(mask_overlay(c, g, false).frames[60 * 112 + 55] == 220.0f);
  }

  TEST_CASE("temporal resampling") {
    auto c30 = ramp_clip(30, 30);
    CHECK(resample_cycle(c30) == c30.frames);
    auto r60 = resample_cycle(ramp_clip(60, 60));
    for (std::size_t k = 0; k < 30; ++k) CHECK(r60[k * 6] == static_cast<float>(2 * k));
    // frame 15 exists after the cycle end, so 14.5 is reachable
    auto r15 = resample_cycle(ramp_clip(16, 15));
    for (std::size_t k = 0; k < 30; ++k) CHECK(r15[k * 6] == doctest::Approx(0.5 * k));
    // clip ends with the cycle: interpolate toward the cycle start
    auto wrap = resample_cycle(ramp_clip(15, 15));
    CHECK(wrap[29 * 6] == doctest::Approx(0.5 * 14.0));
    auto off = ramp_clip(40, 20);
    off.cycle_start = 5;
    auto ro = resample_cycle(off);
    CHECK(ro[0] == 5.0f);
    CHECK(ro[3 * 6] == doctest::Approx(7.0));
    CHECK_THROWS(resample_cycle(ramp_clip(10, 1)));
    auto bad = ramp_clip(10, 8);
    bad.cycle_start = 5;
    CHECK_THROWS_AS(resample_cycle(bad), ConfigError);
  }

  TEST_CASE("clip start and rolling") {
    Rng a(5), b(5);
    for (int i = 0; i < 20; ++i) CHECK(sample_clip_start(SampleMode::Eval, a) == 0);
    std::vector<std::size_t> s1, s2;
    for (int i = 0; i < 50; ++i) {
      s1.push_back(sample_clip_start(SampleMode::Train, a));
      s2.push_back(sample_clip_start(SampleMode::Train, b));
      CHECK(s1.back() < 30);
    }
    for (int i = 0; i < 20; ++i) sample_clip_start(SampleMode::Eval, b);
    CHECK(s1 != std::vector<std::size_t>(50, s1[0]));
    Rng c(5);
    for (int i = 0; i < 50; ++i) CHECK(sample_clip_start(SampleMode::Train, c) == s2[i]);
    auto rolled = roll_frames(ramp_clip(30, 30).frames, 25);
    for (std::size_t k = 0; k < 30; ++k) CHECK(rolled[k * 6] == static_cast<float>((k + 25) % 30));
  }

  TEST_CASE("histogram matching") {
    std::vector<double> uniform_counts(256, 1.0);
    ReferenceHistogram uniform_ref(uniform_counts);
    const auto g = uniform_ref.cdf();
    CHECK(g.back() == doctest::Approx(1.0));
    Tensor half(Shape{1, 2, 4}, std::vector<float>{0, 0, 0, 0, 255, 255, 255, 255});
    auto m = histogram_match(half, uniform_ref);
    const auto first = static_cast<float>(std::lower_bound(g.begin(), g.end(), 0.5 - 1e-12) - g.begin());
    CHECK(first == 127.0f);
    CHECK(m[0] == first);
    CHECK(m[4] == 255.0f);

    Rng rng(1);
    Tensor clip(Shape{4, 16, 16});
    for (auto& v : clip.data()) v = std::round(static_cast<float>(uniform(rng, 0, 255)));
    ReferenceHistogram self;
    self.add(clip);
    auto id = histogram_match(clip, self);
    for (std::size_t i = 0; i < clip.size(); ++i) CHECK(std::abs(id[i] - clip[i]) <= 1.0f);

    ReferenceHistogram skew;
    Tensor other(Shape{1, 32, 32});
    for (auto& v : other.data()) v = std::round(static_cast<float>(255.0 * std::pow(uniform01(rng), 3.0)));
    skew.add(other);
    auto mapped = histogram_match(clip, skew);
    for (std::size_t i = 0; i < clip.size(); ++i)
      for (std::size_t j = 0; j < clip.size(); j += 37)
        if (clip[i] <= clip[j]) CHECK(mapped[i] <= mapped[j]);
    CHECK_THROWS(histogram_match(Tensor(), skew));
  }

  TEST_CASE("matched CDF tracks the reference") {
    const auto params = PhantomParams{};
    auto clip = generate_phantom_clip(params, 1, 9, "a").clip;
    auto ref_clip = generate_phantom_clip(params, 2, 10, "b").clip;
    const auto g = SectorGeometry::phantom();
    const auto mask = g.mask(112, 112);
    ReferenceHistogram ref;
    ref.add(ref_clip.frames, mask);
    auto out = histogram_match(clip.frames, ref, mask);
    std::vector<double> counts(256, 0.0);
    double n = 0;
    for (std::size_t i = 0; i < out.size(); ++i)
      if (mask[i % (112 * 112)]) {
        counts[static_cast<std::size_t>(out[i])] += 1;
        ++n;
      }
    REQUIRE(n >= 1e4);
    const auto G = ref.cdf();
    double acc = 0.0, sup = 0.0;
    for (std::size_t u = 0; u < 256; ++u) {
      acc += counts[u] / n;
      sup = std::max(sup, std::abs(acc - G[u]));
    }
    CHECK(sup <= 1.0 / 256.0);
  }

  TEST_CASE("reference histogram tensor round trip") {
    ReferenceHistogram h;
    h.add(Tensor(Shape{1, 2, 2}, std::vector<float>{0, 3, 3, 255}));
    CHECK(h.total() == 4.0);
    auto back = ReferenceHistogram::from_tensor(h.to_tensor());
    CHECK(back.counts() == h.counts());
    auto c = h.cdf();
    for (std::size_t i = 1; i < 256; ++i) CHECK(c[i] >= c[i - 1]);
    CHECK(c[255] == 1.0);
  }

  TEST_CASE("crop and downsample") {
    CHECK(crop_origin(708, 1016) == std::array<std::size_t, 2>{79, 233});
    Tensor big(Shape{708, 1016}, 51.0f);
    auto small = crop_and_downsample(big);
    CHECK(small.shape() == Shape{112, 112});
    for (auto v : small.data()) CHECK(v == doctest::Approx(0.2f).epsilon(1e-6));
    CHECK_THROWS_AS(crop_and_downsample(Tensor(Shape{500, 1016})), ShapeError);

    Tensor checker(Shape{2, 2}, std::vector<float>{0, 1, 1, 0});
    auto up = resize_bilinear(checker, 7, 7);
    for (std::size_t i = 0; i < 7; ++i)
      for (std::size_t j = 0; j < 7; ++j)
        CHECK(std::abs(up[i * 7 + j] - bilinear_oracle(checker, (i + 0.5) * 2 / 7.0 - 0.5, (j + 0.5) * 2 / 7.0 - 0.5)) <
              1e-5);

    Tensor frames(Shape{30, 112, 112}, 255.0f);
    auto prepared = prepare_frames(frames);
    CHECK(prepared.shape() == Shape{30, 112, 112});
    for (auto v : prepared.data()) CHECK(v == 1.0f);
  }

  TEST_CASE("augmentation") {
    Rng rng(2);
    auto clip = testing::random_tensor<float>(Shape{3, 112, 112}, rng, 0, 1);
    CHECK(augment(clip, AugmentParams{}) == clip);
    auto shifted = augment(clip, AugmentParams{5, 0, 0});
    for (std::size_t f = 0; f < 3; ++f)
      for (std::size_t r = 0; r < 112; ++r)
        for (std::size_t c = 0; c < 112; ++c)
          CHECK(shifted[(f * 112 + r) * 112 + c] == (r < 5 ? 0.0f : clip[(f * 112 + r - 5) * 112 + c]));
    Rng a(8), b(8);
    auto pa = sample_augment(a), pb = sample_augment(b);
    CHECK(augment(clip, pa) == augment(clip, pb));
    for (int i = 0; i < 100; ++i) {
      auto p = sample_augment(a);
      CHECK(std::abs(p.shift_row) <= 8.0);
      CHECK(std::abs(p.shift_col) <= 8.0);
      CHECK(std::abs(p.rotation_deg) <= 10.0);
    }
  }

  TEST_CASE("full preprocessing") {
    const auto params = PhantomParams{};
    auto clip = generate_phantom_clip(params, 0, 4, "s").clip;
    ReferenceHistogram ref;
    ref.add(clip.frames, SectorGeometry::phantom().mask(112, 112));
    PreprocessOptions opt;
    auto e1 = preprocess_clip(clip, ref, opt, SampleMode::Eval, 7, 0);
    auto e2 = preprocess_clip(clip, ref, opt, SampleMode::Eval, 8, 3);
    CHECK(e1 == e2);
    auto t1 = preprocess_clip(clip, ref, opt, SampleMode::Train, 7, 1);
    auto t2 = preprocess_clip(clip, ref, opt, SampleMode::Train, 7, 1);
    auto t3 = preprocess_clip(clip, ref, opt, SampleMode::Train, 7, 2);
    CHECK(t1 == t2);
    CHECK(t1 != t3);
    for (const auto* t : {&e1, &t1}) {
      CHECK(t->shape() == Shape{30, 112, 112});
      for (auto v : t->data()) CHECK((v >= 0.0f && v <= 1.0f));
    }
  }

  TEST_CASE("manifest") {
    const auto dir = testing::scratch_dir("manifest");
    std::vector<ManifestRecord> recs{{"a/c0_000.ect", 0, 0, 30}, {"c2_001.ect", 2, 3, 28}};
    write_manifest(dir / "m.tsv", recs);
    auto back = read_manifest(dir / "m.tsv");
    REQUIRE(back.size() == 2);
    CHECK(back[0].path == (dir / "a/c0_000.ect").string());
    CHECK(back[1].label == 2);
    CHECK(back[1].cycle_start == 3);
    CHECK(back[1].cycle_len == 28);
    CHECK(back[1].sample_id() == "c2_001");
    {
      std::ofstream bad(dir / "bad.tsv");
      bad << "# header\nx.ect\tnotanumber\t0\t30\n";
    }
    CHECK_THROWS_AS(read_manifest(dir / "bad.tsv"), IoError);
    CHECK_THROWS_AS(read_manifest(dir / "missing.tsv"), IoError);
  }
}
