#include <doctest.h>

#include <cmath>
#include <set>

#include "echodx/train.hpp"
#include "support.hpp"

using namespace echodx;

namespace {

/// Scalar Adam written straight from the update equations.
struct ScalarAdam {
  double m = 0, v = 0;
  int t = 0;
  double step(double theta, double g, double lr = 0.001, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    return theta - lr * mh / (std::sqrt(vh) + eps);
  }
};

Sample toy_sample(int label, std::uint64_t seed) {
  Rng rng(seed);
  Sample s;
  s.label = label;
  s.clip.sample_id = "toy" + std::to_string(seed);
  s.clip.frames = Tensor(Shape{30, 112, 112});
  // vertical stripes for class 0, horizontal for class 1, period 8 px
  for (std::size_t f = 0; f < 30; ++f)
    for (std::size_t r = 0; r < 112; ++r)
      for (std::size_t c = 0; c < 112; ++c) {
        const bool bright = ((label == 0 ? c : r) / 4) % 2 == 0;
        s.clip.frames[(f * 112 + r) * 112 + c] = static_cast<float>((bright ? 180.0 : 40.0) + uniform(rng, -20, 20));
      }
  return s;
}

}  // namespace

TEST_SUITE("train") {
  TEST_CASE("split counts for known cohort sizes") {
    CHECK(split_counts(1888) == SplitCounts{1322, 189, 377});
    CHECK(split_counts(509) == SplitCounts{356, 51, 102});
    CHECK(split_counts(419) == SplitCounts{293, 42, 84});
    CHECK(split_counts(285) == SplitCounts{200, 28, 57});
    CHECK(split_counts(453) == SplitCounts{317, 45, 91});
    CHECK(split_counts(60) == SplitCounts{42, 6, 12});
    CHECK_THROWS(split_counts(2));
  }

  TEST_CASE("stratified split is a seeded partition") {
    std::vector<int> labels;
    for (int k = 0; k < 3; ++k)
      for (int i = 0; i < 60; ++i) labels.push_back(k);
    auto a = stratified_split(labels, {0.7, 0.1, 0.2}, 7);
    auto b = stratified_split(labels, {0.7, 0.1, 0.2}, 7);
    auto c = stratified_split(labels, {0.7, 0.1, 0.2}, 8);
    CHECK(a == b);
    CHECK(a != c);
    REQUIRE(a.size() == labels.size());
    for (int k = 0; k < 3; ++k) {
      std::array<int, 3> n{};
      for (std::size_t i = 0; i < a.size(); ++i)
        if (labels[i] == k) ++n[static_cast<int>(a[i])];
      CHECK(n == std::array<int, 3>{42, 6, 12});
    }
    std::vector<int> tiny{0, 0, 1, 1, 1};
    CHECK_THROWS(stratified_split(tiny, {0.7, 0.1, 0.2}, 1));
  }

  TEST_CASE("adam") {
    Parameter<double> p("p", TensorD(Shape{3}, {1.0, -2.0, 0.5}));
    Adam<double> opt;
    opt.step({&p});
    CHECK(p.value.storage() == std::vector<double>{1.0, -2.0, 0.5});

    Parameter<double> s("s", TensorD(Shape{1}, 1.0));
    s.grad[0] = 0.5;
    Adam<double> one;
    one.step({&s});
    CHECK(s.value[0] == doctest::Approx(1.0 - 0.001 * 0.5 / (0.5 + 1e-8)).epsilon(1e-12));
    CHECK(one.steps() == 1);

    // two steps on f = 0.5 * 3 * theta^2
    Parameter<double> q("q", TensorD(Shape{1}, 2.0));
    Adam<double> two;
    ScalarAdam ref;
    double theta = 2.0;
    for (int i = 0; i < 2; ++i) {
      q.grad[0] = 3.0 * q.value[0];
      two.step({&q});
      theta = ref.step(theta, 3.0 * theta);
      CHECK(std::abs(q.value[0] - theta) < 1e-10);
    }
    Parameter<double> extra("e", TensorD(Shape{2}, 0.0));
    CHECK_THROWS(two.step({&q, &extra}));
    Parameter<double> reshaped("r", TensorD(Shape{4}, 0.0));
    CHECK_THROWS(two.step({&reshaped}));
  }

  TEST_CASE("early stopping arithmetic") {
    auto snap = [](double v) { return [v] { return NamedTensors{{"w", Tensor(Shape{1}, static_cast<float>(v))}}; }; };

    EarlyStopping dec;
    for (std::size_t e = 1; e <= 200; ++e) CHECK_FALSE(dec.observe(10.0 - 0.01 * e, e, snap(e)));

    EarlyStopping flat;
    std::size_t stopped = 0;
    for (std::size_t e = 1; e <= 200 && !stopped; ++e) {
      if (flat.observe(1.0, e, snap(e))) stopped = e;
      if (!stopped) CHECK(flat.since_improvement() <= 50);
    }
    CHECK(stopped == 51);
    CHECK(flat.best_epoch() == 1);

    EarlyStopping plateau;
    stopped = 0;
    for (std::size_t e = 1; e <= 200 && !stopped; ++e) {
      const double v = e <= 10 ? 2.0 - 0.1 * e : 1.0 + 5e-7;
      if (plateau.observe(v, e, snap(static_cast<double>(e)))) stopped = e;
    }
    CHECK(stopped == 60);
    CHECK(plateau.best_epoch() == 10);
    CHECK(plateau.best_state().at("w")[0] == 10.0f);
  }

  TEST_CASE("steps per epoch") {
    CHECK(steps_per_epoch(100, 16) == 7);
    CHECK(steps_per_epoch(126, 16) == 8);
    CHECK(steps_per_epoch(16, 16) == 1);
  }

  TEST_CASE("toy training halves the loss and is reproducible") {
    std::vector<Sample> train;
    for (std::uint64_t i = 0; i < 16; ++i) train.push_back(toy_sample(static_cast<int>(i % 2), 100 + i));
    TrainOptions opt;
    opt.batch = 8;
    opt.seed = 3;
    opt.augment = false;
    auto ref = build_reference(train, opt.preprocess);
    auto cfg = NetworkConfig::desk();
    cfg.num_classes = 2;
    auto run = [&](std::size_t epochs) {
      auto net = Network::build(cfg, 5);
      Adam<float> adam(opt.lr);
      std::vector<double> losses;
      for (std::size_t e = 0; e < epochs; ++e) losses.push_back(train_epoch(net, adam, train, ref, opt, e));
      return std::make_pair(losses, net.state());
    };
    auto [losses, state] = run(20);
    MESSAGE("toy loss epoch 1 " << losses.front() << " epoch 20 " << losses.back());
    CHECK(losses.back() <= 0.5 * losses.front());
    auto [again, state2] = run(2);
    CHECK(again[0] == losses[0]);
    CHECK(again[1] == losses[1]);
  }
}
