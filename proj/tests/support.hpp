#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "echodx/network.hpp"
#include "echodx/ops.hpp"
#include "echodx/random.hpp"
#include "echodx/tensor.hpp"

namespace testing {

using namespace echodx;

template <typename T>
BasicTensor<T> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  BasicTensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(uniform(rng, lo, hi));
  return t;
}

/// Direct seven-loop convolution used as the reference for conv3d.
inline TensorD conv_oracle(const TensorD& x, const TensorD& w, const ConvGeometry& g) {
  const auto n = x.dim(0), ci = x.dim(1), t = x.dim(2), h = x.dim(3), wd = x.dim(4);
  const auto co = w.dim(0), kt = w.dim(2), kh = w.dim(3), kw = w.dim(4);
  const auto out_t = (t + 2 * g.padding[0] - kt) / g.stride[0] + 1;
  const auto out_h = (h + 2 * g.padding[1] - kh) / g.stride[1] + 1;
  const auto out_w = (wd + 2 * g.padding[2] - kw) / g.stride[2] + 1;
  TensorD y(Shape{n, co, out_t, out_h, out_w});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t a = 0; a < out_t; ++a)
        for (std::size_t p = 0; p < out_h; ++p)
          for (std::size_t q = 0; q < out_w; ++q) {
            double s = 0.0;
            for (std::size_t c = 0; c < ci; ++c)
              for (std::size_t i = 0; i < kt; ++i)
                for (std::size_t j = 0; j < kh; ++j)
                  for (std::size_t k = 0; k < kw; ++k) {
                    const long ti = static_cast<long>(a * g.stride[0] + i) - static_cast<long>(g.padding[0]);
                    const long hi = static_cast<long>(p * g.stride[1] + j) - static_cast<long>(g.padding[1]);
                    const long wi = static_cast<long>(q * g.stride[2] + k) - static_cast<long>(g.padding[2]);
                    if (ti < 0 || hi < 0 || wi < 0 || ti >= static_cast<long>(t) || hi >= static_cast<long>(h) ||
                        wi >= static_cast<long>(wd))
                      continue;
                    s += x[(((b * ci + c) * t + ti) * h + hi) * wd + wi] * w[(((o * ci + c) * kt + i) * kh + j) * kw + k];
                  }
            y[(((b * co + o) * out_t + a) * out_h + p) * out_w + q] = s;
          }
  return y;
}

inline double rel_error(double a, double b) { return std::abs(a - b) / std::max({1e-8, std::abs(a), std::abs(b)}); }

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("echodx_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

struct GradientCheck {
  int checked = 0;
  int failed = 0;
  int kinked = 0;  // draws rejected because x +/- h switches a relu
  double worst = 0.0;
};

/// Central differences on randomly drawn parameters of a double network under
/// softmax cross-entropy. Draws whose step flips any relu are rejected, since a
/// kink inside [x - h, x + h] voids the difference quotient.
inline GradientCheck gradient_check(NetworkD& net, const TensorD& x, const std::vector<int>& labels, Rng& rng,
                                    int count, double h, double tol) {
  std::vector<char> zeros;
  auto loss = [&](bool backprop) {
    Tape<double> tape;
    auto l = softmax_cross_entropy(tape, net.forward_logits(tape, tape.input(x), Mode::Train), labels);
    zeros.clear();
    for (std::size_t i = 0; i < tape.size(); ++i)
      for (double v : tape.value(Var{i}).data()) zeros.push_back(v == 0.0);
    if (backprop) tape.backward(l);
    return tape.value(l)[0];
  };
  net.zero_grad();
  loss(true);
  const auto base = zeros;
  auto params = net.parameters();
  std::size_t total = 0;
  for (auto* p : params) total += p->value.size();
  GradientCheck r;
  for (int draw = 0; r.checked < count && draw < 50 * count; ++draw) {
    auto flat = uniform_index(rng, total);
    std::size_t pi = 0;
    while (flat >= params[pi]->value.size()) flat -= params[pi++]->value.size();
    auto& v = params[pi]->value[flat];
    const double saved = v;
    v = saved + h;
    const double up = loss(false);
    bool kink = zeros != base;
    v = saved - h;
    const double down = loss(false);
    kink = kink || zeros != base;
    v = saved;
    if (kink) {
      ++r.kinked;
      continue;
    }
    const double err = rel_error(params[pi]->grad[flat], (up - down) / (2 * h));
    ++r.checked;
    r.worst = std::max(r.worst, err);
    r.failed += err >= tol;
  }
  return r;
}

}  // namespace testing
