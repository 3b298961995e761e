#include "echodx/network.hpp"

#include <cmath>
#include <string>

#include "echodx/random.hpp"

namespace echodx {

template <typename T>
Var activate(Tape<T>& tape, Var x, Activation act) {
  switch (act) {
    case Activation::Relu:
      return relu(tape, x);
    case Activation::Rescale:
      return rescale_relu(tape, x);
    case Activation::Identity:
      return x;
  }
  return x;
}

std::size_t factorized_midplanes(std::size_t t, std::size_t d, std::size_t in_channels,
                                 std::size_t out_channels) {
  const double num = static_cast<double>(t * d * d * in_channels * out_channels);
  const double den = static_cast<double>(d * d * in_channels + t * out_channels);
  return static_cast<std::size_t>(std::llround(num / den));
}

NetworkConfig NetworkConfig::desk() {
  NetworkConfig c;
  c.stage_channels = {8, 8, 8, 8};
  c.blocks_per_stage = {1, 1, 1, 1};
  c.stem_midplane = 16;
  return c;
}

void NetworkConfig::validate() const {
  if (stage_channels.empty()) throw ConfigError("network needs at least one stage");
  if (stage_channels.size() != blocks_per_stage.size())
    throw ConfigError("stage_channels and blocks_per_stage differ in length");
  for (auto c : stage_channels)
    if (c == 0) throw ConfigError("stage channel counts must be >= 1");
  for (auto b : blocks_per_stage)
    if (b == 0) throw ConfigError("every stage needs at least one block");
  if (stem_midplane == 0) throw ConfigError("stem midplane must be >= 1");
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  for (auto e : input_shape)
    if (e == 0) throw ConfigError("input extents must be >= 1");
}

template <typename T>
Var conv2plus1d(Tape<T>& tape, Var x, Conv2Plus1d<T>& block, Mode mode, Activation act) {
  const auto& xs = tape.value(x).shape();
  const auto& ws = block.spatial.weight.value.shape();
  if (xs.size() != 5 || xs[1] != ws[1])
    throw ShapeError("(2+1)D block expects " + std::to_string(ws[1]) + " input channels, got input " +
                     shape_string(xs));
  auto y = block.spatial.forward(tape, x);
  if (block.norm) y = block.norm->forward(tape, y, mode);
  y = activate(tape, y, act);
  return block.temporal.forward(tape, y);
}

std::vector<Shape> stage_shapes(const NetworkConfig& config, std::size_t n) {
  config.validate();
  std::vector<Shape> shapes;
  auto s = config.batch_shape(n);
  s = ConvGeometry::spatial(7, 2).output_shape(s, config.stem_midplane);
  s = ConvGeometry::temporal(3).output_shape(s, config.stage_channels[0]);
  shapes.push_back(s);
  for (std::size_t st = 0; st < config.stage_channels.size(); ++st) {
    const std::size_t stride = st == 0 ? 1 : 2;
    const auto c = config.stage_channels[st];
    for (std::size_t b = 0; b < config.blocks_per_stage[st]; ++b) {
      const std::size_t bs = b == 0 ? stride : 1;
      s = ConvGeometry::spatial(3, bs).output_shape(s, c);
      s = ConvGeometry::temporal(3, bs).output_shape(s, c);
    }
    shapes.push_back(s);
  }
  return shapes;
}

namespace {

template <typename T>
Parameter<T> he_normal(std::string name, Shape shape, std::size_t fan_in, Rng& rng) {
  BasicTensor<T> v(std::move(shape));
  const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& x : v.data()) x = static_cast<T>(std_dev * normal01(rng));
  return Parameter<T>(std::move(name), std::move(v));
}

template <typename T>
ConvLayer<T> make_conv(const std::string& name, std::size_t cin, std::size_t cout, const ConvGeometry& g, Rng& rng) {
  Shape shape{cout, cin, g.kernel[0], g.kernel[1], g.kernel[2]};
  return ConvLayer<T>{he_normal<T>(name + ".weight", shape, cin * g.taps(), rng), g};
}

template <typename T>
BatchNorm<T> make_bn(const std::string& name, std::size_t c) {
  return BatchNorm<T>{Parameter<T>(name + ".gamma", BasicTensor<T>(Shape{c}, T{1})),
                      Parameter<T>(name + ".beta", BasicTensor<T>(Shape{c}, T{0})), BatchNormStats<T>(c)};
}

template <typename T>
Conv2Plus1d<T> make_factorized(const std::string& name, std::size_t cin, std::size_t cout, std::size_t mid,
                               std::size_t stride, Rng& rng) {
  Conv2Plus1d<T> block;
  block.spatial = make_conv<T>(name + ".spatial", cin, mid, ConvGeometry::spatial(3, stride), rng);
  block.norm = make_bn<T>(name + ".mid_bn", mid);
  block.temporal = make_conv<T>(name + ".temporal", mid, cout, ConvGeometry::temporal(3, stride), rng);
  return block;
}

}  // namespace

template <typename T>
BasicNetwork<T> BasicNetwork<T>::build(const NetworkConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(splitmix64(seed));
  BasicNetwork net;
  net.config_ = config;

  const auto c0 = config.stage_channels.front();
  net.stem_.spatial = make_conv<T>("stem.spatial", 1, config.stem_midplane, ConvGeometry::spatial(7, 2), rng);
  net.stem_.norm = make_bn<T>("stem.mid_bn", config.stem_midplane);
  net.stem_.temporal = make_conv<T>("stem.temporal", config.stem_midplane, c0, ConvGeometry::temporal(3), rng);
  net.stem_bn_ = make_bn<T>("stem.bn", c0);

  std::size_t in = c0;
  for (std::size_t st = 0; st < config.stage_channels.size(); ++st) {
    const auto out = config.stage_channels[st];
    const std::size_t stride = st == 0 ? 1 : 2;
    std::vector<ResidualBlock<T>> blocks;
    for (std::size_t b = 0; b < config.blocks_per_stage[st]; ++b) {
      const std::string name = "stage" + std::to_string(st + 1) + ".block" + std::to_string(b);
      const std::size_t bs = b == 0 ? stride : 1;
      const std::size_t cin = b == 0 ? in : out;
      ResidualBlock<T> blk;
      blk.conv1 = make_factorized<T>(name + ".conv1", cin, out, factorized_midplanes(3, 3, cin, out), bs, rng);
      blk.bn1 = make_bn<T>(name + ".bn1", out);
      blk.conv2 = make_factorized<T>(name + ".conv2", out, out, factorized_midplanes(3, 3, out, out), 1, rng);
      blk.bn2 = make_bn<T>(name + ".bn2", out);
      if (bs != 1 || cin != out) {
        blk.shortcut = make_conv<T>(name + ".shortcut", cin, out, ConvGeometry::pointwise(bs), rng);
        blk.shortcut_bn = make_bn<T>(name + ".shortcut_bn", out);
      }
      blocks.push_back(std::move(blk));
    }
    net.stages_.push_back(std::move(blocks));
    in = out;
  }

  const auto f = config.feature_dim();
  net.head_weight_ = he_normal<T>("head.weight", Shape{config.num_classes, f}, f, rng);
  net.head_bias_ = Parameter<T>("head.bias", BasicTensor<T>(Shape{config.num_classes}, T{0}));
  return net;
}

template <typename T>
template <typename F>
void BasicNetwork<T>::visit_mut(F&& fn) {
  auto bn = [&](BatchNorm<T>& b) {
    fn(b.gamma, nullptr);
    fn(b.beta, nullptr);
    const auto prefix = b.gamma.name.substr(0, b.gamma.name.size() - 6);
    fn(b.gamma, &b.stats.running_mean, prefix + ".running_mean");
    fn(b.gamma, &b.stats.running_var, prefix + ".running_var");
  };
  auto factorized = [&](Conv2Plus1d<T>& c) {
    fn(c.spatial.weight, nullptr);
    if (c.norm) bn(*c.norm);
    fn(c.temporal.weight, nullptr);
  };
  factorized(stem_);
  bn(stem_bn_);
  for (auto& stage : stages_)
    for (auto& blk : stage) {
      factorized(blk.conv1);
      bn(blk.bn1);
      factorized(blk.conv2);
      bn(blk.bn2);
      if (blk.shortcut) fn(blk.shortcut->weight, nullptr);
      if (blk.shortcut_bn) bn(*blk.shortcut_bn);
    }
  fn(head_weight_, nullptr);
  fn(head_bias_, nullptr);
}

template <typename T>
template <typename F>
void BasicNetwork<T>::visit(F&& fn) const {
  const_cast<BasicNetwork*>(this)->visit_mut(std::forward<F>(fn));
}

namespace {

// Overloaded visitor: (param, nullptr) for parameters, (param, buffer, name) for buffers.
template <typename P, typename B>
struct Visitor {
  P on_param;
  B on_buffer;
  template <typename Param>
  void operator()(Param& p, std::nullptr_t) {
    on_param(p);
  }
  template <typename Param, typename Buf>
  void operator()(Param&, Buf* buf, const std::string& name) {
    on_buffer(*buf, name);
  }
};

template <typename P, typename B>
Visitor<P, B> make_visitor(P p, B b) {
  return Visitor<P, B>{std::move(p), std::move(b)};
}

}  // namespace

template <typename T>
void BasicNetwork<T>::for_each_parameter(const std::function<void(Parameter<T>&)>& fn) {
  visit_mut(make_visitor([&](Parameter<T>& p) { fn(p); }, [](BasicTensor<T>&, const std::string&) {}));
}

template <typename T>
std::vector<Parameter<T>*> BasicNetwork<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for_each_parameter([&](Parameter<T>& p) { out.push_back(&p); });
  return out;
}

template <typename T>
std::size_t BasicNetwork<T>::parameter_count() {
  std::size_t n = 0;
  for_each_parameter([&](Parameter<T>& p) { n += p.value.size(); });
  return n;
}

template <typename T>
void BasicNetwork<T>::zero_grad() {
  for_each_parameter([](Parameter<T>& p) { p.zero_grad(); });
}

template <typename T>
NamedTensors BasicNetwork<T>::state() const {
  NamedTensors out;
  visit(make_visitor([&](Parameter<T>& p) { out.emplace(p.name, p.value.template cast<float>()); },
                     [&](BasicTensor<T>& b, const std::string& name) { out.emplace(name, b.template cast<float>()); }));
  return out;
}

template <typename T>
void BasicNetwork<T>::load_state(const NamedTensors& state) {
  std::size_t seen = 0;
  auto take = [&](const std::string& name, BasicTensor<T>& dst) {
    auto it = state.find(name);
    if (it == state.end()) throw ShapeError("state is missing tensor '" + name + "'");
    require_shape(it->second.shape(), dst.shape(), name.c_str());
    dst = it->second.template cast<T>();
    ++seen;
  };
  visit_mut(make_visitor(
      [&](Parameter<T>& p) {
        take(p.name, p.value);
        p.zero_grad();
      },
      [&](BasicTensor<T>& b, const std::string& name) { take(name, b); }));
  if (seen != state.size()) throw ShapeError("state contains tensors unknown to this network");
}

template <typename T>
void BasicNetwork<T>::check_input(const Shape& shape) const {
  if (shape.size() != 5 || shape[0] == 0) throw ShapeError("network input must be [N, 1, T, H, W]");
  const auto expected = config_.batch_shape(shape[0]);
  require_shape(shape, expected, "network input");
}

template <typename T>
Var BasicNetwork<T>::run_block(Tape<T>& tape, Var x, ResidualBlock<T>& blk, Mode mode, Activation act) {
  auto y = conv2plus1d(tape, x, blk.conv1, mode, act);
  y = activate(tape, blk.bn1.forward(tape, y, mode), act);
  y = conv2plus1d(tape, y, blk.conv2, mode, act);
  y = blk.bn2.forward(tape, y, mode);
  Var skip = x;
  if (blk.shortcut) skip = blk.shortcut_bn->forward(tape, blk.shortcut->forward(tape, x), mode);
  return activate(tape, add(tape, y, skip), act);
}

template <typename T>
Var BasicNetwork<T>::forward_features(Tape<T>& tape, Var input, Mode mode, Activation act) {
  check_input(tape.value(input).shape());
  if (config_.linear) act = Activation::Identity;
  auto x = conv2plus1d(tape, input, stem_, mode, act);
  x = activate(tape, stem_bn_.forward(tape, x, mode), act);
  for (auto& stage : stages_)
    for (auto& blk : stage) x = run_block(tape, x, blk, mode, act);
  return global_avg_pool(tape, x);
}

template <typename T>
Var BasicNetwork<T>::head(Tape<T>& tape, Var features) {
  return affine(tape, features, tape.parameter(head_weight_), tape.parameter(head_bias_));
}

template <typename T>
Var BasicNetwork<T>::forward_logits(Tape<T>& tape, Var input, Mode mode, Activation act) {
  return head(tape, forward_features(tape, input, mode, act));
}

template <typename T>
BasicTensor<T> BasicNetwork<T>::logits(const BasicTensor<T>& batch) {
  Tape<T> tape;
  return tape.value(forward_logits(tape, tape.constant(batch), Mode::Infer));
}

template <typename T>
BasicTensor<T> BasicNetwork<T>::features(const BasicTensor<T>& batch) {
  Tape<T> tape;
  return tape.value(forward_features(tape, tape.constant(batch), Mode::Infer));
}

template <typename T>
BasicTensor<T> BasicNetwork<T>::head_logits(const BasicTensor<T>& features) {
  Tape<T> tape;
  return tape.value(head(tape, tape.constant(features)));
}

template Var activate(Tape<float>&, Var, Activation);
template Var activate(Tape<double>&, Var, Activation);
template Var conv2plus1d(Tape<float>&, Var, Conv2Plus1d<float>&, Mode, Activation);
template Var conv2plus1d(Tape<double>&, Var, Conv2Plus1d<double>&, Mode, Activation);
template class BasicNetwork<float>;
template class BasicNetwork<double>;

}  // namespace echodx
