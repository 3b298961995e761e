#include "echodx/autodiff.hpp"

namespace echodx {

template <typename T>
auto Tape<T>::node(Var v) const -> const Node& {
  if (!v.valid() || v.id >= nodes_.size()) throw Error("variable is not recorded on this tape");
  return nodes_[v.id];
}

template <typename T>
auto Tape<T>::node(Var v) -> Node& {
  if (!v.valid() || v.id >= nodes_.size()) throw Error("variable is not recorded on this tape");
  return nodes_[v.id];
}

template <typename T>
Var Tape<T>::constant(BasicTensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, {}, false, false});
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::input(BasicTensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, {}, true, true});
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::parameter(Parameter<T>& parameter) {
  nodes_.push_back(Node{parameter.value, {}, &parameter, {}, true, true});
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::record(BasicTensor<T> value, std::vector<Var> inputs, Backward backward) {
  bool needs = false;
  for (auto in : inputs) needs = needs || node(in).requires_grad;
  Node n{std::move(value), {}, nullptr, {}, needs, false};
  if (needs) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
const BasicTensor<T>& Tape<T>::value(Var v) const {
  return node(v).value;
}

template <typename T>
const BasicTensor<T>& Tape<T>::grad(Var v) const {
  return node(v).grad;
}

template <typename T>
bool Tape<T>::requires_grad(Var v) const {
  return node(v).requires_grad;
}

template <typename T>
BasicTensor<T>& Tape<T>::grad_buffer(Var v) {
  auto& n = node(v);
  if (n.grad.empty()) n.grad = BasicTensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
void Tape<T>::accumulate(Var v, const BasicTensor<T>& g) {
  auto& n = node(v);
  if (!n.requires_grad) return;
  require_shape(g.shape(), n.value.shape(), "gradient accumulation");
  if (n.grad.empty()) {
    n.grad = g;
    return;
  }
  auto dst = n.grad.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
void Tape<T>::backward(Var output) {
  const auto& out = node(output).value;
  backward(output, BasicTensor<T>(out.shape(), T{1}));
}

template <typename T>
void Tape<T>::backward(Var output, const BasicTensor<T>& seed) {
  if (nodes_.empty()) throw Error("backward sweep without a recorded forward pass");
  if (swept_) throw Error("tape already swept; record a new forward pass");
  auto& out = node(output);
  require_shape(seed.shape(), out.value.shape(), "backward seed");
  swept_ = true;
  if (!out.requires_grad) return;
  accumulate(output, seed);
  for (std::size_t id = output.id + 1; id-- > 0;) {
    auto& n = nodes_[id];
    if (n.grad.empty()) continue;
    if (n.backward) {
      n.backward(*this, n.grad);
      // intermediate gradients are not needed once propagated
      if (!n.keep_grad) n.grad = BasicTensor<T>();
    }
    if (n.parameter) {
      auto& pg = n.parameter->grad;
      if (pg.empty()) pg = BasicTensor<T>(n.value.shape());
      auto dst = pg.data();
      auto src = n.grad.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace echodx
