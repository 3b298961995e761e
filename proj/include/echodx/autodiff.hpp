#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "echodx/tensor.hpp"

namespace echodx {

/// Trainable tensor with a gradient accumulator of the same shape.
template <typename T>
struct Parameter {
  std::string name;
  BasicTensor<T> value;
  BasicTensor<T> grad;

  Parameter() = default;
  Parameter(std::string name_, BasicTensor<T> value_)
      : name(std::move(name_)), value(std::move(value_)), grad(value.shape()) {}

  void zero_grad() { grad = BasicTensor<T>(value.shape()); }
};

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
  bool valid() const { return id != std::numeric_limits<std::size_t>::max(); }
};

/// Ordered record of executed operations. Values live on the tape; every
/// node's inputs were recorded before it, so a single reverse pass over the
/// node list is a valid topological sweep.
template <typename T>
class Tape {
 public:
  /// Called during the sweep with the node's accumulated output gradient.
  using Backward = std::function<void(Tape&, const BasicTensor<T>& grad_out)>;

  Var constant(BasicTensor<T> value);
  /// Leaf whose gradient is kept after the sweep (e.g. an input clip).
  Var input(BasicTensor<T> value);
  /// Leaf bound to a Parameter; the sweep adds into parameter.grad.
  Var parameter(Parameter<T>& parameter);

  Var record(BasicTensor<T> value, std::vector<Var> inputs, Backward backward);

  const BasicTensor<T>& value(Var v) const;
  const BasicTensor<T>& grad(Var v) const;
  bool requires_grad(Var v) const;

  /// Gradient buffer of v, zero-allocated on first use.
  BasicTensor<T>& grad_buffer(Var v);
  void accumulate(Var v, const BasicTensor<T>& g);

  /// Reverse sweep seeded with ones (scalar losses).
  void backward(Var output);
  void backward(Var output, const BasicTensor<T>& seed);

  std::size_t size() const { return nodes_.size(); }
  bool swept() const { return swept_; }

 private:
  struct Node {
    BasicTensor<T> value;
    BasicTensor<T> grad;
    Parameter<T>* parameter = nullptr;
    Backward backward;
    bool requires_grad = false;
    bool keep_grad = false;
  };

  const Node& node(Var v) const;
  Node& node(Var v);

  std::vector<Node> nodes_;
  bool swept_ = false;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace echodx
