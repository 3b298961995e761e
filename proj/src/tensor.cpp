#include "echodx/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace echodx {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty() || shape.size() > 5)
    throw ShapeError("tensor rank must be 1..5, got " + std::to_string(shape.size()));
  if (std::find(shape.begin(), shape.end(), 0u) != shape.end())
    throw ShapeError("tensor extents must be >= 1: " + shape_string(shape));
}

}  // namespace

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, T fill) : shape_(std::move(shape)) {
  validate_shape(shape_);
  data_.assign(shape_size(shape_), fill);
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  validate_shape(shape_);
  if (data_.size() != shape_size(shape_))
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_string(shape_));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape shape) const {
  return BasicTensor(std::move(shape), data_);
}

template <typename T>
void BasicTensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

void require_shape(const Shape& actual, const Shape& expected, const char* what) {
  if (actual != expected)
    throw ShapeError(std::string(what) + ": expected " + shape_string(expected) + ", got " +
                     shape_string(actual));
}

template class BasicTensor<float>;
template class BasicTensor<double>;

}  // namespace echodx
