#include "nestnet/tensor.hpp"

#include <cmath>
#include <sstream>

namespace nestnet {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return shape.empty() ? 0 : n;
}

Tensor::Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
  for (std::size_t d : shape_) {
    if (d == 0) fail(ErrorKind::shape, "zero-sized tensor dimension");
  }
  data_.assign(shape_numel(shape_), 0.0);
}

Tensor Tensor::from_data(std::vector<std::size_t> shape,
                         std::vector<double> data) {
  Tensor t;
  t.shape_ = std::move(shape);
  if (data.size() != shape_numel(t.shape_)) {
    fail(ErrorKind::shape, "data length " + std::to_string(data.size()) +
                               " does not match shape " + t.shape_str());
  }
  t.data_ = std::move(data);
  if (!t.all_finite()) fail(ErrorKind::overflow, "non-finite value in tensor");
  return t;
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
  return Tensor(std::move(shape));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
  Tensor t(std::move(shape));
  for (double& v : t.data_) v = value;
  return t;
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << "x";
    os << shape_[i];
  }
  os << "]";
  return os.str();
}

}  // namespace nestnet
