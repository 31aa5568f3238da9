#include "ckd/tensor.hpp"

#include <fmt/format.h>

#include <cmath>
#include <numeric>

namespace ckd {

namespace {
std::int64_t shape_size(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError(fmt::format("non-positive tensor dimension in {}", shape_to_string(shape)));
    n *= d;
  }
  return n;
}
}  // namespace

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  if (shape_.empty() || shape_.size() > 4) {
    throw ShapeError(fmt::format("tensor rank must be 1..4, got {}", shape_.size()));
  }
  v_.assign(static_cast<std::size_t>(shape_size(shape_)), 0.0f);
}

void Tensor::reshape(std::vector<int> shape) {
  if (shape_size(shape) != size()) {
    throw ShapeError(fmt::format("reshape {} -> {} changes element count", shape_str(), shape_to_string(shape)));
  }
  shape_ = std::move(shape);
}

void Tensor::check_view(std::int64_t rows, std::int64_t cols) const {
  if (rows * cols != size()) {
    throw ShapeError(fmt::format("matrix view {}x{} does not cover tensor {}", rows, cols, shape_str()));
  }
}

bool Tensor::all_finite() const {
  for (float x : v_) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

std::string shape_to_string(const std::vector<int>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

}  // namespace ckd
