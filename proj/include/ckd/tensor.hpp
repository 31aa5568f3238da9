#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "ckd/common.hpp"

namespace ckd {

using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic>;  // column-major
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;

/// Dense float tensor, row-major, rank <= 4. Images are NCHW, logits (N, K).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);
  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(v_.size()); }
  bool empty() const { return v_.empty(); }

  float* data() { return v_.data(); }
  const float* data() const { return v_.data(); }
  std::vector<float>& vec() { return v_; }
  const std::vector<float>& vec() const { return v_; }

  float& operator[](std::int64_t i) { return v_[static_cast<std::size_t>(i)]; }
  float operator[](std::int64_t i) const { return v_[static_cast<std::size_t>(i)]; }

  /// NCHW accessor.
  float& at(int n, int c, int h, int w) {
    return v_[static_cast<std::size_t>(((static_cast<std::int64_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  float at(int n, int c, int h, int w) const {
    return v_[static_cast<std::size_t>(((static_cast<std::int64_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }

  void fill(float x) { std::fill(v_.begin(), v_.end(), x); }
  void reshape(std::vector<int> shape);

  /// Views the flat buffer as a (rows x cols) column-major Eigen matrix.
  MatMap as_matrix(std::int64_t rows, std::int64_t cols) {
    check_view(rows, cols);
    return MatMap(v_.data(), rows, cols);
  }
  ConstMatMap as_matrix(std::int64_t rows, std::int64_t cols) const {
    check_view(rows, cols);
    return ConstMatMap(v_.data(), rows, cols);
  }

  bool all_finite() const;
  std::string shape_str() const;

 private:
  void check_view(std::int64_t rows, std::int64_t cols) const;

  std::vector<int> shape_;
  std::vector<float> v_;
};

std::string shape_to_string(const std::vector<int>& shape);

}  // namespace ckd
