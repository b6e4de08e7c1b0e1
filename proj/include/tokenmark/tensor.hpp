// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace tokenmark {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major fp32 tensor. When requires_grad is set, a gradient buffer of
// identical shape is kept alongside the data.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor matrix(std::initializer_list<std::initializer_list<float>> rows);
  static Tensor vector(std::initializer_list<float> values);
  static Tensor scalar(float value);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Matrix view helpers; a rank-1 tensor is treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  std::vector<float>& storage() noexcept { return data_; }
  const std::vector<float>& storage() const noexcept { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }
  float& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  float at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  bool requires_grad() const noexcept { return requires_grad_; }
  void set_requires_grad(bool on);
  bool has_grad() const noexcept { return requires_grad_ && grad_.size() == data_.size(); }
  std::span<float> grad() noexcept { return grad_; }
  std::span<const float> grad() const noexcept { return grad_; }
  void zero_grad();

  // Copy of the values only; the result never requires grad.
  Tensor detached() const { return Tensor(shape_, data_); }

  bool same_values(const Tensor& other) const noexcept {
    return shape_ == other.shape_ && data_ == other.data_;
  }

 private:
  Shape shape_;
  std::vector<float> data_;
  std::vector<float> grad_;
  bool requires_grad_ = false;
};

void require_shape(const Tensor& t, const Shape& expected, const char* what);

float max_abs_diff(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& t);
Tensor matmul(const Tensor& a, const Tensor& b);

}  // namespace tokenmark
