#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <iterator>
#include <span>
#include <vector>

namespace valsteer {

/// Dense row-major matrix. Rows are exposed as spans.
template <typename T>
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
  [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<T>& data() noexcept { return data_; }
  const std::vector<T>& data() const noexcept { return data_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;

/// Any contiguous sequence of arithmetic values (vector, span, array).
template <typename R>
concept NumericRange = requires(const R& r) {
  { std::data(r) };
  { std::size(r) } -> std::convertible_to<std::size_t>;
};

/// Dot product with 64-bit accumulation.
template <NumericRange A, NumericRange B>
double dot(const A& a, const B& b) {
  const auto* pa = std::data(a);
  const auto* pb = std::data(b);
  double acc = 0.0;
  for (std::size_t i = 0, n = std::size(a); i < n; ++i) acc += static_cast<double>(pa[i]) * static_cast<double>(pb[i]);
  return acc;
}

template <NumericRange A>
double norm(const A& a) {
  return std::sqrt(dot(a, a));
}

/// Cosine similarity; 0 when either side has zero norm.
template <NumericRange A, NumericRange B>
double cosine(const A& a, const B& b) {
  const double na = norm(a);
  const double nb = norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

}  // namespace valsteer
