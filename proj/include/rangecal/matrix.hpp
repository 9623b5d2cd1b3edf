#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace rangecal {

/// Dense row-major matrix of doubles.
///
/// Used for embeddings (N x d), prototypes (K x d), logits (N x K) and
/// adapter weights alike; the meaning of the axes is carried by the caller.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

double dot(std::span<const double> a, std::span<const double> b);

// Scales v in place to unit Euclidean norm and returns the original norm.
// A zero vector is left untouched.
double normalize_in_place(std::span<double> v);

// Builds a matrix from a list of equal-length rows.
Matrix from_rows(const std::vector<std::vector<double>>& rows);

}  // namespace rangecal
