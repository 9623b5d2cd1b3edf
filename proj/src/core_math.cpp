#include "rangecal/core_math.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "rangecal/error.hpp"

namespace rangecal {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidInput: return "invalid input";
    case ErrorKind::Format: return "format error";
    case ErrorKind::Corruption: return "corruption";
    case ErrorKind::InvalidHeader: return "invalid header";
    case ErrorKind::Io: return "io error";
    case ErrorKind::Validation: return "validation error";
    case ErrorKind::Degeneracy: return "degeneracy";
    case ErrorKind::InvalidRange: return "invalid range";
    case ErrorKind::Configuration: return "configuration error";
    case ErrorKind::Training: return "training error";
    case ErrorKind::Adaptation: return "adaptation error";
  }
  return "error";
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw Error(ErrorKind::InvalidInput, "matrix payload does not match its shape");
  }
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double normalize_in_place(std::span<double> v) {
  const double n = std::sqrt(dot(v, v));
  if (n > 0.0) {
    for (double& x : v) x /= n;
  }
  return n;
}

Matrix from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return {};
  Matrix m(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != m.cols()) {
      throw Error(ErrorKind::InvalidInput, "ragged rows");
    }
    std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
  }
  return m;
}

void require_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw Error(ErrorKind::InvalidInput, std::string(what) + " contains a non-finite value");
    }
  }
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw Error(ErrorKind::InvalidInput, "softmax of empty vector");
  require_finite(logits, "logit vector");
  const double peak = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    out[k] = std::exp(logits[k] - peak);
    sum += out[k];
  }
  for (double& p : out) p /= sum;
  return out;
}

double logit_range(std::span<const double> logits) {
  if (logits.empty()) throw Error(ErrorKind::InvalidInput, "range of empty vector");
  const auto [lo, hi] = std::minmax_element(logits.begin(), logits.end());
  return *hi - *lo;
}

double logit_norm(std::span<const double> logits) { return std::sqrt(dot(logits, logits)); }

std::size_t argmax_index(std::span<const double> values) {
  // max_element returns the first of equal maxima.
  return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

std::size_t argmin_index(std::span<const double> values) {
  return static_cast<std::size_t>(std::min_element(values.begin(), values.end()) - values.begin());
}

double entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto p = softmax(logits.row(i));
    std::copy(p.begin(), p.end(), out.row(i).begin());
  }
  return out;
}

}  // namespace rangecal
