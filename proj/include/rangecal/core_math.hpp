#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "rangecal/matrix.hpp"

namespace rangecal {

// Dense-vector primitives over logit and probability vectors. All
// functions are pure and operate in double precision.

/// Softmax with max-subtraction. Throws Error(InvalidInput) on non-finite
/// input or an empty vector.
std::vector<double> softmax(std::span<const double> logits);

/// max(l) - min(l).
double logit_range(std::span<const double> logits);

/// Euclidean norm.
double logit_norm(std::span<const double> logits);

/// Index of the largest element, lowest index on ties.
std::size_t argmax_index(std::span<const double> values);

/// Index of the smallest element, lowest index on ties.
std::size_t argmin_index(std::span<const double> values);

/// Shannon entropy in nats with 0 ln 0 := 0.
double entropy(std::span<const double> probs);

/// Row-wise softmax of an N x K logit matrix.
Matrix softmax_rows(const Matrix& logits);

/// Throws Error(InvalidInput) when any element is NaN or infinite.
void require_finite(std::span<const double> values, const char* what);

}  // namespace rangecal
