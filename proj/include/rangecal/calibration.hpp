#pragma once

#include <span>
#include <vector>

#include "rangecal/matrix.hpp"

namespace rangecal {

/// Target logit interval [lo, hi] for one sample, normally the min and max
/// of its zero-shot logits.
struct RangePair {
  double lo = 0.0;
  double hi = 0.0;

  double width() const noexcept { return hi - lo; }
  bool operator==(const RangePair&) const = default;
};

// Range-control transforms. Each one operates on a single logit vector;
// the *_rows helpers apply them across an N x K matrix with one RangePair
// per row.

/// Affine min-max rescaling of `logits` onto [r.lo, r.hi].
///
/// The output's minimum is exactly r.lo and its maximum exactly r.hi. A
/// constant input carries no ordering information and maps to the
/// constant vector at the interval midpoint. Throws Error(InvalidRange)
/// when r.hi < r.lo.
std::vector<double> zs_norm_transform(std::span<const double> logits, const RangePair& r);

/// Vector-Jacobian product of zs_norm_transform: given dL/dl' returns
/// dL/dl. The min and max of `logits` are treated as functions of the
/// selected elements (lowest index on ties).
std::vector<double> zs_norm_backward(std::span<const double> logits, const RangePair& r,
                                     std::span<const double> grad_out);

struct PenaltyResult {
  double value = 0.0;
  std::vector<double> subgradient;
};

/// Sum over k of relu(l_k - hi) + relu(lo - l_k) and its subgradient
/// (+1 above, -1 below, 0 inside and on the boundary).
PenaltyResult penalty_term(std::span<const double> logits, const RangePair& r);

/// Sample-adaptive logit scaling: zs_norm_transform applied after training.
/// Preserves the argmax of any non-constant input when hi > lo.
std::vector<double> sals(std::span<const double> logits, const RangePair& r);

/// Shrinks (or keeps) the interval width by `factor`, holding the midpoint.
RangePair scaled_range(const RangePair& r, double factor);

Matrix zs_norm_rows(const Matrix& logits, std::span<const RangePair> ranges);
Matrix sals_rows(const Matrix& logits, std::span<const RangePair> ranges);

}  // namespace rangecal
