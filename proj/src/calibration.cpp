#include "rangecal/calibration.hpp"

#include <algorithm>
#include <string>

#include "rangecal/core_math.hpp"
#include "rangecal/error.hpp"

namespace rangecal {
namespace {

void require_valid(const RangePair& r) {
  if (!(r.hi >= r.lo)) {
    throw Error(ErrorKind::InvalidRange,
                "range hi (" + std::to_string(r.hi) + ") < lo (" + std::to_string(r.lo) + ")");
  }
}

}  // namespace

std::vector<double> zs_norm_transform(std::span<const double> logits, const RangePair& r) {
  require_valid(r);
  require_finite(logits, "logit vector");
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double lmin = logits[argmin_index(logits)];
  const double lmax = logits[argmax_index(logits)];
  if (!(lmax > lmin)) {
    std::fill(out.begin(), out.end(), 0.5 * (r.lo + r.hi));
    return out;
  }
  const double scale = r.width() / (lmax - lmin);
  for (std::size_t k = 0; k < logits.size(); ++k) {
    // Pin the extremes so the endpoints are exact, and clamp the interior
    // against rounding past them.
    if (logits[k] == lmin) {
      out[k] = r.lo;
    } else if (logits[k] == lmax) {
      out[k] = r.hi;
    } else {
      out[k] = std::clamp(scale * (logits[k] - lmin) + r.lo, r.lo, r.hi);
    }
  }
  return out;
}

std::vector<double> zs_norm_backward(std::span<const double> logits, const RangePair& r,
                                     std::span<const double> grad_out) {
  require_valid(r);
  std::vector<double> grad(logits.size(), 0.0);
  if (logits.empty()) return grad;
  const std::size_t imin = argmin_index(logits);
  const std::size_t imax = argmax_index(logits);
  const double span = logits[imax] - logits[imin];
  if (!(span > 0.0)) return grad;
  const double scale = r.width() / span;

  // l'_j = scale * (l_j - l_min) + lo, scale = w / (l_max - l_min)
  double weighted = 0.0;  // sum_j g_j (l_j - l_min)
  double total = 0.0;     // sum_j g_j
  for (std::size_t j = 0; j < logits.size(); ++j) {
    grad[j] = scale * grad_out[j];
    weighted += grad_out[j] * (logits[j] - logits[imin]);
    total += grad_out[j];
  }
  const double dscale = -scale / span * weighted;  // d/dl_max of the scale term
  grad[imax] += dscale;
  grad[imin] += -dscale - scale * total;
  return grad;
}

PenaltyResult penalty_term(std::span<const double> logits, const RangePair& r) {
  require_valid(r);
  PenaltyResult res;
  res.subgradient.assign(logits.size(), 0.0);
  for (std::size_t k = 0; k < logits.size(); ++k) {
    if (logits[k] > r.hi) {
      res.value += logits[k] - r.hi;
      res.subgradient[k] = 1.0;
    } else if (logits[k] < r.lo) {
      res.value += r.lo - logits[k];
      res.subgradient[k] = -1.0;
    }
  }
  return res;
}

std::vector<double> sals(std::span<const double> logits, const RangePair& r) {
  return zs_norm_transform(logits, r);
}

RangePair scaled_range(const RangePair& r, double factor) {
  if (!(factor > 0.0)) {
    throw Error(ErrorKind::InvalidInput, "range factor must be positive");
  }
  require_valid(r);
  if (factor == 1.0) return r;
  const double mid = 0.5 * (r.lo + r.hi);
  const double half = 0.5 * factor * r.width();
  return RangePair{mid - half, mid + half};
}

Matrix zs_norm_rows(const Matrix& logits, std::span<const RangePair> ranges) {
  if (ranges.size() != logits.rows()) {
    throw Error(ErrorKind::InvalidInput, "range table does not match logit rows");
  }
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto row = zs_norm_transform(logits.row(i), ranges[i]);
    std::copy(row.begin(), row.end(), out.row(i).begin());
  }
  return out;
}

Matrix sals_rows(const Matrix& logits, std::span<const RangePair> ranges) {
  return zs_norm_rows(logits, ranges);
}

}  // namespace rangecal
