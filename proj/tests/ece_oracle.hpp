#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "rangecal/matrix.hpp"

namespace rangecal::testutil {

// ECE recomputed bin by bin with a full scan per bin, summing
// |sum acc - sum conf| / N instead of weighting per-bin means.
inline double brute_force_ece(const Matrix& probs, const std::vector<std::uint32_t>& labels,
                              std::size_t M) {
  const std::size_t N = probs.rows();
  double total = 0.0;
  for (std::size_t m = 1; m <= M; ++m) {
    double conf = 0.0, acc = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < N; ++i) {
      double best = -1.0;
      std::size_t arg = 0;
      for (std::size_t k = 0; k < probs.cols(); ++k) {
        if (probs(i, k) > best) {
          best = probs(i, k);
          arg = k;
        }
      }
      std::size_t b = std::size_t(std::ceil(best * double(M)));
      if (b < 1) b = 1;
      if (b > M) b = M;
      if (b != m) continue;
      ++count;
      conf += best;
      acc += arg == labels[i] ? 1.0 : 0.0;
    }
    if (count) total += std::abs(acc - conf) / double(N);
  }
  return total;
}

}  // namespace rangecal::testutil
