#pragma once

#include <vector>

#include "rangecal/calibration.hpp"
#include "rangecal/matrix.hpp"

namespace rangecal {

inline constexpr double kDefaultTemperature = 0.01;

/// Class text prototypes (K x d, one row per class in file order) and the
/// softmax temperature they are scored with.
struct PrototypeSet {
  Matrix prototypes;
  double temperature = kDefaultTemperature;

  std::size_t class_count() const noexcept { return prototypes.rows(); }
  std::size_t dim() const noexcept { return prototypes.cols(); }
};

/// Per-sample zero-shot logit bounds, one RangePair per row.
using ZsRangeTable = std::vector<RangePair>;

/// Averages each class's prompt embeddings into one prototype row.
///
/// `prompt_embeddings[k]` holds the prompt-ensemble embeddings of class k
/// as rows. With `renormalize` the mean is scaled back to unit norm;
/// without it the raw mean is kept. A zero mean raises Error(Degeneracy),
/// inconsistent dimensions raise Error(Validation).
PrototypeSet build_prototypes(const std::vector<Matrix>& prompt_embeddings,
                              double temperature = kDefaultTemperature,
                              bool renormalize = true);

/// Wraps an already-averaged K x d prototype matrix (rows renormalized).
PrototypeSet make_prototype_set(Matrix prototypes, double temperature = kDefaultTemperature,
                                bool renormalize = true);

/// l_ik = (z_i . t_k) / tau.
Matrix zs_logits(const Matrix& features, const PrototypeSet& protos);

/// Row-wise (min, max) of a logit matrix.
ZsRangeTable zs_range_table(const Matrix& logits);

}  // namespace rangecal
