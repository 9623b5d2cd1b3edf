#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "rangecal/calibration.hpp"
#include "rangecal/matrix.hpp"
#include "rangecal/zeroshot.hpp"

namespace rangecal {

// Episodic test-time adaptation in feature space. For each test sample a
// K x d residual on the prototypes, t'_k = normalize(t_k + r_k), is fitted
// from zero by minimizing the mean prediction entropy over the most
// confident augmented views, then discarded after predicting that sample.

enum class TtaCalib { None, ZsNorm, Penalty, Sals };

std::string to_string(TtaCalib mode);
TtaCalib parse_tta_calib(const std::string& name);

/// V x d augmented views of one test sample; row 0 is the original image.
struct ViewBatch {
  Matrix views;
};

struct TtaConfig {
  double learning_rate = 0.005;
  int steps = 1;
  double select_fraction = 0.1;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  TtaCalib calib_mode = TtaCalib::None;
  double lambda = 10.0;
  std::uint64_t seed = 0;
};

void validate(const TtaConfig& config);

/// Indices of the ceil(fraction * V) lowest-entropy rows (at least one),
/// ordered by entropy with ties broken by lower index.
std::vector<std::size_t> select_confident_views(const Matrix& probs, double fraction);

/// Prototype rows after adding a residual and renormalizing.
Matrix adapted_prototypes(const PrototypeSet& protos, const Matrix& residual);

struct TtaObjective {
  double value = 0.0;        // mean entropy (+ lambda * mean penalty)
  double violation = 0.0;    // mean over views of penalty_term / K
  Matrix grad;               // d value / d residual
};

/// Objective over the `selected` views for a given residual. `view_ranges`
/// holds one zero-shot RangePair per row of `batch.views`.
TtaObjective tta_objective(const ViewBatch& batch, const PrototypeSet& protos,
                           const std::vector<RangePair>& view_ranges, const Matrix& residual,
                           const std::vector<std::size_t>& selected, TtaCalib mode,
                           double lambda);

/// Runs `config.steps` AdamW updates from a zero residual and returns it.
/// A non-finite objective raises Error(Adaptation).
Matrix tta_adapt(const ViewBatch& batch, const PrototypeSet& protos,
                 const std::vector<RangePair>& view_ranges, const TtaConfig& config);

struct TtaPrediction {
  std::vector<double> probs;
  std::vector<double> logits;  // after SaLS when it applies
};

/// Predicts the original view (row 0) under the adapted prototypes. With
/// Sals or ZsNorm the logits are rescaled onto `original_range` first.
TtaPrediction tta_predict(const ViewBatch& batch, const PrototypeSet& protos,
                          const Matrix& residual, TtaCalib mode, const RangePair& original_range);

}  // namespace rangecal
