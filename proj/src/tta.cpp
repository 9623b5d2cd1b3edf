#include "rangecal/tta.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rangecal/core_math.hpp"
#include "rangecal/error.hpp"

namespace rangecal {

std::string to_string(TtaCalib mode) {
  switch (mode) {
    case TtaCalib::None: return "none";
    case TtaCalib::ZsNorm: return "zs-norm";
    case TtaCalib::Penalty: return "penalty";
    case TtaCalib::Sals: return "sals";
  }
  return "?";
}

TtaCalib parse_tta_calib(const std::string& name) {
  if (name == "none") return TtaCalib::None;
  if (name == "zs-norm" || name == "zs_norm") return TtaCalib::ZsNorm;
  if (name == "penalty") return TtaCalib::Penalty;
  if (name == "sals") return TtaCalib::Sals;
  throw Error(ErrorKind::Configuration, "unknown TTA calibration '" + name + "'");
}

void validate(const TtaConfig& c) {
  if (!(c.learning_rate > 0.0)) throw Error(ErrorKind::Configuration, "TTA learning rate must be > 0");
  if (c.steps < 1) throw Error(ErrorKind::Configuration, "TTA steps must be >= 1");
  if (!(c.select_fraction > 0.0 && c.select_fraction <= 1.0)) {
    throw Error(ErrorKind::Configuration, "selection fraction must be in (0, 1]");
  }
  if (!(c.lambda >= 0.0)) throw Error(ErrorKind::Configuration, "lambda must be >= 0");
  if (!(c.weight_decay >= 0.0)) throw Error(ErrorKind::Configuration, "weight decay must be >= 0");
}

std::vector<std::size_t> select_confident_views(const Matrix& probs, double fraction) {
  const std::size_t V = probs.rows();
  if (V == 0) return {};
  std::vector<double> h(V);
  for (std::size_t v = 0; v < V; ++v) h[v] = entropy(probs.row(v));
  std::vector<std::size_t> order(V);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return h[a] < h[b]; });
  auto keep = static_cast<std::size_t>(std::ceil(fraction * double(V) - 1e-12));
  keep = std::clamp<std::size_t>(keep, 1, V);
  order.resize(keep);
  return order;
}

Matrix adapted_prototypes(const PrototypeSet& protos, const Matrix& residual) {
  Matrix t = protos.prototypes;
  for (std::size_t k = 0; k < t.rows(); ++k) {
    auto row = t.row(k);
    const auto r = residual.row(k);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += r[j];
    if (!(normalize_in_place(row) > 0.0)) {
      throw Error(ErrorKind::Adaptation, "adapted prototype collapsed to zero");
    }
  }
  return t;
}

TtaObjective tta_objective(const ViewBatch& batch, const PrototypeSet& protos,
                           const std::vector<RangePair>& view_ranges, const Matrix& residual,
                           const std::vector<std::size_t>& selected, TtaCalib mode,
                           double lambda) {
  const std::size_t K = protos.class_count();
  const std::size_t d = protos.dim();
  if (batch.views.cols() != d) throw Error(ErrorKind::Validation, "view dimension mismatch");
  if (selected.empty()) throw Error(ErrorKind::Adaptation, "no views selected");
  const bool needs_ranges = mode == TtaCalib::ZsNorm || mode == TtaCalib::Penalty;
  if (needs_ranges && view_ranges.size() != batch.views.rows()) {
    throw Error(ErrorKind::Validation, "view ranges are not aligned with the views");
  }

  // Build normalized prototypes, keeping the pre-normalization norms.
  Matrix t = protos.prototypes;
  std::vector<double> norms(K);
  for (std::size_t k = 0; k < K; ++k) {
    auto row = t.row(k);
    const auto r = residual.row(k);
    for (std::size_t j = 0; j < d; ++j) row[j] += r[j];
    norms[k] = normalize_in_place(row);
    if (!(norms[k] > 0.0)) throw Error(ErrorKind::Adaptation, "adapted prototype collapsed to zero");
  }

  const double inv_tau = 1.0 / protos.temperature;
  const double weight = 1.0 / double(selected.size());
  TtaObjective out{0.0, 0.0, Matrix(K, d)};
  Matrix grad_t(K, d);
  std::vector<double> logits(K), g_logits(K);
  for (const std::size_t v : selected) {
    const auto z = batch.views.row(v);
    for (std::size_t k = 0; k < K; ++k) logits[k] = dot(z, t.row(k)) * inv_tau;

    const std::vector<double> scored =
        mode == TtaCalib::ZsNorm ? zs_norm_transform(logits, view_ranges[v]) : logits;
    const auto p = softmax(scored);
    const double h = entropy(p);
    out.value += weight * h;
    // dH/dl_j = -p_j (log p_j + H)
    for (std::size_t k = 0; k < K; ++k) {
      g_logits[k] = p[k] > 0.0 ? -weight * p[k] * (std::log(p[k]) + h) : 0.0;
    }
    if (mode == TtaCalib::ZsNorm) g_logits = zs_norm_backward(logits, view_ranges[v], g_logits);
    if (needs_ranges) {
      const auto pen = penalty_term(logits, view_ranges[v]);
      out.violation += weight * pen.value / double(K);
      if (mode == TtaCalib::Penalty && lambda > 0.0) {
        out.value += weight * lambda * pen.value;
        for (std::size_t k = 0; k < K; ++k) g_logits[k] += weight * lambda * pen.subgradient[k];
      }
    }
    for (std::size_t k = 0; k < K; ++k) {
      const double c = g_logits[k] * inv_tau;
      if (c == 0.0) continue;
      auto g = grad_t.row(k);
      for (std::size_t j = 0; j < d; ++j) g[j] += c * z[j];
    }
  }
  // through t'_k = u_k / |u_k|, u_k = t_k + r_k
  for (std::size_t k = 0; k < K; ++k) {
    const auto tk = t.row(k);
    const auto g = grad_t.row(k);
    const double radial = dot(g, tk);
    auto out_row = out.grad.row(k);
    for (std::size_t j = 0; j < d; ++j) out_row[j] = (g[j] - tk[j] * radial) / norms[k];
  }
  return out;
}

Matrix tta_adapt(const ViewBatch& batch, const PrototypeSet& protos,
                 const std::vector<RangePair>& view_ranges, const TtaConfig& config) {
  validate(config);
  if (batch.views.rows() == 0) throw Error(ErrorKind::Validation, "empty view batch");
  if (batch.views.cols() != protos.dim()) {
    throw Error(ErrorKind::Validation, "view dimension does not match the prototypes");
  }
  const std::size_t K = protos.class_count();
  const std::size_t d = protos.dim();
  Matrix residual(K, d);
  std::vector<double> m(K * d, 0.0), v(K * d, 0.0);

  for (int step = 1; step <= config.steps; ++step) {
    const Matrix logits = zs_logits(batch.views, PrototypeSet{adapted_prototypes(protos, residual),
                                                              protos.temperature});
    const auto selected = select_confident_views(softmax_rows(logits), config.select_fraction);
    const auto obj = tta_objective(batch, protos, view_ranges, residual, selected,
                                   config.calib_mode, config.lambda);
    if (!std::isfinite(obj.value)) {
      throw Error(ErrorKind::Adaptation, "non-finite objective at step " + std::to_string(step));
    }
    const double bc1 = 1.0 - std::pow(config.beta1, step);
    const double bc2 = 1.0 - std::pow(config.beta2, step);
    auto& r = residual.data();
    const auto& g = obj.grad.data();
    for (std::size_t j = 0; j < r.size(); ++j) {
      r[j] *= 1.0 - config.learning_rate * config.weight_decay;
      m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
      v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
      r[j] -= config.learning_rate * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + config.epsilon);
    }
  }
  return residual;
}

TtaPrediction tta_predict(const ViewBatch& batch, const PrototypeSet& protos,
                          const Matrix& residual, TtaCalib mode, const RangePair& original_range) {
  if (batch.views.rows() == 0) throw Error(ErrorKind::Validation, "empty view batch");
  const Matrix t = adapted_prototypes(protos, residual);
  const auto z = batch.views.row(0);
  TtaPrediction out;
  out.logits.resize(protos.class_count());
  for (std::size_t k = 0; k < t.rows(); ++k) out.logits[k] = dot(z, t.row(k)) / protos.temperature;
  if (mode == TtaCalib::Sals || mode == TtaCalib::ZsNorm) {
    out.logits = sals(out.logits, original_range);
  }
  out.probs = softmax(out.logits);
  return out;
}

}  // namespace rangecal
