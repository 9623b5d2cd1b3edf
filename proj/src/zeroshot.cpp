#include "rangecal/zeroshot.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "rangecal/error.hpp"

namespace rangecal {

PrototypeSet build_prototypes(const std::vector<Matrix>& prompt_embeddings, double temperature,
                              bool renormalize) {
  if (prompt_embeddings.size() < 2) {
    throw Error(ErrorKind::Validation, "need prompt embeddings for at least two classes");
  }
  const std::size_t dim = prompt_embeddings.front().cols();
  Matrix means(prompt_embeddings.size(), dim);
  for (std::size_t k = 0; k < prompt_embeddings.size(); ++k) {
    const Matrix& prompts = prompt_embeddings[k];
    if (prompts.rows() == 0) {
      throw Error(ErrorKind::Validation, "class " + std::to_string(k) + " has no prompts");
    }
    if (prompts.cols() != dim) {
      throw Error(ErrorKind::Validation, "class " + std::to_string(k) +
                                             " prompt dimension differs from class 0");
    }
    auto mean = means.row(k);
    for (std::size_t n = 0; n < prompts.rows(); ++n) {
      const auto p = prompts.row(n);
      for (std::size_t j = 0; j < dim; ++j) mean[j] += p[j];
    }
    for (double& v : mean) v /= static_cast<double>(prompts.rows());
  }
  return make_prototype_set(std::move(means), temperature, renormalize);
}

PrototypeSet make_prototype_set(Matrix prototypes, double temperature, bool renormalize) {
  if (!(temperature > 0.0)) throw Error(ErrorKind::Validation, "temperature must be positive");
  if (prototypes.rows() < 2) throw Error(ErrorKind::Validation, "need at least two prototypes");
  for (std::size_t k = 0; k < prototypes.rows(); ++k) {
    auto row = prototypes.row(k);
    const double n = std::sqrt(dot(row, row));
    if (!(n > 1e-12)) {
      throw Error(ErrorKind::Degeneracy,
                  "prototype " + std::to_string(k) + " has zero norm (prompts cancel out)");
    }
    if (renormalize) {
      for (double& v : row) v /= n;
    }
  }
  return PrototypeSet{std::move(prototypes), temperature};
}

Matrix zs_logits(const Matrix& features, const PrototypeSet& protos) {
  if (features.cols() != protos.dim()) {
    throw Error(ErrorKind::Validation, "feature dimension " + std::to_string(features.cols()) +
                                           " != prototype dimension " +
                                           std::to_string(protos.dim()));
  }
  Matrix out(features.rows(), protos.class_count());
  for (std::size_t i = 0; i < features.rows(); ++i) {
    const auto z = features.row(i);
    for (std::size_t k = 0; k < protos.class_count(); ++k) {
      out(i, k) = dot(z, protos.prototypes.row(k)) / protos.temperature;
    }
  }
  return out;
}

ZsRangeTable zs_range_table(const Matrix& logits) {
  ZsRangeTable table;
  table.reserve(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto row = logits.row(i);
    const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
    table.push_back(RangePair{*lo, *hi});
  }
  return table;
}

}  // namespace rangecal
