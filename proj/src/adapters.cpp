#include "rangecal/adapters.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <type_traits>

#include "rangecal/calibration.hpp"
#include "rangecal/core_math.hpp"
#include "rangecal/error.hpp"
#include "rangecal/keyvalue.hpp"

namespace rangecal {
namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

void require_dim(const Matrix& features, const PrototypeSet& protos) {
  if (features.cols() != protos.dim()) {
    throw Error(ErrorKind::Validation, "feature dimension " + std::to_string(features.cols()) +
                                           " != prototype dimension " +
                                           std::to_string(protos.dim()));
  }
}

Matrix bias_row(const std::vector<double>& b) { return Matrix(1, b.size(), b); }

// Forward pass of the CLIP-Adapter residual MLP for one sample.
struct ClipForward {
  std::vector<double> hidden;    // layer1 z + b1
  std::vector<double> adapted;   // unit-norm z'
  double adapted_norm = 0.0;
};

ClipForward clip_forward(const ClipAdapterParams& p, std::span<const double> z) {
  ClipForward f;
  const std::size_t hd = p.layer1.rows();
  const std::size_t d = z.size();
  f.hidden.resize(hd);
  for (std::size_t h = 0; h < hd; ++h) f.hidden[h] = dot(p.layer1.row(h), z) + p.bias1[h];
  f.adapted.resize(d);
  for (std::size_t j = 0; j < d; ++j) {
    double m = p.bias2[j];
    const auto w = p.layer2.row(j);
    for (std::size_t h = 0; h < hd; ++h) m += w[h] * std::max(f.hidden[h], 0.0);
    f.adapted[j] = p.blend * m + (1.0 - p.blend) * z[j];
  }
  f.adapted_norm = normalize_in_place(f.adapted);
  if (!(f.adapted_norm > 0.0)) {
    throw Error(ErrorKind::Degeneracy, "CLIP-Adapter produced a zero feature");
  }
  return f;
}

Matrix taskres_prototypes(const TaskResParams& p, const PrototypeSet& protos,
                          std::vector<double>* norms = nullptr) {
  Matrix t(protos.class_count(), protos.dim());
  if (norms) norms->resize(protos.class_count());
  for (std::size_t k = 0; k < t.rows(); ++k) {
    auto row = t.row(k);
    const auto base = protos.prototypes.row(k);
    const auto res = p.residual.row(k);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = base[j] + p.scale * res[j];
    const double n = normalize_in_place(row);
    if (!(n > 0.0)) throw Error(ErrorKind::Degeneracy, "TaskRes prototype collapsed to zero");
    if (norms) (*norms)[k] = n;
  }
  return t;
}

}  // namespace

AdapterMethod method_of(const AdapterParams& params) {
  return std::visit(Overloaded{
                        [](const LinearProbeParams&) { return AdapterMethod::LinearProbe; },
                        [](const ClipAdapterParams&) { return AdapterMethod::ClipAdapter; },
                        [](const TaskResParams&) { return AdapterMethod::TaskRes; },
                        [](const TipAdapterParams&) { return AdapterMethod::TipAdapter; },
                    },
                    params);
}

std::string to_string(AdapterMethod method) {
  switch (method) {
    case AdapterMethod::LinearProbe: return "lp";
    case AdapterMethod::ClipAdapter: return "clip-adapter";
    case AdapterMethod::TaskRes: return "taskres";
    case AdapterMethod::TipAdapter: return "tip-f";
  }
  return "?";
}

AdapterMethod parse_adapter_method(const std::string& name) {
  if (name == "lp" || name == "linear-probe") return AdapterMethod::LinearProbe;
  if (name == "clip-adapter") return AdapterMethod::ClipAdapter;
  if (name == "taskres") return AdapterMethod::TaskRes;
  if (name == "tip-f" || name == "tip-adapter") return AdapterMethod::TipAdapter;
  throw Error(ErrorKind::Configuration, "unknown adapter method '" + name + "'");
}

std::string to_string(LossMode mode) {
  switch (mode) {
    case LossMode::Plain: return "none";
    case LossMode::ZsNorm: return "zs-norm";
    case LossMode::Penalty: return "penalty";
  }
  return "?";
}

LossMode parse_loss_mode(const std::string& name) {
  if (name == "none" || name == "plain") return LossMode::Plain;
  if (name == "zs-norm" || name == "zs_norm") return LossMode::ZsNorm;
  if (name == "penalty") return LossMode::Penalty;
  throw Error(ErrorKind::Configuration, "unknown training calibration '" + name + "'");
}

void validate(const TrainConfig& c) {
  if (c.epochs < 1) throw Error(ErrorKind::Configuration, "epochs must be >= 1");
  if (!(c.learning_rate > 0.0)) throw Error(ErrorKind::Configuration, "learning rate must be > 0");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) {
    throw Error(ErrorKind::Configuration, "momentum must be in [0, 1)");
  }
  if (!(c.lambda >= 0.0)) throw Error(ErrorKind::Configuration, "lambda must be >= 0");
  if (c.clip_reduction < 1) throw Error(ErrorKind::Configuration, "reduction must be >= 1");
  if (!(c.clip_blend >= 0.0 && c.clip_blend <= 1.0)) {
    throw Error(ErrorKind::Configuration, "CLIP-Adapter blend must be in [0, 1]");
  }
  if (!(c.taskres_scale > 0.0)) throw Error(ErrorKind::Configuration, "TaskRes scale must be > 0");
  if (!(c.tip_sharpness > 0.0)) throw Error(ErrorKind::Configuration, "TIP sharpness must be > 0");
  if (!(c.tip_blend >= 0.0)) throw Error(ErrorKind::Configuration, "TIP blend must be >= 0");
}

AdapterParams init_adapter(AdapterMethod method, const Dataset& support,
                           const PrototypeSet& protos, const TrainConfig& config) {
  validate(config);
  require_dim(support.features, protos);
  const std::size_t K = protos.class_count();
  const std::size_t d = protos.dim();
  switch (method) {
    case AdapterMethod::LinearProbe:
      return LinearProbeParams{protos.prototypes};
    case AdapterMethod::ClipAdapter: {
      const std::size_t hd = std::max<std::size_t>(1, d / static_cast<std::size_t>(config.clip_reduction));
      std::mt19937_64 rng(config.seed);
      ClipAdapterParams p{Matrix(hd, d), std::vector<double>(hd), Matrix(d, hd),
                          std::vector<double>(d), config.clip_blend};
      std::uniform_real_distribution<double> u1(-1.0 / std::sqrt(double(d)), 1.0 / std::sqrt(double(d)));
      std::uniform_real_distribution<double> u2(-1.0 / std::sqrt(double(hd)), 1.0 / std::sqrt(double(hd)));
      for (double& w : p.layer1.data()) w = u1(rng);
      for (double& b : p.bias1) b = u1(rng);
      for (double& w : p.layer2.data()) w = u2(rng);
      for (double& b : p.bias2) b = u2(rng);
      return p;
    }
    case AdapterMethod::TaskRes:
      return TaskResParams{Matrix(K, d), config.taskres_scale};
    case AdapterMethod::TipAdapter: {
      TipAdapterParams p{support.features, Matrix(support.size(), K), config.tip_sharpness,
                         config.tip_blend};
      for (std::size_t s = 0; s < support.size(); ++s) p.cache_values(s, support.labels[s]) = 1.0;
      return p;
    }
  }
  throw Error(ErrorKind::Configuration, "unknown adapter method");
}

Matrix adapter_logits(const AdapterParams& params, const Matrix& features,
                      const PrototypeSet& protos) {
  require_dim(features, protos);
  const std::size_t N = features.rows();
  const std::size_t K = protos.class_count();
  const double inv_tau = 1.0 / protos.temperature;
  Matrix out(N, K);
  std::visit(
      Overloaded{
          [&](const LinearProbeParams& p) {
            for (std::size_t i = 0; i < N; ++i)
              for (std::size_t k = 0; k < K; ++k)
                out(i, k) = dot(features.row(i), p.weights.row(k)) * inv_tau;
          },
          [&](const ClipAdapterParams& p) {
            for (std::size_t i = 0; i < N; ++i) {
              const auto f = clip_forward(p, features.row(i));
              for (std::size_t k = 0; k < K; ++k)
                out(i, k) = dot(f.adapted, protos.prototypes.row(k)) * inv_tau;
            }
          },
          [&](const TaskResParams& p) {
            const Matrix t = taskres_prototypes(p, protos);
            for (std::size_t i = 0; i < N; ++i)
              for (std::size_t k = 0; k < K; ++k)
                out(i, k) = dot(features.row(i), t.row(k)) * inv_tau;
          },
          [&](const TipAdapterParams& p) {
            for (std::size_t i = 0; i < N; ++i) {
              const auto z = features.row(i);
              for (std::size_t k = 0; k < K; ++k)
                out(i, k) = dot(z, protos.prototypes.row(k)) * inv_tau;
              if (p.blend == 0.0) continue;
              for (std::size_t s = 0; s < p.cache_keys.rows(); ++s) {
                const double affinity =
                    std::exp(-p.sharpness * (1.0 - dot(z, p.cache_keys.row(s))));
                for (std::size_t k = 0; k < K; ++k)
                  out(i, k) += p.blend * affinity * p.cache_values(s, k);
              }
            }
          },
      },
      params);
  return out;
}

LossAndGrad ce_loss_and_grad(const Matrix& logits, const LabelVector& labels) {
  if (labels.size() != logits.rows()) {
    throw Error(ErrorKind::InvalidInput, "labels do not match logit rows");
  }
  const std::size_t N = logits.rows();
  LossAndGrad out{0.0, Matrix(N, logits.cols())};
  for (std::size_t i = 0; i < N; ++i) {
    const auto row = logits.row(i);
    const std::size_t y = labels[i];
    if (y >= row.size()) throw Error(ErrorKind::InvalidInput, "label out of range");
    const auto p = softmax(row);
    // -log p_y via log-sum-exp to stay finite for saturated rows
    const double peak = row[argmax_index(row)];
    double sum = 0.0;
    for (double l : row) sum += std::exp(l - peak);
    out.loss += std::log(sum) + peak - row[y];
    auto g = out.grad.row(i);
    for (std::size_t k = 0; k < row.size(); ++k) g[k] = p[k] / double(N);
    g[y] -= 1.0 / double(N);
  }
  out.loss /= double(N);
  return out;
}

LossAndGrad training_loss(const Matrix& logits, const LabelVector& labels,
                          std::span<const RangePair> zs_ranges, LossMode mode, double lambda) {
  const std::size_t N = logits.rows();
  if (mode != LossMode::Plain && zs_ranges.size() != N) {
    throw Error(ErrorKind::InvalidInput, "zero-shot ranges are not aligned with the logits");
  }
  switch (mode) {
    case LossMode::Plain:
      return ce_loss_and_grad(logits, labels);
    case LossMode::ZsNorm: {
      const Matrix normalized = zs_norm_rows(logits, zs_ranges);
      LossAndGrad inner = ce_loss_and_grad(normalized, labels);
      LossAndGrad out{inner.loss, Matrix(N, logits.cols())};
      for (std::size_t i = 0; i < N; ++i) {
        const auto g = zs_norm_backward(logits.row(i), zs_ranges[i], inner.grad.row(i));
        std::copy(g.begin(), g.end(), out.grad.row(i).begin());
      }
      return out;
    }
    case LossMode::Penalty: {
      LossAndGrad out = ce_loss_and_grad(logits, labels);
      if (lambda == 0.0) return out;
      double total = 0.0;
      for (std::size_t i = 0; i < N; ++i) {
        const auto pen = penalty_term(logits.row(i), zs_ranges[i]);
        total += pen.value;
        auto g = out.grad.row(i);
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += lambda * pen.subgradient[k] / double(N);
      }
      out.loss += lambda * total / double(N);
      return out;
    }
  }
  throw Error(ErrorKind::Configuration, "unknown loss mode");
}

AdapterParams adapter_backward(const AdapterParams& params, const Matrix& features,
                               const PrototypeSet& protos, const Matrix& grad_logits) {
  require_dim(features, protos);
  const std::size_t N = features.rows();
  const std::size_t K = protos.class_count();
  const std::size_t d = protos.dim();
  const double inv_tau = 1.0 / protos.temperature;
  return std::visit(
      Overloaded{
          [&](const LinearProbeParams& p) -> AdapterParams {
            LinearProbeParams g{Matrix(p.weights.rows(), p.weights.cols())};
            for (std::size_t i = 0; i < N; ++i) {
              const auto z = features.row(i);
              for (std::size_t k = 0; k < K; ++k) {
                const double c = grad_logits(i, k) * inv_tau;
                if (c == 0.0) continue;
                auto gw = g.weights.row(k);
                for (std::size_t j = 0; j < d; ++j) gw[j] += c * z[j];
              }
            }
            return g;
          },
          [&](const ClipAdapterParams& p) -> AdapterParams {
            const std::size_t hd = p.layer1.rows();
            ClipAdapterParams g{Matrix(hd, d), std::vector<double>(hd), Matrix(d, hd),
                                std::vector<double>(d), p.blend};
            std::vector<double> g_hat(d), g_mid(d), g_hidden(hd);
            for (std::size_t i = 0; i < N; ++i) {
              const auto z = features.row(i);
              const auto f = clip_forward(p, z);
              std::fill(g_hat.begin(), g_hat.end(), 0.0);
              for (std::size_t k = 0; k < K; ++k) {
                const double c = grad_logits(i, k) * inv_tau;
                const auto t = protos.prototypes.row(k);
                for (std::size_t j = 0; j < d; ++j) g_hat[j] += c * t[j];
              }
              // through the renormalization z_hat = u / |u|
              const double radial = dot(g_hat, f.adapted);
              for (std::size_t j = 0; j < d; ++j) {
                g_mid[j] = p.blend * (g_hat[j] - f.adapted[j] * radial) / f.adapted_norm;
              }
              std::fill(g_hidden.begin(), g_hidden.end(), 0.0);
              for (std::size_t j = 0; j < d; ++j) {
                g.bias2[j] += g_mid[j];
                const auto w = p.layer2.row(j);
                auto gw = g.layer2.row(j);
                for (std::size_t h = 0; h < hd; ++h) {
                  gw[h] += g_mid[j] * std::max(f.hidden[h], 0.0);
                  g_hidden[h] += w[h] * g_mid[j];
                }
              }
              for (std::size_t h = 0; h < hd; ++h) {
                if (!(f.hidden[h] > 0.0)) continue;
                g.bias1[h] += g_hidden[h];
                auto gw = g.layer1.row(h);
                for (std::size_t j = 0; j < d; ++j) gw[j] += g_hidden[h] * z[j];
              }
            }
            return g;
          },
          [&](const TaskResParams& p) -> AdapterParams {
            std::vector<double> norms;
            const Matrix t = taskres_prototypes(p, protos, &norms);
            TaskResParams g{Matrix(K, d), p.scale};
            std::vector<double> g_t(d);
            for (std::size_t k = 0; k < K; ++k) {
              std::fill(g_t.begin(), g_t.end(), 0.0);
              for (std::size_t i = 0; i < N; ++i) {
                const double c = grad_logits(i, k) * inv_tau;
                if (c == 0.0) continue;
                const auto z = features.row(i);
                for (std::size_t j = 0; j < d; ++j) g_t[j] += c * z[j];
              }
              const auto tk = t.row(k);
              const double radial = dot(g_t, tk);
              auto gr = g.residual.row(k);
              for (std::size_t j = 0; j < d; ++j) {
                gr[j] = p.scale * (g_t[j] - tk[j] * radial) / norms[k];
              }
            }
            return g;
          },
          [&](const TipAdapterParams& p) -> AdapterParams {
            TipAdapterParams g{Matrix(p.cache_keys.rows(), d),
                               Matrix(p.cache_values.rows(), p.cache_values.cols()),
                               p.sharpness, p.blend};
            if (p.blend == 0.0) return g;
            for (std::size_t i = 0; i < N; ++i) {
              const auto z = features.row(i);
              for (std::size_t s = 0; s < p.cache_keys.rows(); ++s) {
                double g_aff = 0.0;
                for (std::size_t k = 0; k < K; ++k) g_aff += grad_logits(i, k) * p.cache_values(s, k);
                if (g_aff == 0.0) continue;
                const double affinity =
                    std::exp(-p.sharpness * (1.0 - dot(z, p.cache_keys.row(s))));
                const double c = p.blend * g_aff * affinity * p.sharpness;
                auto gk = g.cache_keys.row(s);
                for (std::size_t j = 0; j < d; ++j) gk[j] += c * z[j];
              }
            }
            return g;
          },
      },
      params);
}

std::vector<std::span<double>> trainable_tensors(AdapterParams& params) {
  return std::visit(
      Overloaded{
          [](LinearProbeParams& p) -> std::vector<std::span<double>> {
            return {std::span<double>(p.weights.data())};
          },
          [](ClipAdapterParams& p) -> std::vector<std::span<double>> {
            return {std::span<double>(p.layer1.data()), std::span<double>(p.bias1),
                    std::span<double>(p.layer2.data()), std::span<double>(p.bias2)};
          },
          [](TaskResParams& p) -> std::vector<std::span<double>> {
            return {std::span<double>(p.residual.data())};
          },
          [](TipAdapterParams& p) -> std::vector<std::span<double>> {
            return {std::span<double>(p.cache_keys.data())};
          },
      },
      params);
}

TrainResult train_adapter(AdapterMethod method, const Dataset& support,
                          const PrototypeSet& protos, const ZsRangeTable& zs_ranges,
                          const TrainConfig& config) {
  validate(config);
  if (support.size() == 0) throw Error(ErrorKind::Validation, "empty support set");
  if (support.class_count != protos.class_count()) {
    throw Error(ErrorKind::Validation, "support class count does not match the prototypes");
  }
  if (config.loss_mode != LossMode::Plain && zs_ranges.size() != support.size()) {
    throw Error(ErrorKind::Configuration, "zero-shot ranges are not aligned with the support set");
  }
  if (config.loss_mode == LossMode::ZsNorm) {
    for (std::size_t i = 0; i < zs_ranges.size(); ++i) {
      if (!(zs_ranges[i].hi > zs_ranges[i].lo)) {
        throw Error(ErrorKind::Configuration,
                    "support sample " + std::to_string(i) + " has a zero-width zero-shot range");
      }
    }
  }

  TrainResult result{init_adapter(method, support, protos, config), {}};
  result.history.reserve(static_cast<std::size_t>(config.epochs));
  auto tensors = trainable_tensors(result.params);
  std::vector<std::vector<double>> velocity;
  for (const auto& t : tensors) velocity.emplace_back(t.size(), 0.0);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const Matrix logits = adapter_logits(result.params, support.features, protos);
    for (const double x : logits.data()) {
      if (!std::isfinite(x)) {
        throw Error(ErrorKind::Training, "non-finite logits at epoch " + std::to_string(epoch));
      }
    }
    const LossAndGrad lg =
        training_loss(logits, support.labels, zs_ranges, config.loss_mode, config.lambda);
    if (!std::isfinite(lg.loss)) {
      throw Error(ErrorKind::Training, "non-finite loss at epoch " + std::to_string(epoch));
    }
    EpochStats stats{lg.loss, 0.0, 0.0};
    for (std::size_t i = 0; i < logits.rows(); ++i) {
      stats.mean_logit_range += logit_range(logits.row(i));
      stats.mean_logit_norm += logit_norm(logits.row(i));
    }
    stats.mean_logit_range /= double(logits.rows());
    stats.mean_logit_norm /= double(logits.rows());
    result.history.push_back(stats);

    AdapterParams grad = adapter_backward(result.params, support.features, protos, lg.grad);
    const auto grads = trainable_tensors(grad);
    double lr = config.learning_rate;
    if (config.schedule == LrSchedule::Cosine) {
      lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * double(epoch) / double(config.epochs)));
    }
    for (std::size_t t = 0; t < tensors.size(); ++t) {
      auto& v = velocity[t];
      for (std::size_t j = 0; j < v.size(); ++j) {
        v[j] = config.momentum * v[j] + grads[t][j];
        tensors[t][j] -= lr * v[j];
      }
    }
  }
  return result;
}

void save_adapter(const AdapterParams& params, const PrototypeSet& protos, LossMode trained_with,
                  const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  KeyValues manifest;
  manifest.set("method", to_string(method_of(params)));
  manifest.set("temperature", protos.temperature);
  manifest.set("trained_with", to_string(trained_with));
  std::visit(Overloaded{
                 [&](const LinearProbeParams& p) { write_matrix(p.weights, dir / "weights.vlf"); },
                 [&](const ClipAdapterParams& p) {
                   manifest.set("blend", p.blend);
                   write_matrix(p.layer1, dir / "layer1.vlf");
                   write_matrix(bias_row(p.bias1), dir / "bias1.vlf");
                   write_matrix(p.layer2, dir / "layer2.vlf");
                   write_matrix(bias_row(p.bias2), dir / "bias2.vlf");
                 },
                 [&](const TaskResParams& p) {
                   manifest.set("scale", p.scale);
                   write_matrix(p.residual, dir / "residual.vlf");
                 },
                 [&](const TipAdapterParams& p) {
                   manifest.set("blend", p.blend);
                   manifest.set("sharpness", p.sharpness);
                   write_matrix(p.cache_keys, dir / "cache_keys.vlf");
                   write_matrix(p.cache_values, dir / "cache_values.vlf");
                 },
             },
             params);
  manifest.write(dir / "manifest.txt");
}

SavedAdapter load_adapter(const std::filesystem::path& dir) {
  const KeyValues manifest = KeyValues::read(dir / "manifest.txt");
  SavedAdapter out;
  out.temperature = manifest.get_double("temperature");
  out.trained_with = parse_loss_mode(manifest.get("trained_with", "none"));
  switch (parse_adapter_method(manifest.get("method"))) {
    case AdapterMethod::LinearProbe:
      out.params = LinearProbeParams{read_matrix(dir / "weights.vlf")};
      break;
    case AdapterMethod::ClipAdapter:
      out.params = ClipAdapterParams{read_matrix(dir / "layer1.vlf"),
                                     read_matrix(dir / "bias1.vlf").data(),
                                     read_matrix(dir / "layer2.vlf"),
                                     read_matrix(dir / "bias2.vlf").data(),
                                     manifest.get_double("blend")};
      break;
    case AdapterMethod::TaskRes:
      out.params = TaskResParams{read_matrix(dir / "residual.vlf"), manifest.get_double("scale")};
      break;
    case AdapterMethod::TipAdapter:
      out.params = TipAdapterParams{read_matrix(dir / "cache_keys.vlf"),
                                    read_matrix(dir / "cache_values.vlf"),
                                    manifest.get_double("sharpness"), manifest.get_double("blend")};
      break;
  }
  return out;
}

}  // namespace rangecal
