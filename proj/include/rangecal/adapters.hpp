#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "rangecal/data_io.hpp"
#include "rangecal/matrix.hpp"
#include "rangecal/zeroshot.hpp"

namespace rangecal {

// Few-shot adapters over cached embeddings. Every adapter maps features and
// the frozen prototypes to an N x K logit matrix and is trained full-batch
// with SGD + momentum on cross-entropy, optionally with one of the two
// training-time range controls.

enum class AdapterMethod { LinearProbe, ClipAdapter, TaskRes, TipAdapter };

/// Logits (z . w_k) / tau; weights start at the prototypes.
struct LinearProbeParams {
  Matrix weights;  // K x d
};

/// Residual MLP on the image side:
///   z' = blend * (layer2 relu(layer1 z + bias1) + bias2) + (1 - blend) z,
/// renormalized, then scored against the prototypes.
struct ClipAdapterParams {
  Matrix layer1;  // (d/r) x d
  std::vector<double> bias1;
  Matrix layer2;  // d x (d/r)
  std::vector<double> bias2;
  double blend = 0.2;
};

/// t'_k = normalize(t_k + scale * r_k).
struct TaskResParams {
  Matrix residual;  // K x d
  double scale = 0.5;
};

/// Zero-shot logits plus a key-value cache term
/// blend * sum_s exp(-sharpness (1 - z . key_s)) * value_sk.
/// Only the keys are trained.
struct TipAdapterParams {
  Matrix cache_keys;    // S x d
  Matrix cache_values;  // S x K one-hot
  double sharpness = 5.5;
  double blend = 1.0;
};

using AdapterParams =
    std::variant<LinearProbeParams, ClipAdapterParams, TaskResParams, TipAdapterParams>;

AdapterMethod method_of(const AdapterParams& params);
std::string to_string(AdapterMethod method);
AdapterMethod parse_adapter_method(const std::string& name);

enum class LossMode { Plain, ZsNorm, Penalty };
enum class LrSchedule { Constant, Cosine };

std::string to_string(LossMode mode);
LossMode parse_loss_mode(const std::string& name);

struct TrainConfig {
  int epochs = 300;
  double learning_rate = 0.1;
  double momentum = 0.9;
  LossMode loss_mode = LossMode::Plain;
  double lambda = 10.0;
  std::uint64_t seed = 0;
  LrSchedule schedule = LrSchedule::Cosine;

  int clip_reduction = 4;
  double clip_blend = 0.2;
  double taskres_scale = 0.5;
  double tip_blend = 1.0;
  double tip_sharpness = 5.5;
};

/// Throws Error(Configuration) when the config breaks its invariants.
void validate(const TrainConfig& config);

/// Initial parameters: LP weights = prototypes, TaskRes residual = 0,
/// TIP cache = support features with one-hot labels, CLIP-Adapter layers
/// seeded uniform in +-1/sqrt(fan_in).
AdapterParams init_adapter(AdapterMethod method, const Dataset& support,
                           const PrototypeSet& protos, const TrainConfig& config);

Matrix adapter_logits(const AdapterParams& params, const Matrix& features,
                      const PrototypeSet& protos);

struct LossAndGrad {
  double loss = 0.0;
  Matrix grad;  // d loss / d logits, N x K
};

/// Mean softmax cross-entropy and its gradient (softmax - onehot) / N.
LossAndGrad ce_loss_and_grad(const Matrix& logits, const LabelVector& labels);

/// Training objective for a loss mode:
///   plain    mean CE(l)
///   zs_norm  mean CE(zs_norm_transform(l, r))
///   penalty  mean CE(l) + lambda * mean_i penalty_term(l_i, r_i)
LossAndGrad training_loss(const Matrix& logits, const LabelVector& labels,
                          std::span<const RangePair> zs_ranges, LossMode mode, double lambda);

/// Gradient of a scalar loss w.r.t. the trainable parameters given its
/// gradient w.r.t. the logits. The result has the same alternative and
/// shapes as `params`; non-trainable fields are zero.
AdapterParams adapter_backward(const AdapterParams& params, const Matrix& features,
                               const PrototypeSet& protos, const Matrix& grad_logits);

/// Trainable tensors of a parameter set, in a fixed order.
std::vector<std::span<double>> trainable_tensors(AdapterParams& params);

struct EpochStats {
  double loss = 0.0;
  double mean_logit_range = 0.0;
  double mean_logit_norm = 0.0;
};

struct TrainResult {
  AdapterParams params;
  std::vector<EpochStats> history;
};

/// Full-batch SGD with momentum. `zs_ranges` must be aligned with the
/// support rows. zs_norm mode needs every support range to have positive
/// width (Error(Configuration) otherwise); a non-finite loss aborts with
/// Error(Training) naming the epoch.
TrainResult train_adapter(AdapterMethod method, const Dataset& support,
                          const PrototypeSet& protos, const ZsRangeTable& zs_ranges,
                          const TrainConfig& config);

/// Adapter directory: manifest.txt (key=value) plus one VLF1 file per tensor.
void save_adapter(const AdapterParams& params, const PrototypeSet& protos, LossMode trained_with,
                  const std::filesystem::path& dir);

struct SavedAdapter {
  AdapterParams params;
  double temperature = kDefaultTemperature;
  LossMode trained_with = LossMode::Plain;
};

SavedAdapter load_adapter(const std::filesystem::path& dir);

}  // namespace rangecal
