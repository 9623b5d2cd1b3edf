#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rangecal/adapters.hpp"
#include "rangecal/data_io.hpp"
#include "rangecal/keyvalue.hpp"
#include "rangecal/metrics.hpp"
#include "rangecal/tta.hpp"
#include "rangecal/zeroshot.hpp"

namespace rangecal {

/// Synthetic few-shot benchmark with a drifted target domain.
///
/// Class directions are uniform on the unit sphere. A sample of class y is
/// normalize(dir_y + noise + modality_gap * m), where noise has the given
/// per-coordinate standard deviation and m is a unit direction orthogonal
/// to every class direction; it only shrinks image/text cosines, the way
/// image and text embeddings of contrastive models sit in separate cones.
/// Target samples use target_noise and are rotated by drift_angle in a
/// random 2-plane before normalization. Prototypes are
/// normalize(dir_k + prompt_jitter noise).
///
/// K larger than the sphere can separate is not checked.
struct SynthConfig {
  std::size_t class_count = 10;
  std::size_t dim = 64;
  std::size_t shots = 16;
  std::size_t test_n = 1000;
  double source_noise = 0.15;
  double target_noise = 0.35;
  double drift_angle = 0.3;
  double prompt_jitter = 0.05;
  double modality_gap = 12.0;
  double temperature = kDefaultTemperature;
  // TTA views per test sample (row 0 is the sample itself) and their
  // per-coordinate perturbation.
  std::size_t views = 64;
  double view_noise = 0.02;
  std::uint64_t seed = 0;
};

void validate(const SynthConfig& config);

struct SynthData {
  Dataset support;
  Dataset source_test;
  Dataset target_test;
  PrototypeSet prototypes;
};

SynthData synth_generate(const SynthConfig& config);

/// Augmented views of every row of `features`: row 0 of each batch is the
/// row itself, the rest are normalize(z + N(0, noise^2)). Seeded per row so
/// batch i does not depend on how many rows precede it.
std::vector<ViewBatch> synth_views(const Matrix& features, std::size_t views, double noise,
                                   std::uint64_t seed);

enum class Method { ZeroShot, LinearProbe, ClipAdapter, TaskRes, TipAdapter, Tta };
enum class Calib { None, ZsNorm, Penalty, Sals };

std::string to_string(Method method);
std::string to_string(Calib calib);
Method parse_method(const std::string& name);
Calib parse_calib(const std::string& name);

/// Real-feature inputs for an experiment (in place of synthetic data).
struct FileInputs {
  std::filesystem::path prototypes;
  std::filesystem::path support_features;
  std::filesystem::path support_labels;
  std::filesystem::path eval_features;
  std::filesystem::path eval_labels;
  std::filesystem::path views_manifest;  // tta only
  std::string eval_name = "eval";
  std::size_t class_count = 0;
  double temperature = kDefaultTemperature;
  bool renormalize_prototypes = true;
};

struct ExperimentSpec {
  Method method = Method::ZeroShot;
  Calib calib = Calib::None;
  double range_factor = 1.0;
  std::uint64_t seed = 0;
  std::size_t bins = kDefaultBins;
  SynthConfig synth;
  std::optional<FileInputs> files;
  TrainConfig train;
  TtaConfig tta;
};

/// Throws Error(Configuration) for inconsistent combinations, e.g. a range
/// factor other than 1 without SaLS or a training-time calibration on a
/// method that does not train.
void validate(const ExperimentSpec& spec);

/// Parses the key=value spec schema (see README). Unknown keys are errors.
ExperimentSpec parse_experiment_spec(const KeyValues& kv);

/// Logits after the inference-time calibration of `calib`: SaLS rescales
/// onto the (optionally shrunk) zero-shot range; zs-norm-trained models get
/// the same rescaling at factor 1; none and penalty pass through.
Matrix inference_logits(const Matrix& logits, const ZsRangeTable& zs_ranges, Calib calib,
                        double range_factor);

struct ExperimentOutput {
  std::vector<ReportRow> rows;
  std::vector<EvalReport> reports;  // aligned with rows
};

/// generate/load -> zero-shot ranges -> adapt -> calibrate -> evaluate.
/// One row per evaluation domain (synthetic: "source" then "target").
/// Errors are rethrown as Error with the failing stage in the message.
ExperimentOutput run_experiment(const ExperimentSpec& spec);

}  // namespace rangecal
