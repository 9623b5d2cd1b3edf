#include "rangecal/bench.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <set>
#include <utility>

#include "rangecal/calibration.hpp"
#include "rangecal/core_math.hpp"
#include "rangecal/error.hpp"

namespace rangecal {
namespace {

std::vector<double> gaussian_vector(std::mt19937_64& rng, std::size_t n, double stddev) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = stddev * dist(rng);
  return v;
}

std::vector<double> random_unit(std::mt19937_64& rng, std::size_t n) {
  auto v = gaussian_vector(rng, n, 1.0);
  normalize_in_place(v);
  return v;
}

// Removes the components of v along each (unit) basis vector, then
// renormalizes.
void orthogonalize(std::vector<double>& v, const std::vector<std::vector<double>>& basis) {
  for (const auto& b : basis) {
    const double c = dot(v, b);
    for (std::size_t j = 0; j < v.size(); ++j) v[j] -= c * b[j];
  }
  normalize_in_place(v);
}

// Rotation by `angle` inside span{u, v} (u, v orthonormal).
void rotate_in_plane(std::span<double> x, const std::vector<double>& u,
                     const std::vector<double>& v, double angle) {
  const double a = dot(x, u);
  const double b = dot(x, v);
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  const double a2 = c * a - s * b;
  const double b2 = s * a + c * b;
  for (std::size_t j = 0; j < x.size(); ++j) x[j] += (a2 - a) * u[j] + (b2 - b) * v[j];
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  // splitmix64 finalizer
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

ViewBatch make_view_batch(std::span<const double> z, std::size_t views, double noise,
                          std::uint64_t seed, std::size_t index) {
  std::mt19937_64 rng(mix_seed(seed, index));
  ViewBatch batch{Matrix(views, z.size())};
  std::copy(z.begin(), z.end(), batch.views.row(0).begin());
  for (std::size_t v = 1; v < views; ++v) {
    auto row = batch.views.row(v);
    const auto n = gaussian_vector(rng, z.size(), noise);
    for (std::size_t j = 0; j < z.size(); ++j) row[j] = z[j] + n[j];
    normalize_in_place(row);
  }
  return batch;
}

template <class F>
auto stage(const char* name, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error(e.kind(), std::string(name) + ": " + e.what());
  } catch (const std::exception& e) {
    throw Error(ErrorKind::InvalidInput, std::string(name) + ": " + e.what());
  }
}

bool trains(Method m) {
  return m == Method::LinearProbe || m == Method::ClipAdapter || m == Method::TaskRes ||
         m == Method::TipAdapter;
}

AdapterMethod adapter_method(Method m) {
  switch (m) {
    case Method::LinearProbe: return AdapterMethod::LinearProbe;
    case Method::ClipAdapter: return AdapterMethod::ClipAdapter;
    case Method::TaskRes: return AdapterMethod::TaskRes;
    case Method::TipAdapter: return AdapterMethod::TipAdapter;
    default: break;
  }
  throw Error(ErrorKind::Configuration, "method " + to_string(m) + " is not an adapter");
}

std::string calib_label(Calib calib, double factor) {
  std::string label = to_string(calib);
  if (factor != 1.0) label += "-x" + format_double(factor);
  return label;
}

}  // namespace

void validate(const SynthConfig& c) {
  if (c.class_count < 2) throw Error(ErrorKind::Configuration, "synthetic class count must be >= 2");
  if (c.dim < c.class_count + 3) {
    throw Error(ErrorKind::Configuration, "synthetic dimension must exceed class count + 2");
  }
  if (c.shots == 0 || c.test_n == 0 || c.views == 0) {
    throw Error(ErrorKind::Configuration, "shots, test_n and views must be positive");
  }
  if (!(c.source_noise >= 0.0 && c.target_noise >= 0.0 && c.prompt_jitter >= 0.0 &&
        c.modality_gap >= 0.0 && c.view_noise >= 0.0)) {
    throw Error(ErrorKind::Configuration, "noise levels must be non-negative");
  }
  if (!(c.temperature > 0.0)) throw Error(ErrorKind::Configuration, "temperature must be > 0");
}

SynthData synth_generate(const SynthConfig& c) {
  validate(c);
  std::mt19937_64 rng(c.seed);
  std::vector<std::vector<double>> dirs;
  for (std::size_t k = 0; k < c.class_count; ++k) dirs.push_back(random_unit(rng, c.dim));

  auto modality = random_unit(rng, c.dim);
  {
    // Gram-Schmidt against the class directions.
    std::vector<std::vector<double>> basis;
    for (auto d : dirs) {
      orthogonalize(d, basis);
      basis.push_back(std::move(d));
    }
    orthogonalize(modality, basis);
  }
  auto plane_u = random_unit(rng, c.dim);
  auto plane_v = random_unit(rng, c.dim);
  orthogonalize(plane_v, {plane_u});

  Matrix protos(c.class_count, c.dim);
  for (std::size_t k = 0; k < c.class_count; ++k) {
    const auto jitter = gaussian_vector(rng, c.dim, c.prompt_jitter);
    auto row = protos.row(k);
    for (std::size_t j = 0; j < c.dim; ++j) row[j] = dirs[k][j] + jitter[j];
    // text prototypes carry no modality component
    const double along = dot(row, modality);
    for (std::size_t j = 0; j < c.dim; ++j) row[j] -= along * modality[j];
  }

  auto draw = [&](std::size_t n, bool target, bool class_major) {
    Matrix features(n, c.dim);
    LabelVector labels(n);
    const double noise = target ? c.target_noise : c.source_noise;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t y = class_major ? i / (n / c.class_count) : i % c.class_count;
      labels[i] = static_cast<std::uint32_t>(y);
      const auto eps = gaussian_vector(rng, c.dim, noise);
      auto row = features.row(i);
      for (std::size_t j = 0; j < c.dim; ++j) row[j] = dirs[y][j] + eps[j];
      if (target) rotate_in_plane(row, plane_u, plane_v, c.drift_angle);
      for (std::size_t j = 0; j < c.dim; ++j) row[j] += c.modality_gap * modality[j];
      normalize_in_place(row);
    }
    return make_dataset(std::move(features), std::move(labels), c.class_count);
  };

  SynthData data{draw(c.shots * c.class_count, false, true), draw(c.test_n, false, false),
                 draw(c.test_n, true, false),
                 make_prototype_set(std::move(protos), c.temperature)};
  return data;
}

std::vector<ViewBatch> synth_views(const Matrix& features, std::size_t views, double noise,
                                   std::uint64_t seed) {
  std::vector<ViewBatch> out;
  out.reserve(features.rows());
  for (std::size_t i = 0; i < features.rows(); ++i) {
    out.push_back(make_view_batch(features.row(i), views, noise, seed, i));
  }
  return out;
}

std::string to_string(Method m) {
  switch (m) {
    case Method::ZeroShot: return "zeroshot";
    case Method::LinearProbe: return "lp";
    case Method::ClipAdapter: return "clip-adapter";
    case Method::TaskRes: return "taskres";
    case Method::TipAdapter: return "tip-f";
    case Method::Tta: return "tta";
  }
  return "?";
}

std::string to_string(Calib c) {
  switch (c) {
    case Calib::None: return "none";
    case Calib::ZsNorm: return "zs-norm";
    case Calib::Penalty: return "penalty";
    case Calib::Sals: return "sals";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  if (name == "zeroshot" || name == "zs") return Method::ZeroShot;
  if (name == "tta") return Method::Tta;
  switch (parse_adapter_method(name)) {
    case AdapterMethod::LinearProbe: return Method::LinearProbe;
    case AdapterMethod::ClipAdapter: return Method::ClipAdapter;
    case AdapterMethod::TaskRes: return Method::TaskRes;
    case AdapterMethod::TipAdapter: return Method::TipAdapter;
  }
  throw Error(ErrorKind::Configuration, "unknown method '" + name + "'");
}

Calib parse_calib(const std::string& name) {
  if (name == "none") return Calib::None;
  if (name == "zs-norm" || name == "zs_norm") return Calib::ZsNorm;
  if (name == "penalty") return Calib::Penalty;
  if (name == "sals") return Calib::Sals;
  throw Error(ErrorKind::Configuration, "unknown calibration '" + name + "'");
}

void validate(const ExperimentSpec& spec) {
  if (!(spec.range_factor > 0.0 && spec.range_factor <= 1.0)) {
    throw Error(ErrorKind::Configuration, "range_factor must be in (0, 1]");
  }
  if (spec.range_factor != 1.0 && spec.calib != Calib::Sals) {
    throw Error(ErrorKind::Configuration, "range_factor other than 1 requires calib=sals");
  }
  if (spec.method == Method::ZeroShot &&
      (spec.calib == Calib::ZsNorm || spec.calib == Calib::Penalty)) {
    throw Error(ErrorKind::Configuration,
                "zeroshot has no adaptation to constrain; use calib=none or sals");
  }
  if (spec.bins == 0) throw Error(ErrorKind::Configuration, "bins must be >= 1");
  if (spec.files) {
    if (spec.files->class_count < 2) {
      throw Error(ErrorKind::Configuration, "data.class_count must be >= 2");
    }
    if (trains(spec.method) &&
        (spec.files->support_features.empty() || spec.files->support_labels.empty())) {
      throw Error(ErrorKind::Configuration, "adapter methods need support features and labels");
    }
    if (spec.method == Method::Tta && spec.files->views_manifest.empty()) {
      throw Error(ErrorKind::Configuration, "tta on files needs data.views_manifest");
    }
  } else {
    validate(spec.synth);
  }
  validate(spec.train);
  validate(spec.tta);
}

ExperimentSpec parse_experiment_spec(const KeyValues& kv) {
  static const std::set<std::string> known = {
      "method", "calib", "range_factor", "seed", "bins", "lambda",
      "synth.class_count", "synth.dim", "synth.shots", "synth.test_n", "synth.source_noise",
      "synth.target_noise", "synth.drift_angle", "synth.prompt_jitter", "synth.modality_gap",
      "synth.temperature", "synth.views", "synth.view_noise",
      "train.epochs", "train.lr", "train.momentum", "train.schedule", "train.clip_reduction",
      "train.clip_blend", "train.taskres_scale", "train.tip_blend", "train.tip_sharpness",
      "tta.lr", "tta.steps", "tta.select_fraction", "tta.weight_decay",
      "data.prototypes", "data.support_features", "data.support_labels", "data.eval_features",
      "data.eval_labels", "data.eval_name", "data.views_manifest", "data.class_count",
      "data.temperature", "data.renormalize_prototypes"};
  for (const auto& [key, value] : kv.entries()) {
    if (!known.count(key)) throw Error(ErrorKind::Configuration, "unknown spec key '" + key + "'");
  }

  ExperimentSpec s;
  s.method = parse_method(kv.get("method", "zeroshot"));
  s.calib = parse_calib(kv.get("calib", "none"));
  s.range_factor = kv.get_double("range_factor", 1.0);
  s.seed = kv.get_uint("seed", 0);
  s.bins = kv.get_uint("bins", kDefaultBins);
  const double lambda = kv.get_double("lambda", 10.0);

  SynthConfig& y = s.synth;
  y.class_count = kv.get_uint("synth.class_count", y.class_count);
  y.dim = kv.get_uint("synth.dim", y.dim);
  y.shots = kv.get_uint("synth.shots", y.shots);
  y.test_n = kv.get_uint("synth.test_n", y.test_n);
  y.source_noise = kv.get_double("synth.source_noise", y.source_noise);
  y.target_noise = kv.get_double("synth.target_noise", y.target_noise);
  y.drift_angle = kv.get_double("synth.drift_angle", y.drift_angle);
  y.prompt_jitter = kv.get_double("synth.prompt_jitter", y.prompt_jitter);
  y.modality_gap = kv.get_double("synth.modality_gap", y.modality_gap);
  y.temperature = kv.get_double("synth.temperature", y.temperature);
  y.views = kv.get_uint("synth.views", y.views);
  y.view_noise = kv.get_double("synth.view_noise", y.view_noise);
  y.seed = s.seed;

  TrainConfig& t = s.train;
  t.epochs = static_cast<int>(kv.get_int("train.epochs", t.epochs));
  t.learning_rate = kv.get_double("train.lr", t.learning_rate);
  t.momentum = kv.get_double("train.momentum", t.momentum);
  const std::string schedule = kv.get("train.schedule", "cosine");
  if (schedule == "cosine") {
    t.schedule = LrSchedule::Cosine;
  } else if (schedule == "constant") {
    t.schedule = LrSchedule::Constant;
  } else {
    throw Error(ErrorKind::Configuration, "unknown schedule '" + schedule + "'");
  }
  t.clip_reduction = static_cast<int>(kv.get_int("train.clip_reduction", t.clip_reduction));
  t.clip_blend = kv.get_double("train.clip_blend", t.clip_blend);
  t.taskres_scale = kv.get_double("train.taskres_scale", t.taskres_scale);
  t.tip_blend = kv.get_double("train.tip_blend", t.tip_blend);
  t.tip_sharpness = kv.get_double("train.tip_sharpness", t.tip_sharpness);
  t.lambda = lambda;
  t.seed = s.seed;
  t.loss_mode = s.calib == Calib::Penalty  ? LossMode::Penalty
                : s.calib == Calib::ZsNorm ? LossMode::ZsNorm
                                           : LossMode::Plain;

  TtaConfig& a = s.tta;
  a.learning_rate = kv.get_double("tta.lr", a.learning_rate);
  a.steps = static_cast<int>(kv.get_int("tta.steps", a.steps));
  a.select_fraction = kv.get_double("tta.select_fraction", a.select_fraction);
  a.weight_decay = kv.get_double("tta.weight_decay", a.weight_decay);
  a.lambda = lambda;
  a.seed = s.seed;
  a.calib_mode = s.calib == Calib::None      ? TtaCalib::None
                 : s.calib == Calib::ZsNorm  ? TtaCalib::ZsNorm
                 : s.calib == Calib::Penalty ? TtaCalib::Penalty
                                             : TtaCalib::Sals;

  if (kv.has("data.eval_features") || kv.has("data.prototypes")) {
    FileInputs f;
    f.prototypes = kv.get("data.prototypes");
    f.support_features = kv.get("data.support_features", "");
    f.support_labels = kv.get("data.support_labels", "");
    f.eval_features = kv.get("data.eval_features");
    f.eval_labels = kv.get("data.eval_labels");
    f.eval_name = kv.get("data.eval_name", "eval");
    f.views_manifest = kv.get("data.views_manifest", "");
    f.class_count = kv.get_uint("data.class_count", 0);
    f.temperature = kv.get_double("data.temperature", kDefaultTemperature);
    f.renormalize_prototypes = kv.get_bool("data.renormalize_prototypes", true);
    s.files = std::move(f);
  }
  validate(s);
  return s;
}

Matrix inference_logits(const Matrix& logits, const ZsRangeTable& zs_ranges, Calib calib,
                        double range_factor) {
  switch (calib) {
    case Calib::None:
    case Calib::Penalty:
      return logits;
    case Calib::ZsNorm:
      return sals_rows(logits, zs_ranges);
    case Calib::Sals: {
      if (range_factor == 1.0) return sals_rows(logits, zs_ranges);
      ZsRangeTable shrunk;
      shrunk.reserve(zs_ranges.size());
      for (const auto& r : zs_ranges) shrunk.push_back(scaled_range(r, range_factor));
      return sals_rows(logits, shrunk);
    }
  }
  throw Error(ErrorKind::Configuration, "unknown calibration");
}

ExperimentOutput run_experiment(const ExperimentSpec& spec) {
  stage("config", [&] { validate(spec); });

  struct Domain {
    std::string name;
    Dataset data;
    std::vector<ViewBatch> views;  // file inputs only
  };
  PrototypeSet protos;
  std::optional<Dataset> support;
  std::vector<Domain> domains;

  stage("load", [&] {
    if (spec.files) {
      const FileInputs& f = *spec.files;
      protos = make_prototype_set(read_matrix(f.prototypes), f.temperature,
                                  f.renormalize_prototypes);
      if (protos.class_count() != f.class_count) {
        throw Error(ErrorKind::Validation, "prototype rows != data.class_count");
      }
      if (trains(spec.method)) {
        support = load_dataset(f.support_features, f.support_labels, f.class_count);
      }
      Domain d{f.eval_name, load_dataset(f.eval_features, f.eval_labels, f.class_count), {}};
      if (spec.method == Method::Tta) {
        for (const auto& p : read_manifest(f.views_manifest)) {
          Matrix v = read_matrix(p);
          for (std::size_t r = 0; r < v.rows(); ++r) normalize_in_place(v.row(r));
          d.views.push_back(ViewBatch{std::move(v)});
        }
        if (d.views.size() != d.data.size()) {
          throw Error(ErrorKind::Validation, "views manifest does not match the evaluation set");
        }
      }
      domains.push_back(std::move(d));
    } else {
      SynthData s = synth_generate(spec.synth);
      protos = std::move(s.prototypes);
      support = std::move(s.support);
      domains.push_back(Domain{"source", std::move(s.source_test), {}});
      domains.push_back(Domain{"target", std::move(s.target_test), {}});
    }
  });

  std::optional<AdapterParams> params;
  if (trains(spec.method)) {
    stage("adapt", [&] {
      const ZsRangeTable support_ranges = zs_range_table(zs_logits(support->features, protos));
      params = train_adapter(adapter_method(spec.method), *support, protos, support_ranges,
                             spec.train)
                   .params;
    });
  }

  ExperimentOutput out;
  for (std::size_t di = 0; di < domains.size(); ++di) {
    const Domain& dom = domains[di];
    const Matrix zs = stage("zero-shot", [&] { return zs_logits(dom.data.features, protos); });
    const ZsRangeTable ranges = zs_range_table(zs);

    Matrix logits;
    if (spec.method == Method::Tta) {
      logits = stage("tta", [&] {
        Matrix result(dom.data.size(), protos.class_count());
        const std::uint64_t view_seed = mix_seed(spec.seed, 1000 + di);
        for (std::size_t i = 0; i < dom.data.size(); ++i) {
          const ViewBatch batch =
              dom.views.empty()
                  ? make_view_batch(dom.data.features.row(i), spec.synth.views,
                                    spec.synth.view_noise, view_seed, i)
                  : dom.views[i];
          const ZsRangeTable view_ranges = zs_range_table(zs_logits(batch.views, protos));
          const Matrix residual = tta_adapt(batch, protos, view_ranges, spec.tta);
          RangePair target = ranges[i];
          if (spec.calib == Calib::Sals) target = scaled_range(target, spec.range_factor);
          const auto pred = tta_predict(batch, protos, residual, spec.tta.calib_mode, target);
          std::copy(pred.logits.begin(), pred.logits.end(), result.row(i).begin());
        }
        return result;
      });
    } else {
      logits = stage("calibrate", [&] {
        const Matrix raw = params ? adapter_logits(*params, dom.data.features, protos) : zs;
        return inference_logits(raw, ranges, spec.calib, spec.range_factor);
      });
    }

    stage("evaluate", [&] {
      EvalReport report = evaluate(softmax_rows(logits), logits, dom.data.labels, spec.bins);
      out.rows.push_back(make_row(report, to_string(spec.method),
                                  calib_label(spec.calib, spec.range_factor), dom.name));
      out.reports.push_back(std::move(report));
    });
  }
  return out;
}

}  // namespace rangecal
