// rangecal command-line front end.
//
// Every subcommand reads VLF1/VLL1 files and writes CSV (stdout unless a
// file is given). `run` drives a whole experiment from a key=value spec.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "rangecal/adapters.hpp"
#include "rangecal/bench.hpp"
#include "rangecal/calibration.hpp"
#include "rangecal/core_math.hpp"
#include "rangecal/data_io.hpp"
#include "rangecal/error.hpp"
#include "rangecal/keyvalue.hpp"
#include "rangecal/metrics.hpp"
#include "rangecal/tta.hpp"
#include "rangecal/zeroshot.hpp"

namespace fs = std::filesystem;
using namespace rangecal;

namespace {

// Writes to `path`, or stdout when it is empty.
template <class F>
void emit(const std::string& path, F&& write) {
  if (path.empty()) {
    write(std::cout);
    return;
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path);
  write(out);
}

Matrix read_unit_rows(const fs::path& path) {
  Matrix m = read_matrix(path);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    if (!(normalize_in_place(m.row(i)) > 0.0)) {
      throw Error(ErrorKind::Validation, path.string() + ": zero-norm row " + std::to_string(i));
    }
  }
  return m;
}

struct PrototypeArgs {
  std::string prototypes;
  std::string prompt_manifest;
  double temperature = kDefaultTemperature;
  bool no_renorm = false;

  void add(CLI::App* app) {
    app->add_option("--prototypes", prototypes, "K x d prototype matrix (VLF1)");
    app->add_option("--prompt-manifest", prompt_manifest,
                    "manifest of per-class prompt-embedding matrices, in class order");
    app->add_option("--temperature", temperature, "softmax temperature")->capture_default_str();
    app->add_flag("--no-renorm-prototypes", no_renorm, "keep raw prompt means");
  }

  PrototypeSet load() const {
    if (!prompt_manifest.empty()) {
      std::vector<Matrix> per_class;
      for (const auto& p : read_manifest(prompt_manifest)) per_class.push_back(read_matrix(p));
      return build_prototypes(per_class, temperature, !no_renorm);
    }
    if (prototypes.empty()) {
      throw Error(ErrorKind::Configuration, "need --prototypes or --prompt-manifest");
    }
    return make_prototype_set(read_matrix(prototypes), temperature, !no_renorm);
  }
};

void report(const std::string& path, const std::vector<ReportRow>& rows) {
  emit(path, [&](std::ostream& out) { write_report_csv(out, rows); });
}

std::string run_to_csv(const ExperimentSpec& spec, ExperimentOutput* keep = nullptr) {
  ExperimentOutput result = run_experiment(spec);
  std::ostringstream csv;
  write_report_csv(csv, result.rows);
  if (keep) *keep = std::move(result);
  return csv.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Logit-range calibration toolkit for adapted vision-language classifiers"};
  app.require_subcommand(1);

  // synth-gen ------------------------------------------------------------
  auto* synth_cmd = app.add_subcommand("synth-gen", "write a synthetic drift benchmark");
  SynthConfig synth;
  std::string synth_out;
  std::size_t synth_view_files = 0;
  synth_cmd->add_option("--out", synth_out, "output directory")->required();
  synth_cmd->add_option("--seed", synth.seed)->capture_default_str();
  synth_cmd->add_option("--classes", synth.class_count)->capture_default_str();
  synth_cmd->add_option("--dim", synth.dim)->capture_default_str();
  synth_cmd->add_option("--shots", synth.shots)->capture_default_str();
  synth_cmd->add_option("--test-n", synth.test_n)->capture_default_str();
  synth_cmd->add_option("--source-noise", synth.source_noise)->capture_default_str();
  synth_cmd->add_option("--target-noise", synth.target_noise)->capture_default_str();
  synth_cmd->add_option("--drift-angle", synth.drift_angle)->capture_default_str();
  synth_cmd->add_option("--prompt-jitter", synth.prompt_jitter)->capture_default_str();
  synth_cmd->add_option("--modality-gap", synth.modality_gap)->capture_default_str();
  synth_cmd->add_option("--views", synth.views, "views per TTA batch")->capture_default_str();
  synth_cmd->add_option("--view-noise", synth.view_noise)->capture_default_str();
  synth_cmd->add_option("--write-views", synth_view_files,
                        "also write TTA view batches for the first N target samples");

  // zeroshot -------------------------------------------------------------
  auto* zs_cmd = app.add_subcommand("zeroshot", "zero-shot logits and report");
  PrototypeArgs zs_protos;
  zs_protos.add(zs_cmd);
  std::string zs_features, zs_labels, zs_logits_out, zs_report, zs_name = "eval";
  std::size_t zs_bins = kDefaultBins;
  zs_cmd->add_option("--features", zs_features)->required();
  zs_cmd->add_option("--labels", zs_labels, "labels; enables the CSV report");
  zs_cmd->add_option("--logits-out", zs_logits_out, "write N x K logits (VLF1)");
  zs_cmd->add_option("--report", zs_report, "report CSV path (default stdout)");
  zs_cmd->add_option("--name", zs_name, "dataset column")->capture_default_str();
  zs_cmd->add_option("--bins", zs_bins)->capture_default_str();

  // train-adapter --------------------------------------------------------
  auto* train_cmd = app.add_subcommand("train-adapter", "train a few-shot adapter");
  PrototypeArgs train_protos;
  train_protos.add(train_cmd);
  TrainConfig train;
  std::string train_method = "lp", train_calib = "none", train_features, train_labels, train_out,
              train_schedule = "cosine";
  train_cmd->add_option("--method", train_method, "lp|clip-adapter|taskres|tip-f")
      ->capture_default_str();
  train_cmd->add_option("--calib", train_calib, "none|zs-norm|penalty")->capture_default_str();
  train_cmd->add_option("--features", train_features)->required();
  train_cmd->add_option("--labels", train_labels)->required();
  train_cmd->add_option("--out", train_out, "adapter directory")->required();
  train_cmd->add_option("--epochs", train.epochs)->capture_default_str();
  train_cmd->add_option("--lr", train.learning_rate)->capture_default_str();
  train_cmd->add_option("--momentum", train.momentum)->capture_default_str();
  train_cmd->add_option("--lambda", train.lambda)->capture_default_str();
  train_cmd->add_option("--schedule", train_schedule, "cosine|constant")->capture_default_str();
  train_cmd->add_option("--seed", train.seed)->capture_default_str();
  std::string train_history;
  train_cmd->add_option("--history", train_history, "per-epoch loss/range/norm CSV");

  // eval -----------------------------------------------------------------
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a trained adapter");
  PrototypeArgs eval_protos;
  eval_protos.add(eval_cmd);
  std::string eval_adapter, eval_features, eval_labels, eval_report, eval_plot, eval_name = "eval";
  bool eval_sals = false;
  double eval_factor = 1.0;
  std::size_t eval_bins = kDefaultBins;
  eval_cmd->add_option("--adapter", eval_adapter, "adapter directory")->required();
  eval_cmd->add_option("--features", eval_features)->required();
  eval_cmd->add_option("--labels", eval_labels)->required();
  eval_cmd->add_flag("--sals", eval_sals, "apply SaLS at inference");
  eval_cmd->add_option("--range-factor", eval_factor, "shrink the zero-shot range (with --sals)")
      ->capture_default_str();
  eval_cmd->add_option("--bins", eval_bins)->capture_default_str();
  eval_cmd->add_option("--report", eval_report);
  eval_cmd->add_option("--plot-data", eval_plot, "reliability bins CSV");
  eval_cmd->add_option("--name", eval_name)->capture_default_str();

  // sals -----------------------------------------------------------------
  auto* sals_cmd = app.add_subcommand("sals", "rescale logits onto zero-shot ranges");
  std::string sals_logits, sals_zs, sals_out;
  double sals_factor = 1.0;
  sals_cmd->add_option("--logits", sals_logits, "adapted N x K logits")->required();
  sals_cmd->add_option("--zs-logits", sals_zs, "zero-shot N x K logits")->required();
  sals_cmd->add_option("--range-factor", sals_factor)->capture_default_str();
  sals_cmd->add_option("--out", sals_out, "output logits (VLF1)")->required();

  // tta ------------------------------------------------------------------
  auto* tta_cmd = app.add_subcommand("tta", "episodic test-time adaptation over view batches");
  PrototypeArgs tta_protos;
  tta_protos.add(tta_cmd);
  TtaConfig tta;
  std::string tta_views, tta_labels, tta_calib = "none", tta_report, tta_plot, tta_name = "eval";
  double tta_factor = 1.0;
  std::size_t tta_bins = kDefaultBins;
  tta_cmd->add_option("--views-manifest", tta_views, "one VLF1 view batch per sample")->required();
  tta_cmd->add_option("--labels", tta_labels)->required();
  tta_cmd->add_option("--calib", tta_calib, "none|zs-norm|penalty|sals")->capture_default_str();
  tta_cmd->add_option("--lr", tta.learning_rate)->capture_default_str();
  tta_cmd->add_option("--steps", tta.steps)->capture_default_str();
  tta_cmd->add_option("--select-fraction", tta.select_fraction)->capture_default_str();
  tta_cmd->add_option("--weight-decay", tta.weight_decay)->capture_default_str();
  tta_cmd->add_option("--lambda", tta.lambda)->capture_default_str();
  tta_cmd->add_option("--seed", tta.seed)->capture_default_str();
  tta_cmd->add_option("--range-factor", tta_factor)->capture_default_str();
  tta_cmd->add_option("--bins", tta_bins)->capture_default_str();
  tta_cmd->add_option("--report", tta_report);
  tta_cmd->add_option("--plot-data", tta_plot);
  tta_cmd->add_option("--name", tta_name)->capture_default_str();

  // logit-stats ----------------------------------------------------------
  auto* stats_cmd = app.add_subcommand("logit-stats", "mean logit norm and range");
  std::string stats_logits, stats_out;
  stats_cmd->add_option("--logits", stats_logits)->required();
  stats_cmd->add_option("--per-sample", stats_out, "per-sample norm/range CSV");

  // reliability ----------------------------------------------------------
  auto* rel_cmd = app.add_subcommand("reliability", "reliability bins for a logit matrix");
  std::string rel_logits, rel_labels, rel_out;
  std::size_t rel_bins = kDefaultBins;
  rel_cmd->add_option("--logits", rel_logits)->required();
  rel_cmd->add_option("--labels", rel_labels)->required();
  rel_cmd->add_option("--bins", rel_bins)->capture_default_str();
  rel_cmd->add_option("--out", rel_out);

  // run ------------------------------------------------------------------
  auto* run_cmd = app.add_subcommand("run", "run an experiment spec");
  std::string run_spec, run_out, run_golden, run_plot;
  std::vector<std::string> run_sets;
  bool run_bless = false;
  run_cmd->add_option("--spec", run_spec, "key=value spec file");
  run_cmd->add_option("--set", run_sets, "override a spec key (key=value), repeatable");
  run_cmd->add_option("--out", run_out, "report CSV path (default stdout)");
  run_cmd->add_option("--golden", run_golden, "compare the CSV against this golden file");
  run_cmd->add_flag("--bless", run_bless, "rewrite the golden file instead of comparing");
  run_cmd->add_option("--plot-data", run_plot, "directory for per-domain reliability CSVs");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth_cmd) {
      const SynthData data = synth_generate(synth);
      const fs::path dir(synth_out);
      fs::create_directories(dir);
      write_matrix(data.prototypes.prototypes, dir / "prototypes.vlf");
      write_matrix(data.support.features, dir / "support.vlf");
      write_labels(data.support.labels, dir / "support.vll");
      write_matrix(data.source_test.features, dir / "source.vlf");
      write_labels(data.source_test.labels, dir / "source.vll");
      write_matrix(data.target_test.features, dir / "target.vlf");
      write_labels(data.target_test.labels, dir / "target.vll");
      if (synth_view_files > 0) {
        const std::size_t n = std::min(synth_view_files, data.target_test.size());
        Matrix head(n, data.target_test.features.cols());
        std::copy_n(data.target_test.features.data().begin(), n * head.cols(), head.data().begin());
        LabelVector head_labels(data.target_test.labels.begin(), data.target_test.labels.begin() + long(n));
        fs::create_directories(dir / "views");
        std::vector<fs::path> entries;
        const auto batches = synth_views(head, synth.views, synth.view_noise, synth.seed);
        for (std::size_t i = 0; i < n; ++i) {
          char name[32];
          std::snprintf(name, sizeof name, "views/%06zu.vlf", i);
          write_matrix(batches[i].views, dir / name);
          entries.emplace_back(name);
        }
        write_manifest(entries, dir / "views.txt");
        write_labels(head_labels, dir / "views.vll");
      }
      std::cerr << "wrote synthetic benchmark to " << dir << '\n';
    } else if (*zs_cmd) {
      const PrototypeSet protos = zs_protos.load();
      const Matrix features = read_unit_rows(zs_features);
      const Matrix logits = zs_logits(features, protos);
      if (!zs_logits_out.empty()) write_matrix(logits, zs_logits_out);
      if (!zs_labels.empty()) {
        const LabelVector labels = read_labels(zs_labels);
        const EvalReport r = evaluate(softmax_rows(logits), logits, labels, zs_bins);
        report(zs_report, {make_row(r, "zeroshot", "none", zs_name)});
      }
    } else if (*train_cmd) {
      const PrototypeSet protos = train_protos.load();
      const Dataset support = load_dataset(train_features, train_labels, protos.class_count());
      train.loss_mode = parse_loss_mode(train_calib);
      train.schedule = train_schedule == "constant" ? LrSchedule::Constant : LrSchedule::Cosine;
      const ZsRangeTable ranges = zs_range_table(zs_logits(support.features, protos));
      const TrainResult result =
          train_adapter(parse_adapter_method(train_method), support, protos, ranges, train);
      save_adapter(result.params, protos, train.loss_mode, train_out);
      if (!train_history.empty()) {
        emit(train_history, [&](std::ostream& o) {
          o << "epoch,loss,mean_logit_range,mean_logit_norm\n";
          for (std::size_t e = 0; e < result.history.size(); ++e) {
            const auto& h = result.history[e];
            o << e << ',' << format_double(h.loss) << ',' << format_double(h.mean_logit_range)
              << ',' << format_double(h.mean_logit_norm) << '\n';
          }
        });
      }
      const auto& last = result.history.back();
      std::cerr << "trained " << train_method << " (" << train_calib << "): final loss "
                << last.loss << ", mean logit range " << last.mean_logit_range << '\n';
    } else if (*eval_cmd) {
      const SavedAdapter saved = load_adapter(eval_adapter);
      PrototypeArgs args = eval_protos;
      args.temperature = saved.temperature;
      const PrototypeSet protos = args.load();
      const Dataset data = load_dataset(eval_features, eval_labels, protos.class_count());
      const Matrix zs = zs_logits(data.features, protos);
      Calib calib = eval_sals ? Calib::Sals
                    : saved.trained_with == LossMode::ZsNorm ? Calib::ZsNorm
                                                             : Calib::None;
      if (!eval_sals && eval_factor != 1.0) {
        throw Error(ErrorKind::Configuration, "--range-factor requires --sals");
      }
      const Matrix logits = inference_logits(adapter_logits(saved.params, data.features, protos),
                                             zs_range_table(zs), calib, eval_factor);
      const EvalReport r = evaluate(softmax_rows(logits), logits, data.labels, eval_bins);
      std::string label = eval_sals ? "sals" : to_string(saved.trained_with);
      if (eval_factor != 1.0) label += "-x" + format_double(eval_factor);
      report(eval_report, {make_row(r, to_string(method_of(saved.params)), label, eval_name)});
      if (!eval_plot.empty()) emit(eval_plot, [&](std::ostream& o) { write_bins_csv(o, r.bins); });
    } else if (*sals_cmd) {
      const Matrix logits = read_matrix(sals_logits);
      const Matrix zs = read_matrix(sals_zs);
      if (zs.rows() != logits.rows() || zs.cols() != logits.cols()) {
        throw Error(ErrorKind::Validation, "logit and zero-shot logit shapes differ");
      }
      write_matrix(inference_logits(logits, zs_range_table(zs), Calib::Sals, sals_factor),
                   sals_out);
    } else if (*tta_cmd) {
      const PrototypeSet protos = tta_protos.load();
      const LabelVector labels = read_labels(tta_labels);
      const auto entries = read_manifest(tta_views);
      if (entries.size() != labels.size()) {
        throw Error(ErrorKind::Validation, "views manifest and labels differ in length");
      }
      tta.calib_mode = parse_tta_calib(tta_calib);
      if (tta.calib_mode != TtaCalib::Sals && tta_factor != 1.0) {
        throw Error(ErrorKind::Configuration, "--range-factor requires --calib sals");
      }
      Matrix logits(labels.size(), protos.class_count());
      for (std::size_t i = 0; i < entries.size(); ++i) {
        const ViewBatch batch{read_unit_rows(entries[i])};
        const ZsRangeTable view_ranges = zs_range_table(zs_logits(batch.views, protos));
        const Matrix residual = tta_adapt(batch, protos, view_ranges, tta);
        const RangePair target = tta.calib_mode == TtaCalib::Sals
                                     ? scaled_range(view_ranges[0], tta_factor)
                                     : view_ranges[0];
        const auto pred = tta_predict(batch, protos, residual, tta.calib_mode, target);
        std::copy(pred.logits.begin(), pred.logits.end(), logits.row(i).begin());
      }
      const EvalReport r = evaluate(softmax_rows(logits), logits, labels, tta_bins);
      std::string label = tta_calib;
      if (tta_factor != 1.0) label += "-x" + format_double(tta_factor);
      report(tta_report, {make_row(r, "tta", label, tta_name)});
      if (!tta_plot.empty()) emit(tta_plot, [&](std::ostream& o) { write_bins_csv(o, r.bins); });
    } else if (*stats_cmd) {
      const LogitStats s = logit_stats(read_matrix(stats_logits));
      std::cout << "mean_logit_norm,mean_logit_range\n"
                << format_double(s.mean_norm) << ',' << format_double(s.mean_range) << '\n';
      if (!stats_out.empty()) {
        emit(stats_out, [&](std::ostream& o) {
          o << "index,logit_norm,logit_range\n";
          for (std::size_t i = 0; i < s.norms.size(); ++i) {
            o << i << ',' << format_double(s.norms[i]) << ',' << format_double(s.ranges[i]) << '\n';
          }
        });
      }
    } else if (*rel_cmd) {
      const Matrix logits = read_matrix(rel_logits);
      const EceResult e = ece(softmax_rows(logits), read_labels(rel_labels), rel_bins);
      emit(rel_out, [&](std::ostream& o) { write_bins_csv(o, e.bins); });
    } else if (*run_cmd) {
      KeyValues kv = run_spec.empty() ? KeyValues{} : KeyValues::read(run_spec);
      for (const auto& s : run_sets) {
        const KeyValues one = KeyValues::parse(s);
        for (const auto& [k, v] : one.entries()) kv.set(k, v);
      }
      const ExperimentSpec spec = parse_experiment_spec(kv);
      ExperimentOutput result;
      const std::string csv = run_to_csv(spec, &result);
      if (!run_plot.empty()) {
        fs::create_directories(run_plot);
        for (std::size_t i = 0; i < result.rows.size(); ++i) {
          const auto& row = result.rows[i];
          emit((fs::path(run_plot) / (row.method + "_" + row.calib + "_" + row.dataset + "_bins.csv"))
                   .string(),
               [&](std::ostream& o) { write_bins_csv(o, result.reports[i].bins); });
        }
      }
      if (!run_golden.empty()) {
        if (run_bless) {
          emit(run_golden, [&](std::ostream& o) { o << csv; });
          std::cerr << "blessed " << run_golden << '\n';
        } else {
          std::ifstream in(run_golden, std::ios::binary);
          if (!in) throw Error(ErrorKind::Io, "cannot open golden file " + run_golden);
          std::ostringstream golden;
          golden << in.rdbuf();
          if (golden.str() != csv) {
            std::cerr << "golden mismatch for " << run_golden << "\n--- expected\n"
                      << golden.str() << "--- got\n" << csv;
            return 3;
          }
        }
      }
      emit(run_out, [&](std::ostream& o) { o << csv; });
    }
  } catch (const Error& e) {
    std::cerr << "error (" << to_string(e.kind()) << "): " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
