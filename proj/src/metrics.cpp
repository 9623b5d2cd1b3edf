#include "rangecal/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <sstream>

#include "rangecal/core_math.hpp"
#include "rangecal/error.hpp"
#include "rangecal/keyvalue.hpp"

namespace rangecal {
namespace {

void require_aligned(const Matrix& probs, const LabelVector& labels) {
  if (probs.rows() != labels.size()) {
    throw Error(ErrorKind::InvalidInput, "prediction rows (" + std::to_string(probs.rows()) +
                                             ") != labels (" + std::to_string(labels.size()) + ")");
  }
}

void require_probability_row(std::span<const double> row, std::size_t i) {
  double sum = 0.0;
  for (double p : row) {
    if (!(p >= 0.0 && p <= 1.0)) {
      throw Error(ErrorKind::InvalidInput, "row " + std::to_string(i) + " is not a probability vector");
    }
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6) {
    throw Error(ErrorKind::InvalidInput, "row " + std::to_string(i) + " does not sum to 1");
  }
}

}  // namespace

double accuracy(const Matrix& probs, const LabelVector& labels) {
  require_aligned(probs, labels);
  if (labels.empty()) throw Error(ErrorKind::InvalidInput, "accuracy of an empty set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    if (argmax_index(probs.row(i)) == labels[i]) ++hits;
  }
  return double(hits) / double(labels.size());
}

EceResult ece(const Matrix& probs, const LabelVector& labels, std::size_t bins) {
  require_aligned(probs, labels);
  if (bins == 0) throw Error(ErrorKind::InvalidInput, "bin count must be >= 1");
  if (labels.empty()) throw Error(ErrorKind::InvalidInput, "ECE of an empty set");

  std::vector<double> conf_sum(bins, 0.0), acc_sum(bins, 0.0);
  std::vector<std::size_t> counts(bins, 0);
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    const auto row = probs.row(i);
    require_probability_row(row, i);
    const std::size_t pred = argmax_index(row);
    const double c = row[pred];
    auto b = static_cast<std::size_t>(std::ceil(c * double(bins)));
    b = std::clamp<std::size_t>(b, 1, bins) - 1;
    conf_sum[b] += c;
    acc_sum[b] += pred == labels[i] ? 1.0 : 0.0;
    ++counts[b];
  }

  EceResult out;
  const double n = double(labels.size());
  for (std::size_t b = 0; b < bins; ++b) {
    ReliabilityBin rb{double(b) / double(bins), double(b + 1) / double(bins), counts[b], 0.0, 0.0};
    if (counts[b] > 0) {
      rb.mean_conf = conf_sum[b] / double(counts[b]);
      rb.mean_acc = acc_sum[b] / double(counts[b]);
      out.ece += double(counts[b]) / n * std::abs(rb.mean_acc - rb.mean_conf);
    }
    out.bins.push_back(rb);
  }
  return out;
}

LogitStats logit_stats(const Matrix& logits) {
  LogitStats s;
  if (logits.rows() == 0) return s;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    s.norms.push_back(logit_norm(logits.row(i)));
    s.ranges.push_back(logit_range(logits.row(i)));
    s.mean_norm += s.norms.back();
    s.mean_range += s.ranges.back();
  }
  s.mean_norm /= double(logits.rows());
  s.mean_range /= double(logits.rows());
  return s;
}

EvalReport evaluate(const Matrix& probs, const Matrix& logits, const LabelVector& labels,
                    std::size_t bins) {
  if (logits.rows() != probs.rows()) {
    throw Error(ErrorKind::InvalidInput, "logit and probability rows differ");
  }
  EvalReport r;
  r.accuracy = accuracy(probs, labels);
  auto e = ece(probs, labels, bins);
  r.ece = e.ece;
  r.bins = std::move(e.bins);
  const auto stats = logit_stats(logits);
  r.mean_logit_norm = stats.mean_norm;
  r.mean_logit_range = stats.mean_range;
  r.sample_count = labels.size();

  std::size_t total = 0;
  double recomputed = 0.0;
  for (const auto& b : r.bins) {
    total += b.count;
    recomputed += double(b.count) / double(r.sample_count) * std::abs(b.mean_acc - b.mean_conf);
  }
  if (total != r.sample_count || std::abs(recomputed - r.ece) > 1e-12) {
    throw Error(ErrorKind::Validation, "evaluation report failed its internal consistency check");
  }
  return r;
}

ReportRow make_row(const EvalReport& report, std::string method, std::string calib,
                   std::string dataset) {
  return ReportRow{std::move(method), std::move(calib),       std::move(dataset),
                   report.accuracy,   report.ece,             report.mean_logit_norm,
                   report.mean_logit_range, report.sample_count};
}

std::string format_row(const ReportRow& row) {
  std::ostringstream out;
  out << row.method << ',' << row.calib << ',' << row.dataset << ',' << format_double(row.acc)
      << ',' << format_double(row.ece) << ',' << format_double(row.mean_logit_norm) << ','
      << format_double(row.mean_logit_range) << ',' << row.n;
  return out.str();
}

ReportRow parse_row(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) fields.push_back(f);
  if (fields.size() != 8) {
    throw Error(ErrorKind::Format, "report row needs 8 fields, got " + std::to_string(fields.size()));
  }
  try {
    return ReportRow{fields[0],
                     fields[1],
                     fields[2],
                     std::stod(fields[3]),
                     std::stod(fields[4]),
                     std::stod(fields[5]),
                     std::stod(fields[6]),
                     static_cast<std::size_t>(std::stoull(fields[7]))};
  } catch (const std::logic_error&) {
    throw Error(ErrorKind::Format, "malformed report row: " + line);
  }
}

void write_report_csv(std::ostream& out, const std::vector<ReportRow>& rows) {
  out << kReportHeader << '\n';
  for (const auto& r : rows) out << format_row(r) << '\n';
}

void write_bins_csv(std::ostream& out, const std::vector<ReliabilityBin>& bins) {
  out << kBinsHeader << '\n';
  for (std::size_t b = 0; b < bins.size(); ++b) {
    const auto& x = bins[b];
    out << b + 1 << ',' << format_double(x.lo) << ',' << format_double(x.hi) << ',' << x.count
        << ',' << format_double(x.mean_conf) << ',' << format_double(x.mean_acc) << '\n';
  }
}

}  // namespace rangecal
