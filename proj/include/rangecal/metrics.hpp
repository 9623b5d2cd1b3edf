#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "rangecal/data_io.hpp"
#include "rangecal/matrix.hpp"

namespace rangecal {

inline constexpr std::size_t kDefaultBins = 15;

struct ReliabilityBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  double mean_conf = 0.0;
  double mean_acc = 0.0;
};

struct EceResult {
  double ece = 0.0;
  std::vector<ReliabilityBin> bins;
};

struct LogitStats {
  double mean_norm = 0.0;
  double mean_range = 0.0;
  std::vector<double> norms;
  std::vector<double> ranges;
};

struct EvalReport {
  double accuracy = 0.0;
  double ece = 0.0;
  std::vector<ReliabilityBin> bins;
  double mean_logit_norm = 0.0;
  double mean_logit_range = 0.0;
  std::size_t sample_count = 0;
};

/// Fraction of rows whose argmax equals the label.
double accuracy(const Matrix& probs, const LabelVector& labels);

/// Expected calibration error over M equal-width confidence bins on (0, 1].
/// Sample i falls in bin ceil(c_i * M), clamped to [1, M], where c_i is its
/// maximum probability. Rows must be valid probability vectors.
EceResult ece(const Matrix& probs, const LabelVector& labels, std::size_t bins = kDefaultBins);

LogitStats logit_stats(const Matrix& logits);

/// Aggregates accuracy, ECE and logit statistics, then checks that the bin
/// counts add up and the ECE matches its own bins.
EvalReport evaluate(const Matrix& probs, const Matrix& logits, const LabelVector& labels,
                    std::size_t bins = kDefaultBins);

/// One line of the summary CSV.
struct ReportRow {
  std::string method;
  std::string calib;
  std::string dataset;
  double acc = 0.0;
  double ece = 0.0;
  double mean_logit_norm = 0.0;
  double mean_logit_range = 0.0;
  std::size_t n = 0;

  bool operator==(const ReportRow&) const = default;
};

inline constexpr const char* kReportHeader =
    "method,calib,dataset,acc,ece,mean_logit_norm,mean_logit_range,n";
inline constexpr const char* kBinsHeader = "bin,lo,hi,count,mean_conf,mean_acc";

ReportRow make_row(const EvalReport& report, std::string method, std::string calib,
                   std::string dataset);

/// Fields are printed with "%.17g" so a row re-parses to the same doubles.
std::string format_row(const ReportRow& row);
ReportRow parse_row(const std::string& line);

void write_report_csv(std::ostream& out, const std::vector<ReportRow>& rows);
void write_bins_csv(std::ostream& out, const std::vector<ReliabilityBin>& bins);

}  // namespace rangecal
