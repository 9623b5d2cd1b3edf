#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rangecal/matrix.hpp"

namespace rangecal {

// On-disk formats (all integers and floats little-endian):
//
//   VLF1 matrix:  "VLF1" | u32 rows | u32 cols | rows*cols float32, row-major
//   VLL1 labels:  "VLL1" | u32 count | count * u32
//
// Matrices are held in double precision in memory and narrowed to float32
// on write, so a round trip is exact only for float-representable values.

using LabelVector = std::vector<std::uint32_t>;

Matrix read_matrix(const std::filesystem::path& path);
void write_matrix(const Matrix& m, const std::filesystem::path& path);

LabelVector read_labels(const std::filesystem::path& path);
void write_labels(const LabelVector& labels, const std::filesystem::path& path);

/// Support or evaluation set: unit-norm feature rows plus class indices.
struct Dataset {
  Matrix features;
  LabelVector labels;
  std::size_t class_count = 0;

  std::size_t size() const noexcept { return labels.size(); }
};

struct LoadOptions {
  // Rows whose norm differs from 1 by more than this are reported.
  double norm_tolerance = 1e-3;
  // Reject such rows instead of warning and renormalizing them.
  bool strict_norms = false;
};

/// Checks the Dataset invariants and renormalizes feature rows in place.
/// Zero-norm rows, label/row count mismatches, out-of-range labels and
/// empty sets raise Error(Validation).
Dataset make_dataset(Matrix features, LabelVector labels, std::size_t class_count,
                     const LoadOptions& options = {});

Dataset load_dataset(const std::filesystem::path& features_path,
                     const std::filesystem::path& labels_path, std::size_t class_count,
                     const LoadOptions& options = {});

/// Plain-text manifest: one path per line, blank lines and '#' comments
/// skipped. Relative paths resolve against the manifest's directory.
std::vector<std::filesystem::path> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::vector<std::filesystem::path>& entries,
                    const std::filesystem::path& path);

}  // namespace rangecal
