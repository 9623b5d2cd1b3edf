#include "rangecal/data_io.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <iterator>

#include "rangecal/error.hpp"

namespace rangecal {
namespace {

constexpr std::array<char, 4> kMatrixMagic{'V', 'L', 'F', '1'};
constexpr std::array<char, 4> kLabelMagic{'V', 'L', 'L', '1'};

void put_u32(std::vector<char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(const std::vector<char>& in, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  }
  return v;
}

std::vector<char> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spill(const std::vector<char>& bytes, const std::filesystem::path& path) {
  if (path.empty()) throw Error(ErrorKind::Io, "empty output path");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

void check_magic(const std::vector<char>& bytes, const std::array<char, 4>& magic,
                 const std::filesystem::path& path) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), magic.data(), 4) != 0) {
    throw Error(ErrorKind::Format, path.string() + ": bad magic, expected " +
                                       std::string(magic.begin(), magic.end()));
  }
}

}  // namespace

Matrix read_matrix(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  check_magic(bytes, kMatrixMagic, path);
  if (bytes.size() < 12) throw Error(ErrorKind::Corruption, path.string() + ": truncated header");
  const std::uint32_t rows = get_u32(bytes, 4);
  const std::uint32_t cols = get_u32(bytes, 8);
  if (rows == 0 || cols == 0) {
    throw Error(ErrorKind::InvalidHeader, path.string() + ": zero rows or columns");
  }
  const std::size_t count = static_cast<std::size_t>(rows) * cols;
  if (bytes.size() != 12 + 4 * count) {
    throw Error(ErrorKind::Corruption, path.string() + ": payload length " +
                                           std::to_string(bytes.size() - 12) + " != " +
                                           std::to_string(4 * count));
  }
  std::vector<double> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    data[i] = static_cast<double>(std::bit_cast<float>(get_u32(bytes, 12 + 4 * i)));
  }
  return Matrix(rows, cols, std::move(data));
}

void write_matrix(const Matrix& m, const std::filesystem::path& path) {
  if (m.rows() == 0 || m.cols() == 0) {
    throw Error(ErrorKind::InvalidInput, "cannot write an empty matrix");
  }
  std::vector<char> bytes(kMatrixMagic.begin(), kMatrixMagic.end());
  bytes.reserve(12 + 4 * m.data().size());
  put_u32(bytes, static_cast<std::uint32_t>(m.rows()));
  put_u32(bytes, static_cast<std::uint32_t>(m.cols()));
  for (double v : m.data()) put_u32(bytes, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  spill(bytes, path);
}

LabelVector read_labels(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  check_magic(bytes, kLabelMagic, path);
  if (bytes.size() < 8) throw Error(ErrorKind::Corruption, path.string() + ": truncated header");
  const std::uint32_t count = get_u32(bytes, 4);
  if (bytes.size() != 8 + 4 * static_cast<std::size_t>(count)) {
    throw Error(ErrorKind::Corruption, path.string() + ": label payload length mismatch");
  }
  LabelVector labels(count);
  for (std::size_t i = 0; i < count; ++i) labels[i] = get_u32(bytes, 8 + 4 * i);
  return labels;
}

void write_labels(const LabelVector& labels, const std::filesystem::path& path) {
  std::vector<char> bytes(kLabelMagic.begin(), kLabelMagic.end());
  put_u32(bytes, static_cast<std::uint32_t>(labels.size()));
  for (auto v : labels) put_u32(bytes, v);
  spill(bytes, path);
}

Dataset make_dataset(Matrix features, LabelVector labels, std::size_t class_count,
                     const LoadOptions& options) {
  if (labels.empty()) throw Error(ErrorKind::Validation, "dataset has no samples");
  if (class_count < 2) throw Error(ErrorKind::Validation, "class count must be at least 2");
  if (features.rows() != labels.size()) {
    throw Error(ErrorKind::Validation, "feature rows (" + std::to_string(features.rows()) +
                                           ") != labels (" + std::to_string(labels.size()) + ")");
  }
  if (features.cols() < 2) throw Error(ErrorKind::Validation, "embedding dimension must be >= 2");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= class_count) {
      throw Error(ErrorKind::Validation, "label " + std::to_string(labels[i]) + " at row " +
                                             std::to_string(i) + " is not < " +
                                             std::to_string(class_count));
    }
  }
  std::size_t off_unit = 0;
  for (std::size_t i = 0; i < features.rows(); ++i) {
    auto row = features.row(i);
    for (double v : row) {
      if (!std::isfinite(v)) {
        throw Error(ErrorKind::Validation, "non-finite feature in row " + std::to_string(i));
      }
    }
    const double n = normalize_in_place(row);
    if (n == 0.0) {
      throw Error(ErrorKind::Validation, "row " + std::to_string(i) + " has zero norm");
    }
    if (std::abs(n - 1.0) > options.norm_tolerance) {
      if (options.strict_norms) {
        throw Error(ErrorKind::Validation,
                    "row " + std::to_string(i) + " norm " + std::to_string(n) + " is not unit");
      }
      ++off_unit;
    }
  }
  if (off_unit > 0) {
    std::cerr << "warning: " << off_unit << " feature rows were not unit-norm; renormalized\n";
  }
  return Dataset{std::move(features), std::move(labels), class_count};
}

Dataset load_dataset(const std::filesystem::path& features_path,
                     const std::filesystem::path& labels_path, std::size_t class_count,
                     const LoadOptions& options) {
  return make_dataset(read_matrix(features_path), read_labels(labels_path), class_count, options);
}

std::vector<std::filesystem::path> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open manifest " + path.string());
  const auto base = path.parent_path();
  std::vector<std::filesystem::path> out;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    const auto first = line.find_first_not_of(' ');
    if (first == std::string::npos || line[first] == '#') continue;
    std::filesystem::path p(line.substr(first));
    out.push_back(p.is_relative() ? base / p : p);
  }
  return out;
}

void write_manifest(const std::vector<std::filesystem::path>& entries,
                    const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write manifest " + path.string());
  for (const auto& e : entries) out << e.string() << '\n';
}

}  // namespace rangecal
