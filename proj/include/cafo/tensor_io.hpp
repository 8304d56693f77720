#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cafo/error.hpp"

namespace cafo {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Feature rows (one sample per row). `normalized` records that every row has
/// unit Euclidean norm; it is set by l2_normalize_rows and cleared by readers.
template <typename Scalar>
struct BasicEmbeddings {
  RowMatrix<Scalar> data;
  bool normalized = false;

  Eigen::Index rows() const { return data.rows(); }
  Eigen::Index cols() const { return data.cols(); }
};

using EmbeddingMatrix = BasicEmbeddings<double>;

/// Class index per sample, all in [0, num_classes).
struct LabelSet {
  std::vector<std::uint32_t> labels;
  std::uint32_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  std::uint32_t operator[](std::size_t i) const { return labels[i]; }
};

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::uint8_t kDtypeFloat32 = 1;
inline constexpr std::size_t kEmbeddingHeaderBytes = 28;
inline constexpr std::size_t kLabelHeaderBytes = 20;
inline constexpr double kZeroRowThreshold = 1e-12;
inline constexpr double kUnitNormTolerance = 1e-5;

std::vector<std::byte> encode_embeddings(const EmbeddingMatrix& m);
EmbeddingMatrix decode_embeddings(std::span<const std::byte> bytes);
std::vector<std::byte> encode_labels(const LabelSet& labels);
LabelSet decode_labels(std::span<const std::byte> bytes);

EmbeddingMatrix read_embeddings(const std::filesystem::path& path);
void write_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path);
LabelSet read_labels(const std::filesystem::path& path);
void write_labels(const LabelSet& labels, const std::filesystem::path& path);

/// Throws if the matrix is empty or holds a non-finite value.
void validate(const EmbeddingMatrix& m);
/// Throws LabelOutOfRange for any label >= num_classes.
void validate(const LabelSet& labels);

template <typename Scalar>
BasicEmbeddings<Scalar> l2_normalize_rows(BasicEmbeddings<Scalar> m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const Scalar norm = m.data.row(r).norm();
    if (!(norm >= Scalar(kZeroRowThreshold))) {
      throw Error(ErrorCode::ZeroRow, "row " + std::to_string(r) + " has norm below 1e-12");
    }
    m.data.row(r) /= norm;
  }
  m.normalized = true;
  return m;
}

template <typename Scalar>
bool rows_are_unit(const RowMatrix<Scalar>& m, double tol = kUnitNormTolerance) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    if (std::abs(double(m.row(r).norm()) - 1.0) > tol) return false;
  }
  return true;
}

std::vector<std::byte> read_file_bytes(const std::filesystem::path& path);
/// Writes to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::byte> bytes);

}  // namespace cafo
