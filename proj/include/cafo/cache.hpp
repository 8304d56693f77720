#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "cafo/tensor_io.hpp"

namespace cafo {

struct FewShotConfig {
  std::uint32_t num_classes = 2;
  std::uint32_t shots = 0;
  std::uint32_t synthetic_shots = 0;
  std::uint32_t feature_dim = 1;
  double beta = 0.6;
  std::uint32_t epochs = 20;
  double learning_rate = 1e-4;
  std::uint32_t batch_size = 64;
  double weight_decay = 0.01;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Per-class text classifier: row n is the normalized mean of class n's
/// prompt features.
struct TextClassifier {
  EmbeddingMatrix class_features;

  std::uint32_t num_classes() const { return std::uint32_t(class_features.rows()); }
};

/// Dual-key cache. Both key matrices share the one-hot value matrix; only the
/// keys are ever updated by training.
struct CacheModel {
  EmbeddingMatrix keys_clip;
  EmbeddingMatrix keys_dino;
  RowMatrix<double> values;
  LabelSet labels;
  double beta = 0.6;
  FewShotConfig config;

  Eigen::Index size() const { return values.rows(); }
  std::uint32_t num_classes() const { return std::uint32_t(values.cols()); }
};

inline constexpr double kAffinityTolerance = 1e-4;

TextClassifier build_text_classifier(const EmbeddingMatrix& per_prompt_features, const LabelSet& prompt_class_map);

RowMatrix<double> one_hot(const LabelSet& labels);

CacheModel build_cache(const EmbeddingMatrix& support_clip, const EmbeddingMatrix& support_dino,
                       const LabelSet& labels, const FewShotConfig& cfg);

/// exp(-beta * (1 - x)): maps a cosine affinity to a positive retrieval weight.
template <typename Scalar>
Scalar modulator(Scalar x, Scalar beta) {
  return std::exp(-beta * (Scalar(1) - x));
}

template <typename Scalar>
void check_same_cols(const RowMatrix<Scalar>& a, const RowMatrix<Scalar>& b, const char* what) {
  if (a.cols() != b.cols()) {
    throw Error(ErrorCode::ShapeMismatch, std::string(what) + ": column counts " + std::to_string(a.cols()) +
                                              " vs " + std::to_string(b.cols()));
  }
}

/// Query-key affinities Q K^T. The [-1, 1] range is only enforced when both
/// operands are flagged normalized.
template <typename Scalar>
RowMatrix<Scalar> affinities(const BasicEmbeddings<Scalar>& query, const BasicEmbeddings<Scalar>& keys) {
  check_same_cols(query.data, keys.data, "affinities");
  RowMatrix<Scalar> a = query.data * keys.data.transpose();
  if (query.normalized && keys.normalized) {
    const Scalar lim = Scalar(1 + kAffinityTolerance);
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      for (Eigen::Index j = 0; j < a.cols(); ++j) {
        if (!(std::abs(a(i, j)) <= lim)) {
          throw Error(ErrorCode::AffinityOutOfRange, "query " + std::to_string(i) + " key " + std::to_string(j) +
                                                         " affinity " + std::to_string(double(a(i, j))));
        }
      }
    }
  }
  return a;
}

/// phi(A) V for an affinity matrix A (queries x keys).
template <typename Scalar>
RowMatrix<Scalar> modulated_logits(const RowMatrix<Scalar>& affinity, const RowMatrix<Scalar>& values, Scalar beta) {
  if (affinity.cols() != values.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "affinity columns must match value rows");
  }
  return (-beta * (Scalar(1) - affinity.array())).exp().matrix() * values;
}

/// phi(Q K^T) V, with phi applied elementwise before the product.
template <typename Scalar>
RowMatrix<Scalar> cache_logits(const BasicEmbeddings<Scalar>& query, const BasicEmbeddings<Scalar>& keys,
                               const RowMatrix<Scalar>& values, Scalar beta) {
  if (keys.rows() != values.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "cache_logits: keys and values row counts differ");
  }
  return modulated_logits(affinities(query, keys), values, beta);
}

template <typename Scalar>
RowMatrix<Scalar> zero_shot_logits(const BasicEmbeddings<Scalar>& query_clip,
                                   const BasicEmbeddings<Scalar>& class_features) {
  check_same_cols(query_clip.data, class_features.data, "zero_shot_logits");
  return query_clip.data * class_features.data.transpose();
}

inline RowMatrix<double> zero_shot_logits(const EmbeddingMatrix& query_clip, const TextClassifier& tc) {
  return zero_shot_logits(query_clip, tc.class_features);
}

}  // namespace cafo
