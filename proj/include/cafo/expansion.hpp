#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "cafo/cache.hpp"

namespace cafo {

/// Paired CLIP/DINO features with one label per row. Used both for candidate
/// synthetic samples and for support sets; zero rows is a valid (empty) set.
struct CandidatePool {
  EmbeddingMatrix clip;
  EmbeddingMatrix dino;
  LabelSet labels;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }

  /// Throws ShapeMismatch unless all three fields have the same row count.
  void validate() const;
};

using SupportSet = CandidatePool;

/// An empty set with the given feature widths and class count.
CandidatePool empty_pool(Eigen::Index clip_dim, Eigen::Index dino_dim, std::uint32_t num_classes);

/// Score of candidate i: its CLIP feature against its own class's text feature.
Vector<double> score_candidates(const CandidatePool& pool, const TextClassifier& tc);

/// Indices of the k highest-scoring candidates of each class, ordered by
/// (class, descending score); ties go to the lower original index.
std::vector<std::size_t> select_top_k_indices(const LabelSet& labels, const Vector<double>& scores, std::size_t k);

CandidatePool select_rows(const CandidatePool& pool, const std::vector<std::size_t>& rows);

CandidatePool select_top_k(const CandidatePool& pool, const Vector<double>& scores, std::size_t k);

/// Real rows then synthetic rows, grouped into class blocks in class order.
/// Rows are copied bit-for-bit.
SupportSet expand_support(const SupportSet& real, const CandidatePool& filtered);

}  // namespace cafo
