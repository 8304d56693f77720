#include "cafo/expansion.hpp"

#include <algorithm>
#include <numeric>

namespace cafo {

void CandidatePool::validate() const {
  if (clip.rows() != Eigen::Index(labels.size()) || dino.rows() != Eigen::Index(labels.size())) {
    throw Error(ErrorCode::ShapeMismatch, "pool fields have different row counts");
  }
  cafo::validate(labels);
}

CandidatePool empty_pool(Eigen::Index clip_dim, Eigen::Index dino_dim, std::uint32_t num_classes) {
  CandidatePool p;
  p.clip.data.resize(0, clip_dim);
  p.clip.normalized = true;
  p.dino.data.resize(0, dino_dim);
  p.dino.normalized = true;
  p.labels.num_classes = num_classes;
  return p;
}

Vector<double> score_candidates(const CandidatePool& pool, const TextClassifier& tc) {
  pool.validate();
  if (pool.labels.num_classes != tc.num_classes()) {
    throw Error(ErrorCode::ShapeMismatch, "pool and text classifier disagree on class count");
  }
  if (!pool.empty()) check_same_cols(pool.clip.data, tc.class_features.data, "score_candidates");
  Vector<double> scores(Eigen::Index(pool.size()));
  for (std::size_t i = 0; i < pool.size(); ++i) {
    scores(Eigen::Index(i)) = pool.clip.data.row(Eigen::Index(i)).dot(tc.class_features.data.row(pool.labels[i]));
  }
  return scores;
}

std::vector<std::size_t> select_top_k_indices(const LabelSet& labels, const Vector<double>& scores, std::size_t k) {
  if (scores.size() != Eigen::Index(labels.size())) {
    throw Error(ErrorCode::ShapeMismatch, "one score per candidate required");
  }
  validate(labels);
  std::vector<std::vector<std::size_t>> by_class(labels.num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);

  std::vector<std::size_t> out;
  out.reserve(k * labels.num_classes);
  if (k == 0) return out;
  for (std::uint32_t c = 0; c < labels.num_classes; ++c) {
    auto& members = by_class[c];
    if (members.size() < k) {
      throw Error(ErrorCode::InsufficientCandidates, "class " + std::to_string(c) + " has " +
                                                         std::to_string(members.size()) + ", need " +
                                                         std::to_string(k));
    }
    // Member lists are in ascending index order, so a stable sort keeps lower indices first on ties.
    std::stable_sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
      return scores(Eigen::Index(a)) > scores(Eigen::Index(b));
    });
    out.insert(out.end(), members.begin(), members.begin() + std::ptrdiff_t(k));
  }
  return out;
}

CandidatePool select_rows(const CandidatePool& pool, const std::vector<std::size_t>& rows) {
  CandidatePool out = empty_pool(pool.clip.cols(), pool.dino.cols(), pool.labels.num_classes);
  out.clip.data.resize(Eigen::Index(rows.size()), pool.clip.cols());
  out.dino.data.resize(Eigen::Index(rows.size()), pool.dino.cols());
  out.clip.normalized = pool.clip.normalized;
  out.dino.normalized = pool.dino.normalized;
  out.labels.labels.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= pool.size()) throw Error(ErrorCode::ShapeMismatch, "row index out of range");
    out.clip.data.row(Eigen::Index(i)) = pool.clip.data.row(Eigen::Index(rows[i]));
    out.dino.data.row(Eigen::Index(i)) = pool.dino.data.row(Eigen::Index(rows[i]));
    out.labels.labels.push_back(pool.labels[rows[i]]);
  }
  return out;
}

CandidatePool select_top_k(const CandidatePool& pool, const Vector<double>& scores, std::size_t k) {
  pool.validate();
  return select_rows(pool, select_top_k_indices(pool.labels, scores, k));
}

SupportSet expand_support(const SupportSet& real, const CandidatePool& filtered) {
  real.validate();
  filtered.validate();
  if (real.empty()) return filtered;
  if (filtered.empty()) {
    // Still regroup by class so the layout matches the non-empty case.
    std::vector<std::size_t> order(real.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return real.labels[a] < real.labels[b]; });
    return select_rows(real, order);
  }
  if (real.clip.cols() != filtered.clip.cols() || real.dino.cols() != filtered.dino.cols() ||
      real.labels.num_classes != filtered.labels.num_classes) {
    throw Error(ErrorCode::ShapeMismatch, "real and synthetic sets have different shapes");
  }

  const std::uint32_t n = real.labels.num_classes;
  SupportSet out = empty_pool(real.clip.cols(), real.dino.cols(), n);
  const auto total = Eigen::Index(real.size() + filtered.size());
  out.clip.data.resize(total, real.clip.cols());
  out.dino.data.resize(total, real.dino.cols());
  out.clip.normalized = real.clip.normalized && filtered.clip.normalized;
  out.dino.normalized = real.dino.normalized && filtered.dino.normalized;
  Eigen::Index row = 0;
  for (std::uint32_t c = 0; c < n; ++c) {
    for (const SupportSet* src : {&real, &filtered}) {
      for (std::size_t i = 0; i < src->size(); ++i) {
        if (src->labels[i] != c) continue;
        out.clip.data.row(row) = src->clip.data.row(Eigen::Index(i));
        out.dino.data.row(row) = src->dino.data.row(Eigen::Index(i));
        out.labels.labels.push_back(c);
        ++row;
      }
    }
  }
  return out;
}

}  // namespace cafo
