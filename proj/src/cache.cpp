#include "cafo/cache.hpp"

#include <vector>

namespace cafo {

void FewShotConfig::validate() const {
  if (num_classes < 2) throw Error(ErrorCode::InvalidArgument, "num_classes must be >= 2");
  if (shots + synthetic_shots < 1) throw Error(ErrorCode::InvalidArgument, "shots + synthetic_shots must be >= 1");
  if (feature_dim < 1) throw Error(ErrorCode::InvalidArgument, "feature_dim must be >= 1");
  if (!(beta > 0) || !std::isfinite(beta)) throw Error(ErrorCode::InvalidArgument, "beta must be positive");
  if (!(learning_rate >= 0)) throw Error(ErrorCode::InvalidArgument, "learning_rate must be >= 0");
  if (!(weight_decay >= 0)) throw Error(ErrorCode::InvalidArgument, "weight_decay must be >= 0");
  if (batch_size < 1) throw Error(ErrorCode::InvalidArgument, "batch_size must be >= 1");
}

TextClassifier build_text_classifier(const EmbeddingMatrix& per_prompt_features, const LabelSet& prompt_class_map) {
  if (std::size_t(per_prompt_features.rows()) != prompt_class_map.size()) {
    throw Error(ErrorCode::ShapeMismatch, "prompt features and class map differ in length");
  }
  validate(prompt_class_map);
  const auto n = prompt_class_map.num_classes;
  EmbeddingMatrix sums;
  sums.data = RowMatrix<double>::Zero(n, per_prompt_features.cols());
  std::vector<std::size_t> counts(n, 0);
  for (std::size_t i = 0; i < prompt_class_map.size(); ++i) {
    sums.data.row(prompt_class_map[i]) += per_prompt_features.data.row(Eigen::Index(i));
    ++counts[prompt_class_map[i]];
  }
  for (std::uint32_t c = 0; c < n; ++c) {
    if (counts[c] == 0) throw Error(ErrorCode::EmptyClass, "class " + std::to_string(c) + " has no prompts");
    sums.data.row(c) /= double(counts[c]);
  }
  return TextClassifier{l2_normalize_rows(std::move(sums))};
}

RowMatrix<double> one_hot(const LabelSet& labels) {
  validate(labels);
  RowMatrix<double> v = RowMatrix<double>::Zero(Eigen::Index(labels.size()), labels.num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) v(Eigen::Index(i), labels[i]) = 1.0;
  return v;
}

CacheModel build_cache(const EmbeddingMatrix& support_clip, const EmbeddingMatrix& support_dino,
                       const LabelSet& labels, const FewShotConfig& cfg) {
  if (support_clip.rows() != support_dino.rows() || std::size_t(support_clip.rows()) != labels.size()) {
    throw Error(ErrorCode::ShapeMismatch, "support matrices and labels must have equal row counts");
  }
  if (labels.empty()) throw Error(ErrorCode::ShapeMismatch, "empty support set");
  if (labels.num_classes != cfg.num_classes) {
    throw Error(ErrorCode::ShapeMismatch, "label set class count differs from config");
  }
  if (!support_clip.normalized || !support_dino.normalized) {
    throw Error(ErrorCode::InvalidArgument, "support features must be row-normalized");
  }
  if (!(cfg.beta > 0)) throw Error(ErrorCode::InvalidArgument, "beta must be positive");
  std::vector<bool> seen(labels.num_classes, false);
  validate(labels);
  for (auto l : labels.labels) seen[l] = true;
  for (std::uint32_t c = 0; c < labels.num_classes; ++c) {
    if (!seen[c]) throw Error(ErrorCode::MissingClass, "class " + std::to_string(c) + " absent from support labels");
  }

  CacheModel cache;
  cache.keys_clip = support_clip;
  cache.keys_dino = support_dino;
  cache.values = one_hot(labels);
  cache.labels = labels;
  cache.beta = cfg.beta;
  cache.config = cfg;
  return cache;
}

}  // namespace cafo
