#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "cafo/tensor_io.hpp"

namespace cafo {

/// The three logit streams, in the column order used by ensemble weight matrices.
enum class Stream : int { Zs = 0, Clip = 1, Dino = 2 };

inline constexpr int index(Stream s) { return static_cast<int>(s); }

/// The two streams fused against `baseline`, in ascending stream order.
inline constexpr std::array<Stream, 2> others(Stream baseline) {
  switch (baseline) {
    case Stream::Zs: return {Stream::Clip, Stream::Dino};
    case Stream::Clip: return {Stream::Zs, Stream::Dino};
    case Stream::Dino: return {Stream::Zs, Stream::Clip};
  }
  return {Stream::Clip, Stream::Dino};
}

inline constexpr double kConstantStdThreshold = 1e-12;

/// Population standard deviation below this fraction of the vector's scale
/// marks a constant (degenerate) logit vector.
template <typename Derived>
bool is_constant(const Eigen::MatrixBase<Derived>& x, typename Derived::Scalar stddev) {
  using Scalar = typename Derived::Scalar;
  const Scalar scale = std::max(Scalar(1), x.cwiseAbs().maxCoeff());
  return stddev <= Scalar(kConstantStdThreshold) * scale;
}

/// (x - mean) / popstd. Constant vectors map to zero and set *constant.
template <typename Derived>
Vector<typename Derived::Scalar> znorm(const Eigen::MatrixBase<Derived>& x, bool* constant = nullptr) {
  using Scalar = typename Derived::Scalar;
  if (x.size() < 2) throw Error(ErrorCode::ShapeMismatch, "znorm needs at least two logits");
  const Vector<Scalar> v = x.derived().template cast<Scalar>().reshaped();
  const Scalar mean = v.mean();
  const Vector<Scalar> centered = v.array() - mean;
  const Scalar sd = std::sqrt(centered.squaredNorm() / Scalar(v.size()));
  const bool flat = is_constant(v, sd);
  if (constant) *constant = flat;
  if (flat) return Vector<Scalar>::Zero(v.size());
  return centered / sd;
}

/// Row-wise znorm; returns the number of constant rows.
template <typename Scalar>
std::size_t znorm_rows(const RowMatrix<Scalar>& logits, RowMatrix<Scalar>& out) {
  out.resize(logits.rows(), logits.cols());
  std::size_t constant_rows = 0;
  for (Eigen::Index q = 0; q < logits.rows(); ++q) {
    bool flat = false;
    out.row(q) = znorm(logits.row(q), &flat).transpose();
    constant_rows += flat ? 1 : 0;
  }
  return constant_rows;
}

template <typename Scalar>
RowMatrix<Scalar> znorm_rows(const RowMatrix<Scalar>& logits) {
  RowMatrix<Scalar> out;
  znorm_rows(logits, out);
  return out;
}

template <typename Scalar>
struct SimilarityWeights {
  Scalar clip;
  Scalar dino;
};

/// Inner products of the normalized cache streams with the normalized baseline.
template <typename A, typename B, typename C>
SimilarityWeights<typename A::Scalar> similarity_weights(const Eigen::MatrixBase<A>& pz, const Eigen::MatrixBase<B>& pc,
                                                         const Eigen::MatrixBase<C>& pd) {
  if (pz.size() != pc.size() || pz.size() != pd.size()) {
    throw Error(ErrorCode::ShapeMismatch, "similarity_weights: stream lengths differ");
  }
  return {pc.reshaped().dot(pz.reshaped()), pd.reshaped().dot(pz.reshaped())};
}

/// Numerically stable two-way softmax.
template <typename Scalar>
std::pair<Scalar, Scalar> softmax2(Scalar a, Scalar b) {
  const Scalar m = std::max(a, b);
  const Scalar ea = std::exp(a - m);
  const Scalar eb = std::exp(b - m);
  return {ea / (ea + eb), eb / (ea + eb)};
}

struct FuseOptions {
  Stream baseline = Stream::Zs;
  /// Weights still come from normalized streams; the sum uses raw logits.
  bool raw_streams = false;
};

template <typename Scalar>
struct EnsembleResult {
  Stream baseline = Stream::Zs;
  std::array<RowMatrix<Scalar>, 3> normalized;
  // Q x 3, indexed by Stream. The baseline column holds weight 0 and soft weight 1.
  RowMatrix<Scalar> weights;
  RowMatrix<Scalar> soft_weights;
  RowMatrix<Scalar> fused;
  std::size_t constant_rows = 0;

  const RowMatrix<Scalar>& z(Stream s) const { return normalized[index(s)]; }
  Scalar w(Eigen::Index q, Stream s) const { return weights(q, index(s)); }
  Scalar sw(Eigen::Index q, Stream s) const { return soft_weights(q, index(s)); }
  Scalar w_clip(Eigen::Index q) const { return w(q, Stream::Clip); }
  Scalar w_dino(Eigen::Index q) const { return w(q, Stream::Dino); }
  Scalar sw_clip(Eigen::Index q) const { return sw(q, Stream::Clip); }
  Scalar sw_dino(Eigen::Index q) const { return sw(q, Stream::Dino); }
};

template <typename Scalar>
void check_streams(const RowMatrix<Scalar>& pz, const RowMatrix<Scalar>& pc, const RowMatrix<Scalar>& pd) {
  if (pz.rows() != pc.rows() || pz.rows() != pd.rows() || pz.cols() != pc.cols() || pz.cols() != pd.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "logit streams must share shape");
  }
  if (pz.cols() < 2) throw Error(ErrorCode::ShapeMismatch, "need at least two classes");
}

/// Adaptive ensemble: z-score every stream, weight the two non-baseline
/// streams by their similarity to the baseline, softmax the two weights and
/// add the weighted streams to the baseline. Rows are independent queries.
template <typename Scalar>
EnsembleResult<Scalar> fuse(const RowMatrix<Scalar>& pz, const RowMatrix<Scalar>& pc, const RowMatrix<Scalar>& pd,
                            const FuseOptions& opts = {}) {
  check_streams(pz, pc, pd);
  EnsembleResult<Scalar> r;
  r.baseline = opts.baseline;
  const std::array<const RowMatrix<Scalar>*, 3> raw{&pz, &pc, &pd};
  for (int s = 0; s < 3; ++s) r.constant_rows += znorm_rows(*raw[s], r.normalized[s]);

  const Eigen::Index q_count = pz.rows();
  const int b = index(opts.baseline);
  const auto [o1, o2] = others(opts.baseline);
  const int i1 = index(o1), i2 = index(o2);

  r.weights = RowMatrix<Scalar>::Zero(q_count, 3);
  r.soft_weights = RowMatrix<Scalar>::Zero(q_count, 3);
  r.fused.resize(q_count, pz.cols());
  for (Eigen::Index q = 0; q < q_count; ++q) {
    const auto zb = r.normalized[b].row(q);
    const Scalar w1 = r.normalized[i1].row(q).dot(zb);
    const Scalar w2 = r.normalized[i2].row(q).dot(zb);
    const auto [s1, s2] = softmax2(w1, w2);
    r.weights(q, i1) = w1;
    r.weights(q, i2) = w2;
    r.soft_weights(q, b) = Scalar(1);
    r.soft_weights(q, i1) = s1;
    r.soft_weights(q, i2) = s2;
    if (opts.raw_streams) {
      r.fused.row(q) = raw[b]->row(q) + s1 * raw[i1]->row(q) + s2 * raw[i2]->row(q);
    } else {
      r.fused.row(q) = zb + s1 * r.normalized[i1].row(q) + s2 * r.normalized[i2].row(q);
    }
  }
  return r;
}

template <typename Scalar>
EnsembleResult<Scalar> fuse_with_baseline(Stream baseline, const RowMatrix<Scalar>& pz, const RowMatrix<Scalar>& pc,
                                          const RowMatrix<Scalar>& pd) {
  return fuse(pz, pc, pd, FuseOptions{baseline, false});
}

/// Non-adaptive pooling of the two cache streams, added to the zero-shot stream.
template <typename Scalar>
RowMatrix<Scalar> fuse_average(const RowMatrix<Scalar>& pz, const RowMatrix<Scalar>& pc, const RowMatrix<Scalar>& pd) {
  check_streams(pz, pc, pd);
  return znorm_rows(pz) + Scalar(0.5) * (znorm_rows(pc) + znorm_rows(pd));
}

template <typename Scalar>
RowMatrix<Scalar> fuse_maximum(const RowMatrix<Scalar>& pz, const RowMatrix<Scalar>& pc, const RowMatrix<Scalar>& pd) {
  check_streams(pz, pc, pd);
  return znorm_rows(pz) + znorm_rows(pc).cwiseMax(znorm_rows(pd));
}

/// Zero-shot stream plus one cache stream: the softmax over a single weight is 1.
template <typename Scalar>
RowMatrix<Scalar> fuse_single_cache(const RowMatrix<Scalar>& pz, const RowMatrix<Scalar>& p_cache) {
  check_streams(pz, p_cache, p_cache);
  return znorm_rows(pz) + znorm_rows(p_cache);
}

/// Row-wise argmax; ties go to the lowest class index.
template <typename Scalar>
std::vector<std::uint32_t> argmax_rows(const RowMatrix<Scalar>& logits) {
  std::vector<std::uint32_t> out(std::size_t(logits.rows()));
  for (Eigen::Index q = 0; q < logits.rows(); ++q) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < logits.cols(); ++c) {
      if (logits(q, c) > logits(q, best)) best = c;
    }
    out[std::size_t(q)] = std::uint32_t(best);
  }
  return out;
}

inline double accuracy(std::span<const std::uint32_t> predictions, std::span<const std::uint32_t> labels) {
  if (predictions.size() != labels.size()) throw Error(ErrorCode::ShapeMismatch, "prediction/label count mismatch");
  if (labels.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i] ? 1 : 0;
  return double(hits) / double(labels.size());
}

template <typename Scalar>
double accuracy(const RowMatrix<Scalar>& logits, const LabelSet& labels) {
  const auto preds = argmax_rows(logits);
  return accuracy(preds, labels.labels);
}

}  // namespace cafo
