#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>

#include "cafo/cache.hpp"
#include "cafo/ensemble.hpp"

namespace cafo {

/// Which fused logits the cross-entropy loss is taken on.
enum class LossStream {
  Ensemble,  // adaptive fusion against `baseline`
  ClipOnly,  // zero-shot stream + CLIP cache stream
  DinoOnly,  // DINO cache stream alone
};

struct EpochMetrics {
  std::uint32_t epoch = 0;  // 1-based
  double loss = 0;
  double train_acc = 0;
};

/// `epoch=<i> loss=<f> train_acc=<f>`
std::string format_epoch(const EpochMetrics& m);

struct TrainOptions {
  LossStream loss_stream = LossStream::Ensemble;
  Stream baseline = Stream::Zs;
  bool ensemble_raw = false;
  /// Treat the softmaxed ensemble weights as constants in the backward pass.
  bool detach_weights = false;
  /// Project key rows back onto the unit sphere after each update.
  bool renormalize_keys = true;
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct LossAndGrads {
  double loss = 0;
  RowMatrix<double> grad_clip;  // same shape as keys_clip
  RowMatrix<double> grad_dino;  // same shape as keys_dino
  RowMatrix<double> fused;      // batch x N logits the loss was taken on
};

/// Mean cross-entropy of softmax(fused logits) and its gradient with respect to
/// both key matrices. `batch_zs` is the frozen zero-shot stream for the batch.
LossAndGrads loss_and_grads(const CacheModel& cache, const EmbeddingMatrix& batch_clip,
                            const EmbeddingMatrix& batch_dino, const LabelSet& batch_labels,
                            const RowMatrix<double>& batch_zs, const TrainOptions& opts = {});

LossAndGrads loss_and_grads(const CacheModel& cache, const EmbeddingMatrix& batch_clip,
                            const EmbeddingMatrix& batch_dino, const LabelSet& batch_labels,
                            const TextClassifier& tc, const TrainOptions& opts = {});

struct AdamWParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamWMoments {
  RowMatrix<double> first;
  RowMatrix<double> second;

  static AdamWMoments zeros_like(const RowMatrix<double>& p) {
    return {RowMatrix<double>::Zero(p.rows(), p.cols()), RowMatrix<double>::Zero(p.rows(), p.cols())};
  }
};

/// base_lr * 0.5 * (1 + cos(pi * step / total)); zero once step >= total.
double cosine_lr(double base_lr, std::size_t step, std::size_t total_steps);

/// One decoupled-weight-decay Adam update. `step` is 1-based (bias correction).
void adamw_update(RowMatrix<double>& param, const RowMatrix<double>& grad, AdamWMoments& moments, double lr,
                  std::size_t step, const AdamWParams& params);

struct TrainState {
  CacheModel cache;
  AdamWMoments clip_moments;
  AdamWMoments dino_moments;
  std::size_t step = 0;
  std::size_t total_steps = 0;
  double base_lr = 1e-4;
  AdamWParams adam;
  bool renormalize_keys = true;

  static TrainState start(CacheModel cache, std::size_t total_steps, double base_lr, double weight_decay,
                          bool renormalize_keys = true);
};

/// Applies one AdamW step at lr = cosine_lr(base_lr, step, total_steps) and
/// advances the step counter.
TrainState adamw_step(TrainState state, const RowMatrix<double>& grad_clip, const RowMatrix<double>& grad_dino);

/// Fine-tunes the cache keys on the support set with shuffled mini-batches.
CacheModel train(CacheModel cache, const EmbeddingMatrix& support_clip, const EmbeddingMatrix& support_dino,
                 const LabelSet& support_labels, const TextClassifier& tc, const FewShotConfig& cfg,
                 const TrainOptions& opts = {});

}  // namespace cafo
