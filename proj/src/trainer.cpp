#include "cafo/trainer.hpp"

#include <array>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "cafo/random.hpp"

namespace cafo {
namespace {

struct StreamRow {
  Vector<double> raw;
  Vector<double> z;
  double sd = 0;
  bool flat = false;
};

StreamRow normalize(const Eigen::Ref<const Vector<double>>& raw) {
  StreamRow s;
  s.raw = raw;
  const double mean = raw.mean();
  const Vector<double> centered = raw.array() - mean;
  s.sd = std::sqrt(centered.squaredNorm() / double(raw.size()));
  s.flat = is_constant(raw, s.sd);
  s.z = s.flat ? Vector<double>::Zero(raw.size()) : Vector<double>(centered / s.sd);
  return s;
}

// Backward pass of z = (x - mean) / popstd. A constant row was mapped to zero
// and contributes no gradient.
Vector<double> znorm_backward(const StreamRow& s, const Vector<double>& dz) {
  if (s.flat) return Vector<double>::Zero(dz.size());
  const double n = double(dz.size());
  const double mean_dz = dz.sum() / n;
  const double mean_dz_z = dz.dot(s.z) / n;
  return (dz.array() - mean_dz - s.z.array() * mean_dz_z).matrix() / s.sd;
}

EmbeddingMatrix gather_rows(const EmbeddingMatrix& m, std::span<const std::size_t> idx) {
  EmbeddingMatrix out;
  out.data.resize(Eigen::Index(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.data.row(Eigen::Index(i)) = m.data.row(Eigen::Index(idx[i]));
  out.normalized = m.normalized;
  return out;
}

RowMatrix<double> gather_rows(const RowMatrix<double>& m, std::span<const std::size_t> idx) {
  RowMatrix<double> out(Eigen::Index(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(Eigen::Index(i)) = m.row(Eigen::Index(idx[i]));
  return out;
}

void renormalize(EmbeddingMatrix& keys) {
  keys = l2_normalize_rows(std::move(keys));
}

}  // namespace

std::string format_epoch(const EpochMetrics& m) {
  return fmt::format("epoch={} loss={:.6f} train_acc={:.4f}", m.epoch, m.loss, m.train_acc);
}

LossAndGrads loss_and_grads(const CacheModel& cache, const EmbeddingMatrix& batch_clip,
                            const EmbeddingMatrix& batch_dino, const LabelSet& batch_labels,
                            const RowMatrix<double>& batch_zs, const TrainOptions& opts) {
  const Eigen::Index batch = batch_clip.rows();
  const Eigen::Index classes = cache.values.cols();
  if (batch_dino.rows() != batch || std::size_t(batch) != batch_labels.size() || batch_zs.rows() != batch ||
      batch_zs.cols() != classes || batch == 0) {
    throw Error(ErrorCode::ShapeMismatch, "loss_and_grads: batch shapes disagree");
  }
  validate(batch_labels);
  if (batch_labels.num_classes != std::uint32_t(classes)) {
    throw Error(ErrorCode::ShapeMismatch, "loss_and_grads: label class count differs from cache");
  }

  const double beta = cache.beta;
  const RowMatrix<double>& values = cache.values;
  const RowMatrix<double> phi_clip =
      (-beta * (1.0 - affinities(batch_clip, cache.keys_clip).array())).exp().matrix();
  const RowMatrix<double> phi_dino =
      (-beta * (1.0 - affinities(batch_dino, cache.keys_dino).array())).exp().matrix();
  const RowMatrix<double> p_clip = phi_clip * values;
  const RowMatrix<double> p_dino = phi_dino * values;

  RowMatrix<double> d_clip = RowMatrix<double>::Zero(batch, classes);
  RowMatrix<double> d_dino = RowMatrix<double>::Zero(batch, classes);
  LossAndGrads out;
  out.fused.resize(batch, classes);

  double loss_sum = 0;
  for (Eigen::Index q = 0; q < batch; ++q) {
    std::array<StreamRow, 3> s{normalize(batch_zs.row(q).transpose()), normalize(p_clip.row(q).transpose()),
                               normalize(p_dino.row(q).transpose())};
    auto src = [&](int i) -> const Vector<double>& { return opts.ensemble_raw ? s[i].raw : s[i].z; };

    // Forward: fused = sum_i coef_i * src_i.
    std::array<double, 3> coef{0, 0, 0};
    int b = 0, o1 = 0, o2 = 0;
    double sw1 = 0, sw2 = 0;
    switch (opts.loss_stream) {
      case LossStream::Ensemble: {
        b = index(opts.baseline);
        const auto pair = others(opts.baseline);
        o1 = index(pair[0]);
        o2 = index(pair[1]);
        std::tie(sw1, sw2) = softmax2(s[o1].z.dot(s[b].z), s[o2].z.dot(s[b].z));
        coef[b] = 1;
        coef[o1] = sw1;
        coef[o2] = sw2;
        break;
      }
      case LossStream::ClipOnly:
        coef = {1, 1, 0};
        break;
      case LossStream::DinoOnly:
        coef = {0, 0, 1};
        break;
    }
    Vector<double> fused = Vector<double>::Zero(classes);
    for (int i = 0; i < 3; ++i) {
      if (coef[i] != 0) fused += coef[i] * src(i);
    }
    out.fused.row(q) = fused.transpose();

    const auto label = Eigen::Index(batch_labels[std::size_t(q)]);
    const double m = fused.maxCoeff();
    const Vector<double> e = (fused.array() - m).exp();
    const double lse = m + std::log(e.sum());
    loss_sum += lse - fused(label);

    Vector<double> g = e / e.sum();
    g(label) -= 1.0;
    g /= double(batch);

    // Backward into each stream, split into the raw-logit and z-score paths.
    std::array<Vector<double>, 3> d_src, d_z;
    for (int i = 0; i < 3; ++i) {
      d_src[i] = coef[i] * g;
      d_z[i] = Vector<double>::Zero(classes);
    }
    if (opts.loss_stream == LossStream::Ensemble && !opts.detach_weights) {
      const double ds1 = g.dot(src(o1));
      const double ds2 = g.dot(src(o2));
      const double mix = sw1 * ds1 + sw2 * ds2;
      const double dw1 = sw1 * (ds1 - mix);
      const double dw2 = sw2 * (ds2 - mix);
      d_z[o1] += dw1 * s[b].z;
      d_z[o2] += dw2 * s[b].z;
      d_z[b] += dw1 * s[o1].z + dw2 * s[o2].z;
    }
    for (int i = 1; i < 3; ++i) {
      Vector<double> dz = d_z[i];
      Vector<double> dx = Vector<double>::Zero(classes);
      if (opts.ensemble_raw) {
        dx += d_src[i];
      } else {
        dz += d_src[i];
      }
      dx += znorm_backward(s[i], dz);
      (i == 1 ? d_clip : d_dino).row(q) = dx.transpose();
    }
  }

  out.loss = loss_sum / double(batch);
  if (!std::isfinite(out.loss)) throw Error(ErrorCode::NonFiniteLoss, "loss is not finite");

  // p = phi(A) V, phi'(a) = beta * phi(a), A = Q K^T.
  const RowMatrix<double> da_clip = ((d_clip * values.transpose()).array() * (beta * phi_clip.array())).matrix();
  const RowMatrix<double> da_dino = ((d_dino * values.transpose()).array() * (beta * phi_dino.array())).matrix();
  out.grad_clip = da_clip.transpose() * batch_clip.data;
  out.grad_dino = da_dino.transpose() * batch_dino.data;
  return out;
}

LossAndGrads loss_and_grads(const CacheModel& cache, const EmbeddingMatrix& batch_clip,
                            const EmbeddingMatrix& batch_dino, const LabelSet& batch_labels,
                            const TextClassifier& tc, const TrainOptions& opts) {
  return loss_and_grads(cache, batch_clip, batch_dino, batch_labels, zero_shot_logits(batch_clip, tc), opts);
}

double cosine_lr(double base_lr, std::size_t step, std::size_t total_steps) {
  if (total_steps == 0 || step >= total_steps) return 0.0;
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * double(step) / double(total_steps)));
}

void adamw_update(RowMatrix<double>& param, const RowMatrix<double>& grad, AdamWMoments& moments, double lr,
                  std::size_t step, const AdamWParams& p) {
  if (grad.rows() != param.rows() || grad.cols() != param.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "gradient shape differs from parameter");
  }
  moments.first = p.beta1 * moments.first + (1.0 - p.beta1) * grad;
  moments.second = p.beta2 * moments.second + (1.0 - p.beta2) * grad.cwiseProduct(grad);
  const double bc1 = 1.0 - std::pow(p.beta1, double(step));
  const double bc2 = 1.0 - std::pow(p.beta2, double(step));
  param *= 1.0 - lr * p.weight_decay;
  param.array() -= lr * (moments.first.array() / bc1) / ((moments.second.array() / bc2).sqrt() + p.eps);
}

TrainState TrainState::start(CacheModel cache, std::size_t total_steps, double base_lr, double weight_decay,
                             bool renormalize_keys) {
  TrainState s;
  s.clip_moments = AdamWMoments::zeros_like(cache.keys_clip.data);
  s.dino_moments = AdamWMoments::zeros_like(cache.keys_dino.data);
  s.cache = std::move(cache);
  s.total_steps = total_steps;
  s.base_lr = base_lr;
  s.adam.weight_decay = weight_decay;
  s.renormalize_keys = renormalize_keys;
  return s;
}

TrainState adamw_step(TrainState state, const RowMatrix<double>& grad_clip, const RowMatrix<double>& grad_dino) {
  const double lr = cosine_lr(state.base_lr, state.step, state.total_steps);
  ++state.step;
  if (lr == 0.0) {
    // Keep the moment estimates in sync but leave the keys bit-identical.
    AdamWParams frozen = state.adam;
    RowMatrix<double> clip = state.cache.keys_clip.data, dino = state.cache.keys_dino.data;
    adamw_update(clip, grad_clip, state.clip_moments, 0.0, state.step, frozen);
    adamw_update(dino, grad_dino, state.dino_moments, 0.0, state.step, frozen);
    return state;
  }
  adamw_update(state.cache.keys_clip.data, grad_clip, state.clip_moments, lr, state.step, state.adam);
  adamw_update(state.cache.keys_dino.data, grad_dino, state.dino_moments, lr, state.step, state.adam);
  if (state.renormalize_keys) {
    renormalize(state.cache.keys_clip);
    renormalize(state.cache.keys_dino);
  } else {
    state.cache.keys_clip.normalized = false;
    state.cache.keys_dino.normalized = false;
  }
  return state;
}

CacheModel train(CacheModel cache, const EmbeddingMatrix& support_clip, const EmbeddingMatrix& support_dino,
                 const LabelSet& support_labels, const TextClassifier& tc, const FewShotConfig& cfg,
                 const TrainOptions& opts) {
  cfg.validate();
  const std::size_t n = support_labels.size();
  if (support_clip.rows() != Eigen::Index(n) || support_dino.rows() != Eigen::Index(n) || n == 0) {
    throw Error(ErrorCode::ShapeMismatch, "train: support shapes disagree");
  }
  if (cfg.epochs == 0) return cache;

  const std::size_t batch_size = cfg.batch_size;
  const std::size_t steps_per_epoch = (n + batch_size - 1) / batch_size;
  auto state = TrainState::start(std::move(cache), steps_per_epoch * cfg.epochs, cfg.learning_rate, cfg.weight_decay,
                                 opts.renormalize_keys);

  const RowMatrix<double> support_zs = zero_shot_logits(support_clip, tc);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::uint32_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    fisher_yates(order, rng);
    double loss_sum = 0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < n; start += batch_size) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(batch_size, n - start));
      LabelSet labels{{}, support_labels.num_classes};
      labels.labels.reserve(idx.size());
      for (auto i : idx) labels.labels.push_back(support_labels[i]);

      const auto lg = loss_and_grads(state.cache, gather_rows(support_clip, idx), gather_rows(support_dino, idx),
                                     labels, gather_rows(support_zs, idx), opts);
      loss_sum += lg.loss * double(idx.size());
      const auto preds = argmax_rows(lg.fused);
      for (std::size_t i = 0; i < idx.size(); ++i) correct += preds[i] == labels[i] ? 1 : 0;
      state = adamw_step(std::move(state), lg.grad_clip, lg.grad_dino);
    }
    if (opts.on_epoch) opts.on_epoch({epoch, loss_sum / double(n), double(correct) / double(n)});
  }
  return std::move(state.cache);
}

}  // namespace cafo
