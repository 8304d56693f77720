#pragma once

// Loop-based cross-entropy of the fused logits, plus a central-difference
// gradient over every key entry. Soft weights can be pinned to fixed values so
// the detached-weights gradient has a matching finite-difference target.

#include <cmath>
#include <functional>
#include <vector>

#include "cafo/trainer.hpp"
#include "oracle.hpp"

namespace oracle {

struct LossProblem {
  Mat batch_clip, batch_dino, batch_zs;
  std::vector<std::uint32_t> batch_labels;
  Mat keys_clip, keys_dino;
  std::vector<std::uint32_t> key_labels;
  std::uint32_t classes = 0;
  double beta = 1.0;
  cafo::LossStream stream = cafo::LossStream::Ensemble;
  int baseline = 0;
  bool raw = false;
};

/// Soft weights per query (3 entries each) from the current keys.
inline Mat soft_weights(const LossProblem& p) {
  const Mat pc = cache_logits(p.batch_clip, p.keys_clip, p.key_labels, p.classes, p.beta);
  const Mat pd = cache_logits(p.batch_dino, p.keys_dino, p.key_labels, p.classes, p.beta);
  Mat out;
  for (std::size_t q = 0; q < p.batch_zs.size(); ++q) {
    const Fused f = fuse(p.batch_zs[q], pc[q], pd[q], p.baseline, p.raw);
    out.push_back({f.sw[0], f.sw[1], f.sw[2]});
  }
  return out;
}

inline double loss(const LossProblem& p, const Mat* pinned_weights = nullptr) {
  const Mat pc = cache_logits(p.batch_clip, p.keys_clip, p.key_labels, p.classes, p.beta);
  const Mat pd = cache_logits(p.batch_dino, p.keys_dino, p.key_labels, p.classes, p.beta);
  double total = 0;
  for (std::size_t q = 0; q < p.batch_zs.size(); ++q) {
    const Vec* raw_in[3] = {&p.batch_zs[q], &pc[q], &pd[q]};
    Vec z[3];
    for (int s = 0; s < 3; ++s) z[s] = znorm(*raw_in[s]);
    double coef[3] = {0, 0, 0};
    switch (p.stream) {
      case cafo::LossStream::Ensemble: {
        const Fused f = fuse(p.batch_zs[q], pc[q], pd[q], p.baseline, p.raw);
        for (int s = 0; s < 3; ++s) coef[s] = pinned_weights ? (*pinned_weights)[q][std::size_t(s)] : f.sw[s];
        break;
      }
      case cafo::LossStream::ClipOnly:
        coef[0] = coef[1] = 1;
        break;
      case cafo::LossStream::DinoOnly:
        coef[2] = 1;
        break;
    }
    Vec f(p.classes, 0.0);
    for (std::size_t c = 0; c < p.classes; ++c) {
      for (int s = 0; s < 3; ++s) f[c] += coef[s] * (p.raw ? (*raw_in[s])[c] : z[s][c]);
    }
    double m = f[0];
    for (double v : f) m = std::max(m, v);
    double se = 0;
    for (double v : f) se += std::exp(v - m);
    total += m + std::log(se) - f[p.batch_labels[q]];
  }
  return total / double(p.batch_zs.size());
}

/// Central differences of `loss` over every entry of one key matrix.
inline Mat finite_difference(LossProblem p, bool dino_keys, double h, const Mat* pinned_weights = nullptr) {
  Mat& keys = dino_keys ? p.keys_dino : p.keys_clip;
  Mat grad(keys.size(), Vec(keys[0].size(), 0.0));
  for (std::size_t i = 0; i < keys.size(); ++i) {
    for (std::size_t j = 0; j < keys[i].size(); ++j) {
      const double saved = keys[i][j];
      keys[i][j] = saved + h;
      const double up = loss(p, pinned_weights);
      keys[i][j] = saved - h;
      const double down = loss(p, pinned_weights);
      keys[i][j] = saved;
      grad[i][j] = (up - down) / (2 * h);
    }
  }
  return grad;
}

}  // namespace oracle
