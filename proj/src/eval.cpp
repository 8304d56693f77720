#include "cafo/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include <fmt/format.h>

#include "cafo/random.hpp"

namespace cafo {
namespace {

constexpr Eigen::Index kQueryChunk = 256;

const char* stream_name(Stream s) {
  switch (s) {
    case Stream::Zs: return "zs";
    case Stream::Clip: return "clip";
    case Stream::Dino: return "dino";
  }
  return "zs";
}

double parse_double(std::string_view key, std::string_view text) {
  const std::string s(text);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw Error(ErrorCode::InvalidArgument, "bad value for " + std::string(key) + ": " + s);
  }
  return v;
}

}  // namespace

void RunOptions::validate() const {
  cfg.validate();
  if (models != ModelSubset::Both) {
    if (ensemble != EnsembleMode::Adaptive || baseline != Stream::Zs) {
      throw Error(ErrorCode::InvalidArgument, "ensemble mode and baseline only apply when both caches are used");
    }
  }
  if (models == ModelSubset::DinoOnly && loss_stream == LossStream::ClipOnly) {
    throw Error(ErrorCode::InvalidArgument, "dino-only runs cannot train on the CLIP stream");
  }
  if (shot_indices && shot_indices->size() != std::size_t(cfg.shots) * cfg.num_classes) {
    throw Error(ErrorCode::InvalidArgument, "shot index list must hold shots * num_classes entries");
  }
}

std::string RunOptions::mode_name() const {
  std::string name;
  switch (models) {
    case ModelSubset::ClipOnly: name = "clip-only"; break;
    case ModelSubset::DinoOnly: name = "dino-only"; break;
    case ModelSubset::Both:
      switch (ensemble) {
        case EnsembleMode::Adaptive: name = std::string("adaptive-") + stream_name(baseline); break;
        case EnsembleMode::Average: name = "average"; break;
        case EnsembleMode::Maximum: name = "maximum"; break;
      }
      break;
  }
  if (ensemble_raw) name += "-raw";
  return name;
}

TrainOptions RunOptions::train_options() const {
  TrainOptions t;
  switch (models) {
    case ModelSubset::Both: t.loss_stream = loss_stream; break;
    case ModelSubset::ClipOnly: t.loss_stream = LossStream::ClipOnly; break;
    case ModelSubset::DinoOnly: t.loss_stream = LossStream::DinoOnly; break;
  }
  t.baseline = ensemble == EnsembleMode::Adaptive ? baseline : Stream::Zs;
  t.ensemble_raw = ensemble_raw;
  t.detach_weights = detach_weights;
  t.renormalize_keys = renormalize_keys;
  t.on_epoch = on_epoch;
  return t;
}

std::string format_report(const AccuracyReport& r) {
  return fmt::format("mode={} shots={} synth={} beta={} acc_zs={:.4f} acc_clip={:.4f} acc_dino={:.4f} acc_ensemble={:.4f}",
                     r.mode, r.shots, r.synth, r.beta, r.acc_zs, r.acc_clip, r.acc_dino, r.acc_ensemble);
}

AccuracyReport parse_report(std::string_view line) {
  AccuracyReport r;
  std::istringstream in{std::string(line)};
  std::string token;
  unsigned seen = 0;
  while (in >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::InvalidArgument, "malformed report token: " + token);
    const std::string key = token.substr(0, eq);
    const std::string_view value = std::string_view(token).substr(eq + 1);
    if (key == "mode") r.mode = value;
    else if (key == "shots") r.shots = std::uint32_t(parse_double(key, value));
    else if (key == "synth") r.synth = std::uint32_t(parse_double(key, value));
    else if (key == "beta") r.beta = parse_double(key, value);
    else if (key == "acc_zs") r.acc_zs = parse_double(key, value);
    else if (key == "acc_clip") r.acc_clip = parse_double(key, value);
    else if (key == "acc_dino") r.acc_dino = parse_double(key, value);
    else if (key == "acc_ensemble") r.acc_ensemble = parse_double(key, value);
    else throw Error(ErrorCode::InvalidArgument, "unknown report key: " + key);
    ++seen;
  }
  if (seen != 8) throw Error(ErrorCode::InvalidArgument, "report line must have 8 fields");
  return r;
}

namespace {
void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::as_bytes(std::span(text.data(), text.size())));
}
}  // namespace

void report_write(const AccuracyReport& r, const std::filesystem::path& path) {
  write_text(path, format_report(r) + "\n");
}

std::string format_sweep(const std::vector<SweepRow>& rows) {
  std::string out = "value,accuracy\n";
  for (const auto& row : rows) out += fmt::format("{},{:.4f}\n", row.value, row.accuracy);
  return out;
}

void sweep_write(const std::vector<SweepRow>& rows, const std::filesystem::path& path) {
  write_text(path, format_sweep(rows));
}

std::vector<std::size_t> sample_shots(const LabelSet& labels, std::uint32_t shots, std::uint64_t seed) {
  validate(labels);
  std::vector<std::vector<std::size_t>> by_class(labels.num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> out;
  out.reserve(std::size_t(shots) * labels.num_classes);
  for (std::uint32_t c = 0; c < labels.num_classes; ++c) {
    auto& members = by_class[c];
    if (members.size() < shots) {
      throw Error(ErrorCode::NotEnoughSamples, "class " + std::to_string(c) + " has " +
                                                   std::to_string(members.size()) + " samples, need " +
                                                   std::to_string(shots));
    }
    for (std::size_t i = 0; i < shots; ++i) {
      const auto j = i + std::size_t(uniform_index(rng, members.size() - i));
      std::swap(members[i], members[j]);
    }
    std::sort(members.begin(), members.begin() + shots);
    out.insert(out.end(), members.begin(), members.begin() + shots);
  }
  return out;
}

std::vector<std::size_t> filter_candidates(const Dataset& data, const RunOptions& opts) {
  const TextClassifier* tc = &data.text;
  if (opts.filter_text == FilterText::Template) {
    if (!data.template_text) throw Error(ErrorCode::InvalidArgument, "template filtering needs template text features");
    tc = &*data.template_text;
  }
  return select_top_k_indices(data.candidates.labels, score_candidates(data.candidates, *tc),
                              opts.cfg.synthetic_shots);
}

SupportSet assemble_support(const Dataset& data, const RunOptions& opts) {
  const std::uint32_t n = opts.cfg.num_classes;
  SupportSet real = empty_pool(data.test.clip.cols(), data.test.dino.cols(), n);
  if (opts.cfg.shots > 0) {
    if (data.support.labels.num_classes != n) throw Error(ErrorCode::ShapeMismatch, "support pool class count");
    const auto idx = opts.shot_indices ? *opts.shot_indices : sample_shots(data.support.labels, opts.cfg.shots, opts.cfg.seed);
    real = select_rows(data.support, idx);
  }
  CandidatePool synthetic = empty_pool(real.clip.cols(), real.dino.cols(), n);
  if (opts.cfg.synthetic_shots > 0) {
    if (data.candidates.labels.num_classes != n) throw Error(ErrorCode::ShapeMismatch, "candidate pool class count");
    synthetic = select_rows(data.candidates, filter_candidates(data, opts));
  }
  return expand_support(real, synthetic);
}

CacheModel fit_cache(const Dataset& data, const RunOptions& opts) {
  opts.validate();
  const SupportSet support = assemble_support(data, opts);
  FewShotConfig cfg = opts.cfg;
  cfg.feature_dim = std::uint32_t(support.clip.cols());
  CacheModel cache = build_cache(support.clip, support.dino, support.labels, cfg);
  return train(std::move(cache), support.clip, support.dino, support.labels, data.text, cfg, opts.train_options());
}

StreamLogits compute_streams(const CacheModel& cache, const TextClassifier& tc, const SupportSet& queries,
                             unsigned threads) {
  queries.validate();
  const Eigen::Index q_count = queries.clip.rows();
  const Eigen::Index n = cache.values.cols();
  if (tc.class_features.rows() != n) throw Error(ErrorCode::ShapeMismatch, "text classifier class count");
  StreamLogits out{RowMatrix<double>(q_count, n), RowMatrix<double>(q_count, n), RowMatrix<double>(q_count, n)};

  const Eigen::Index chunks = (q_count + kQueryChunk - 1) / kQueryChunk;
  std::atomic<Eigen::Index> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    try {
      for (Eigen::Index c = next++; c < chunks; c = next++) {
        const Eigen::Index begin = c * kQueryChunk;
        const Eigen::Index len = std::min(kQueryChunk, q_count - begin);
        EmbeddingMatrix qc{queries.clip.data.middleRows(begin, len), queries.clip.normalized};
        EmbeddingMatrix qd{queries.dino.data.middleRows(begin, len), queries.dino.normalized};
        out.zs.middleRows(begin, len) = zero_shot_logits(qc, tc);
        out.clip.middleRows(begin, len) = cache_logits(qc, cache.keys_clip, cache.values, cache.beta);
        out.dino.middleRows(begin, len) = cache_logits(qd, cache.keys_dino, cache.values, cache.beta);
      }
    } catch (...) {
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
      next = chunks;
    }
  };
  const unsigned workers = std::max(1u, std::min<unsigned>(threads, unsigned(std::max<Eigen::Index>(chunks, 1))));
  std::vector<std::thread> pool;
  for (unsigned i = 1; i < workers; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

RowMatrix<double> fused_logits(const StreamLogits& s, const RunOptions& opts, std::size_t* constant_rows) {
  if (constant_rows) *constant_rows = 0;
  switch (opts.models) {
    case ModelSubset::DinoOnly:
      return s.dino;
    case ModelSubset::ClipOnly:
      if (opts.ensemble_raw) return s.zs + s.clip;
      return fuse_single_cache(s.zs, s.clip);
    case ModelSubset::Both:
      break;
  }
  switch (opts.ensemble) {
    case EnsembleMode::Average: return fuse_average(s.zs, s.clip, s.dino);
    case EnsembleMode::Maximum: return fuse_maximum(s.zs, s.clip, s.dino);
    case EnsembleMode::Adaptive: break;
  }
  auto r = fuse(s.zs, s.clip, s.dino, FuseOptions{opts.baseline, opts.ensemble_raw});
  if (constant_rows) *constant_rows = r.constant_rows;
  return std::move(r.fused);
}

AccuracyReport evaluate(const CacheModel& cache, const Dataset& data, const RunOptions& opts) {
  const StreamLogits s = compute_streams(cache, data.text, data.test, opts.threads);
  AccuracyReport r;
  r.mode = opts.mode_name();
  r.shots = opts.cfg.shots;
  r.synth = opts.cfg.synthetic_shots;
  r.beta = cache.beta;
  r.acc_zs = accuracy(s.zs, data.test.labels);
  r.acc_clip = accuracy(s.clip, data.test.labels);
  r.acc_dino = accuracy(s.dino, data.test.labels);
  r.acc_ensemble = accuracy(fused_logits(s, opts, &r.constant_rows), data.test.labels);
  return r;
}

AccuracyReport run_few_shot(const Dataset& data, const RunOptions& opts) {
  return evaluate(fit_cache(data, opts), data, opts);
}

std::vector<SweepRow> run_sweep(const Dataset& data, const RunOptions& opts, SweepAxis axis,
                                const std::vector<double>& values) {
  std::vector<double> sorted = values;
  std::stable_sort(sorted.begin(), sorted.end());
  std::vector<SweepRow> rows;
  rows.reserve(sorted.size());
  for (double v : sorted) {
    RunOptions run = opts;
    if (axis == SweepAxis::Beta) {
      run.cfg.beta = v;
    } else {
      if (!(v >= 0) || v != std::floor(v)) throw Error(ErrorCode::InvalidArgument, "K' values must be non-negative integers");
      run.cfg.synthetic_shots = std::uint32_t(v);
    }
    rows.push_back({v, run_few_shot(data, run).acc_ensemble});
  }
  return rows;
}

unsigned threads_from_env() {
  const char* env = std::getenv("CAFO_THREADS");
  if (!env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || v < 1) return 1;
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  return std::min<unsigned>(unsigned(std::min<long>(v, 1 << 16)), hw);
}

}  // namespace cafo
