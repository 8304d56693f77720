#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cafo/cache.hpp"
#include "cafo/ensemble.hpp"
#include "cafo/expansion.hpp"
#include "cafo/trainer.hpp"

namespace cafo {

/// Which cache keys take part in the prediction.
enum class ModelSubset { Both, ClipOnly, DinoOnly };
enum class EnsembleMode { Adaptive, Average, Maximum };
/// Text features used to score synthetic candidates.
enum class FilterText { Ensemble, Template };
enum class SweepAxis { Beta, KPrime };

/// Everything a run reads: the labeled pool shots are drawn from, synthetic
/// candidates, test queries and text classifiers. Pools may be empty.
struct Dataset {
  SupportSet support;
  CandidatePool candidates;
  SupportSet test;
  TextClassifier text;
  std::optional<TextClassifier> template_text;
};

struct RunOptions {
  FewShotConfig cfg;
  ModelSubset models = ModelSubset::Both;
  EnsembleMode ensemble = EnsembleMode::Adaptive;
  Stream baseline = Stream::Zs;
  bool ensemble_raw = false;
  bool detach_weights = false;
  bool renormalize_keys = true;
  LossStream loss_stream = LossStream::Ensemble;
  FilterText filter_text = FilterText::Ensemble;
  /// Rows of Dataset::support to use as the real shots instead of sampling.
  std::optional<std::vector<std::size_t>> shot_indices;
  std::function<void(const EpochMetrics&)> on_epoch;
  unsigned threads = 1;

  /// Throws InvalidArgument on inconsistent flag combinations.
  void validate() const;
  std::string mode_name() const;
  TrainOptions train_options() const;
};

struct AccuracyReport {
  std::string mode;
  std::uint32_t shots = 0;
  std::uint32_t synth = 0;
  double beta = 0;
  double acc_zs = 0;
  double acc_clip = 0;
  double acc_dino = 0;
  double acc_ensemble = 0;
  // Queries whose logits were constant in some stream; not part of the report line.
  std::size_t constant_rows = 0;
};

struct SweepRow {
  double value = 0;
  double accuracy = 0;
};

/// `mode=<m> shots=<K> synth=<K'> beta=<b> acc_zs=<f> acc_clip=<f> acc_dino=<f> acc_ensemble=<f>`
std::string format_report(const AccuracyReport& r);
AccuracyReport parse_report(std::string_view line);
void report_write(const AccuracyReport& r, const std::filesystem::path& path);

/// `value,accuracy` header followed by one CSV line per row.
std::string format_sweep(const std::vector<SweepRow>& rows);
void sweep_write(const std::vector<SweepRow>& rows, const std::filesystem::path& path);

/// K indices per class drawn without replacement, ascending within each class,
/// classes in order.
std::vector<std::size_t> sample_shots(const LabelSet& labels, std::uint32_t shots, std::uint64_t seed);

/// Indices of the K' best-scoring candidates per class.
std::vector<std::size_t> filter_candidates(const Dataset& data, const RunOptions& opts);

/// Real shots plus filtered synthetic samples.
SupportSet assemble_support(const Dataset& data, const RunOptions& opts);

/// Builds the cache over the assembled support set and fine-tunes its keys.
CacheModel fit_cache(const Dataset& data, const RunOptions& opts);

struct StreamLogits {
  RowMatrix<double> zs;
  RowMatrix<double> clip;
  RowMatrix<double> dino;
};

/// The three logit streams for every query, in fixed-size row chunks spread
/// over `threads` workers; the result does not depend on the thread count.
StreamLogits compute_streams(const CacheModel& cache, const TextClassifier& tc, const SupportSet& queries,
                             unsigned threads = 1);

/// Fused logits for the configured model subset and ensemble mode.
RowMatrix<double> fused_logits(const StreamLogits& s, const RunOptions& opts, std::size_t* constant_rows = nullptr);

AccuracyReport evaluate(const CacheModel& cache, const Dataset& data, const RunOptions& opts);

AccuracyReport run_few_shot(const Dataset& data, const RunOptions& opts);

std::vector<SweepRow> run_sweep(const Dataset& data, const RunOptions& opts, SweepAxis axis,
                                const std::vector<double>& values);

/// Worker count from CAFO_THREADS, capped at hardware concurrency; 1 if unset.
unsigned threads_from_env();

}  // namespace cafo
