// cafo: few-shot classification over precomputed CLIP/DINO features.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "cafo/eval.hpp"

namespace {

using namespace cafo;

struct Paths {
  std::string support_clip, support_dino, support_labels;
  std::string pool_clip, pool_dino, pool_labels;
  std::string test_clip, test_dino, test_labels;
  std::string text, text_map;
  std::string template_text, template_map;
  std::string shots_file;
  std::string cache_prefix;
  std::string out;
  std::string out_prefix;
};

struct Flags {
  std::string models = "both";
  std::string ensemble = "adaptive";
  std::string baseline = "zs";
  std::string loss_stream = "ensemble";
  std::string filter_text = "ensemble";
  bool ensemble_raw = false;
  bool detach_weights = false;
  bool no_renormalize = false;
  std::string axis = "beta";
  std::vector<double> values;
};

EmbeddingMatrix load_features(const std::string& path) { return l2_normalize_rows(read_embeddings(path)); }

SupportSet load_set(const std::string& clip, const std::string& dino, const std::string& labels) {
  SupportSet s;
  s.clip = load_features(clip);
  s.dino = load_features(dino);
  s.labels = read_labels(labels);
  s.validate();
  return s;
}

void save_set(const SupportSet& s, const std::string& prefix) {
  write_embeddings(s.clip, prefix + ".clip.cafo");
  write_embeddings(s.dino, prefix + ".dino.cafo");
  write_labels(s.labels, prefix + ".cafl");
}

std::vector<std::size_t> read_shot_indices(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path);
  std::vector<std::size_t> out;
  long long v;
  while (in >> v) {
    if (v < 0) throw Error(ErrorCode::InvalidArgument, "negative shot index in " + path);
    out.push_back(std::size_t(v));
  }
  if (!in.eof()) throw Error(ErrorCode::InvalidArgument, "malformed shot index file " + path);
  return out;
}

template <typename T>
T pick(const std::map<std::string, T>& table, const std::string& key) {
  return table.at(key);
}

// Loads whichever inputs were given; pools not named stay empty.
Dataset load_dataset(const Paths& p, bool need_test) {
  Dataset d;
  d.text = build_text_classifier(load_features(p.text), read_labels(p.text_map));
  const auto n = d.text.num_classes();
  const auto dim = d.text.class_features.cols();
  if (!p.template_text.empty()) {
    d.template_text = build_text_classifier(load_features(p.template_text), read_labels(p.template_map));
  }
  if (!p.support_clip.empty()) {
    d.support = load_set(p.support_clip, p.support_dino, p.support_labels);
  }
  if (!p.pool_clip.empty()) {
    d.candidates = load_set(p.pool_clip, p.pool_dino, p.pool_labels);
  }
  if (need_test) d.test = load_set(p.test_clip, p.test_dino, p.test_labels);

  // Empty pools take their widths from whichever real set is present.
  const SupportSet* ref = !d.test.empty() ? &d.test : !d.support.empty() ? &d.support : &d.candidates;
  const auto dino_dim = ref->empty() ? dim : ref->dino.cols();
  if (d.support.empty()) d.support = empty_pool(dim, dino_dim, n);
  if (d.candidates.empty()) d.candidates = empty_pool(dim, dino_dim, n);
  if (d.test.empty()) d.test = empty_pool(dim, dino_dim, n);
  return d;
}

RunOptions make_options(const FewShotConfig& cfg, const Flags& f, const Paths& p, std::ostream& epoch_log) {
  RunOptions o;
  o.cfg = cfg;
  o.models = pick<ModelSubset>({{"both", ModelSubset::Both}, {"clip", ModelSubset::ClipOnly}, {"dino", ModelSubset::DinoOnly}},
                               f.models);
  o.ensemble = pick<EnsembleMode>(
      {{"adaptive", EnsembleMode::Adaptive}, {"average", EnsembleMode::Average}, {"maximum", EnsembleMode::Maximum}},
      f.ensemble);
  o.baseline = pick<Stream>({{"zs", Stream::Zs}, {"clip", Stream::Clip}, {"dino", Stream::Dino}}, f.baseline);
  o.loss_stream = pick<LossStream>({{"ensemble", LossStream::Ensemble}, {"clip", LossStream::ClipOnly}}, f.loss_stream);
  o.filter_text = pick<FilterText>({{"ensemble", FilterText::Ensemble}, {"template", FilterText::Template}}, f.filter_text);
  o.ensemble_raw = f.ensemble_raw;
  o.detach_weights = f.detach_weights;
  o.renormalize_keys = !f.no_renormalize;
  if (!p.shots_file.empty()) o.shot_indices = read_shot_indices(p.shots_file);
  o.threads = threads_from_env();
  o.on_epoch = [&epoch_log](const EpochMetrics& m) { epoch_log << format_epoch(m) << '\n'; };
  return o;
}

void finish_config(FewShotConfig& cfg, const Dataset& d) {
  cfg.num_classes = d.text.num_classes();
  cfg.feature_dim = std::uint32_t(d.text.class_features.cols());
}

CacheModel load_cache(const std::string& prefix, const FewShotConfig& cfg, bool renormalized) {
  CacheModel c;
  c.keys_clip = read_embeddings(prefix + ".clip.cafo");
  c.keys_dino = read_embeddings(prefix + ".dino.cafo");
  if (renormalized) {
    c.keys_clip = l2_normalize_rows(std::move(c.keys_clip));
    c.keys_dino = l2_normalize_rows(std::move(c.keys_dino));
  }
  c.labels = read_labels(prefix + ".cafl");
  if (c.labels.num_classes != cfg.num_classes || c.keys_clip.rows() != Eigen::Index(c.labels.size()) ||
      c.keys_dino.rows() != Eigen::Index(c.labels.size())) {
    throw Error(ErrorCode::ShapeMismatch, "cached keys do not match labels or class count");
  }
  c.values = one_hot(c.labels);
  c.beta = cfg.beta;
  c.config = cfg;
  return c;
}

void emit(const std::string& text, const std::string& out) {
  if (out.empty()) {
    std::cout << text;
  } else {
    write_file_atomic(out, std::as_bytes(std::span(text.data(), text.size())));
  }
}

void warn_constant(const AccuracyReport& r) {
  if (r.constant_rows > 0) {
    std::cerr << "warning: ConstantLogits in " << r.constant_rows << " query row(s)\n";
  }
}

void add_text(CLI::App* cmd, Paths& p) {
  cmd->add_option("--text", p.text, "Per-prompt CLIP text features (.cafo)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--text-map", p.text_map, "Class of each prompt row (.cafl)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--template-text", p.template_text, "Template-prompt text features for --filter-text template")
      ->check(CLI::ExistingFile);
  auto* map = cmd->add_option("--template-map", p.template_map, "Class map for --template-text")->check(CLI::ExistingFile);
  cmd->get_option("--template-text")->needs(map);
}

void add_set(CLI::App* cmd, const std::string& name, std::string& clip, std::string& dino, std::string& labels,
             bool required) {
  auto* a = cmd->add_option("--" + name + "-clip", clip, name + " CLIP features (.cafo)")->check(CLI::ExistingFile);
  auto* b = cmd->add_option("--" + name + "-dino", dino, name + " DINO features (.cafo)")->check(CLI::ExistingFile);
  auto* c = cmd->add_option("--" + name + "-labels", labels, name + " labels (.cafl)")->check(CLI::ExistingFile);
  if (required) {
    a->required();
    b->required();
    c->required();
  } else {
    a->needs(b, c);
    b->needs(a, c);
    c->needs(a, b);
  }
}

void add_config(CLI::App* cmd, FewShotConfig& cfg, bool with_shots) {
  if (with_shots) cmd->add_option("--shots", cfg.shots, "Real shots per class (K)")->capture_default_str();
  cmd->add_option("--synth", cfg.synthetic_shots, "Synthetic samples kept per class (K')")->capture_default_str();
  cmd->add_option("--beta", cfg.beta, "Affinity sharpness")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--epochs", cfg.epochs, "Training epochs")->capture_default_str();
  cmd->add_option("--lr", cfg.learning_rate, "Initial AdamW learning rate")->capture_default_str()->check(CLI::NonNegativeNumber);
  cmd->add_option("--batch-size", cfg.batch_size, "Mini-batch size")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--weight-decay", cfg.weight_decay, "Decoupled weight decay")->capture_default_str()->check(CLI::NonNegativeNumber);
  cmd->add_option("--seed", cfg.seed, "Seed for shot sampling and shuffling")->capture_default_str();
}

void add_modes(CLI::App* cmd, Flags& f, Paths& p) {
  cmd->add_option("--models", f.models, "Cache keys used: both, clip, dino")
      ->capture_default_str()->check(CLI::IsMember({"both", "clip", "dino"}));
  cmd->add_option("--ensemble", f.ensemble, "Fusion of the cache streams: adaptive, average, maximum")
      ->capture_default_str()->check(CLI::IsMember({"adaptive", "average", "maximum"}));
  cmd->add_option("--baseline", f.baseline, "Baseline stream for adaptive weights: zs, clip, dino")
      ->capture_default_str()->check(CLI::IsMember({"zs", "clip", "dino"}));
  cmd->add_option("--loss-stream", f.loss_stream, "Training objective: ensemble, clip")
      ->capture_default_str()->check(CLI::IsMember({"ensemble", "clip"}));
  cmd->add_option("--filter-text", f.filter_text, "Text features that score synthetic candidates: ensemble, template")
      ->capture_default_str()->check(CLI::IsMember({"ensemble", "template"}));
  cmd->add_flag("--ensemble-raw", f.ensemble_raw, "Sum raw (not z-scored) logits in the fused prediction");
  cmd->add_flag("--detach-weights", f.detach_weights, "No gradient through the ensemble weights");
  cmd->add_flag("--no-renormalize", f.no_renormalize, "Do not project keys back to unit norm after updates");
  cmd->add_option("--shots-file", p.shots_file, "Whitespace-separated support row indices to use as shots")
      ->check(CLI::ExistingFile);
}

int run(int argc, char** argv) {
  CLI::App app{"cafo: cache-based few-shot classification over precomputed features"};
  app.require_subcommand(1);
  Paths p;
  Flags f;
  FewShotConfig cfg;

  auto* filter = app.add_subcommand("filter", "Keep the top-K' synthetic candidates per class");
  add_set(filter, "pool", p.pool_clip, p.pool_dino, p.pool_labels, true);
  add_text(filter, p);
  filter->add_option("--synth", cfg.synthetic_shots, "Candidates kept per class (K')")->required();
  filter->add_option("--filter-text", f.filter_text, "ensemble or template")
      ->capture_default_str()->check(CLI::IsMember({"ensemble", "template"}));
  filter->add_option("--out-prefix", p.out_prefix, "Writes <prefix>.clip.cafo, <prefix>.dino.cafo, <prefix>.cafl")
      ->required();

  auto* train_cmd = app.add_subcommand("train", "Build and fine-tune a cache, then save its keys");
  add_set(train_cmd, "support", p.support_clip, p.support_dino, p.support_labels, false);
  add_set(train_cmd, "pool", p.pool_clip, p.pool_dino, p.pool_labels, false);
  add_text(train_cmd, p);
  add_config(train_cmd, cfg, true);
  add_modes(train_cmd, f, p);
  train_cmd->add_option("--out-prefix", p.out_prefix, "Writes <prefix>.clip.cafo, <prefix>.dino.cafo, <prefix>.cafl")
      ->required();

  auto* eval = app.add_subcommand("eval", "Run the few-shot pipeline and report test accuracy");
  auto* zeroshot = app.add_subcommand("zeroshot", "Cache built from filtered synthetic samples only (K=0)");
  auto* sweep = app.add_subcommand("sweep", "Repeat eval over beta or K' values");
  for (auto* cmd : {eval, zeroshot, sweep}) {
    const bool few_shot = cmd != zeroshot;
    if (few_shot) add_set(cmd, "support", p.support_clip, p.support_dino, p.support_labels, false);
    add_set(cmd, "pool", p.pool_clip, p.pool_dino, p.pool_labels, !few_shot);
    add_set(cmd, "test", p.test_clip, p.test_dino, p.test_labels, true);
    add_text(cmd, p);
    add_config(cmd, cfg, few_shot);
    add_modes(cmd, f, p);
    cmd->add_option("--out", p.out, "Output file (default: stdout)");
  }
  eval->add_option("--cache-prefix", p.cache_prefix, "Evaluate keys saved by `cafo train` instead of training");
  sweep->add_option("--axis", f.axis, "beta or k-prime")->required()->check(CLI::IsMember({"beta", "k-prime"}));
  sweep->add_option("--values", f.values, "Comma-separated values")->required()->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (*filter) {
    Dataset d = load_dataset(p, false);
    finish_config(cfg, d);
    RunOptions o;
    o.cfg = cfg;
    o.cfg.shots = 0;
    o.filter_text = f.filter_text == "template" ? FilterText::Template : FilterText::Ensemble;
    save_set(select_rows(d.candidates, filter_candidates(d, o)), p.out_prefix);
    return 0;
  }

  const bool is_zeroshot = bool(*zeroshot);
  if (is_zeroshot) cfg.shots = 0;
  Dataset d = load_dataset(p, !*train_cmd);
  finish_config(cfg, d);
  // Reports may go to stdout, so only `train` logs epochs there.
  RunOptions o = make_options(cfg, f, p, *train_cmd ? std::cout : std::cerr);
  o.validate();

  if (*train_cmd) {
    const CacheModel cache = fit_cache(d, o);
    save_set(SupportSet{cache.keys_clip, cache.keys_dino, cache.labels}, p.out_prefix);
    return 0;
  }
  if (*sweep) {
    const auto axis = f.axis == "beta" ? SweepAxis::Beta : SweepAxis::KPrime;
    emit(format_sweep(run_sweep(d, o, axis, f.values)), p.out);
    return 0;
  }
  const AccuracyReport report = p.cache_prefix.empty()
                                    ? run_few_shot(d, o)
                                    : evaluate(load_cache(p.cache_prefix, cfg, o.renormalize_keys), d, o);
  warn_constant(report);
  emit(format_report(report) + "\n", p.out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const cafo::Error& e) {
    std::cerr << "cafo: " << e.what() << '\n';
    return cafo::is_validation_error(e.code()) ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "cafo: " << e.what() << '\n';
    return 1;
  }
}
