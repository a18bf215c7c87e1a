#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gazeqa/corpus.hpp"
#include "gazeqa/model.hpp"
#include "gazeqa/targets.hpp"

namespace gazeqa {

/// Everything one experiment run needs, read from a flat key=value file.
struct ExperimentConfig {
  std::string encoder_spec;
  std::optional<TargetSpec> target;  // nullopt when target = none
  std::vector<double> alpha_grid;
  int epochs = 0;

  bool cv = true;  // folds = cv | explicit
  int cv_k = 5;
  std::uint64_t fold_seed = 0;
  std::vector<std::string> train_articles, dev_articles, test_articles;

  std::vector<std::uint64_t> seeds;
  int batch_size = 0;
  double learning_rate = 0.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  bool truncation_enabled = false;
  long max_steps = 0;  // optimizer-step cap per run; 0 = no cap

  // GazeExternal sources, resolved by the caller that loads files.
  std::string external_corpus_path;
  std::string external_gaze_path;
};

/// Parses "key = value" lines; '#' starts a comment. Unknown keys and
/// missing required fields raise ParseError naming the key.
ExperimentConfig parse_experiment_config(const std::string& text);
ExperimentConfig load_experiment_config(const std::string& path);

/// Normalized round-trippable form of the config.
std::string config_to_text(const ExperimentConfig& config);

struct Fold {
  std::vector<std::string> train, dev, test;
};

/// Rotation folds over a seeded shuffle: fold i tests group i and uses group
/// i+1 for dev. Every article lands in test once, dev once and train k-2
/// times. Requires |articles| divisible by k and k >= 3.
std::vector<Fold> make_folds(const std::vector<std::string>& article_ids, int k,
                             std::uint64_t seed);

/// In-place Fisher-Yates with modulo draws: deterministic across standard
/// libraries, unlike std::shuffle.
template <typename T>
void deterministic_shuffle(std::vector<T>& values, std::mt19937_64& rng) {
  for (std::size_t i = values.size(); i > 1; --i) {
    std::swap(values[i - 1], values[rng() % i]);
  }
}

class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Tensor*> params, double learning_rate, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8);

  /// Applies one update from the accumulated gradients. Does not zero them.
  void step();
  long steps() const { return steps_; }

 private:
  std::vector<Tensor*> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  long steps_ = 0;
};

/// One batch item: multi-copy inputs plus the optional answer index and
/// gaze target. correct < 0 skips the answer loss; null target skips gaze.
struct StepItem {
  const BuiltInputs* inputs = nullptr;
  int correct = -1;
  const GazeDistribution* target = nullptr;
};

struct StepStats {
  double loss = 0.0;          // what the step minimized
  double mean_qa_loss = 0.0;  // over items with an answer term
  double mean_gaze_loss = 0.0;
  std::size_t qa_items = 0;
  std::size_t gaze_items = 0;
};

/// One parameter update: gradients of the batch-mean loss of qa_batch, plus
/// (when gaze_batch is non-empty) the batch-mean loss of gaze_batch, in a
/// single optimizer step. Aborts on a non-finite loss.
StepStats apply_training_step(MultiTaskModel& model, const std::vector<StepItem>& qa_batch,
                              const std::vector<StepItem>& gaze_batch, double alpha,
                              AdamOptimizer& optimizer);

struct EpochEntry {
  std::uint64_t seed = 0;
  std::size_t fold = 0;
  double alpha = 0.0;
  int epoch = 0;  // 1-based
  double dev_accuracy = 0.0;
  double mean_qa_loss = 0.0;
  double mean_gaze_loss = 0.0;
};

struct Selection {
  int epoch = 0;
  double alpha = 0.0;
  double dev_accuracy = 0.0;
};

/// Highest dev accuracy; ties prefer smaller alpha, then smaller epoch.
/// The entries must all belong to one (seed, fold).
Selection select_model(const std::vector<EpochEntry>& history);

struct SelectionRecord {
  std::uint64_t seed = 0;
  std::size_t fold = 0;
  int epoch = 0;
  double alpha = 0.0;
  double dev_accuracy = 0.0;
  double test_accuracy = 0.0;
};

struct RunRecord {
  int schema_version = 1;
  std::string config_text;
  std::vector<EpochEntry> history;
  std::vector<SelectionRecord> selections;
  double aggregate_test_accuracy = 0.0;  // mean over (seed, fold) selections
  long truncation_events = 0;
};

std::string run_record_to_json(const RunRecord& record);
void save_run_record(const std::string& path, const RunRecord& record);

struct Prediction {
  std::string passage_id;
  std::string question_id;
  int predicted = 0;  // argmax, lowest index on ties
  int correct = 0;
  std::vector<double> probs;
};

struct EvalResult {
  double accuracy = 0.0;
  std::vector<Prediction> predictions;
};

/// Accuracy over every bound question of the listed articles (all articles
/// when the filter is empty).
EvalResult evaluate_model(const MultiTaskModel& model, const Corpus& corpus,
                          const std::vector<std::string>& articles, bool truncation_enabled);

/// Inputs handed to train(); file loading is the caller's job.
struct ExperimentData {
  const Corpus* corpus = nullptr;
  const GazeStore* gaze = nullptr;                       // gaze target kinds
  const TargetCache* target_cache = nullptr;             // optional precomputed targets
  const std::vector<ExternalChunk>* external_chunks = nullptr;  // GazeExternal
};

/// Full protocol: per (seed, fold, alpha) fine-tune from the same initial
/// model, record dev accuracy per epoch, select per (seed, fold), evaluate
/// test once at the selection, and average over selections. When out_dir is
/// non-empty, writes run_record.json and one checkpoint directory per
/// (seed, fold) selection beneath it.
RunRecord train(const ExperimentConfig& config, const ExperimentData& data,
                const std::string& out_dir = "");

/// Model checkpoint: every parameter tensor by name plus the encoder spec
/// and the config text, one JSON file per directory.
void save_checkpoint(const std::string& dir, const MultiTaskModel& model,
                     const std::string& config_text);
MultiTaskModel load_checkpoint(const std::string& dir);
std::string checkpoint_config_text(const std::string& dir);

}  // namespace gazeqa
