#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gazeqa/corpus.hpp"

namespace gazeqa {

enum class Condition { Hunting, Gathering };

std::string to_string(Condition condition);
Condition condition_from_string(const std::string& s);

/// One subject reading one passage under one condition. tf_ms holds Total
/// Fixation Duration per passage word; zero entries mean the word was skipped.
struct GazeTrial {
  std::string subject_id;
  std::string passage_id;
  std::optional<std::string> question_id;  // null for task-free external corpora
  Condition condition = Condition::Gathering;
  bool correct = false;
  std::vector<double> tf_ms;

  double total_ms() const;
  bool usable() const { return total_ms() > 0.0; }
};

enum class Granularity { Word, Token };

/// A probability distribution over a passage's words or tokens — the common
/// currency of gaze targets and model predictions. Sums to 1 within 1e-9.
struct GazeDistribution {
  std::vector<double> values;
  Granularity granularity = Granularity::Word;

  std::size_t size() const { return values.size(); }
};

/// Throws ValidationError unless values lie in [0,1] and sum to 1 within tol.
void check_distribution(const GazeDistribution& dist, double tol = 1e-9);

struct GazeStore {
  std::vector<GazeTrial> trials;
};

GazeStore load_gaze(const std::string& path);
GazeStore load_gaze_json(const std::string& json_text);
std::string gaze_to_json(const GazeStore& store);

/// Every trial must reference a known passage and carry one duration per word.
void validate_gaze_against_corpus(const GazeStore& store, const Corpus& corpus);

/// tf_ms scaled to sum to 1. Rejects all-zero trials: callers exclude those,
/// never zero-fill.
GazeDistribution normalize_trial(const GazeTrial& trial);

/// Elementwise mean of same-length, same-granularity distributions.
GazeDistribution average_distributions(const std::vector<GazeDistribution>& dists);

/// Speed-normalized gaze averaged over matching usable trials. Matching means
/// same passage, question and condition; incorrect trials are dropped unless
/// correct_only is false.
GazeDistribution aggregate_gaze(const std::vector<GazeTrial>& trials, const std::string& passage_id,
                                const std::optional<std::string>& question_id, Condition condition,
                                bool correct_only = true);

/// Word i with mass m and k tokens becomes k entries of m/k.
GazeDistribution split_to_tokens(const GazeDistribution& dist,
                                 const std::vector<int>& tokens_per_word);

struct SpanConditionStats {
  double mean_tf_within_ms = 0.0;
  std::optional<double> mean_tf_outside_ms;  // absent when the span covers every word
  double mean_norm_within = 0.0;
  std::optional<double> mean_norm_outside;
  double mean_total_passage_ms = 0.0;
  std::size_t trial_count = 0;
};

using SpanReadingStats = std::map<Condition, SpanConditionStats>;

/// Per condition: per-trial mean per-word TF inside and outside the span
/// (raw ms and speed-normalized), averaged over usable trials, plus the mean
/// total passage reading time. Conditions without usable trials are omitted.
SpanReadingStats span_reading_stats(const std::vector<GazeTrial>& trials, const Passage& passage,
                                    const WordSpan& span);

/// Fraction of trials answered correctly, per condition present.
std::map<Condition, double> condition_accuracy(const std::vector<GazeTrial>& trials);

/// One row per (trial, word): subject, condition, passage, question, word
/// index, word, span membership, raw and normalized TF, correctness.
/// Returns the number of data rows written.
std::size_t export_long_csv(const std::vector<GazeTrial>& trials, const Corpus& corpus,
                            const std::string& path);

}  // namespace gazeqa
