#pragma once

#include <memory>
#include <string>
#include <vector>

#include "gazeqa/corpus.hpp"
#include "gazeqa/encoder.hpp"
#include "gazeqa/gaze.hpp"

namespace gazeqa {

/// Positions shared by every copy of one built example.
struct SequenceLayout {
  std::size_t summary_position = 0;
  std::size_t passage_begin = 0;
  std::size_t passage_tokens = 0;
};

/// Token sequences for one example: one copy per candidate answer
/// ([summary, passage, separator, question, answer]), or a single
/// question-free copy ([summary, passage, separator]).
struct BuiltInputs {
  std::vector<std::vector<int>> sequences;
  SequenceLayout layout;
  std::vector<int> tokens_per_word;  // per surviving passage word
  std::size_t words_kept = 0;
  bool truncated = false;
};

/// Builds the four per-candidate sequences. When a sequence would exceed
/// encoder.max_len: error by default; with truncation enabled, passage tail
/// words are dropped until the longest copy fits.
BuiltInputs build_inputs(const Passage& passage, const Question& question, const Encoder& encoder,
                         bool truncation_enabled = false);

/// Single-copy variant for question-free passages (external gaze corpora).
BuiltInputs build_passage_only_input(const Passage& passage, const Encoder& encoder,
                                     bool truncation_enabled = false);

/// Drops target entries past surviving_tokens and rescales the rest to sum
/// to 1. Errors if the surviving mass is zero.
GazeDistribution truncate_token_target(const GazeDistribution& target,
                                       std::size_t surviving_tokens);

/// Answer-scoring head: one scalar per candidate from its summary vector.
/// The bias cancels in the candidate softmax; kept for the standard layout.
struct QaHead {
  Tensor w;
  Tensor b;

  explicit QaHead(int dim)
      : w("qa_head.w", {static_cast<std::size_t>(dim)}), b("qa_head.b", {1}) {}
};

/// Gaze head: a single weight vector shared across all passage token
/// positions and all answer copies. No bias; the per-copy softmax is
/// invariant to one, which would make it unidentifiable.
struct GazeHead {
  Tensor v;

  explicit GazeHead(int dim) : v("gaze_head.v", {static_cast<std::size_t>(dim)}) {}
};

struct MultiTaskOutput {
  std::vector<double> answer_scores;              // one per copy
  std::vector<double> answer_probs;               // softmax over copies
  std::vector<GazeDistribution> rt_pred_per_answer;
  GazeDistribution rt_pred;                       // elementwise mean over copies
};

struct QaOutput {
  std::vector<double> scores;
  std::vector<double> probs;
};

/// Encodes every copy and scores the candidates.
QaOutput qa_forward(const BuiltInputs& inputs, const Encoder& encoder, const QaHead& head);

/// Negative log probability of the correct candidate. Probabilities below
/// the 1e-12 floor are clamped with a warning.
double qa_loss(const std::vector<double>& answer_probs, int correct_index);

struct GazeOutput {
  std::vector<GazeDistribution> per_answer;
  GazeDistribution mean;
};

/// Per copy: dot products of the passage-token states with v, softmax over
/// passage positions only; the prediction is the mean across copies.
GazeOutput gaze_forward(const std::vector<Matrix>& states_per_copy, const SequenceLayout& layout,
                        const GazeHead& head);

/// Cross entropy -sum(target * log pred). Zero-mass target entries
/// contribute nothing; predictions are floored at 1e-12 inside the log.
double gaze_loss(const GazeDistribution& target, const GazeDistribution& pred);

/// (1 - alpha) * l_qa + alpha * l_gaze.
double combined_loss(double l_qa, double l_gaze, double alpha);

/// One full evaluation pass: encode all copies, score answers, predict gaze.
MultiTaskOutput multi_task_forward(const BuiltInputs& inputs, const Encoder& encoder,
                                   const QaHead& qa, const GazeHead& gaze);

struct HeadEvaluation {
  MultiTaskOutput output;
  double l_qa = 0.0;    // 0 when correct < 0
  double l_gaze = 0.0;  // 0 when target is null
  double loss = 0.0;
};

/// Loss computation on already-encoded final-layer states. correct < 0 skips
/// the answer term; target == nullptr skips the gaze term.
HeadEvaluation heads_forward(const std::vector<Matrix>& states, const SequenceLayout& layout,
                             const QaHead& qa, const GazeHead& gaze, int correct,
                             const GazeDistribution* target, double alpha);

struct HeadGradients {
  HeadEvaluation eval;
  std::vector<Matrix> d_states;  // gradient of the combined loss per copy
};

/// heads_forward plus gradients. Head parameter gradients accumulate into
/// the tensors, scaled by grad_scale; d_states carries the same scale.
HeadGradients heads_forward_backward(const std::vector<Matrix>& states,
                                     const SequenceLayout& layout, QaHead& qa, GazeHead& gaze,
                                     int correct, const GazeDistribution* target, double alpha,
                                     double grad_scale = 1.0);

/// Pluggable trainable encoder plus the two heads, with joint backprop.
class MultiTaskModel {
 public:
  explicit MultiTaskModel(std::unique_ptr<TrainableEncoder> encoder);
  MultiTaskModel(std::unique_ptr<TrainableEncoder> encoder, QaHead qa, GazeHead gaze);

  MultiTaskModel(MultiTaskModel&&) = default;
  MultiTaskModel& operator=(MultiTaskModel&&) = default;

  /// Deep copy of the encoder and both heads.
  MultiTaskModel clone() const;

  TrainableEncoder& encoder() { return *encoder_; }
  const TrainableEncoder& encoder() const { return *encoder_; }
  QaHead& qa_head() { return qa_head_; }
  const QaHead& qa_head() const { return qa_head_; }
  GazeHead& gaze_head() { return gaze_head_; }
  const GazeHead& gaze_head() const { return gaze_head_; }

  /// Encoder parameters followed by qa_head.w, qa_head.b, gaze_head.v.
  std::vector<Tensor*> parameters();
  void zero_grad();

  MultiTaskOutput forward(const BuiltInputs& inputs) const;
  HeadEvaluation evaluate(const BuiltInputs& inputs, int correct, const GazeDistribution* target,
                          double alpha) const;

  /// Forward plus gradient accumulation into every parameter tensor.
  HeadEvaluation forward_backward(const BuiltInputs& inputs, int correct,
                                  const GazeDistribution* target, double alpha,
                                  double grad_scale = 1.0);

 private:
  std::unique_ptr<TrainableEncoder> encoder_;
  QaHead qa_head_;
  GazeHead gaze_head_;
};

}  // namespace gazeqa
