#include "gazeqa/model.hpp"

#include <algorithm>
#include <cmath>

#include "gazeqa/errors.hpp"

namespace gazeqa {

namespace {

constexpr double kLossFloor = 1e-12;

std::vector<double> softmax(const std::vector<double>& scores) {
  double max_score = *std::max_element(scores.begin(), scores.end());
  std::vector<double> out(scores.size());
  double denom = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::exp(scores[i] - max_score);
    denom += out[i];
  }
  for (double& v : out) v /= denom;
  return out;
}

std::vector<std::string> answer_option_words(const Question& question, std::size_t index) {
  return split_words(question.answers.at(index));
}

BuiltInputs assemble_inputs(const Passage& passage, const Question* question,
                            const Encoder& encoder, bool truncation_enabled) {
  Tokenization passage_tk = encoder.tokenize(passage.words);
  if (passage_tk.ids.empty()) {
    throw ValidationError("passage '" + passage.id + "' tokenizes to zero tokens");
  }

  std::vector<int> question_ids;
  std::vector<std::vector<int>> answer_ids;
  if (question) {
    question_ids = encoder.tokenize(split_words(question->stem)).ids;
    for (std::size_t a = 0; a < question->answers.size(); ++a) {
      answer_ids.push_back(encoder.tokenize(answer_option_words(*question, a)).ids);
    }
  }

  std::size_t longest_tail = 0;
  for (const auto& ids : answer_ids) longest_tail = std::max(longest_tail, ids.size());
  const std::size_t overhead = 2 + question_ids.size() + longest_tail;
  const std::size_t max_len = static_cast<std::size_t>(encoder.max_len());

  BuiltInputs built;
  built.tokens_per_word = passage_tk.tokens_per_word;
  built.words_kept = passage.words.size();
  std::size_t passage_tokens = passage_tk.ids.size();

  if (overhead + passage_tokens > max_len) {
    if (!truncation_enabled) {
      std::string subject = question ? "question '" + question->id + "'" : "passage '" + passage.id + "'";
      throw ValidationError(subject + " needs " + std::to_string(overhead + passage_tokens) +
                            " tokens but the encoder accepts " + std::to_string(max_len) +
                            "; enable truncation or shorten the input");
    }
    if (overhead >= max_len) {
      throw ValidationError("question '" + (question ? question->id : passage.id) +
                            "' leaves no room for passage tokens even with truncation");
    }
    const std::size_t budget = max_len - overhead;
    std::size_t kept_words = 0, kept_tokens = 0;
    for (int count : passage_tk.tokens_per_word) {
      if (kept_tokens + static_cast<std::size_t>(count) > budget) break;
      kept_tokens += static_cast<std::size_t>(count);
      ++kept_words;
    }
    if (kept_words == 0) {
      throw ValidationError("passage '" + passage.id + "' cannot be truncated to fit: first word alone overflows");
    }
    passage_tokens = kept_tokens;
    built.words_kept = kept_words;
    built.tokens_per_word.resize(kept_words);
    built.truncated = true;
  }

  std::vector<int> stem;
  stem.reserve(2 + passage_tokens + question_ids.size());
  stem.push_back(encoder.summary_token_id());
  stem.insert(stem.end(), passage_tk.ids.begin(),
              passage_tk.ids.begin() + static_cast<std::ptrdiff_t>(passage_tokens));
  stem.push_back(encoder.separator_token_id());
  stem.insert(stem.end(), question_ids.begin(), question_ids.end());

  if (question) {
    for (const auto& ids : answer_ids) {
      std::vector<int> seq = stem;
      seq.insert(seq.end(), ids.begin(), ids.end());
      built.sequences.push_back(std::move(seq));
    }
  } else {
    built.sequences.push_back(std::move(stem));
  }

  built.layout.summary_position = 0;
  built.layout.passage_begin = 1;
  built.layout.passage_tokens = passage_tokens;
  return built;
}

}  // namespace

BuiltInputs build_inputs(const Passage& passage, const Question& question, const Encoder& encoder,
                         bool truncation_enabled) {
  if (question.answers.size() != 4) {
    throw ValidationError("question '" + question.id + "' must carry exactly 4 answers");
  }
  return assemble_inputs(passage, &question, encoder, truncation_enabled);
}

BuiltInputs build_passage_only_input(const Passage& passage, const Encoder& encoder,
                                     bool truncation_enabled) {
  return assemble_inputs(passage, nullptr, encoder, truncation_enabled);
}

GazeDistribution truncate_token_target(const GazeDistribution& target,
                                       std::size_t surviving_tokens) {
  if (surviving_tokens == 0 || surviving_tokens > target.values.size()) {
    throw ValidationError("cannot truncate a " + std::to_string(target.values.size()) +
                          "-token target to " + std::to_string(surviving_tokens) + " tokens");
  }
  GazeDistribution out;
  out.granularity = target.granularity;
  out.values.assign(target.values.begin(),
                    target.values.begin() + static_cast<std::ptrdiff_t>(surviving_tokens));
  double mass = 0.0;
  for (double v : out.values) mass += v;
  if (mass <= 0.0) {
    throw ValidationError("truncation removed all target mass");
  }
  for (double& v : out.values) v /= mass;
  return out;
}

double qa_loss(const std::vector<double>& answer_probs, int correct_index) {
  if (answer_probs.empty()) throw ValidationError("qa_loss: empty probability vector");
  if (correct_index < 0 || static_cast<std::size_t>(correct_index) >= answer_probs.size()) {
    throw ValidationError("qa_loss: correct index " + std::to_string(correct_index) +
                          " outside the " + std::to_string(answer_probs.size()) + " candidates");
  }
  double p = answer_probs[static_cast<std::size_t>(correct_index)];
  if (p < kLossFloor) {
    loss_floor_hits().fetch_add(1);
    warn("qa_loss: probability of the correct answer floored at 1e-12");
    p = kLossFloor;
  }
  return -std::log(p);
}

double gaze_loss(const GazeDistribution& target, const GazeDistribution& pred) {
  if (target.values.size() != pred.values.size()) {
    throw ValidationError("gaze_loss: target has " + std::to_string(target.values.size()) +
                          " entries but the prediction has " + std::to_string(pred.values.size()));
  }
  double loss = 0.0;
  bool floored = false;
  for (std::size_t i = 0; i < target.values.size(); ++i) {
    if (target.values[i] == 0.0) continue;
    double p = pred.values[i];
    if (p < kLossFloor) {
      floored = true;
      p = kLossFloor;
    }
    loss -= target.values[i] * std::log(p);
  }
  if (floored) {
    loss_floor_hits().fetch_add(1);
    warn("gaze_loss: prediction floored at 1e-12");
  }
  return loss;
}

double combined_loss(double l_qa, double l_gaze, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ValidationError("alpha must lie in [0, 1], got " + std::to_string(alpha));
  }
  return (1.0 - alpha) * l_qa + alpha * l_gaze;
}

namespace {

void check_states(const std::vector<Matrix>& states, const SequenceLayout& layout,
                  std::size_t dim) {
  if (states.empty()) throw ValidationError("no encoded copies supplied");
  if (layout.passage_tokens == 0) throw ValidationError("layout has zero passage tokens");
  for (const Matrix& m : states) {
    if (m.cols != dim) {
      throw ValidationError("encoded state width " + std::to_string(m.cols) +
                            " does not match head dimension " + std::to_string(dim));
    }
    if (m.rows <= layout.summary_position ||
        m.rows < layout.passage_begin + layout.passage_tokens) {
      throw ValidationError("encoded copy with " + std::to_string(m.rows) +
                            " tokens does not cover the layout's passage positions");
    }
  }
}

HeadEvaluation heads_eval(const std::vector<Matrix>& states, const SequenceLayout& layout,
                          const QaHead& qa, const GazeHead& gaze, int correct,
                          const GazeDistribution* target, double alpha, QaHead* qa_mut,
                          GazeHead* gaze_mut, double grad_scale,
                          std::vector<Matrix>* d_states_out) {
  const std::size_t dim = gaze.v.size();
  if (qa.w.size() != dim) throw ValidationError("qa and gaze heads disagree on dimension");
  check_states(states, layout, dim);
  const std::size_t copies = states.size();
  const std::size_t begin = layout.passage_begin;
  const std::size_t tokens = layout.passage_tokens;
  if (correct >= 0 && static_cast<std::size_t>(correct) >= copies) {
    throw ValidationError("correct answer index " + std::to_string(correct) + " but only " +
                          std::to_string(copies) + " copies");
  }
  if (target && target->values.size() != tokens) {
    throw ValidationError("gaze target has " + std::to_string(target->values.size()) +
                          " entries but the passage has " + std::to_string(tokens) + " tokens");
  }

  HeadEvaluation eval;
  MultiTaskOutput& out = eval.output;

  out.answer_scores.resize(copies);
  for (std::size_t k = 0; k < copies; ++k) {
    const double* summary = states[k].row(layout.summary_position);
    double score = qa.b.value[0];
    for (std::size_t i = 0; i < dim; ++i) score += qa.w.value[i] * summary[i];
    out.answer_scores[k] = score;
  }
  out.answer_probs = softmax(out.answer_scores);

  out.rt_pred_per_answer.resize(copies);
  out.rt_pred.granularity = Granularity::Token;
  out.rt_pred.values.assign(tokens, 0.0);
  for (std::size_t k = 0; k < copies; ++k) {
    std::vector<double> scores(tokens);
    for (std::size_t i = 0; i < tokens; ++i) {
      const double* h = states[k].row(begin + i);
      double score = 0.0;
      for (std::size_t j = 0; j < dim; ++j) score += gaze.v.value[j] * h[j];
      scores[i] = score;
    }
    GazeDistribution& q = out.rt_pred_per_answer[k];
    q.granularity = Granularity::Token;
    q.values = softmax(scores);
    for (std::size_t i = 0; i < tokens; ++i) {
      out.rt_pred.values[i] += q.values[i] / static_cast<double>(copies);
    }
  }

  if (correct >= 0) eval.l_qa = qa_loss(out.answer_probs, correct);
  if (target) eval.l_gaze = gaze_loss(*target, out.rt_pred);
  eval.loss = combined_loss(eval.l_qa, eval.l_gaze, alpha);

  if (!d_states_out) return eval;

  d_states_out->clear();
  for (const Matrix& m : states) d_states_out->emplace_back(m.rows, m.cols);

  const double qa_weight = 1.0 - alpha;
  const bool qa_floored =
      correct >= 0 && out.answer_probs[static_cast<std::size_t>(correct)] < kLossFloor;
  if (correct >= 0 && qa_weight != 0.0 && !qa_floored) {
    for (std::size_t k = 0; k < copies; ++k) {
      const double indicator = (static_cast<int>(k) == correct) ? 1.0 : 0.0;
      const double d_score = grad_scale * qa_weight * (out.answer_probs[k] - indicator);
      const double* summary = states[k].row(layout.summary_position);
      double* d_summary = (*d_states_out)[k].row(layout.summary_position);
      for (std::size_t i = 0; i < dim; ++i) {
        qa_mut->w.grad[i] += d_score * summary[i];
        d_summary[i] += d_score * qa.w.value[i];
      }
      // b shifts every score equally, so its gradient cancels exactly:
      // sum_k (p_k - y_k) = 0. Skipping it keeps the bias truly inert.
    }
  }

  if (target && alpha != 0.0) {
    std::vector<double> d_mean(tokens, 0.0);
    for (std::size_t i = 0; i < tokens; ++i) {
      if (target->values[i] == 0.0) continue;
      const double p = out.rt_pred.values[i];
      if (p < kLossFloor) continue;  // clamped term is flat
      d_mean[i] = -grad_scale * alpha * target->values[i] / p;
    }
    for (std::size_t k = 0; k < copies; ++k) {
      const std::vector<double>& q = out.rt_pred_per_answer[k].values;
      double dot = 0.0;
      for (std::size_t i = 0; i < tokens; ++i) {
        dot += (d_mean[i] / static_cast<double>(copies)) * q[i];
      }
      for (std::size_t i = 0; i < tokens; ++i) {
        const double d_score = q[i] * (d_mean[i] / static_cast<double>(copies) - dot);
        const double* h = states[k].row(begin + i);
        double* d_h = (*d_states_out)[k].row(begin + i);
        for (std::size_t j = 0; j < dim; ++j) {
          gaze_mut->v.grad[j] += d_score * h[j];
          d_h[j] += d_score * gaze.v.value[j];
        }
      }
    }
  }

  return eval;
}

std::vector<Matrix> encode_copies(const BuiltInputs& inputs, const Encoder& encoder) {
  std::vector<Matrix> states;
  states.reserve(inputs.sequences.size());
  for (const auto& seq : inputs.sequences) states.push_back(encoder.encode(seq).states);
  return states;
}

}  // namespace

QaOutput qa_forward(const BuiltInputs& inputs, const Encoder& encoder, const QaHead& head) {
  const std::size_t dim = head.w.size();
  QaOutput out;
  for (const auto& seq : inputs.sequences) {
    EncodeResult enc = encoder.encode(seq);
    if (enc.states.cols != dim) {
      throw ValidationError("encoder dimension " + std::to_string(enc.states.cols) +
                            " does not match qa head dimension " + std::to_string(dim));
    }
    const double* summary = enc.summary();
    double score = head.b.value[0];
    for (std::size_t i = 0; i < dim; ++i) score += head.w.value[i] * summary[i];
    out.scores.push_back(score);
  }
  if (out.scores.empty()) throw ValidationError("qa_forward: no sequences");
  out.probs = softmax(out.scores);
  return out;
}

GazeOutput gaze_forward(const std::vector<Matrix>& states_per_copy, const SequenceLayout& layout,
                        const GazeHead& head) {
  QaHead dummy(static_cast<int>(head.v.size()));
  HeadEvaluation eval = heads_eval(states_per_copy, layout, dummy, head, -1, nullptr, 0.0,
                                   nullptr, nullptr, 1.0, nullptr);
  GazeOutput out;
  out.per_answer = std::move(eval.output.rt_pred_per_answer);
  out.mean = std::move(eval.output.rt_pred);
  return out;
}

MultiTaskOutput multi_task_forward(const BuiltInputs& inputs, const Encoder& encoder,
                                   const QaHead& qa, const GazeHead& gaze) {
  std::vector<Matrix> states = encode_copies(inputs, encoder);
  HeadEvaluation eval =
      heads_eval(states, inputs.layout, qa, gaze, -1, nullptr, 0.0, nullptr, nullptr, 1.0, nullptr);
  return std::move(eval.output);
}

HeadEvaluation heads_forward(const std::vector<Matrix>& states, const SequenceLayout& layout,
                             const QaHead& qa, const GazeHead& gaze, int correct,
                             const GazeDistribution* target, double alpha) {
  return heads_eval(states, layout, qa, gaze, correct, target, alpha, nullptr, nullptr, 1.0,
                    nullptr);
}

HeadGradients heads_forward_backward(const std::vector<Matrix>& states,
                                     const SequenceLayout& layout, QaHead& qa, GazeHead& gaze,
                                     int correct, const GazeDistribution* target, double alpha,
                                     double grad_scale) {
  HeadGradients result;
  result.eval = heads_eval(states, layout, qa, gaze, correct, target, alpha, &qa, &gaze,
                           grad_scale, &result.d_states);
  return result;
}

MultiTaskModel::MultiTaskModel(std::unique_ptr<TrainableEncoder> encoder)
    : encoder_(std::move(encoder)),
      qa_head_(encoder_->dim()),
      gaze_head_(encoder_->dim()) {}

MultiTaskModel::MultiTaskModel(std::unique_ptr<TrainableEncoder> encoder, QaHead qa, GazeHead gaze)
    : encoder_(std::move(encoder)), qa_head_(std::move(qa)), gaze_head_(std::move(gaze)) {
  if (qa_head_.w.size() != static_cast<std::size_t>(encoder_->dim()) ||
      gaze_head_.v.size() != static_cast<std::size_t>(encoder_->dim())) {
    throw ValidationError("head dimensions do not match the encoder");
  }
}

MultiTaskModel MultiTaskModel::clone() const {
  return MultiTaskModel(encoder_->clone(), qa_head_, gaze_head_);
}

std::vector<Tensor*> MultiTaskModel::parameters() {
  std::vector<Tensor*> params = encoder_->parameters();
  params.push_back(&qa_head_.w);
  params.push_back(&qa_head_.b);
  params.push_back(&gaze_head_.v);
  return params;
}

void MultiTaskModel::zero_grad() {
  for (Tensor* t : parameters()) t->zero_grad();
}

MultiTaskOutput MultiTaskModel::forward(const BuiltInputs& inputs) const {
  return multi_task_forward(inputs, *encoder_, qa_head_, gaze_head_);
}

HeadEvaluation MultiTaskModel::evaluate(const BuiltInputs& inputs, int correct,
                                        const GazeDistribution* target, double alpha) const {
  std::vector<Matrix> states = encode_copies(inputs, *encoder_);
  return heads_eval(states, inputs.layout, qa_head_, gaze_head_, correct, target, alpha, nullptr,
                    nullptr, 1.0, nullptr);
}

HeadEvaluation MultiTaskModel::forward_backward(const BuiltInputs& inputs, int correct,
                                                const GazeDistribution* target, double alpha,
                                                double grad_scale) {
  std::vector<std::unique_ptr<ForwardTrace>> traces;
  std::vector<Matrix> states;
  traces.reserve(inputs.sequences.size());
  states.reserve(inputs.sequences.size());
  for (const auto& seq : inputs.sequences) {
    traces.push_back(encoder_->forward(seq));
    states.push_back(traces.back()->states);
  }
  HeadGradients grads = heads_forward_backward(states, inputs.layout, qa_head_, gaze_head_,
                                               correct, target, alpha, grad_scale);
  for (std::size_t k = 0; k < traces.size(); ++k) {
    encoder_->backward(*traces[k], grads.d_states[k]);
  }
  return grads.eval;
}

}  // namespace gazeqa
