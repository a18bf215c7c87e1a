#include "gazeqa/gaze.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "gazeqa/errors.hpp"

namespace gazeqa {

using nlohmann::json;

std::string to_string(Condition condition) {
  return condition == Condition::Hunting ? "hunting" : "gathering";
}

Condition condition_from_string(const std::string& s) {
  if (s == "hunting") return Condition::Hunting;
  if (s == "gathering") return Condition::Gathering;
  throw ValidationError("unknown condition '" + s + "' (expected hunting or gathering)");
}

double GazeTrial::total_ms() const {
  return std::accumulate(tf_ms.begin(), tf_ms.end(), 0.0);
}

void check_distribution(const GazeDistribution& dist, double tol) {
  double sum = 0.0;
  for (double v : dist.values) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw ValidationError("distribution entry " + std::to_string(v) + " outside [0, 1]");
    }
    sum += v;
  }
  if (std::abs(sum - 1.0) > tol) {
    throw ValidationError("distribution sums to " + std::to_string(sum) + ", not 1");
  }
}

GazeStore load_gaze_json(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("gaze JSON: ") + e.what());
  }
  if (!root.is_object() || !root.contains("trials") || !root["trials"].is_array()) {
    throw ParseError("gaze JSON: expected top-level object with a 'trials' array");
  }
  GazeStore store;
  for (const json& t : root["trials"]) {
    GazeTrial trial;
    if (!t.contains("subject_id") || !t.contains("passage_id") || !t.contains("condition") ||
        !t.contains("correct") || !t.contains("tf_ms")) {
      throw ParseError("gaze JSON: trial needs subject_id, passage_id, condition, correct, tf_ms");
    }
    trial.subject_id = t["subject_id"].get<std::string>();
    trial.passage_id = t["passage_id"].get<std::string>();
    if (t.contains("question_id") && !t["question_id"].is_null()) {
      trial.question_id = t["question_id"].get<std::string>();
    }
    trial.condition = condition_from_string(t["condition"].get<std::string>());
    trial.correct = t["correct"].get<bool>();
    if (!t["tf_ms"].is_array()) throw ParseError("gaze JSON: tf_ms must be an array");
    for (const json& v : t["tf_ms"]) {
      if (!v.is_number()) throw ParseError("gaze JSON: tf_ms entries must be numbers");
      double ms = v.get<double>();
      if (ms < 0.0) {
        throw ValidationError("trial subject '" + trial.subject_id + "' passage '" + trial.passage_id +
                              "': negative fixation duration " + std::to_string(ms));
      }
      trial.tf_ms.push_back(ms);
    }
    store.trials.push_back(std::move(trial));
  }
  return store;
}

GazeStore load_gaze(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open gaze file '" + path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return load_gaze_json(buffer.str());
}

std::string gaze_to_json(const GazeStore& store) {
  json trials = json::array();
  for (const GazeTrial& trial : store.trials) {
    json t;
    t["subject_id"] = trial.subject_id;
    t["passage_id"] = trial.passage_id;
    t["question_id"] = trial.question_id ? json(*trial.question_id) : json(nullptr);
    t["condition"] = to_string(trial.condition);
    t["correct"] = trial.correct;
    t["tf_ms"] = trial.tf_ms;
    trials.push_back(std::move(t));
  }
  return json{{"trials", trials}}.dump(2);
}

void validate_gaze_against_corpus(const GazeStore& store, const Corpus& corpus) {
  for (const GazeTrial& trial : store.trials) {
    const Passage* passage = corpus.find_passage(trial.passage_id);
    if (!passage) {
      throw ValidationError("trial subject '" + trial.subject_id + "' references unknown passage '" +
                            trial.passage_id + "'");
    }
    if (trial.tf_ms.size() != passage->words.size()) {
      throw ValidationError("trial subject '" + trial.subject_id + "' passage '" + trial.passage_id +
                            "': " + std::to_string(trial.tf_ms.size()) + " durations for " +
                            std::to_string(passage->words.size()) + " words");
    }
  }
}

GazeDistribution normalize_trial(const GazeTrial& trial) {
  double total = trial.total_ms();
  if (!(total > 0.0)) {
    throw ValidationError("unusable trial: subject '" + trial.subject_id + "' passage '" +
                          trial.passage_id + "' has zero total fixation");
  }
  GazeDistribution dist;
  dist.granularity = Granularity::Word;
  dist.values.reserve(trial.tf_ms.size());
  for (double ms : trial.tf_ms) dist.values.push_back(ms / total);
  return dist;
}

GazeDistribution average_distributions(const std::vector<GazeDistribution>& dists) {
  if (dists.empty()) throw ValidationError("average_distributions: empty input");
  const std::size_t n = dists.front().size();
  const Granularity granularity = dists.front().granularity;
  GazeDistribution mean;
  mean.granularity = granularity;
  mean.values.assign(n, 0.0);
  for (const GazeDistribution& dist : dists) {
    if (dist.size() != n || dist.granularity != granularity) {
      throw ValidationError("average_distributions: mismatched length or granularity");
    }
    for (std::size_t i = 0; i < n; ++i) mean.values[i] += dist.values[i];
  }
  const double inv = 1.0 / static_cast<double>(dists.size());
  for (double& v : mean.values) v *= inv;
  return mean;
}

GazeDistribution aggregate_gaze(const std::vector<GazeTrial>& trials, const std::string& passage_id,
                                const std::optional<std::string>& question_id, Condition condition,
                                bool correct_only) {
  std::vector<GazeDistribution> normalized;
  for (const GazeTrial& trial : trials) {
    if (trial.passage_id != passage_id) continue;
    if (trial.question_id != question_id) continue;
    if (trial.condition != condition) continue;
    if (correct_only && !trial.correct) continue;
    if (!trial.usable()) continue;
    normalized.push_back(normalize_trial(trial));
  }
  if (normalized.empty()) {
    throw ValidationError("aggregate_gaze: no usable " + to_string(condition) + " trials for passage '" +
                          passage_id + "' question '" + (question_id ? *question_id : "<none>") + "'");
  }
  return average_distributions(normalized);
}

GazeDistribution split_to_tokens(const GazeDistribution& dist,
                                 const std::vector<int>& tokens_per_word) {
  if (dist.size() != tokens_per_word.size()) {
    throw ValidationError("split_to_tokens: " + std::to_string(dist.size()) + " words but " +
                          std::to_string(tokens_per_word.size()) + " token counts");
  }
  GazeDistribution out;
  out.granularity = Granularity::Token;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    int k = tokens_per_word[i];
    if (k < 1) {
      throw ValidationError("split_to_tokens: word " + std::to_string(i) + " has token count " +
                            std::to_string(k));
    }
    double share = dist.values[i] / static_cast<double>(k);
    for (int j = 0; j < k; ++j) out.values.push_back(share);
  }
  return out;
}

SpanReadingStats span_reading_stats(const std::vector<GazeTrial>& trials, const Passage& passage,
                                    const WordSpan& span) {
  if (span.start >= span.end || span.end > passage.words.size()) {
    throw ValidationError("span_reading_stats: invalid span [" + std::to_string(span.start) + ", " +
                          std::to_string(span.end) + ") on passage '" + passage.id + "'");
  }
  const std::size_t n_words = passage.words.size();
  const std::size_t n_within = span.size();
  const std::size_t n_outside = n_words - n_within;

  struct Accumulator {
    double within_ms = 0.0, outside_ms = 0.0;
    double within_norm = 0.0, outside_norm = 0.0;
    double total_ms = 0.0;
    std::size_t trials = 0;
  };
  std::map<Condition, Accumulator> acc;

  for (const GazeTrial& trial : trials) {
    if (trial.passage_id != passage.id) continue;
    if (trial.tf_ms.size() != n_words) {
      throw ValidationError("span_reading_stats: trial subject '" + trial.subject_id + "' has " +
                            std::to_string(trial.tf_ms.size()) + " durations for " +
                            std::to_string(n_words) + " words of passage '" + passage.id + "'");
    }
    if (!trial.usable()) continue;
    double total = trial.total_ms();
    double within = 0.0;
    for (std::size_t i = span.start; i < span.end; ++i) within += trial.tf_ms[i];
    double outside = total - within;

    Accumulator& a = acc[trial.condition];
    a.within_ms += within / static_cast<double>(n_within);
    a.within_norm += (within / total) / static_cast<double>(n_within);
    if (n_outside > 0) {
      a.outside_ms += outside / static_cast<double>(n_outside);
      a.outside_norm += (outside / total) / static_cast<double>(n_outside);
    }
    a.total_ms += total;
    ++a.trials;
  }

  SpanReadingStats stats;
  for (const auto& [condition, a] : acc) {
    SpanConditionStats s;
    const double inv = 1.0 / static_cast<double>(a.trials);
    s.mean_tf_within_ms = a.within_ms * inv;
    s.mean_norm_within = a.within_norm * inv;
    if (n_outside > 0) {
      s.mean_tf_outside_ms = a.outside_ms * inv;
      s.mean_norm_outside = a.outside_norm * inv;
    }
    s.mean_total_passage_ms = a.total_ms * inv;
    s.trial_count = a.trials;
    stats[condition] = s;
  }
  return stats;
}

std::map<Condition, double> condition_accuracy(const std::vector<GazeTrial>& trials) {
  std::map<Condition, std::pair<std::size_t, std::size_t>> counts;  // correct, total
  for (const GazeTrial& trial : trials) {
    auto& [correct, total] = counts[trial.condition];
    if (trial.correct) ++correct;
    ++total;
  }
  std::map<Condition, double> accuracy;
  for (const auto& [condition, ct] : counts) {
    accuracy[condition] = static_cast<double>(ct.first) / static_cast<double>(ct.second);
  }
  return accuracy;
}

namespace {

std::string csv_escape(const std::string& field) {
  if (field.find_first_of(",\"\n") == std::string::npos) return field;
  std::string quoted = "\"";
  for (char c : field) {
    if (c == '"') quoted += "\"\"";
    else quoted.push_back(c);
  }
  quoted += "\"";
  return quoted;
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::size_t export_long_csv(const std::vector<GazeTrial>& trials, const Corpus& corpus,
                            const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RunAbort("cannot write CSV file '" + path + "'");
  out << "subject_id,condition,passage_id,question_id,word_index,word,"
         "in_critical_span,in_distractor_span,tf_ms,norm_tf,correct\n";

  std::size_t rows = 0;
  for (const GazeTrial& trial : trials) {
    const Passage* passage = corpus.find_passage(trial.passage_id);
    if (!passage) {
      throw ValidationError("export_long_csv: trial subject '" + trial.subject_id +
                            "' references unknown passage '" + trial.passage_id + "'");
    }
    if (trial.tf_ms.size() != passage->words.size()) {
      throw ValidationError("export_long_csv: trial subject '" + trial.subject_id + "' has " +
                            std::to_string(trial.tf_ms.size()) + " durations for " +
                            std::to_string(passage->words.size()) + " words of passage '" +
                            passage->id + "'");
    }

    std::optional<WordSpan> critical;
    std::optional<WordSpan> distractor;
    if (trial.question_id) {
      for (const Question& q : corpus.questions_for(*passage)) {
        if (q.id == *trial.question_id) {
          critical = q.critical_span;
          distractor = q.distractor_span;
          break;
        }
      }
    }

    const double total = trial.total_ms();
    for (std::size_t w = 0; w < trial.tf_ms.size(); ++w) {
      out << csv_escape(trial.subject_id) << ',' << to_string(trial.condition) << ','
          << csv_escape(trial.passage_id) << ','
          << (trial.question_id ? csv_escape(*trial.question_id) : "") << ',' << w << ','
          << csv_escape(passage->words[w]) << ',' << (critical && critical->contains(w) ? 1 : 0) << ','
          << (distractor && distractor->contains(w) ? 1 : 0) << ',' << format_double(trial.tf_ms[w])
          << ',' << (total > 0.0 ? format_double(trial.tf_ms[w] / total) : "") << ','
          << (trial.correct ? 1 : 0) << '\n';
      ++rows;
    }
  }
  if (!out) throw RunAbort("I/O failure while writing '" + path + "'");
  return rows;
}

}  // namespace gazeqa
