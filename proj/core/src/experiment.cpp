#include "gazeqa/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "gazeqa/errors.hpp"
#include "gazeqa/tiny_encoder.hpp"

namespace gazeqa {

namespace {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a + 0x9e3779b97f4a7c15ull + (b << 1);
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebull;
  x ^= x >> 31;
  return x;
}

constexpr std::uint64_t kExternalStream = 0xE47E51Dull;

std::string trim(const std::string& s) {
  std::size_t begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  std::size_t end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

std::vector<std::string> split_list(const std::string& value, const std::string& key) {
  std::vector<std::string> items;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) throw ParseError("config field '" + key + "' has an empty list entry");
    items.push_back(item);
  }
  if (items.empty()) throw ParseError("config field '" + key + "' is an empty list");
  return items;
}

double parse_double(const std::string& value, const std::string& key) {
  std::size_t used = 0;
  double parsed = 0.0;
  try {
    parsed = std::stod(value, &used);
  } catch (const std::exception&) {
    throw ParseError("config field '" + key + "' is not a number: '" + value + "'");
  }
  if (used != value.size()) {
    throw ParseError("config field '" + key + "' has trailing characters: '" + value + "'");
  }
  return parsed;
}

long parse_long(const std::string& value, const std::string& key) {
  std::size_t used = 0;
  long parsed = 0;
  try {
    parsed = std::stol(value, &used);
  } catch (const std::exception&) {
    throw ParseError("config field '" + key + "' is not an integer: '" + value + "'");
  }
  if (used != value.size()) {
    throw ParseError("config field '" + key + "' has trailing characters: '" + value + "'");
  }
  return parsed;
}

bool parse_bool(const std::string& value, const std::string& key) {
  if (value == "true") return true;
  if (value == "false") return false;
  throw ParseError("config field '" + key + "' must be true or false, got '" + value + "'");
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void validate_experiment_config(const ExperimentConfig& config) {
  if (config.encoder_spec.empty()) throw ParseError("missing config field 'encoder'");
  if (config.alpha_grid.empty()) throw ParseError("config field 'alpha_grid' is empty");
  for (double a : config.alpha_grid) {
    if (!(a >= 0.0 && a <= 1.0)) {
      throw ParseError("config field 'alpha_grid' has a value outside [0, 1]: " +
                       format_double(a));
    }
  }
  std::set<double> unique_alphas(config.alpha_grid.begin(), config.alpha_grid.end());
  if (unique_alphas.size() != config.alpha_grid.size()) {
    throw ParseError("config field 'alpha_grid' has duplicate values");
  }
  if (!config.target && config.alpha_grid != std::vector<double>{0.0}) {
    throw ParseError("with target = none, alpha_grid must be exactly 0");
  }
  if (config.epochs < 1) throw ParseError("config field 'epochs' must be at least 1");
  if (config.seeds.empty()) throw ParseError("config field 'seeds' is empty");
  if (config.batch_size < 1) throw ParseError("config field 'batch_size' must be at least 1");
  if (!(config.learning_rate > 0.0)) {
    throw ParseError("config field 'learning_rate' must be positive");
  }
  if (!(config.adam_beta1 >= 0.0 && config.adam_beta1 < 1.0) ||
      !(config.adam_beta2 >= 0.0 && config.adam_beta2 < 1.0)) {
    throw ParseError("adam betas must lie in [0, 1)");
  }
  if (!(config.adam_eps > 0.0)) throw ParseError("config field 'adam_eps' must be positive");
  if (config.max_steps < 0) throw ParseError("config field 'max_steps' must be non-negative");
  if (!config.cv) {
    if (config.train_articles.empty() || config.dev_articles.empty() ||
        config.test_articles.empty()) {
      throw ParseError("explicit folds need train_articles, dev_articles and test_articles");
    }
  }
  if (config.target && config.target->kind == TargetKind::GazeExternal &&
      config.target->external_target_len < 1) {
    throw ParseError("config field 'external_target_len' must be positive");
  }
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::stringstream lines(text);
  std::string line;
  int line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParseError("config line " + std::to_string(line_no) + " is not key = value: '" +
                       line + "'");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ParseError("config line " + std::to_string(line_no) + " has no key");
    if (!kv.emplace(key, value).second) {
      throw ParseError("duplicate config field '" + key + "'");
    }
  }

  std::set<std::string> consumed;
  auto take = [&](const std::string& key) -> const std::string* {
    auto it = kv.find(key);
    if (it == kv.end()) return nullptr;
    consumed.insert(key);
    return &it->second;
  };
  auto require = [&](const std::string& key) -> const std::string& {
    const std::string* value = take(key);
    if (!value) throw ParseError("missing config field '" + key + "'");
    return *value;
  };

  ExperimentConfig config;
  config.encoder_spec = require("encoder");

  const std::string& target = require("target");
  if (target != "none") {
    TargetSpec spec;
    spec.kind = parse_target_kind(target);
    if (const std::string* len = take("external_target_len")) {
      spec.external_target_len = static_cast<int>(parse_long(*len, "external_target_len"));
    }
    config.target = spec;
  }

  for (const std::string& item : split_list(require("alpha_grid"), "alpha_grid")) {
    config.alpha_grid.push_back(parse_double(item, "alpha_grid"));
  }
  config.epochs = static_cast<int>(parse_long(require("epochs"), "epochs"));

  const std::string& folds = require("folds");
  if (folds == "cv") {
    config.cv = true;
    config.cv_k = static_cast<int>(parse_long(require("cv_k"), "cv_k"));
    config.fold_seed = static_cast<std::uint64_t>(parse_long(require("fold_seed"), "fold_seed"));
  } else if (folds == "explicit") {
    config.cv = false;
    config.train_articles = split_list(require("train_articles"), "train_articles");
    config.dev_articles = split_list(require("dev_articles"), "dev_articles");
    config.test_articles = split_list(require("test_articles"), "test_articles");
  } else {
    throw ParseError("config field 'folds' must be cv or explicit, got '" + folds + "'");
  }

  for (const std::string& item : split_list(require("seeds"), "seeds")) {
    config.seeds.push_back(static_cast<std::uint64_t>(parse_long(item, "seeds")));
  }
  config.batch_size = static_cast<int>(parse_long(require("batch_size"), "batch_size"));
  config.learning_rate = parse_double(require("learning_rate"), "learning_rate");

  if (const std::string* v = take("adam_beta1")) config.adam_beta1 = parse_double(*v, "adam_beta1");
  if (const std::string* v = take("adam_beta2")) config.adam_beta2 = parse_double(*v, "adam_beta2");
  if (const std::string* v = take("adam_eps")) config.adam_eps = parse_double(*v, "adam_eps");
  if (const std::string* v = take("truncation")) {
    config.truncation_enabled = parse_bool(*v, "truncation");
  }
  if (const std::string* v = take("max_steps")) config.max_steps = parse_long(*v, "max_steps");
  if (const std::string* v = take("external_corpus")) config.external_corpus_path = *v;
  if (const std::string* v = take("external_gaze")) config.external_gaze_path = *v;

  for (const auto& [key, value] : kv) {
    if (!consumed.count(key)) throw ParseError("unknown config field '" + key + "'");
  }

  validate_experiment_config(config);
  return config;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open config '" + path + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_experiment_config(buffer.str());
}

std::string config_to_text(const ExperimentConfig& config) {
  std::ostringstream out;
  auto join = [](const std::vector<std::string>& items) {
    std::string joined;
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (i) joined += ",";
      joined += items[i];
    }
    return joined;
  };
  out << "encoder = " << config.encoder_spec << "\n";
  out << "target = " << (config.target ? target_kind_name(config.target->kind) : "none") << "\n";
  if (config.target && config.target->kind == TargetKind::GazeExternal) {
    out << "external_target_len = " << config.target->external_target_len << "\n";
  }
  out << "alpha_grid = ";
  for (std::size_t i = 0; i < config.alpha_grid.size(); ++i) {
    if (i) out << ",";
    out << format_double(config.alpha_grid[i]);
  }
  out << "\n";
  out << "epochs = " << config.epochs << "\n";
  if (config.cv) {
    out << "folds = cv\n";
    out << "cv_k = " << config.cv_k << "\n";
    out << "fold_seed = " << config.fold_seed << "\n";
  } else {
    out << "folds = explicit\n";
    out << "train_articles = " << join(config.train_articles) << "\n";
    out << "dev_articles = " << join(config.dev_articles) << "\n";
    out << "test_articles = " << join(config.test_articles) << "\n";
  }
  out << "seeds = ";
  for (std::size_t i = 0; i < config.seeds.size(); ++i) {
    if (i) out << ",";
    out << config.seeds[i];
  }
  out << "\n";
  out << "batch_size = " << config.batch_size << "\n";
  out << "learning_rate = " << format_double(config.learning_rate) << "\n";
  out << "adam_beta1 = " << format_double(config.adam_beta1) << "\n";
  out << "adam_beta2 = " << format_double(config.adam_beta2) << "\n";
  out << "adam_eps = " << format_double(config.adam_eps) << "\n";
  out << "truncation = " << (config.truncation_enabled ? "true" : "false") << "\n";
  if (config.max_steps > 0) out << "max_steps = " << config.max_steps << "\n";
  if (!config.external_corpus_path.empty()) {
    out << "external_corpus = " << config.external_corpus_path << "\n";
  }
  if (!config.external_gaze_path.empty()) {
    out << "external_gaze = " << config.external_gaze_path << "\n";
  }
  return out.str();
}

std::vector<Fold> make_folds(const std::vector<std::string>& article_ids, int k,
                             std::uint64_t seed) {
  if (k < 3) throw ValidationError("fold construction needs k >= 3 groups, got " +
                                   std::to_string(k));
  if (article_ids.empty() || article_ids.size() % static_cast<std::size_t>(k) != 0) {
    throw ValidationError(std::to_string(article_ids.size()) +
                          " articles cannot be split into " + std::to_string(k) +
                          " equal groups");
  }
  std::set<std::string> unique(article_ids.begin(), article_ids.end());
  if (unique.size() != article_ids.size()) throw ValidationError("duplicate article ids");

  std::vector<std::string> shuffled = article_ids;
  std::mt19937_64 rng(seed);
  deterministic_shuffle(shuffled, rng);

  const std::size_t group_size = shuffled.size() / static_cast<std::size_t>(k);
  auto group = [&](int g) {
    auto begin = shuffled.begin() + static_cast<std::ptrdiff_t>(group_size) * g;
    return std::vector<std::string>(begin, begin + static_cast<std::ptrdiff_t>(group_size));
  };

  std::vector<Fold> folds;
  for (int i = 0; i < k; ++i) {
    Fold fold;
    fold.test = group(i);
    fold.dev = group((i + 1) % k);
    for (int offset = 2; offset < k; ++offset) {
      std::vector<std::string> g = group((i + offset) % k);
      fold.train.insert(fold.train.end(), g.begin(), g.end());
    }
    folds.push_back(std::move(fold));
  }
  return folds;
}

AdamOptimizer::AdamOptimizer(std::vector<Tensor*> params, double learning_rate, double beta1,
                             double beta2, double eps)
    : params_(std::move(params)), lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (Tensor* t : params_) {
    m_.emplace_back(t->size(), 0.0);
    v_.emplace_back(t->size(), 0.0);
  }
}

void AdamOptimizer::step() {
  ++steps_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (std::size_t p = 0; p < params_.size(); ++p) {
    Tensor& t = *params_[p];
    std::vector<double>& m = m_[p];
    std::vector<double>& v = v_[p];
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double g = t.grad[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      t.value[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
    }
  }
}

StepStats apply_training_step(MultiTaskModel& model, const std::vector<StepItem>& qa_batch,
                              const std::vector<StepItem>& gaze_batch, double alpha,
                              AdamOptimizer& optimizer) {
  if (qa_batch.empty() && gaze_batch.empty()) {
    throw ValidationError("training step with no items");
  }
  model.zero_grad();
  StepStats stats;
  double qa_sum = 0.0, gaze_sum = 0.0;
  auto run = [&](const std::vector<StepItem>& batch) {
    const double scale = 1.0 / static_cast<double>(batch.size());
    for (const StepItem& item : batch) {
      HeadEvaluation eval =
          model.forward_backward(*item.inputs, item.correct, item.target, alpha, scale);
      if (!std::isfinite(eval.loss)) throw RunAbort("non-finite training loss");
      stats.loss += scale * eval.loss;
      if (item.correct >= 0) {
        qa_sum += eval.l_qa;
        ++stats.qa_items;
      }
      if (item.target) {
        gaze_sum += eval.l_gaze;
        ++stats.gaze_items;
      }
    }
  };
  if (!qa_batch.empty()) run(qa_batch);
  if (!gaze_batch.empty()) run(gaze_batch);
  optimizer.step();
  if (stats.qa_items) stats.mean_qa_loss = qa_sum / static_cast<double>(stats.qa_items);
  if (stats.gaze_items) stats.mean_gaze_loss = gaze_sum / static_cast<double>(stats.gaze_items);
  return stats;
}

Selection select_model(const std::vector<EpochEntry>& history) {
  if (history.empty()) throw ValidationError("cannot select a model from an empty history");
  const EpochEntry* best = &history.front();
  for (const EpochEntry& e : history) {
    if (e.dev_accuracy > best->dev_accuracy ||
        (e.dev_accuracy == best->dev_accuracy &&
         (e.alpha < best->alpha || (e.alpha == best->alpha && e.epoch < best->epoch)))) {
      best = &e;
    }
  }
  return Selection{best->epoch, best->alpha, best->dev_accuracy};
}

namespace {

int argmax_lowest(const std::vector<double>& values) {
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

struct PreparedExample {
  const Passage* passage = nullptr;
  Question question;
  BuiltInputs inputs;
  std::optional<GazeDistribution> target;
  bool target_built = false;
};

struct PreparedChunk {
  BuiltInputs inputs;
  GazeDistribution target;
};

double accuracy_over(const MultiTaskModel& model, const std::vector<PreparedExample>& examples,
                     const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ValidationError("no questions to evaluate");
  std::size_t hits = 0;
  for (std::size_t i : indices) {
    MultiTaskOutput out = model.forward(examples[i].inputs);
    if (argmax_lowest(out.answer_probs) == examples[i].question.correct) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(indices.size());
}

nlohmann::json epoch_entry_json(const EpochEntry& e) {
  return nlohmann::json{{"seed", e.seed},
                        {"fold", e.fold},
                        {"alpha", e.alpha},
                        {"epoch", e.epoch},
                        {"dev_accuracy", e.dev_accuracy},
                        {"mean_qa_loss", e.mean_qa_loss},
                        {"mean_gaze_loss", e.mean_gaze_loss}};
}

}  // namespace

std::string run_record_to_json(const RunRecord& record) {
  nlohmann::json doc;
  doc["schema_version"] = record.schema_version;
  doc["config"] = record.config_text;
  doc["aggregate_test_accuracy"] = record.aggregate_test_accuracy;
  doc["truncation_events"] = record.truncation_events;
  doc["history"] = nlohmann::json::array();
  for (const EpochEntry& e : record.history) doc["history"].push_back(epoch_entry_json(e));
  doc["selections"] = nlohmann::json::array();
  for (const SelectionRecord& s : record.selections) {
    doc["selections"].push_back(nlohmann::json{{"seed", s.seed},
                                               {"fold", s.fold},
                                               {"epoch", s.epoch},
                                               {"alpha", s.alpha},
                                               {"dev_accuracy", s.dev_accuracy},
                                               {"test_accuracy", s.test_accuracy}});
  }
  return doc.dump(2) + "\n";
}

void save_run_record(const std::string& path, const RunRecord& record) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open '" + path + "' for writing");
  out << run_record_to_json(record);
  if (!out) throw ParseError("failed writing run record to '" + path + "'");
}

EvalResult evaluate_model(const MultiTaskModel& model, const Corpus& corpus,
                          const std::vector<std::string>& articles, bool truncation_enabled) {
  std::set<std::string> filter(articles.begin(), articles.end());
  for (const std::string& id : filter) {
    bool known = false;
    for (const Article& a : corpus.articles()) known = known || a.id == id;
    if (!known) throw ValidationError("unknown article id '" + id + "'");
  }

  EvalResult result;
  std::size_t hits = 0;
  for (const Passage* passage : corpus.passages()) {
    if (!filter.empty() && !filter.count(passage->article_id)) continue;
    for (const Question& question : corpus.questions_for(*passage)) {
      BuiltInputs inputs = build_inputs(*passage, question, model.encoder(), truncation_enabled);
      MultiTaskOutput out = model.forward(inputs);
      Prediction pred;
      pred.passage_id = passage->id;
      pred.question_id = question.id;
      pred.predicted = argmax_lowest(out.answer_probs);
      pred.correct = question.correct;
      pred.probs = out.answer_probs;
      if (pred.predicted == pred.correct) ++hits;
      result.predictions.push_back(std::move(pred));
    }
  }
  if (result.predictions.empty()) throw ValidationError("no questions to evaluate");
  result.accuracy = static_cast<double>(hits) / static_cast<double>(result.predictions.size());
  return result;
}

RunRecord train(const ExperimentConfig& config, const ExperimentData& data,
                const std::string& out_dir) {
  validate_experiment_config(config);
  if (!data.corpus) throw ValidationError("train needs a corpus");
  const Corpus& corpus = *data.corpus;

  const TinyEncoderConfig encoder_config = parse_tiny_encoder_spec(config.encoder_spec);
  const TinyEncoder base_encoder(encoder_config);  // task-naive: tokenization and targets

  const bool external = config.target && config.target->kind == TargetKind::GazeExternal;
  const bool needs_targets = config.target && !external;
  if (needs_targets && !data.gaze && !data.target_cache) {
    if (config.target->kind == TargetKind::GazeHunting ||
        config.target->kind == TargetKind::GazeGathering) {
      throw ValidationError("gaze targets need a gaze store or a target cache");
    }
  }
  if (external && (!data.external_chunks || data.external_chunks->empty())) {
    throw ValidationError("gaze_external training needs a non-empty external chunk list");
  }

  std::vector<Fold> folds;
  if (config.cv) {
    folds = make_folds(corpus.article_ids(), config.cv_k, config.fold_seed);
  } else {
    std::set<std::string> known;
    for (const Article& a : corpus.articles()) known.insert(a.id);
    std::set<std::string> seen;
    for (const auto* list : {&config.train_articles, &config.dev_articles,
                             &config.test_articles}) {
      for (const std::string& id : *list) {
        if (!known.count(id)) throw ValidationError("unknown article id '" + id + "'");
        if (!seen.insert(id).second) {
          throw ValidationError("article '" + id + "' appears in more than one split");
        }
      }
    }
    folds.push_back(Fold{config.train_articles, config.dev_articles, config.test_articles});
  }

  RunRecord record;
  record.config_text = config_to_text(config);

  // Inputs are weight-independent, so they are shared by every run.
  std::vector<PreparedExample> examples;
  std::map<std::string, std::vector<std::size_t>> by_article;
  for (const Passage* passage : corpus.passages()) {
    std::vector<Question> questions = corpus.questions_for(*passage);
    for (Question& question : questions) {
      PreparedExample ex;
      ex.passage = passage;
      ex.question = std::move(question);
      ex.inputs = build_inputs(*passage, ex.question, base_encoder, config.truncation_enabled);
      if (ex.inputs.truncated) ++record.truncation_events;
      by_article[passage->article_id].push_back(examples.size());
      examples.push_back(std::move(ex));
    }
  }

  const std::string kind_name = config.target ? target_kind_name(config.target->kind) : "";
  TargetContext target_context;
  target_context.gaze = data.gaze;
  auto ensure_target = [&](PreparedExample& ex) {
    if (ex.target_built) return;
    ex.target_built = true;
    GazeDistribution target;
    bool from_cache = false;
    if (data.target_cache) {
      auto entry = data.target_cache->find(target_example_id(ex.passage->id, ex.question.id));
      if (entry != data.target_cache->end()) {
        auto values = entry->second.find(kind_name);
        if (values != entry->second.end()) {
          target.granularity = Granularity::Token;
          target.values = values->second;
          check_distribution(target);
          from_cache = true;
        }
      }
    }
    if (!from_cache) {
      target = build_target(*config.target, *ex.passage, ex.question, base_encoder,
                            target_context).target;
    }
    const std::size_t kept = ex.inputs.layout.passage_tokens;
    if (ex.inputs.truncated) {
      target = truncate_token_target(target, kept);
    } else if (target.values.size() != kept) {
      throw ValidationError("target for question '" + ex.question.id + "' has " +
                            std::to_string(target.values.size()) + " entries but passage '" +
                            ex.passage->id + "' has " + std::to_string(kept) + " tokens");
    }
    ex.target = std::move(target);
  };

  std::vector<PreparedChunk> chunks;
  if (external) {
    for (const ExternalChunk& chunk : *data.external_chunks) {
      PreparedChunk prepared;
      prepared.inputs =
          build_passage_only_input(chunk.passage, base_encoder, config.truncation_enabled);
      prepared.target = split_to_tokens(
          chunk.gaze, base_encoder.tokenize(chunk.passage.words).tokens_per_word);
      if (prepared.inputs.truncated) {
        ++record.truncation_events;
        prepared.target =
            truncate_token_target(prepared.target, prepared.inputs.layout.passage_tokens);
      }
      chunks.push_back(std::move(prepared));
    }
  }

  auto indices_for = [&](const std::vector<std::string>& articles, const char* split,
                         std::size_t fold_index) {
    std::vector<std::size_t> indices;
    for (const std::string& id : articles) {
      auto it = by_article.find(id);
      if (it != by_article.end()) {
        indices.insert(indices.end(), it->second.begin(), it->second.end());
      }
    }
    if (indices.empty()) {
      throw ValidationError("fold " + std::to_string(fold_index) + " has no " + split +
                            " questions");
    }
    return indices;
  };

  double test_accuracy_sum = 0.0;
  for (std::uint64_t seed : config.seeds) {
    for (std::size_t fold_index = 0; fold_index < folds.size(); ++fold_index) {
      const Fold& fold = folds[fold_index];
      std::vector<std::size_t> train_idx = indices_for(fold.train, "train", fold_index);
      std::vector<std::size_t> dev_idx = indices_for(fold.dev, "dev", fold_index);
      std::vector<std::size_t> test_idx = indices_for(fold.test, "test", fold_index);

      if (needs_targets) {
        for (std::size_t i : train_idx) ensure_target(examples[i]);
      }

      std::vector<EpochEntry> local_history;
      struct Candidate {
        double alpha = 0.0;
        int epoch = 0;
        double dev_accuracy = -1.0;
        std::optional<MultiTaskModel> model;
      };
      std::vector<Candidate> candidates;

      for (double alpha : config.alpha_grid) {
        MultiTaskModel model(std::make_unique<TinyEncoder>(encoder_config));
        AdamOptimizer optimizer(model.parameters(), config.learning_rate, config.adam_beta1,
                                config.adam_beta2, config.adam_eps);
        std::mt19937_64 data_rng(mix_seed(seed, fold_index));
        std::mt19937_64 external_rng(mix_seed(mix_seed(seed, fold_index), kExternalStream));

        Candidate candidate;
        candidate.alpha = alpha;
        long steps_done = 0;
        bool capped = false;

        for (int epoch = 1; epoch <= config.epochs && !capped; ++epoch) {
          std::vector<std::size_t> order = train_idx;
          deterministic_shuffle(order, data_rng);

          double qa_sum = 0.0, gaze_sum = 0.0;
          std::size_t qa_n = 0, gaze_n = 0;
          for (std::size_t offset = 0; offset < order.size();
               offset += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t end =
                std::min(order.size(), offset + static_cast<std::size_t>(config.batch_size));
            std::vector<StepItem> qa_batch;
            for (std::size_t b = offset; b < end; ++b) {
              const PreparedExample& ex = examples[order[b]];
              qa_batch.push_back(StepItem{&ex.inputs, ex.question.correct,
                                          ex.target ? &*ex.target : nullptr});
            }
            std::vector<StepItem> gaze_batch;
            if (external && alpha > 0.0) {
              for (std::size_t b = offset; b < end; ++b) {
                const PreparedChunk& chunk = chunks[external_rng() % chunks.size()];
                gaze_batch.push_back(StepItem{&chunk.inputs, -1, &chunk.target});
              }
            }
            StepStats stats;
            try {
              stats = apply_training_step(model, qa_batch, gaze_batch, alpha, optimizer);
            } catch (const RunAbort& abort) {
              throw RunAbort(std::string(abort.what()) + " (seed " + std::to_string(seed) +
                             ", fold " + std::to_string(fold_index) + ", alpha " +
                             format_double(alpha) + ", epoch " + std::to_string(epoch) + ")");
            }
            qa_sum += stats.mean_qa_loss * static_cast<double>(stats.qa_items);
            qa_n += stats.qa_items;
            gaze_sum += stats.mean_gaze_loss * static_cast<double>(stats.gaze_items);
            gaze_n += stats.gaze_items;
            ++steps_done;
            if (config.max_steps > 0 && steps_done >= config.max_steps) {
              capped = true;
              break;
            }
          }

          EpochEntry entry;
          entry.seed = seed;
          entry.fold = fold_index;
          entry.alpha = alpha;
          entry.epoch = epoch;
          entry.dev_accuracy = accuracy_over(model, examples, dev_idx);
          entry.mean_qa_loss = qa_n ? qa_sum / static_cast<double>(qa_n) : 0.0;
          entry.mean_gaze_loss = gaze_n ? gaze_sum / static_cast<double>(gaze_n) : 0.0;
          local_history.push_back(entry);
          record.history.push_back(entry);

          if (entry.dev_accuracy > candidate.dev_accuracy) {
            candidate.dev_accuracy = entry.dev_accuracy;
            candidate.epoch = epoch;
            candidate.model = model.clone();
          }
        }
        candidates.push_back(std::move(candidate));
      }

      Selection selection = select_model(local_history);
      const Candidate* chosen = nullptr;
      for (const Candidate& c : candidates) {
        if (c.alpha == selection.alpha) chosen = &c;
      }
      if (!chosen || !chosen->model || chosen->epoch != selection.epoch) {
        throw RunAbort("internal: selection does not match any tracked snapshot");
      }

      SelectionRecord sel;
      sel.seed = seed;
      sel.fold = fold_index;
      sel.epoch = selection.epoch;
      sel.alpha = selection.alpha;
      sel.dev_accuracy = selection.dev_accuracy;
      sel.test_accuracy = accuracy_over(*chosen->model, examples, test_idx);
      record.selections.push_back(sel);
      test_accuracy_sum += sel.test_accuracy;

      if (!out_dir.empty()) {
        std::string dir = out_dir + "/checkpoints/seed" + std::to_string(seed) + "_fold" +
                          std::to_string(fold_index);
        save_checkpoint(dir, *chosen->model, record.config_text);
      }
    }
  }

  record.aggregate_test_accuracy =
      test_accuracy_sum / static_cast<double>(record.selections.size());
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    save_run_record(out_dir + "/run_record.json", record);
  }
  return record;
}

void save_checkpoint(const std::string& dir, const MultiTaskModel& model,
                     const std::string& config_text) {
  std::filesystem::create_directories(dir);
  nlohmann::json doc;
  doc["format_version"] = 1;
  doc["encoder"] = model.encoder().id();
  doc["config"] = config_text;
  nlohmann::json tensors = nlohmann::json::array();
  auto add = [&](const Tensor& t) {
    tensors.push_back(nlohmann::json{{"name", t.name}, {"shape", t.shape}, {"values", t.value}});
  };
  for (const Tensor* t : model.encoder().parameters()) add(*t);
  add(model.qa_head().w);
  add(model.qa_head().b);
  add(model.gaze_head().v);
  doc["tensors"] = std::move(tensors);

  std::ofstream out(dir + "/checkpoint.json");
  if (!out) throw ParseError("cannot open '" + dir + "/checkpoint.json' for writing");
  out << doc.dump() << '\n';
  if (!out) throw ParseError("failed writing checkpoint to '" + dir + "'");
}

namespace {

nlohmann::json read_checkpoint_json(const std::string& dir) {
  const std::string path = dir + "/checkpoint.json";
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open checkpoint '" + path + "'");
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint '" + path + "': " + e.what());
  }
  return doc;
}

}  // namespace

MultiTaskModel load_checkpoint(const std::string& dir) {
  nlohmann::json doc = read_checkpoint_json(dir);
  try {
    if (doc.at("format_version").get<int>() != 1) {
      throw ParseError("checkpoint '" + dir + "' has an unsupported format version");
    }
    TinyEncoderConfig encoder_config =
        parse_tiny_encoder_spec(doc.at("encoder").get<std::string>());
    MultiTaskModel model(std::make_unique<TinyEncoder>(encoder_config));

    std::map<std::string, const nlohmann::json*> stored;
    for (const auto& tensor : doc.at("tensors")) {
      stored[tensor.at("name").get<std::string>()] = &tensor;
    }
    for (Tensor* t : model.parameters()) {
      auto it = stored.find(t->name);
      if (it == stored.end()) {
        throw ParseError("checkpoint '" + dir + "' is missing tensor '" + t->name + "'");
      }
      const nlohmann::json& entry = *it->second;
      if (entry.at("shape").get<std::vector<std::size_t>>() != t->shape) {
        throw ParseError("checkpoint tensor '" + t->name + "' has the wrong shape");
      }
      std::vector<double> values = entry.at("values").get<std::vector<double>>();
      if (values.size() != t->size()) {
        throw ParseError("checkpoint tensor '" + t->name + "' has the wrong size");
      }
      t->value = std::move(values);
      stored.erase(it);
    }
    if (!stored.empty()) {
      throw ParseError("checkpoint '" + dir + "' has an unexpected tensor '" +
                       stored.begin()->first + "'");
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint '" + dir + "': " + e.what());
  }
}

std::string checkpoint_config_text(const std::string& dir) {
  nlohmann::json doc = read_checkpoint_json(dir);
  try {
    return doc.at("config").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint '" + dir + "': " + e.what());
  }
}

}  // namespace gazeqa
