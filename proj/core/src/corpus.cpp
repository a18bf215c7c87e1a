#include "gazeqa/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "gazeqa/errors.hpp"

namespace gazeqa {

using nlohmann::json;

std::atomic<long>& loss_floor_hits() {
  static std::atomic<long> hits{0};
  return hits;
}

void warn(const std::string& message) {
  std::cerr << "warning: " << message << "\n";
}

std::string to_string(Level level) {
  switch (level) {
    case Level::Advanced: return "advanced";
    case Level::Elementary: return "elementary";
    case Level::Other: return "other";
  }
  return "other";
}

Level level_from_string(const std::string& s) {
  std::string lower;
  lower.reserve(s.size());
  for (char c : s) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (lower == "advanced" || lower == "adv") return Level::Advanced;
  if (lower == "elementary" || lower == "ele") return Level::Elementary;
  if (lower == "other" || lower == "intermediate") return Level::Other;
  throw ValidationError("unknown passage level '" + s + "'");
}

std::string to_string(CorpusFormat format) {
  return format == CorpusFormat::SpanAnnotated ? "span_annotated" : "plain";
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string current;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!current.empty()) {
        words.push_back(std::move(current));
        current.clear();
      }
    } else {
      current.push_back(c);
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

namespace {

// Character range [begin, end) of each whitespace-delimited word in text.
std::vector<std::pair<std::size_t, std::size_t>> word_char_ranges(const std::string& text) {
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i >= text.size()) break;
    std::size_t begin = i;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    ranges.emplace_back(begin, i);
  }
  return ranges;
}

WordSpan char_span_to_word_span(const Passage& passage, std::size_t start_char,
                                std::size_t end_char, const std::string& question_id) {
  if (end_char <= start_char || end_char > passage.text.size()) {
    throw ValidationError("question '" + question_id + "': character span [" +
                          std::to_string(start_char) + ", " + std::to_string(end_char) +
                          ") is empty or exceeds passage '" + passage.id + "' text length " +
                          std::to_string(passage.text.size()));
  }
  auto ranges = word_char_ranges(passage.text);
  std::size_t first = ranges.size();
  std::size_t last = 0;
  bool any = false;
  for (std::size_t w = 0; w < ranges.size(); ++w) {
    if (ranges[w].second > start_char && ranges[w].first < end_char) {
      if (!any) first = w;
      last = w;
      any = true;
    }
  }
  if (!any) {
    throw ValidationError("question '" + question_id + "': character span covers no word of passage '" +
                          passage.id + "'");
  }
  return WordSpan{first, last + 1};
}

void check_word_span(const WordSpan& span, const Passage& passage, const std::string& question_id) {
  if (span.start >= span.end) {
    throw ValidationError("question '" + question_id + "': empty span [" + std::to_string(span.start) +
                          ", " + std::to_string(span.end) + ") on passage '" + passage.id + "'");
  }
  if (span.end > passage.words.size()) {
    throw ValidationError("question '" + question_id + "': span end " + std::to_string(span.end) +
                          " exceeds word count " + std::to_string(passage.words.size()) +
                          " of passage '" + passage.id + "'");
  }
}

const json& require_field(const json& obj, const char* key, const std::string& context) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw ParseError(context + ": missing field '" + key + "'");
  }
  return *it;
}

std::string require_string(const json& obj, const char* key, const std::string& context) {
  const json& v = require_field(obj, key, context);
  if (!v.is_string()) throw ParseError(context + ": field '" + std::string(key) + "' must be a string");
  return v.get<std::string>();
}

int correct_index_from_letter(const std::string& letter, const std::string& question_id) {
  if (letter.size() == 1 && letter[0] >= 'A' && letter[0] <= 'D') return letter[0] - 'A';
  throw ValidationError("question '" + question_id + "': correct answer must be one of A-D, got '" +
                        letter + "'");
}

// Span entries appear either as a single object or as an array of objects,
// one per level variant. Each names its passage and either word or character
// offsets; character offsets are converted here.
void parse_span_entries(const json& node, const std::string& question_id,
                        const std::map<std::string, const Passage*>& passages_by_id,
                        std::map<std::string, WordSpan>& out) {
  auto parse_one = [&](const json& entry) {
    if (!entry.is_object()) {
      throw ParseError("question '" + question_id + "': span entry must be an object");
    }
    std::string passage_id = require_string(entry, "passage_id", "question '" + question_id + "'");
    auto pit = passages_by_id.find(passage_id);
    if (pit == passages_by_id.end()) {
      throw ValidationError("question '" + question_id + "': span names unknown passage '" +
                            passage_id + "'");
    }
    const Passage& passage = *pit->second;
    WordSpan span;
    if (entry.contains("start_word") || entry.contains("end_word")) {
      span.start = require_field(entry, "start_word", "question '" + question_id + "'").get<std::size_t>();
      span.end = require_field(entry, "end_word", "question '" + question_id + "'").get<std::size_t>();
    } else if (entry.contains("start_char") || entry.contains("end_char")) {
      auto start_char = require_field(entry, "start_char", "question '" + question_id + "'").get<std::size_t>();
      auto end_char = require_field(entry, "end_char", "question '" + question_id + "'").get<std::size_t>();
      span = char_span_to_word_span(passage, start_char, end_char, question_id);
    } else {
      throw ParseError("question '" + question_id +
                       "': span entry needs start_word/end_word or start_char/end_char");
    }
    check_word_span(span, passage, question_id);
    if (!out.emplace(passage_id, span).second) {
      throw ValidationError("question '" + question_id + "': duplicate span entry for passage '" +
                            passage_id + "'");
    }
  };
  if (node.is_array()) {
    for (const json& entry : node) parse_one(entry);
  } else {
    parse_one(node);
  }
}

}  // namespace

Corpus::Corpus(CorpusFormat format, std::vector<Article> articles)
    : format_(format), articles_(std::move(articles)) {
  for (std::size_t a = 0; a < articles_.size(); ++a) {
    for (std::size_t p = 0; p < articles_[a].passages.size(); ++p) {
      passage_index_[articles_[a].passages[p].id] = {a, p};
    }
  }
}

const Passage* Corpus::find_passage(const std::string& passage_id) const {
  auto it = passage_index_.find(passage_id);
  if (it == passage_index_.end()) return nullptr;
  return &articles_[it->second.first].passages[it->second.second];
}

const Passage& Corpus::passage(const std::string& passage_id) const {
  const Passage* p = find_passage(passage_id);
  if (!p) throw ValidationError("unknown passage '" + passage_id + "'");
  return *p;
}

std::vector<Question> Corpus::questions_for(const Passage& passage) const {
  auto it = passage_index_.find(passage.id);
  if (it == passage_index_.end()) return {};
  const Article& article = articles_[it->second.first];
  std::vector<Question> bound;
  for (const QuestionRecord& record : article.questions) {
    bool applies = false;
    if (format_ == CorpusFormat::SpanAnnotated) {
      applies = record.critical_spans.count(passage.id) > 0;
    } else {
      applies = record.passage_scope == "article" || record.passage_scope == passage.id;
    }
    if (!applies) continue;
    Question q;
    q.id = record.id;
    q.passage_id = passage.id;
    q.stem = record.stem;
    q.answers = record.answers;
    q.correct = record.correct;
    if (auto sit = record.critical_spans.find(passage.id); sit != record.critical_spans.end()) {
      q.critical_span = sit->second;
    }
    if (auto sit = record.distractor_spans.find(passage.id); sit != record.distractor_spans.end()) {
      q.distractor_span = sit->second;
    }
    bound.push_back(std::move(q));
  }
  return bound;
}

std::vector<Question> Corpus::all_bound_questions() const {
  std::vector<Question> all;
  for (const Article& article : articles_) {
    for (const Passage& passage : article.passages) {
      auto bound = questions_for(passage);
      all.insert(all.end(), bound.begin(), bound.end());
    }
  }
  return all;
}

std::vector<const Passage*> Corpus::passages() const {
  std::vector<const Passage*> out;
  for (const Article& article : articles_) {
    for (const Passage& passage : article.passages) out.push_back(&passage);
  }
  return out;
}

std::vector<std::string> Corpus::article_ids() const {
  std::vector<std::string> ids;
  ids.reserve(articles_.size());
  for (const Article& article : articles_) ids.push_back(article.id);
  return ids;
}

Corpus load_corpus_json(const std::string& json_text, CorpusFormat format) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("corpus JSON: ") + e.what());
  }
  if (!root.is_object()) throw ParseError("corpus JSON: top level must be an object");

  if (root.contains("format")) {
    std::string declared = root["format"].get<std::string>();
    CorpusFormat file_format;
    if (declared == "span_annotated") {
      file_format = CorpusFormat::SpanAnnotated;
    } else if (declared == "plain") {
      file_format = CorpusFormat::Plain;
    } else {
      throw ParseError("corpus JSON: unknown format '" + declared + "'");
    }
    if (file_format != format) {
      throw ValidationError("corpus file declares format '" + declared + "' but '" +
                            to_string(format) + "' was requested");
    }
  }

  const json& articles_node = require_field(root, "articles", "corpus JSON");
  if (!articles_node.is_array()) throw ParseError("corpus JSON: 'articles' must be an array");

  std::set<std::string> seen_ids;
  auto claim_id = [&seen_ids](const std::string& id, const char* kind) {
    if (!seen_ids.insert(id).second) {
      throw ValidationError(std::string("duplicate ") + kind + " id '" + id + "'");
    }
  };

  std::vector<Article> articles;
  for (const json& article_node : articles_node) {
    Article article;
    article.id = require_string(article_node, "id", "article");
    claim_id(article.id, "article");
    article.title = article_node.value("title", "");

    const json& passages_node = require_field(article_node, "passages", "article '" + article.id + "'");
    std::map<std::string, const Passage*> passages_by_id;
    std::set<Level> article_levels;
    for (const json& passage_node : passages_node) {
      Passage passage;
      passage.id = require_string(passage_node, "id", "passage in article '" + article.id + "'");
      claim_id(passage.id, "passage");
      passage.article_id = article.id;
      passage.level = level_from_string(require_string(passage_node, "level", "passage '" + passage.id + "'"));
      passage.text = require_string(passage_node, "text", "passage '" + passage.id + "'");
      passage.words = split_words(passage.text);
      if (passage.words.empty()) {
        throw ValidationError("passage '" + passage.id + "': text contains no words");
      }
      article_levels.insert(passage.level);
      article.passages.push_back(std::move(passage));
    }
    for (const Passage& p : article.passages) passages_by_id[p.id] = &p;

    if (article_node.contains("questions")) {
      for (const json& question_node : article_node["questions"]) {
        QuestionRecord record;
        record.id = require_string(question_node, "id", "question in article '" + article.id + "'");
        claim_id(record.id, "question");
        record.passage_scope = question_node.value("passage_scope", "article");
        record.stem = require_string(question_node, "stem", "question '" + record.id + "'");

        auto answers_it = question_node.find("answers");
        if (answers_it == question_node.end() || !answers_it->is_array() || answers_it->size() != 4) {
          throw ValidationError("question '" + record.id + "': needs exactly 4 answers");
        }
        for (const json& answer : *answers_it) {
          if (!answer.is_string()) {
            throw ValidationError("question '" + record.id + "': answers must be strings");
          }
          record.answers.push_back(answer.get<std::string>());
        }
        record.correct =
            correct_index_from_letter(require_string(question_node, "correct", "question '" + record.id + "'"),
                                      record.id);

        if (question_node.contains("critical_span")) {
          parse_span_entries(question_node["critical_span"], record.id, passages_by_id,
                             record.critical_spans);
        }
        if (question_node.contains("distractor_span")) {
          parse_span_entries(question_node["distractor_span"], record.id, passages_by_id,
                             record.distractor_spans);
        }
        for (const auto& [pid, span] : record.distractor_spans) {
          (void)span;
          if (format == CorpusFormat::SpanAnnotated && record.critical_spans.count(pid) == 0) {
            throw ValidationError("question '" + record.id + "': distractor span for passage '" + pid +
                                  "' without a critical span");
          }
        }

        if (format == CorpusFormat::SpanAnnotated) {
          if (record.critical_spans.empty()) {
            throw ValidationError("question '" + record.id + "': span-annotated corpus requires critical spans");
          }
          std::set<Level> covered;
          for (const auto& [pid, span] : record.critical_spans) {
            (void)span;
            covered.insert(passages_by_id.at(pid)->level);
          }
          if (covered != article_levels) {
            throw ValidationError("question '" + record.id +
                                  "': critical spans do not cover every level variant of article '" +
                                  article.id + "'");
          }
        } else if (record.passage_scope != "article" && passages_by_id.count(record.passage_scope) == 0) {
          throw ValidationError("question '" + record.id + "': passage_scope names unknown passage '" +
                                record.passage_scope + "'");
        }
        article.questions.push_back(std::move(record));
      }
    }
    articles.push_back(std::move(article));
  }
  return Corpus(format, std::move(articles));
}

Corpus load_corpus(const std::string& path, CorpusFormat format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open corpus file '" + path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return load_corpus_json(buffer.str(), format);
}

std::string corpus_to_json(const Corpus& corpus) {
  json root;
  root["format"] = to_string(corpus.format());
  json articles = json::array();
  for (const Article& article : corpus.articles()) {
    json a;
    a["id"] = article.id;
    a["title"] = article.title;
    json passages = json::array();
    for (const Passage& passage : article.passages) {
      passages.push_back({{"id", passage.id}, {"level", to_string(passage.level)}, {"text", passage.text}});
    }
    a["passages"] = std::move(passages);
    json questions = json::array();
    for (const QuestionRecord& record : article.questions) {
      json q;
      q["id"] = record.id;
      q["passage_scope"] = record.passage_scope;
      q["stem"] = record.stem;
      q["answers"] = record.answers;
      q["correct"] = std::string(1, static_cast<char>('A' + record.correct));
      auto spans_to_json = [](const std::map<std::string, WordSpan>& spans) {
        json arr = json::array();
        for (const auto& [pid, span] : spans) {
          arr.push_back({{"passage_id", pid}, {"start_word", span.start}, {"end_word", span.end}});
        }
        return arr;
      };
      if (!record.critical_spans.empty()) q["critical_span"] = spans_to_json(record.critical_spans);
      if (!record.distractor_spans.empty()) q["distractor_span"] = spans_to_json(record.distractor_spans);
      questions.push_back(std::move(q));
    }
    a["questions"] = std::move(questions);
    articles.push_back(std::move(a));
  }
  root["articles"] = std::move(articles);
  return root.dump(2);
}

void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RunAbort("cannot write corpus file '" + path + "'");
  out << corpus_to_json(corpus) << "\n";
}

CorpusStats corpus_stats(const Corpus& corpus) {
  CorpusStats stats;
  stats.article_count = corpus.articles().size();
  double total_words = 0.0;
  std::map<Level, double> level_words;
  for (const Article& article : corpus.articles()) {
    for (const Passage& passage : article.passages) {
      ++stats.passage_count;
      total_words += static_cast<double>(passage.words.size());
      LevelStats& ls = stats.per_level[passage.level];
      ++ls.passage_count;
      level_words[passage.level] += static_cast<double>(passage.words.size());
      ls.question_count += corpus.questions_for(passage).size();
      stats.question_count += corpus.questions_for(passage).size();
    }
  }
  if (stats.passage_count > 0) {
    stats.mean_words_per_text = total_words / static_cast<double>(stats.passage_count);
  }
  for (auto& [level, ls] : stats.per_level) {
    if (ls.passage_count > 0) {
      ls.mean_words_per_text = level_words[level] / static_cast<double>(ls.passage_count);
    }
  }
  return stats;
}

std::vector<int> span_indicator(const Passage& passage, const WordSpan& span) {
  if (span.start >= span.end) {
    throw ValidationError("span_indicator: empty span [" + std::to_string(span.start) + ", " +
                          std::to_string(span.end) + ") on passage '" + passage.id + "'");
  }
  if (span.end > passage.words.size()) {
    throw ValidationError("span_indicator: span end " + std::to_string(span.end) +
                          " exceeds word count " + std::to_string(passage.words.size()) +
                          " of passage '" + passage.id + "'");
  }
  std::vector<int> indicator(passage.words.size(), 0);
  for (std::size_t i = span.start; i < span.end; ++i) indicator[i] = 1;
  return indicator;
}

}  // namespace gazeqa
