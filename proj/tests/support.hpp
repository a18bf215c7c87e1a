#pragma once

// Synthetic fixtures shared by the test binaries. Everything here is
// deterministic in its arguments so failures reproduce exactly.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "gazeqa/corpus.hpp"
#include "gazeqa/gaze.hpp"

namespace fixtures {

inline std::vector<std::string> make_words(std::size_t count, std::uint64_t salt) {
  static const char* const kStems[] = {"reading",  "gaze",   "span",    "answer", "passage",
                                       "question", "eye",    "trial",   "onset",  "word",
                                       "signal",   "target", "subject", "study",  "line"};
  std::vector<std::string> words;
  words.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::string w = kStems[(salt + i * 7) % 15];
    if ((i + salt) % 9 == 4) w += ",";
    if ((i + salt) % 17 == 11) w += ".";
    words.push_back(std::move(w));
  }
  return words;
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string text;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) text += ' ';
    text += words[i];
  }
  return text;
}

struct CorpusShape {
  int articles = 4;
  int passages_per_article = 2;  // alternating Advanced / Elementary levels
  int questions_per_article = 2;
  std::size_t words_per_passage = 12;
  bool with_spans = true;  // false builds a plain (unannotated) corpus
  std::uint64_t salt = 0;
};

inline gazeqa::Corpus make_corpus(const CorpusShape& shape) {
  std::vector<gazeqa::Article> articles;
  for (int a = 0; a < shape.articles; ++a) {
    gazeqa::Article article;
    article.id = "art" + std::to_string(a);
    article.title = "Article " + std::to_string(a);
    for (int p = 0; p < shape.passages_per_article; ++p) {
      gazeqa::Passage passage;
      passage.id = article.id + "_p" + std::to_string(p);
      passage.article_id = article.id;
      passage.level = shape.with_spans
                          ? (p % 2 == 0 ? gazeqa::Level::Advanced : gazeqa::Level::Elementary)
                          : gazeqa::Level::Other;
      std::vector<std::string> words =
          make_words(shape.words_per_passage, shape.salt + a * 31 + p * 7);
      passage.text = join_words(words);
      passage.words = gazeqa::split_words(passage.text);
      article.passages.push_back(std::move(passage));
    }
    for (int q = 0; q < shape.questions_per_article; ++q) {
      gazeqa::QuestionRecord record;
      record.id = article.id + "_q" + std::to_string(q);
      record.passage_scope = "article";
      record.stem = "what does the text say about " +
                    make_words(1, shape.salt + a * 13 + q)[0] + "?";
      record.answers = {"choice alpha " + std::to_string(q), "choice beta " + std::to_string(q),
                        "choice gamma " + std::to_string(q), "choice delta " + std::to_string(q)};
      record.correct = (a + q) % 4;
      if (shape.with_spans) {
        for (const gazeqa::Passage& passage : article.passages) {
          const std::size_t n = passage.words.size();
          std::size_t start = 1 + static_cast<std::size_t>(q) % std::max<std::size_t>(n / 2, 1);
          std::size_t end = std::min(start + 3, n);
          if (start >= end) {
            start = 0;
            end = 1;
          }
          record.critical_spans[passage.id] = gazeqa::WordSpan{start, end};
          if (end + 2 <= n) {
            record.distractor_spans[passage.id] = gazeqa::WordSpan{end, end + 2};
          }
        }
      }
      article.questions.push_back(std::move(record));
    }
    articles.push_back(std::move(article));
  }
  return gazeqa::Corpus(
      shape.with_spans ? gazeqa::CorpusFormat::SpanAnnotated : gazeqa::CorpusFormat::Plain,
      std::move(articles));
}

inline gazeqa::Corpus make_corpus(int articles) {
  CorpusShape shape;
  shape.articles = articles;
  return make_corpus(shape);
}

struct GazeShape {
  int subjects = 3;
  std::uint64_t seed = 11;
  double hunting_span_boost = 1.0;  // >1 inflates within-critical-span durations
  double zero_fraction = 0.15;      // fraction of skipped words
  bool include_questionless = false;
};

inline gazeqa::GazeStore make_gaze(const gazeqa::Corpus& corpus, const GazeShape& shape) {
  gazeqa::GazeStore store;
  std::mt19937_64 rng(shape.seed);
  const std::size_t zero_mod =
      shape.zero_fraction > 0.0 ? static_cast<std::size_t>(1.0 / shape.zero_fraction) : 0;
  for (const gazeqa::Passage* passage : corpus.passages()) {
    std::vector<gazeqa::Question> questions = corpus.questions_for(*passage);
    for (const gazeqa::Question& question : questions) {
      for (gazeqa::Condition condition :
           {gazeqa::Condition::Hunting, gazeqa::Condition::Gathering}) {
        for (int s = 0; s < shape.subjects; ++s) {
          gazeqa::GazeTrial trial;
          trial.subject_id = "subj" + std::to_string(s);
          trial.passage_id = passage->id;
          trial.question_id = question.id;
          trial.condition = condition;
          trial.correct = (s + static_cast<int>(rng() % 5)) % 5 != 0;
          trial.tf_ms.resize(passage->words.size());
          for (std::size_t w = 0; w < trial.tf_ms.size(); ++w) {
            double ms = 150.0 + static_cast<double>(rng() % 700);
            if (zero_mod > 0 && rng() % zero_mod == 0) ms = 0.0;
            if (condition == gazeqa::Condition::Hunting && question.critical_span &&
                question.critical_span->contains(w)) {
              ms *= shape.hunting_span_boost;
            }
            trial.tf_ms[w] = ms;
          }
          store.trials.push_back(std::move(trial));
        }
      }
    }
    if (shape.include_questionless || questions.empty()) {
      for (int s = 0; s < shape.subjects; ++s) {
        gazeqa::GazeTrial trial;
        trial.subject_id = "subj" + std::to_string(s);
        trial.passage_id = passage->id;
        trial.condition = gazeqa::Condition::Gathering;
        trial.correct = true;
        trial.tf_ms.resize(passage->words.size());
        for (double& ms : trial.tf_ms) ms = 100.0 + static_cast<double>(rng() % 400);
        store.trials.push_back(std::move(trial));
      }
    }
  }
  return store;
}

inline std::vector<double> random_simplex(std::mt19937_64& rng, std::size_t n) {
  std::vector<double> v(n);
  double sum = 0.0;
  for (double& x : v) {
    x = 1e-3 + static_cast<double>(rng() % 100000) / 100000.0;
    sum += x;
  }
  for (double& x : v) x /= sum;
  return v;
}

inline std::string fresh_dir(const std::string& tag) {
  namespace fs = std::filesystem;
  static std::uint64_t counter = 0;
  fs::path dir = fs::temp_directory_path() / ("gazeqa_test_" + tag + "_" + std::to_string(counter++));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

}  // namespace fixtures
