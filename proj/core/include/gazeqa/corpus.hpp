#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace gazeqa {

/// Half-open word-index interval [start, end) into Passage::words.
struct WordSpan {
  std::size_t start = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - start; }
  bool contains(std::size_t word_index) const {
    return word_index >= start && word_index < end;
  }
  bool operator==(const WordSpan&) const = default;
};

enum class Level { Advanced, Elementary, Other };

std::string to_string(Level level);
Level level_from_string(const std::string& s);

struct Passage {
  std::string id;
  std::string article_id;
  Level level = Level::Other;
  std::string text;
  std::vector<std::string> words;  // whitespace-delimited, punctuation attached
};

/// Splits on runs of whitespace; punctuation stays attached to its word.
std::vector<std::string> split_words(const std::string& text);

/// A question bound to one concrete passage, with spans resolved for it.
struct Question {
  std::string id;
  std::string passage_id;
  std::string stem;
  std::vector<std::string> answers;  // exactly 4, indexed A-D
  int correct = 0;                   // index into answers
  std::optional<WordSpan> critical_span;
  std::optional<WordSpan> distractor_span;
};

/// Question as stored in an article: shared stem/answers plus per-passage
/// span annotations. Bound per level variant on access.
struct QuestionRecord {
  std::string id;
  std::string passage_scope;  // a passage id, or "article" for all passages
  std::string stem;
  std::vector<std::string> answers;
  int correct = 0;
  std::map<std::string, WordSpan> critical_spans;    // passage id -> span
  std::map<std::string, WordSpan> distractor_spans;  // passage id -> span
};

struct Article {
  std::string id;
  std::string title;
  std::vector<Passage> passages;
  std::vector<QuestionRecord> questions;
};

enum class CorpusFormat { SpanAnnotated, Plain };

std::string to_string(CorpusFormat format);

class Corpus {
 public:
  Corpus() = default;
  Corpus(CorpusFormat format, std::vector<Article> articles);

  CorpusFormat format() const { return format_; }
  const std::vector<Article>& articles() const { return articles_; }

  const Passage* find_passage(const std::string& passage_id) const;
  const Passage& passage(const std::string& passage_id) const;

  /// Questions bound to this passage (spans resolved for it).
  std::vector<Question> questions_for(const Passage& passage) const;

  /// Every (question, passage) binding in the corpus, in file order.
  std::vector<Question> all_bound_questions() const;

  std::vector<const Passage*> passages() const;
  std::vector<std::string> article_ids() const;

 private:
  CorpusFormat format_ = CorpusFormat::SpanAnnotated;
  std::vector<Article> articles_;
  std::map<std::string, std::pair<std::size_t, std::size_t>> passage_index_;
};

Corpus load_corpus(const std::string& path, CorpusFormat format);
Corpus load_corpus_json(const std::string& json_text, CorpusFormat format);

/// Serializes back to the on-disk schema; load(save(c)) is structurally
/// identical to c.
std::string corpus_to_json(const Corpus& corpus);
void save_corpus(const Corpus& corpus, const std::string& path);

struct LevelStats {
  std::size_t passage_count = 0;
  std::size_t question_count = 0;
  double mean_words_per_text = 0.0;
};

struct CorpusStats {
  std::size_t passage_count = 0;
  std::size_t question_count = 0;
  std::size_t article_count = 0;
  double mean_words_per_text = 0.0;
  std::map<Level, LevelStats> per_level;
};

CorpusStats corpus_stats(const Corpus& corpus);

/// v[i] = 1 iff span.start <= i < span.end. The span must be non-empty and
/// within the passage.
std::vector<int> span_indicator(const Passage& passage, const WordSpan& span);

}  // namespace gazeqa
