#include "gazeqa/targets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "gazeqa/errors.hpp"

namespace gazeqa {

namespace {

GazeDistribution softmax_scores(std::vector<double> scores) {
  double max_score = *std::max_element(scores.begin(), scores.end());
  double denom = 0.0;
  for (double& s : scores) {
    s = std::exp(s - max_score);
    denom += s;
  }
  for (double& s : scores) s /= denom;
  GazeDistribution dist;
  dist.granularity = Granularity::Token;
  dist.values = std::move(scores);
  return dist;
}

std::vector<int> bracketed(const Encoder& encoder, const std::vector<std::string>& words) {
  std::vector<int> ids{encoder.summary_token_id()};
  Tokenization tk = encoder.tokenize(words);
  ids.insert(ids.end(), tk.ids.begin(), tk.ids.end());
  ids.push_back(encoder.separator_token_id());
  return ids;
}

}  // namespace

TargetKind parse_target_kind(const std::string& name) {
  if (name == "gaze_hunting") return TargetKind::GazeHunting;
  if (name == "gaze_gathering") return TargetKind::GazeGathering;
  if (name == "gaze_external") return TargetKind::GazeExternal;
  if (name == "span_annotation") return TargetKind::SpanAnnotation;
  if (name == "query_similarity") return TargetKind::QuerySimilarity;
  throw ParseError("unknown target kind '" + name +
                   "' (expected gaze_hunting, gaze_gathering, gaze_external, span_annotation or "
                   "query_similarity)");
}

std::string target_kind_name(TargetKind kind) {
  switch (kind) {
    case TargetKind::GazeHunting: return "gaze_hunting";
    case TargetKind::GazeGathering: return "gaze_gathering";
    case TargetKind::GazeExternal: return "gaze_external";
    case TargetKind::SpanAnnotation: return "span_annotation";
    case TargetKind::QuerySimilarity: return "query_similarity";
  }
  throw ValidationError("unhandled target kind");
}

ChunkResult chunk_external_corpus(const std::vector<ExternalArticle>& articles, int target_len) {
  if (target_len < 1) throw ValidationError("chunk target length must be positive");
  if (articles.empty()) throw ValidationError("no external articles to chunk");

  ChunkResult result;
  for (const ExternalArticle& article : articles) {
    if (article.words.empty()) {
      throw ValidationError("external article '" + article.id + "' has no words");
    }
    if (article.words.size() != article.gaze.size()) {
      throw ValidationError("external article '" + article.id + "' has " +
                            std::to_string(article.words.size()) + " words but " +
                            std::to_string(article.gaze.size()) + " gaze values");
    }

    const std::size_t n = article.words.size();
    const std::size_t len = static_cast<std::size_t>(target_len);
    std::vector<std::size_t> bounds;  // chunk end offsets
    for (std::size_t end = len; end < n; end += len) bounds.push_back(end);
    // Remainder rule: a tail of at least half the target stays separate;
    // shorter tails merge into the previous chunk. A whole short article is
    // its own chunk.
    const std::size_t tail = n - (bounds.empty() ? 0 : bounds.back());
    if (!bounds.empty() && 2 * tail < len) bounds.pop_back();
    bounds.push_back(n);

    std::size_t start = 0;
    for (std::size_t index = 0; index < bounds.size(); ++index) {
      const std::size_t end = bounds[index];
      double mass = std::accumulate(article.gaze.begin() + static_cast<std::ptrdiff_t>(start),
                                    article.gaze.begin() + static_cast<std::ptrdiff_t>(end), 0.0);
      if (mass <= 0.0) {
        ++result.dropped;
        start = end;
        continue;
      }
      ExternalChunk chunk;
      chunk.passage.id = article.id + "#" + std::to_string(index);
      chunk.passage.article_id = article.id;
      chunk.passage.level = Level::Other;
      chunk.passage.words.assign(article.words.begin() + static_cast<std::ptrdiff_t>(start),
                                 article.words.begin() + static_cast<std::ptrdiff_t>(end));
      std::ostringstream text;
      for (std::size_t w = start; w < end; ++w) {
        if (w > start) text << ' ';
        text << article.words[w];
      }
      chunk.passage.text = text.str();
      chunk.gaze.granularity = Granularity::Word;
      chunk.gaze.values.reserve(end - start);
      for (std::size_t w = start; w < end; ++w) chunk.gaze.values.push_back(article.gaze[w] / mass);
      result.chunks.push_back(std::move(chunk));
      start = end;
    }
  }
  if (result.chunks.empty()) {
    throw ValidationError("every external chunk was dropped for zero gaze mass");
  }
  return result;
}

std::vector<ExternalArticle> load_external_articles(const Corpus& corpus, const GazeStore& gaze) {
  std::vector<ExternalArticle> articles;
  for (const Passage* passage : corpus.passages()) {
    bool any_usable = false;
    for (const GazeTrial& trial : gaze.trials) {
      if (trial.passage_id == passage->id && trial.usable()) {
        any_usable = true;
        break;
      }
    }
    if (!any_usable) {
      warn("external passage '" + passage->id + "' has no usable trials; skipped");
      continue;
    }
    GazeDistribution dist = aggregate_gaze(gaze.trials, passage->id, std::nullopt,
                                           Condition::Gathering, /*correct_only=*/false);
    ExternalArticle article;
    article.id = passage->id;
    article.words = passage->words;
    article.gaze = std::move(dist.values);
    articles.push_back(std::move(article));
  }
  if (articles.empty()) throw ValidationError("external corpus has no passages with usable gaze");
  return articles;
}

GazeDistribution similarity_target(const Question& question, const Passage& passage,
                                   const Encoder& encoder) {
  if (passage.words.empty()) {
    throw ValidationError("passage '" + passage.id + "' is empty");
  }
  Tokenization passage_tk = encoder.tokenize(passage.words);
  if (passage_tk.ids.empty()) {
    throw ValidationError("passage '" + passage.id + "' tokenizes to zero tokens");
  }

  std::vector<int> passage_ids{encoder.summary_token_id()};
  passage_ids.insert(passage_ids.end(), passage_tk.ids.begin(), passage_tk.ids.end());
  passage_ids.push_back(encoder.separator_token_id());
  EncodeResult passage_enc = encoder.encode(passage_ids);

  EncodeResult question_enc = encoder.encode(bracketed(encoder, split_words(question.stem)));
  const double* query = question_enc.summary();

  const std::size_t dim = passage_enc.states.cols;
  std::vector<double> scores(passage_tk.ids.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double* h = passage_enc.states.row(1 + i);
    double dot = 0.0;
    for (std::size_t j = 0; j < dim; ++j) dot += h[j] * query[j];
    scores[i] = dot;
  }
  return softmax_scores(std::move(scores));
}

GazeDistribution span_target(const Passage& passage, const WordSpan& critical_span,
                             const std::vector<int>& tokens_per_word) {
  std::vector<int> indicator = span_indicator(passage, critical_span);
  if (tokens_per_word.size() != indicator.size()) {
    throw ValidationError("passage '" + passage.id + "' has " + std::to_string(indicator.size()) +
                          " words but " + std::to_string(tokens_per_word.size()) +
                          " token counts");
  }
  std::vector<double> scores;
  for (std::size_t w = 0; w < indicator.size(); ++w) {
    if (tokens_per_word[w] < 1) {
      throw ValidationError("word " + std::to_string(w) + " of passage '" + passage.id +
                            "' has no tokens");
    }
    scores.insert(scores.end(), static_cast<std::size_t>(tokens_per_word[w]),
                  static_cast<double>(indicator[w]));
  }
  return softmax_scores(std::move(scores));
}

BuiltTarget build_target(const TargetSpec& spec, const Passage& passage, const Question& question,
                         const Encoder& encoder, const TargetContext& context) {
  BuiltTarget built;
  switch (spec.kind) {
    case TargetKind::GazeHunting:
    case TargetKind::GazeGathering: {
      if (!context.gaze) throw ValidationError("gaze targets need a gaze store");
      Condition condition =
          spec.kind == TargetKind::GazeHunting ? Condition::Hunting : Condition::Gathering;
      GazeDistribution word_dist = aggregate_gaze(context.gaze->trials, passage.id,
                                                  question.id, condition);
      built.target = split_to_tokens(word_dist, encoder.tokenize(passage.words).tokens_per_word);
      return built;
    }
    case TargetKind::SpanAnnotation: {
      if (!question.critical_span) {
        throw ValidationError("question '" + question.id + "' has no critical span for passage '" +
                              passage.id + "'");
      }
      built.target = span_target(passage, *question.critical_span,
                                 encoder.tokenize(passage.words).tokens_per_word);
      return built;
    }
    case TargetKind::QuerySimilarity:
      built.target = similarity_target(question, passage, encoder);
      return built;
    case TargetKind::GazeExternal: {
      if (!context.chunks || context.chunks->empty()) {
        throw ValidationError("external gaze targets need a non-empty chunk list");
      }
      if (!context.rng) throw ValidationError("external gaze targets need a sampling RNG");
      // Modulo draw: deterministic across standard libraries, unlike
      // uniform_int_distribution.
      const ExternalChunk& chunk = (*context.chunks)[(*context.rng)() % context.chunks->size()];
      built.chunk = &chunk;
      built.target =
          split_to_tokens(chunk.gaze, encoder.tokenize(chunk.passage.words).tokens_per_word);
      return built;
    }
  }
  throw ValidationError("unhandled target kind");
}

std::string target_example_id(const std::string& passage_id, const std::string& question_id) {
  return passage_id + "::" + question_id;
}

TargetCache build_target_cache(const Corpus& corpus, const TargetSpec& spec,
                               const Encoder& encoder, const TargetContext& context) {
  if (spec.kind == TargetKind::GazeExternal) {
    throw ValidationError("external gaze targets attach to sampled chunks, not corpus examples; "
                          "nothing to cache");
  }
  TargetCache cache;
  const std::string kind = target_kind_name(spec.kind);
  for (const Passage* passage : corpus.passages()) {
    for (const Question& question : corpus.questions_for(*passage)) {
      BuiltTarget built = build_target(spec, *passage, question, encoder, context);
      cache[target_example_id(passage->id, question.id)][kind] = std::move(built.target.values);
    }
  }
  return cache;
}

void save_target_cache(const std::string& path, const std::string& encoder_id,
                       const TargetCache& cache) {
  nlohmann::json doc;
  doc["schema_version"] = 1;
  doc["encoder"] = encoder_id;
  nlohmann::json targets = nlohmann::json::object();
  for (const auto& [example_id, kinds] : cache) {
    nlohmann::json entry = nlohmann::json::object();
    for (const auto& [kind, values] : kinds) entry[kind] = values;
    targets[example_id] = std::move(entry);
  }
  doc["targets"] = std::move(targets);
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open '" + path + "' for writing");
  out << doc.dump(2) << '\n';
  if (!out) throw ParseError("failed writing target cache to '" + path + "'");
}

TargetCache load_target_cache(const std::string& path, std::string* encoder_id) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open target cache '" + path + "'");
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("target cache '" + path + "': " + e.what());
  }
  try {
    if (doc.at("schema_version").get<int>() != 1) {
      throw ParseError("target cache '" + path + "' has an unsupported schema version");
    }
    if (encoder_id) *encoder_id = doc.at("encoder").get<std::string>();
    TargetCache cache;
    for (const auto& [example_id, kinds] : doc.at("targets").items()) {
      for (const auto& [kind, values] : kinds.items()) {
        cache[example_id][kind] = values.get<std::vector<double>>();
      }
    }
    return cache;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("target cache '" + path + "': " + e.what());
  }
}

}  // namespace gazeqa
