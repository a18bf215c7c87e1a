#pragma once

#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gazeqa/corpus.hpp"
#include "gazeqa/encoder.hpp"
#include "gazeqa/gaze.hpp"

namespace gazeqa {

enum class TargetKind { GazeHunting, GazeGathering, GazeExternal, SpanAnnotation, QuerySimilarity };

TargetKind parse_target_kind(const std::string& name);
std::string target_kind_name(TargetKind kind);

/// Which auxiliary target to train against. The kind determines which
/// sources build_target requires.
struct TargetSpec {
  TargetKind kind = TargetKind::GazeHunting;
  int external_target_len = 125;  // chunk size for GazeExternal, in words
};

/// One article of an external (question-free) gaze corpus.
struct ExternalArticle {
  std::string id;
  std::vector<std::string> words;
  std::vector<double> gaze;  // per-word reading-time mass, same length as words
};

/// A fixed-size slice of an external article with its renormalized gaze.
struct ExternalChunk {
  Passage passage;        // level Other, id "<article>#<index>"
  GazeDistribution gaze;  // word granularity, sums to 1
};

struct ChunkResult {
  std::vector<ExternalChunk> chunks;
  std::size_t dropped = 0;  // chunks discarded for having zero gaze mass
};

/// Splits each article into consecutive target_len-word chunks. A final
/// remainder at least half the target length stays its own chunk, otherwise
/// it merges into the previous chunk; an article shorter than half the
/// target length is kept whole. Chunks with zero gaze mass are dropped.
ChunkResult chunk_external_corpus(const std::vector<ExternalArticle>& articles, int target_len);

/// Reads external articles out of a plain corpus plus its gaze store: one
/// article per passage, gaze aggregated over all trials (Gathering,
/// question-free, correctness ignored).
std::vector<ExternalArticle> load_external_articles(const Corpus& corpus, const GazeStore& gaze);

/// Token-level softmax of dot products between each passage token state and
/// the question's sequence-summary vector, both encoded alone.
GazeDistribution similarity_target(const Question& question, const Passage& passage,
                                   const Encoder& encoder);

/// Token-level softmax of the critical-span indicator; every token of a word
/// inherits the word's 0/1 value.
GazeDistribution span_target(const Passage& passage, const WordSpan& critical_span,
                             const std::vector<int>& tokens_per_word);

/// Sources build_target may need; TargetSpec::kind picks which must be present.
struct TargetContext {
  const GazeStore* gaze = nullptr;
  const std::vector<ExternalChunk>* chunks = nullptr;
  std::mt19937_64* rng = nullptr;  // uniform chunk sampling for GazeExternal
};

struct BuiltTarget {
  GazeDistribution target;               // token granularity
  const ExternalChunk* chunk = nullptr;  // the sampled chunk, GazeExternal only
};

/// Dispatches over the target kinds. For GazeExternal the target describes
/// the sampled chunk rather than the example's own passage.
BuiltTarget build_target(const TargetSpec& spec, const Passage& passage, const Question& question,
                         const Encoder& encoder, const TargetContext& context);

/// example id -> kind name -> token-level values.
using TargetCache = std::map<std::string, std::map<std::string, std::vector<double>>>;

/// Cache key for one bound question.
std::string target_example_id(const std::string& passage_id, const std::string& question_id);

/// Builds targets for every bound question in the corpus. GazeExternal is
/// excluded: its targets attach to sampled chunks, not to corpus examples.
TargetCache build_target_cache(const Corpus& corpus, const TargetSpec& spec,
                               const Encoder& encoder, const TargetContext& context);

void save_target_cache(const std::string& path, const std::string& encoder_id,
                       const TargetCache& cache);
TargetCache load_target_cache(const std::string& path, std::string* encoder_id = nullptr);

}  // namespace gazeqa
