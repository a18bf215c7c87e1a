#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gazeqa/corpus.hpp"
#include "gazeqa/gaze.hpp"

namespace gazeqa {

/// A passage colored by aggregate gaze: per-word normalized reading time,
/// display intensity (value / max value), and span styling metadata.
struct HeatmapDocument {
  std::string passage_id;
  std::optional<std::string> question_id;
  std::string question_stem;  // empty when no question is bound
  Condition condition = Condition::Hunting;
  std::size_t trial_count = 0;
  std::vector<std::string> words;
  std::vector<double> values;  // aggregate gaze, one per word, sums to 1
  std::optional<WordSpan> critical_span;
  std::optional<WordSpan> distractor_span;
};

/// Aggregates matching correct trials and resolves the question's spans.
HeatmapDocument make_heatmap(const Corpus& corpus, const GazeStore& gaze,
                             const std::string& passage_id,
                             const std::optional<std::string>& question_id, Condition condition);

/// Self-contained HTML: every word carries its exact gaze value in a
/// data-gaze attribute and a white-to-red background scaled by value / max;
/// critical-span words are bold red, distractor-span words purple italics.
std::string render_heatmap_html(const HeatmapDocument& doc);

void save_heatmap(const std::string& path, const HeatmapDocument& doc);

/// Reads the data-gaze attributes back out of rendered HTML, in word order.
std::vector<double> parse_heatmap_values(const std::string& html);

}  // namespace gazeqa
