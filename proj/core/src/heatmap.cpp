#include "gazeqa/heatmap.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "gazeqa/errors.hpp"

namespace gazeqa {

namespace {

std::string escape_html(const std::string& text) {
  std::string out;
  out.reserve(text.size());
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string format_value(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

HeatmapDocument make_heatmap(const Corpus& corpus, const GazeStore& gaze,
                             const std::string& passage_id,
                             const std::optional<std::string>& question_id, Condition condition) {
  const Passage& passage = corpus.passage(passage_id);

  HeatmapDocument doc;
  doc.passage_id = passage_id;
  doc.question_id = question_id;
  doc.condition = condition;
  doc.words = passage.words;

  GazeDistribution dist = aggregate_gaze(gaze.trials, passage_id, question_id, condition);
  doc.values = std::move(dist.values);
  for (const GazeTrial& trial : gaze.trials) {
    if (trial.passage_id == passage_id && trial.question_id == question_id &&
        trial.condition == condition && trial.correct && trial.usable()) {
      ++doc.trial_count;
    }
  }

  if (question_id) {
    bool found = false;
    for (const Question& question : corpus.questions_for(passage)) {
      if (question.id != *question_id) continue;
      doc.question_stem = question.stem;
      doc.critical_span = question.critical_span;
      doc.distractor_span = question.distractor_span;
      found = true;
      break;
    }
    if (!found) {
      throw ValidationError("question '" + *question_id + "' is not bound to passage '" +
                            passage_id + "'");
    }
  }
  return doc;
}

std::string render_heatmap_html(const HeatmapDocument& doc) {
  if (doc.words.size() != doc.values.size()) {
    throw ValidationError("heatmap has " + std::to_string(doc.words.size()) + " words but " +
                          std::to_string(doc.values.size()) + " values");
  }
  const double max_value =
      doc.values.empty() ? 0.0 : *std::max_element(doc.values.begin(), doc.values.end());

  std::ostringstream html;
  html << "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>"
       << escape_html(doc.passage_id) << "</title>\n<style>\n"
       << "body { font-family: Georgia, serif; max-width: 48em; margin: 2em auto; }\n"
       << ".passage { line-height: 1.9; }\n"
       << ".w { padding: 0.08em 0.12em; border-radius: 0.15em; }\n"
       << ".crit { font-weight: bold; color: #a00000; }\n"
       << ".dist { font-style: italic; color: #6a0dad; }\n"
       << ".caption { margin-top: 1.5em; font-size: 0.9em; color: #444; }\n"
       << "</style>\n</head>\n<body>\n<div class=\"passage\">";

  for (std::size_t i = 0; i < doc.words.size(); ++i) {
    const double value = doc.values[i];
    const double intensity = max_value > 0.0 ? value / max_value : 0.0;
    std::string classes = "w";
    if (doc.critical_span && doc.critical_span->contains(i)) classes += " crit";
    if (doc.distractor_span && doc.distractor_span->contains(i)) classes += " dist";
    if (i) html << ' ';
    html << "<span class=\"" << classes << "\" data-gaze=\"" << format_value(value)
         << "\" style=\"background-color: rgba(255,64,32," << format_value(intensity)
         << ")\">" << escape_html(doc.words[i]) << "</span>";
  }
  html << "</div>\n<div class=\"caption\">Passage " << escape_html(doc.passage_id) << " &middot; "
       << escape_html(to_string(doc.condition)) << " condition &middot; "
       << doc.trial_count << (doc.trial_count == 1 ? " trial" : " trials");
  if (doc.question_id) {
    html << " &middot; question " << escape_html(*doc.question_id);
    if (!doc.question_stem.empty()) html << ": " << escape_html(doc.question_stem);
  }
  html << "<br>Shading: normalized total fixation duration, scaled by the passage maximum.";
  if (doc.critical_span) html << " Bold red marks the critical span.";
  if (doc.distractor_span) html << " Purple italics mark the distractor span.";
  html << "</div>\n</body>\n</html>\n";
  return html.str();
}

void save_heatmap(const std::string& path, const HeatmapDocument& doc) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open '" + path + "' for writing");
  out << render_heatmap_html(doc);
  if (!out) throw ParseError("failed writing heatmap to '" + path + "'");
}

std::vector<double> parse_heatmap_values(const std::string& html) {
  std::vector<double> values;
  const std::string marker = "data-gaze=\"";
  std::size_t pos = 0;
  while ((pos = html.find(marker, pos)) != std::string::npos) {
    pos += marker.size();
    std::size_t end = html.find('"', pos);
    if (end == std::string::npos) throw ParseError("unterminated data-gaze attribute");
    values.push_back(std::stod(html.substr(pos, end - pos)));
    pos = end + 1;
  }
  return values;
}

}  // namespace gazeqa
