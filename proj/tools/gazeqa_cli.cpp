#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gazeqa/corpus.hpp"
#include "gazeqa/errors.hpp"
#include "gazeqa/experiment.hpp"
#include "gazeqa/gaze.hpp"
#include "gazeqa/heatmap.hpp"
#include "gazeqa/targets.hpp"
#include "gazeqa/tiny_encoder.hpp"

namespace {

using namespace gazeqa;
namespace fs = std::filesystem;

constexpr int kInputError = 2;
constexpr int kValidationFailure = 3;
constexpr int kRuntimeAbort = 4;

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

CorpusFormat peek_corpus_format(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open corpus '" + path + "'");
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("corpus '" + path + "': " + e.what());
  }
  const std::string format = doc.value("format", "");
  if (format == "span_annotated") return CorpusFormat::SpanAnnotated;
  if (format == "plain") return CorpusFormat::Plain;
  throw ParseError("corpus '" + path + "' has no recognizable format field");
}

Corpus load_corpus_auto(const std::string& path) {
  return load_corpus(path, peek_corpus_format(path));
}

GazeStore load_validated_gaze(const std::string& path, const Corpus& corpus) {
  GazeStore store = load_gaze(path);
  validate_gaze_against_corpus(store, corpus);
  return store;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open '" + path + "' for writing");
  out << content;
  if (!out) throw ParseError("failed writing '" + path + "'");
}

int run_ingest(const std::string& corpus_path, const std::string& gaze_path,
               const std::string& format) {
  Corpus corpus = load_corpus_auto(corpus_path);
  CorpusStats stats = corpus_stats(corpus);

  std::size_t trials = 0, usable = 0;
  if (!gaze_path.empty()) {
    GazeStore store = load_validated_gaze(gaze_path, corpus);
    trials = store.trials.size();
    for (const GazeTrial& t : store.trials) {
      if (t.usable()) ++usable;
    }
  }

  if (format == "json") {
    nlohmann::json report;
    report["format"] = to_string(corpus.format());
    report["articles"] = stats.article_count;
    report["passages"] = stats.passage_count;
    report["questions"] = stats.question_count;
    report["mean_words_per_text"] = stats.mean_words_per_text;
    nlohmann::json levels = nlohmann::json::object();
    for (const auto& [level, ls] : stats.per_level) {
      levels[to_string(level)] = nlohmann::json{{"passages", ls.passage_count},
                                                {"questions", ls.question_count},
                                                {"mean_words_per_text", ls.mean_words_per_text}};
    }
    report["levels"] = std::move(levels);
    if (!gaze_path.empty()) {
      report["trials"] = trials;
      report["usable_trials"] = usable;
    }
    std::cout << report.dump(2) << "\n";
  } else {
    std::cout << "metric,value\n";
    std::cout << "format," << to_string(corpus.format()) << "\n";
    std::cout << "articles," << stats.article_count << "\n";
    std::cout << "passages," << stats.passage_count << "\n";
    std::cout << "questions," << stats.question_count << "\n";
    std::cout << "mean_words_per_text," << format_double(stats.mean_words_per_text) << "\n";
    for (const auto& [level, ls] : stats.per_level) {
      std::cout << "passages_" << to_string(level) << "," << ls.passage_count << "\n";
      std::cout << "questions_" << to_string(level) << "," << ls.question_count << "\n";
      std::cout << "mean_words_per_text_" << to_string(level) << ","
                << format_double(ls.mean_words_per_text) << "\n";
    }
    if (!gaze_path.empty()) {
      std::cout << "trials," << trials << "\n";
      std::cout << "usable_trials," << usable << "\n";
    }
  }
  return 0;
}

struct SpanStatRow {
  std::string passage_id, question_id, condition;
  SpanConditionStats stats;
};

int run_analyze(const std::string& corpus_path, const std::string& gaze_path,
                const std::string& out_dir, const std::string& format) {
  Corpus corpus = load_corpus_auto(corpus_path);
  GazeStore store = load_validated_gaze(gaze_path, corpus);

  bool any_usable = false;
  for (const GazeTrial& t : store.trials) any_usable = any_usable || t.usable();
  if (!any_usable) throw ValidationError("no usable trials in '" + gaze_path + "'");

  fs::create_directories(out_dir);
  std::vector<std::string> written;
  auto cleanup = [&] {
    for (const std::string& path : written) {
      std::error_code ec;
      fs::remove(path, ec);
    }
  };

  try {
    std::vector<SpanStatRow> rows;
    for (const Passage* passage : corpus.passages()) {
      for (const Question& question : corpus.questions_for(*passage)) {
        if (!question.critical_span) continue;
        std::vector<GazeTrial> subset;
        for (const GazeTrial& t : store.trials) {
          if (t.passage_id == passage->id && t.question_id == question.id) subset.push_back(t);
        }
        if (subset.empty()) continue;
        SpanReadingStats stats = span_reading_stats(subset, *passage, *question.critical_span);
        for (const auto& [condition, s] : stats) {
          rows.push_back(SpanStatRow{passage->id, question.id, to_string(condition), s});
        }
      }
    }

    const std::string span_path = out_dir + "/span_stats." + format;
    written.push_back(span_path);
    if (format == "json") {
      nlohmann::json doc = nlohmann::json::array();
      for (const SpanStatRow& row : rows) {
        nlohmann::json entry{{"passage_id", row.passage_id},
                             {"question_id", row.question_id},
                             {"condition", row.condition},
                             {"trial_count", row.stats.trial_count},
                             {"mean_tf_within_ms", row.stats.mean_tf_within_ms},
                             {"mean_norm_within", row.stats.mean_norm_within},
                             {"mean_total_passage_ms", row.stats.mean_total_passage_ms}};
        if (row.stats.mean_tf_outside_ms) {
          entry["mean_tf_outside_ms"] = *row.stats.mean_tf_outside_ms;
          entry["mean_norm_outside"] = *row.stats.mean_norm_outside;
          if (*row.stats.mean_tf_outside_ms > 0.0) {
            entry["within_outside_ratio"] =
                row.stats.mean_tf_within_ms / *row.stats.mean_tf_outside_ms;
          }
        }
        doc.push_back(std::move(entry));
      }
      write_text_file(span_path, doc.dump(2) + "\n");
    } else {
      std::string csv =
          "passage_id,question_id,condition,trial_count,mean_tf_within_ms,mean_tf_outside_ms,"
          "within_outside_ratio,mean_norm_within,mean_norm_outside,mean_total_passage_ms\n";
      for (const SpanStatRow& row : rows) {
        csv += row.passage_id + "," + row.question_id + "," + row.condition + "," +
               std::to_string(row.stats.trial_count) + "," +
               format_double(row.stats.mean_tf_within_ms) + ",";
        if (row.stats.mean_tf_outside_ms) {
          csv += format_double(*row.stats.mean_tf_outside_ms);
          csv += ",";
          if (*row.stats.mean_tf_outside_ms > 0.0) {
            csv += format_double(row.stats.mean_tf_within_ms / *row.stats.mean_tf_outside_ms);
          }
          csv += "," + format_double(row.stats.mean_norm_within) + "," +
                 format_double(*row.stats.mean_norm_outside) + ",";
        } else {
          csv += ",," + format_double(row.stats.mean_norm_within) + ",,";
        }
        csv += format_double(row.stats.mean_total_passage_ms) + "\n";
      }
      write_text_file(span_path, csv);
    }

    std::map<Condition, double> accuracy = condition_accuracy(store.trials);
    std::map<Condition, double> total_ms;
    std::map<Condition, std::size_t> usable_counts;
    for (const GazeTrial& t : store.trials) {
      if (!t.usable()) continue;
      total_ms[t.condition] += t.total_ms();
      ++usable_counts[t.condition];
    }
    for (auto& [condition, sum] : total_ms) {
      sum /= static_cast<double>(usable_counts[condition]);
    }

    const std::string summary_path = out_dir + "/summary." + format;
    written.push_back(summary_path);
    if (format == "json") {
      nlohmann::json doc;
      doc["trials"] = store.trials.size();
      nlohmann::json acc = nlohmann::json::object();
      for (const auto& [condition, value] : accuracy) acc[to_string(condition)] = value;
      doc["condition_accuracy"] = std::move(acc);
      nlohmann::json rt = nlohmann::json::object();
      for (const auto& [condition, value] : total_ms) rt[to_string(condition)] = value;
      doc["mean_total_reading_ms"] = std::move(rt);
      write_text_file(summary_path, doc.dump(2) + "\n");
    } else {
      std::string csv = "metric,condition,value\n";
      for (const auto& [condition, value] : accuracy) {
        csv += "accuracy," + to_string(condition) + "," + format_double(value) + "\n";
      }
      for (const auto& [condition, value] : total_ms) {
        csv += "mean_total_reading_ms," + to_string(condition) + "," + format_double(value) + "\n";
      }
      write_text_file(summary_path, csv);
    }

    const std::string long_path = out_dir + "/trials_long.csv";
    written.push_back(long_path);
    std::size_t rows_written = export_long_csv(store.trials, corpus, long_path);

    std::cout << "wrote " << rows.size() << " span-stat rows, " << rows_written
              << " long-format rows under " << out_dir << "\n";
    return 0;
  } catch (...) {
    cleanup();
    throw;
  }
}

int run_heatmap(const std::string& corpus_path, const std::string& gaze_path,
                const std::string& passage_id, const std::string& question_id,
                const std::string& condition, const std::string& out_path) {
  Corpus corpus = load_corpus_auto(corpus_path);
  GazeStore store = load_validated_gaze(gaze_path, corpus);
  std::optional<std::string> question;
  if (!question_id.empty()) question = question_id;
  HeatmapDocument doc =
      make_heatmap(corpus, store, passage_id, question, condition_from_string(condition));
  save_heatmap(out_path, doc);
  std::cout << out_path << "\n";
  return 0;
}

int run_targets(const std::string& config_path, const std::string& corpus_path,
                const std::string& gaze_path, const std::string& out_path) {
  ExperimentConfig config = load_experiment_config(config_path);
  if (!config.target) {
    throw ParseError("config field 'target' is none; there are no targets to build");
  }
  Corpus corpus = load_corpus_auto(corpus_path);

  GazeStore store;
  TargetContext context;
  if (!gaze_path.empty()) {
    store = load_validated_gaze(gaze_path, corpus);
    context.gaze = &store;
  }

  TinyEncoder encoder(parse_tiny_encoder_spec(config.encoder_spec));
  TargetCache cache = build_target_cache(corpus, *config.target, encoder, context);
  save_target_cache(out_path, encoder.id(), cache);
  std::cout << "wrote " << cache.size() << " example targets to " << out_path << "\n";
  return 0;
}

int run_train(const std::string& config_path, const std::string& corpus_path,
              const std::string& gaze_path, const std::string& cache_path,
              const std::string& out_dir, long seed_override) {
  ExperimentConfig config = load_experiment_config(config_path);
  if (seed_override >= 0) {
    config.seeds = {static_cast<std::uint64_t>(seed_override)};
  }

  Corpus corpus = load_corpus_auto(corpus_path);
  ExperimentData data;
  data.corpus = &corpus;

  GazeStore store;
  if (!gaze_path.empty()) {
    store = load_validated_gaze(gaze_path, corpus);
    data.gaze = &store;
  }

  TargetCache cache;
  if (!cache_path.empty()) {
    std::string cache_encoder;
    cache = load_target_cache(cache_path, &cache_encoder);
    TinyEncoder encoder(parse_tiny_encoder_spec(config.encoder_spec));
    if (cache_encoder != encoder.id()) {
      throw ValidationError("target cache was built with encoder '" + cache_encoder +
                            "' but the config names '" + encoder.id() + "'");
    }
    data.target_cache = &cache;
  }

  Corpus external_corpus;
  GazeStore external_store;
  std::vector<ExternalChunk> chunks;
  if (config.target && config.target->kind == TargetKind::GazeExternal) {
    if (config.external_corpus_path.empty()) {
      throw ParseError("missing config field 'external_corpus'");
    }
    if (config.external_gaze_path.empty()) {
      throw ParseError("missing config field 'external_gaze'");
    }
    external_corpus = load_corpus(config.external_corpus_path, CorpusFormat::Plain);
    external_store = load_validated_gaze(config.external_gaze_path, external_corpus);
    std::vector<ExternalArticle> articles =
        load_external_articles(external_corpus, external_store);
    ChunkResult result = chunk_external_corpus(articles, config.target->external_target_len);
    if (result.dropped > 0) {
      std::cerr << "note: dropped " << result.dropped << " zero-gaze external chunks\n";
    }
    chunks = std::move(result.chunks);
    data.external_chunks = &chunks;
  }

  fs::create_directories(out_dir);
  RunRecord record = train(config, data, out_dir);

  std::cout << "aggregate_test_accuracy " << format_double(record.aggregate_test_accuracy)
            << "\n";
  for (const SelectionRecord& s : record.selections) {
    std::cout << "seed " << s.seed << " fold " << s.fold << ": alpha "
              << format_double(s.alpha) << " epoch " << s.epoch << " dev "
              << format_double(s.dev_accuracy) << " test " << format_double(s.test_accuracy)
              << "\n";
  }
  std::cout << "run record: " << out_dir << "/run_record.json\n";
  return 0;
}

int run_evaluate(const std::string& checkpoint_dir, const std::string& corpus_path,
                 const std::string& articles_csv, const std::string& out_path,
                 const std::string& format) {
  MultiTaskModel model = load_checkpoint(checkpoint_dir);
  ExperimentConfig config = parse_experiment_config(checkpoint_config_text(checkpoint_dir));
  Corpus corpus = load_corpus_auto(corpus_path);

  std::vector<std::string> articles;
  if (!articles_csv.empty()) {
    std::stringstream ss(articles_csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) articles.push_back(item);
    }
  }

  EvalResult result = evaluate_model(model, corpus, articles, config.truncation_enabled);

  if (!out_path.empty()) {
    if (format == "json") {
      nlohmann::json doc;
      doc["accuracy"] = result.accuracy;
      doc["predictions"] = nlohmann::json::array();
      for (const Prediction& p : result.predictions) {
        doc["predictions"].push_back(nlohmann::json{{"passage_id", p.passage_id},
                                                    {"question_id", p.question_id},
                                                    {"predicted", p.predicted},
                                                    {"correct", p.correct},
                                                    {"probs", p.probs}});
      }
      write_text_file(out_path, doc.dump(2) + "\n");
    } else {
      std::string csv = "passage_id,question_id,predicted,correct,p0,p1,p2,p3\n";
      for (const Prediction& p : result.predictions) {
        csv += p.passage_id + "," + p.question_id + "," + std::to_string(p.predicted) + "," +
               std::to_string(p.correct);
        for (double prob : p.probs) csv += "," + format_double(prob);
        csv += "\n";
      }
      write_text_file(out_path, csv);
    }
  }
  std::cout << "accuracy " << format_double(result.accuracy) << " over "
            << result.predictions.size() << " questions\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gaze-supervised multiple-choice reading comprehension toolkit"};
  app.require_subcommand(1);

  std::string corpus_path, gaze_path, config_path, out_path, format = "json";
  std::string passage_id, question_id, condition = "hunting";
  std::string checkpoint_dir, articles_csv, cache_path;
  long seed_override = -1;

  CLI::App* ingest = app.add_subcommand("ingest", "Validate corpus and gaze files, report counts");
  ingest->add_option("--corpus", corpus_path, "corpus JSON file")->required();
  ingest->add_option("--gaze", gaze_path, "gaze JSON file");
  ingest->add_option("--format", format, "report format")->check(CLI::IsMember({"json", "csv"}));

  CLI::App* analyze = app.add_subcommand("analyze", "Span stats, accuracy and long-format export");
  analyze->add_option("--corpus", corpus_path, "corpus JSON file")->required();
  analyze->add_option("--gaze", gaze_path, "gaze JSON file")->required();
  analyze->add_option("--out", out_path, "output directory")->required();
  analyze->add_option("--format", format, "stats file format")
      ->check(CLI::IsMember({"json", "csv"}));

  CLI::App* heatmap = app.add_subcommand("heatmap", "Render one passage's gaze as HTML");
  heatmap->add_option("--corpus", corpus_path, "corpus JSON file")->required();
  heatmap->add_option("--gaze", gaze_path, "gaze JSON file")->required();
  heatmap->add_option("--passage", passage_id, "passage id")->required();
  heatmap->add_option("--question", question_id, "question id (optional)");
  heatmap->add_option("--condition", condition, "hunting or gathering")
      ->check(CLI::IsMember({"hunting", "gathering"}));
  heatmap->add_option("--out", out_path, "output HTML file")->required();

  CLI::App* targets = app.add_subcommand("targets", "Precompute an auxiliary target cache");
  targets->add_option("--config", config_path, "experiment config file")->required();
  targets->add_option("--corpus", corpus_path, "corpus JSON file")->required();
  targets->add_option("--gaze", gaze_path, "gaze JSON file (gaze target kinds)");
  targets->add_option("--out", out_path, "target cache output file")->required();

  CLI::App* train_cmd = app.add_subcommand("train", "Run the fine-tuning protocol");
  train_cmd->add_option("--config", config_path, "experiment config file")->required();
  train_cmd->add_option("--corpus", corpus_path, "corpus JSON file")->required();
  train_cmd->add_option("--gaze", gaze_path, "gaze JSON file (gaze target kinds)");
  train_cmd->add_option("--targets", cache_path, "precomputed target cache");
  train_cmd->add_option("--out", out_path, "output directory")->required();
  train_cmd->add_option("--seed", seed_override, "override config seeds with one seed");

  CLI::App* evaluate = app.add_subcommand("evaluate", "Score a checkpoint on a corpus");
  evaluate->add_option("--checkpoint", checkpoint_dir, "checkpoint directory")->required();
  evaluate->add_option("--corpus", corpus_path, "corpus JSON file")->required();
  evaluate->add_option("--articles", articles_csv, "comma-separated article filter");
  evaluate->add_option("--out", out_path, "predictions output file");
  evaluate->add_option("--format", format, "predictions format")
      ->check(CLI::IsMember({"json", "csv"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kInputError;
  }

  try {
    if (*ingest) return run_ingest(corpus_path, gaze_path, format);
    if (*analyze) return run_analyze(corpus_path, gaze_path, out_path, format);
    if (*heatmap) {
      return run_heatmap(corpus_path, gaze_path, passage_id, question_id, condition, out_path);
    }
    if (*targets) return run_targets(config_path, corpus_path, gaze_path, out_path);
    if (*train_cmd) {
      return run_train(config_path, corpus_path, gaze_path, cache_path, out_path, seed_override);
    }
    if (*evaluate) {
      return run_evaluate(checkpoint_dir, corpus_path, articles_csv, out_path, format);
    }
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInputError;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidationFailure;
  } catch (const RunAbort& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeAbort;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeAbort;
  }
  return 0;
}
