#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "gazeqa/corpus.hpp"
#include "gazeqa/gaze.hpp"
#include "gazeqa/heatmap.hpp"
#include "support.hpp"

using namespace gazeqa;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string output;
};

RunResult run_cli(const std::string& args, const std::string& dir) {
  const std::string log = dir + "/cli_output.txt";
  std::string command = std::string(GAZEQA_CLI_PATH) + " " + args + " > " + log + " 2>&1";
  int raw = std::system(command.c_str());
  RunResult r;
  r.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream in(log);
  r.output.assign((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return r;
}

struct CliFixture {
  std::string dir;
  std::string corpus_path, gaze_path;
  Corpus corpus;
  GazeStore gaze;

  CliFixture() : dir(fixtures::fresh_dir("cli")) {
    fixtures::CorpusShape shape;
    shape.articles = 5;
    shape.passages_per_article = 1;
    shape.questions_per_article = 2;
    shape.words_per_passage = 6;
    corpus = fixtures::make_corpus(shape);
    fixtures::GazeShape gaze_shape;
    gaze_shape.subjects = 2;
    gaze_shape.zero_fraction = 0.0;
    gaze = fixtures::make_gaze(corpus, gaze_shape);

    corpus_path = dir + "/corpus.json";
    gaze_path = dir + "/gaze.json";
    save_corpus(corpus, corpus_path);
    std::ofstream out(gaze_path);
    out << gaze_to_json(gaze);
  }

  std::string write_config(const std::string& target, const std::string& alphas,
                           const std::string& extra = "") {
    std::string path = dir + "/config_" + target + ".txt";
    std::ofstream out(path);
    out << "encoder = tiny:dim=8,layers=1,heads=2,ffn=2,vocab=64,max_len=48,piece=4\n"
        << "target = " << target << "\n"
        << "alpha_grid = " << alphas << "\n"
        << "epochs = 1\n"
        << "folds = cv\n"
        << "cv_k = 5\n"
        << "fold_seed = 3\n"
        << "seeds = 1\n"
        << "batch_size = 4\n"
        << "learning_rate = 0.01\n"
        << extra;
    return path;
  }
};

}  // namespace

TEST_CASE("bad invocations exit with the input-error code") {
  std::string dir = fixtures::fresh_dir("cli_bad");
  CHECK(run_cli("", dir).code == 2);
  CHECK(run_cli("frobnicate", dir).code == 2);
  CHECK(run_cli("ingest", dir).code == 2);  // missing --corpus
  CHECK(run_cli("--help", dir).code == 0);
  CHECK(run_cli("ingest --corpus /definitely/not/there.json", dir).code == 2);
}

TEST_CASE("ingest reports corpus and gaze counts") {
  CliFixture f;
  RunResult r = run_cli("ingest --corpus " + f.corpus_path + " --gaze " + f.gaze_path, f.dir);
  REQUIRE(r.code == 0);
  nlohmann::json doc = nlohmann::json::parse(r.output);
  CHECK(doc["articles"] == 5);
  CHECK(doc["passages"] == 5);
  CHECK(doc["questions"] == 10);
  CHECK(doc["trials"] == f.gaze.trials.size());

  RunResult csv = run_cli(
      "ingest --corpus " + f.corpus_path + " --gaze " + f.gaze_path + " --format csv", f.dir);
  REQUIRE(csv.code == 0);
  CHECK(csv.output.find("articles,5") != std::string::npos);

  // A gaze file referencing unknown passages is a validation failure.
  GazeStore broken;
  GazeTrial t;
  t.subject_id = "s";
  t.passage_id = "ghost";
  t.condition = Condition::Hunting;
  t.correct = true;
  t.tf_ms = {1.0};
  broken.trials.push_back(t);
  std::string broken_path = f.dir + "/broken_gaze.json";
  std::ofstream(broken_path) << gaze_to_json(broken);
  CHECK(run_cli("ingest --corpus " + f.corpus_path + " --gaze " + broken_path, f.dir).code == 3);
}

TEST_CASE("analyze writes span stats, a summary and a long table") {
  CliFixture f;
  std::string out = f.dir + "/analysis";
  RunResult r = run_cli(
      "analyze --corpus " + f.corpus_path + " --gaze " + f.gaze_path + " --out " + out, f.dir);
  REQUIRE(r.code == 0);
  CHECK(fs::exists(out + "/span_stats.json"));
  CHECK(fs::exists(out + "/summary.json"));
  CHECK(fs::exists(out + "/trials_long.csv"));

  std::ifstream stats_in(out + "/span_stats.json");
  nlohmann::json stats = nlohmann::json::parse(stats_in);
  REQUIRE(stats.is_array());
  CHECK(stats.size() > 0);
  CHECK(stats[0].contains("within_outside_ratio"));

  std::ifstream summary_in(out + "/summary.json");
  nlohmann::json summary = nlohmann::json::parse(summary_in);
  CHECK(summary["condition_accuracy"].contains("hunting"));
  CHECK(summary["mean_total_reading_ms"].contains("gathering"));

  RunResult csv = run_cli("analyze --corpus " + f.corpus_path + " --gaze " + f.gaze_path +
                              " --out " + f.dir + "/analysis_csv --format csv",
                          f.dir);
  REQUIRE(csv.code == 0);
  CHECK(fs::exists(f.dir + "/analysis_csv/span_stats.csv"));
}

TEST_CASE("analyze removes partial outputs when it fails") {
  CliFixture f;
  // All trials unusable: validation fails after the output dir exists.
  GazeStore silent;
  for (const Passage* p : f.corpus.passages()) {
    GazeTrial t;
    t.subject_id = "s";
    t.passage_id = p->id;
    t.question_id = p->id;  // irrelevant; zero durations make it unusable
    t.condition = Condition::Hunting;
    t.correct = true;
    t.tf_ms.assign(p->words.size(), 0.0);
    silent.trials.push_back(t);
  }
  std::string silent_path = f.dir + "/silent_gaze.json";
  std::ofstream(silent_path) << gaze_to_json(silent);

  std::string out = f.dir + "/empty_analysis";
  RunResult r = run_cli(
      "analyze --corpus " + f.corpus_path + " --gaze " + silent_path + " --out " + out, f.dir);
  CHECK(r.code == 3);
  CHECK(r.output.find("usable") != std::string::npos);
  CHECK(!fs::exists(out + "/span_stats.json"));
  CHECK(!fs::exists(out + "/summary.json"));
  CHECK(!fs::exists(out + "/trials_long.csv"));
}

TEST_CASE("heatmap output round-trips the aggregate values") {
  CliFixture f;
  std::string out = f.dir + "/map.html";
  RunResult r = run_cli("heatmap --corpus " + f.corpus_path + " --gaze " + f.gaze_path +
                            " --passage art0_p0 --question art0_q0 --condition hunting --out " +
                            out,
                        f.dir);
  REQUIRE(r.code == 0);

  std::ifstream in(out);
  REQUIRE(in.good());
  std::string html((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<double> parsed = parse_heatmap_values(html);
  GazeDistribution expect = aggregate_gaze(f.gaze.trials, "art0_p0",
                                           std::optional<std::string>("art0_q0"),
                                           Condition::Hunting);
  REQUIRE(parsed.size() == expect.size());
  for (std::size_t i = 0; i < parsed.size(); ++i) {
    CHECK(std::abs(parsed[i] - expect.values[i]) < 1e-9);
  }

  CHECK(run_cli("heatmap --corpus " + f.corpus_path + " --gaze " + f.gaze_path +
                    " --passage ghost --condition hunting --out " + f.dir + "/no.html",
                f.dir)
            .code == 3);
  CHECK(run_cli("heatmap --corpus " + f.corpus_path + " --gaze " + f.gaze_path +
                    " --passage art0_p0 --condition skimming --out " + f.dir + "/no.html",
                f.dir)
            .code == 2);
}

TEST_CASE("targets builds a cache the trainer can consume") {
  CliFixture f;
  std::string config = f.write_config("span_annotation", "0, 0.5");
  std::string cache = f.dir + "/targets.json";
  RunResult r = run_cli("targets --config " + config + " --corpus " + f.corpus_path + " --out " +
                            cache,
                        f.dir);
  REQUIRE(r.code == 0);
  CHECK(fs::exists(cache));

  std::string none_config = f.write_config("none", "0");
  CHECK(run_cli("targets --config " + none_config + " --corpus " + f.corpus_path + " --out " +
                    f.dir + "/none.json",
                f.dir)
            .code == 2);

  std::string train_out = f.dir + "/trained";
  RunResult train_run = run_cli("train --config " + config + " --corpus " + f.corpus_path +
                                    " --gaze " + f.gaze_path + " --targets " + cache + " --out " +
                                    train_out,
                                f.dir);
  REQUIRE(train_run.code == 0);
  CHECK(train_run.output.find("aggregate_test_accuracy") != std::string::npos);
  CHECK(fs::exists(train_out + "/run_record.json"));
  CHECK(fs::exists(train_out + "/checkpoints/seed1_fold0/checkpoint.json"));

  // A cache built for a different encoder is rejected.
  std::string other_cache = f.dir + "/targets_other.json";
  {
    std::ifstream in(cache);
    nlohmann::json doc = nlohmann::json::parse(in);
    doc["encoder"] = "tiny:dim=16,layers=2,heads=2,ffn=4,vocab=512,max_len=128,piece=8,seed=7";
    std::ofstream out(other_cache);
    out << doc.dump();
  }
  CHECK(run_cli("train --config " + config + " --corpus " + f.corpus_path + " --gaze " +
                    f.gaze_path + " --targets " + other_cache + " --out " + f.dir + "/t2",
                f.dir)
            .code == 3);
}

TEST_CASE("train then evaluate a checkpoint") {
  CliFixture f;
  std::string config = f.write_config("gaze_hunting", "0, 0.5");
  std::string train_out = f.dir + "/run";
  RunResult train_run = run_cli("train --config " + config + " --corpus " + f.corpus_path +
                                    " --gaze " + f.gaze_path + " --out " + train_out,
                                f.dir);
  REQUIRE(train_run.code == 0);

  std::string checkpoint = train_out + "/checkpoints/seed1_fold0";
  std::string predictions = f.dir + "/predictions.json";
  RunResult eval_run = run_cli("evaluate --checkpoint " + checkpoint + " --corpus " +
                                   f.corpus_path + " --articles art0,art1 --out " + predictions,
                               f.dir);
  REQUIRE(eval_run.code == 0);
  CHECK(eval_run.output.find("accuracy") != std::string::npos);

  std::ifstream in(predictions);
  nlohmann::json doc = nlohmann::json::parse(in);
  CHECK(doc["predictions"].size() == 4);  // 2 articles x 1 passage x 2 questions
  for (const auto& p : doc["predictions"]) {
    CHECK(p["probs"].size() == 4);
  }

  CHECK(run_cli("evaluate --checkpoint " + f.dir + "/missing --corpus " + f.corpus_path, f.dir)
            .code == 2);

  // Seed override: a single-seed rerun reproduces the recorded run exactly.
  std::string rerun_out = f.dir + "/rerun";
  RunResult rerun = run_cli("train --config " + config + " --corpus " + f.corpus_path +
                                " --gaze " + f.gaze_path + " --seed 1 --out " + rerun_out,
                            f.dir);
  REQUIRE(rerun.code == 0);
  std::ifstream ra(train_out + "/run_record.json"), rb(rerun_out + "/run_record.json");
  std::string sa((std::istreambuf_iterator<char>(ra)), std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(rb)), std::istreambuf_iterator<char>());
  CHECK(sa == sb);
}
