#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "gazeqa/errors.hpp"
#include "gazeqa/gaze.hpp"
#include "support.hpp"

using namespace gazeqa;

namespace {

GazeTrial trial_with(std::string passage_id, std::optional<std::string> question_id,
                     Condition condition, bool correct, std::vector<double> tf) {
  GazeTrial t;
  t.subject_id = "s";
  t.passage_id = std::move(passage_id);
  t.question_id = std::move(question_id);
  t.condition = condition;
  t.correct = correct;
  t.tf_ms = std::move(tf);
  return t;
}

double sum(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

}  // namespace

TEST_CASE("condition names round-trip") {
  CHECK(to_string(Condition::Hunting) == "hunting");
  CHECK(to_string(Condition::Gathering) == "gathering");
  CHECK(condition_from_string("hunting") == Condition::Hunting);
  CHECK(condition_from_string("gathering") == Condition::Gathering);
  CHECK_THROWS_AS((void)condition_from_string("skimming"), ValidationError);
}

TEST_CASE("normalize_trial produces a word distribution") {
  GazeTrial t = trial_with("p", "q", Condition::Hunting, true, {100, 0, 300});
  GazeDistribution d = normalize_trial(t);
  REQUIRE(d.size() == 3);
  CHECK(d.granularity == Granularity::Word);
  CHECK(d.values[0] == doctest::Approx(0.25));
  CHECK(d.values[1] == 0.0);
  CHECK(d.values[2] == doctest::Approx(0.75));
  CHECK_NOTHROW(check_distribution(d));

  GazeTrial zero = trial_with("p", "q", Condition::Hunting, true, {0, 0});
  CHECK(!zero.usable());
  CHECK_THROWS_AS((void)normalize_trial(zero), ValidationError);
}

TEST_CASE("average_distributions is the elementwise mean") {
  GazeDistribution a{{0.2, 0.8}, Granularity::Word};
  GazeDistribution b{{0.6, 0.4}, Granularity::Word};
  GazeDistribution mean = average_distributions({a, b});
  CHECK(mean.values[0] == doctest::Approx(0.4));
  CHECK(mean.values[1] == doctest::Approx(0.6));

  CHECK_THROWS_AS((void)average_distributions({}), ValidationError);
  GazeDistribution c{{1.0}, Granularity::Word};
  CHECK_THROWS_AS((void)average_distributions({a, c}), ValidationError);
  GazeDistribution d{{0.5, 0.5}, Granularity::Token};
  CHECK_THROWS_AS((void)average_distributions({a, d}), ValidationError);
}

TEST_CASE("check_distribution rejects malformed vectors") {
  CHECK_THROWS_AS(check_distribution(GazeDistribution{{0.5, 0.6}, Granularity::Word}),
                  ValidationError);
  CHECK_THROWS_AS(check_distribution(GazeDistribution{{-0.1, 1.1}, Granularity::Word}),
                  ValidationError);
  CHECK_NOTHROW(check_distribution(GazeDistribution{{0.25, 0.25, 0.5}, Granularity::Token}));
}

TEST_CASE("aggregate_gaze matches a brute-force oracle") {
  // Oracle: normalize each matching usable trial by hand, then average.
  std::mt19937_64 rng(99);
  for (int round = 0; round < 50; ++round) {
    const std::size_t words = 2 + rng() % 19;  // <= 20 words
    const std::size_t n_trials = 1 + rng() % 10;
    std::vector<GazeTrial> trials;
    std::vector<std::vector<double>> matching;
    for (std::size_t i = 0; i < n_trials; ++i) {
      std::vector<double> tf(words);
      for (double& x : tf) x = static_cast<double>(rng() % 500);
      bool correct = rng() % 4 != 0;
      Condition condition = rng() % 2 ? Condition::Hunting : Condition::Gathering;
      std::string question = rng() % 2 ? "q1" : "q2";
      GazeTrial t = trial_with("p", question, condition, correct, tf);
      trials.push_back(t);
      if (condition == Condition::Hunting && question == "q1" && correct && t.usable()) {
        double total = sum(tf);
        std::vector<double> norm(words);
        for (std::size_t w = 0; w < words; ++w) norm[w] = tf[w] / total;
        matching.push_back(std::move(norm));
      }
    }
    if (matching.empty()) {
      CHECK_THROWS_AS(
          (void)aggregate_gaze(trials, "p", std::optional<std::string>("q1"), Condition::Hunting),
          ValidationError);
      continue;
    }
    GazeDistribution got =
        aggregate_gaze(trials, "p", std::optional<std::string>("q1"), Condition::Hunting);
    REQUIRE(got.size() == words);
    for (std::size_t w = 0; w < words; ++w) {
      double expect = 0.0;
      for (const auto& m : matching) expect += m[w];
      expect /= static_cast<double>(matching.size());
      CHECK(got.values[w] == doctest::Approx(expect).epsilon(1e-9));
    }
    CHECK(std::abs(sum(got.values) - 1.0) < 1e-9);
  }
}

TEST_CASE("aggregate_gaze filters by question, condition and correctness") {
  std::vector<GazeTrial> trials = {
      trial_with("p", "q1", Condition::Hunting, true, {10, 0}),
      trial_with("p", "q1", Condition::Hunting, false, {0, 10}),
      trial_with("p", "q1", Condition::Gathering, true, {5, 5}),
      trial_with("p", "q2", Condition::Hunting, true, {0, 10}),
      trial_with("other", "q1", Condition::Hunting, true, {0, 10}),
  };

  GazeDistribution strict =
      aggregate_gaze(trials, "p", std::optional<std::string>("q1"), Condition::Hunting);
  CHECK(strict.values[0] == doctest::Approx(1.0));

  GazeDistribution lax =
      aggregate_gaze(trials, "p", std::optional<std::string>("q1"), Condition::Hunting, false);
  CHECK(lax.values[0] == doctest::Approx(0.5));
  CHECK(lax.values[1] == doctest::Approx(0.5));

  // Question-free matching: only trials without a question id participate.
  std::vector<GazeTrial> free_trials = {
      trial_with("p", std::nullopt, Condition::Gathering, true, {10, 30}),
      trial_with("p", "q1", Condition::Gathering, true, {30, 10}),
  };
  GazeDistribution free_gaze = aggregate_gaze(free_trials, "p", std::nullopt, Condition::Gathering);
  CHECK(free_gaze.values[0] == doctest::Approx(0.25));
}

TEST_CASE("split_to_tokens conserves each word's mass") {
  std::mt19937_64 rng(1234);
  for (int round = 0; round < 500; ++round) {
    const std::size_t words = 1 + rng() % 12;
    GazeDistribution dist{fixtures::random_simplex(rng, words), Granularity::Word};
    std::vector<int> tokens_per_word(words);
    std::size_t total_tokens = 0;
    for (int& k : tokens_per_word) {
      k = 1 + static_cast<int>(rng() % 4);
      total_tokens += static_cast<std::size_t>(k);
    }
    GazeDistribution tokens = split_to_tokens(dist, tokens_per_word);
    REQUIRE(tokens.size() == total_tokens);
    CHECK(tokens.granularity == Granularity::Token);
    std::size_t pos = 0;
    for (std::size_t w = 0; w < words; ++w) {
      double mass = 0.0;
      for (int k = 0; k < tokens_per_word[w]; ++k) mass += tokens.values[pos++];
      CHECK(std::abs(mass - dist.values[w]) < 1e-12);
    }
  }
}

TEST_CASE("split_to_tokens spreads a word's mass uniformly") {
  GazeDistribution dist{{0.6, 0.4}, Granularity::Word};
  GazeDistribution tokens = split_to_tokens(dist, {3, 1});
  REQUIRE(tokens.size() == 4);
  CHECK(tokens.values[0] == doctest::Approx(0.2));
  CHECK(tokens.values[1] == doctest::Approx(0.2));
  CHECK(tokens.values[2] == doctest::Approx(0.2));
  CHECK(tokens.values[3] == doctest::Approx(0.4));

  CHECK_THROWS_AS((void)split_to_tokens(dist, {3}), ValidationError);
  CHECK_THROWS_AS((void)split_to_tokens(dist, {3, 0}), ValidationError);
}

TEST_CASE("span_reading_stats recovers a planted within-span inflation") {
  // Uniform 100 ms per word, hunting trials read the critical span twice as
  // long; the per-word within/outside ratio must then be exactly 2.
  Passage passage;
  passage.id = "p";
  passage.article_id = "a";
  passage.text = fixtures::join_words(fixtures::make_words(10, 3));
  passage.words = split_words(passage.text);
  WordSpan span{2, 5};

  std::vector<GazeTrial> trials;
  for (int s = 0; s < 4; ++s) {
    std::vector<double> hunting_tf(10, 100.0), gathering_tf(10, 100.0);
    for (std::size_t w = span.start; w < span.end; ++w) hunting_tf[w] = 200.0;
    trials.push_back(trial_with("p", "q", Condition::Hunting, true, hunting_tf));
    trials.push_back(trial_with("p", "q", Condition::Gathering, true, gathering_tf));
  }

  SpanReadingStats stats = span_reading_stats(trials, passage, span);
  REQUIRE(stats.count(Condition::Hunting) == 1);
  REQUIRE(stats.count(Condition::Gathering) == 1);

  const SpanConditionStats& hunting = stats.at(Condition::Hunting);
  CHECK(hunting.trial_count == 4);
  CHECK(hunting.mean_tf_within_ms == doctest::Approx(200.0));
  REQUIRE(hunting.mean_tf_outside_ms.has_value());
  CHECK(*hunting.mean_tf_outside_ms == doctest::Approx(100.0));
  CHECK(hunting.mean_tf_within_ms / *hunting.mean_tf_outside_ms == doctest::Approx(2.0));
  CHECK(hunting.mean_total_passage_ms == doctest::Approx(1300.0));  // 7*100 + 3*200

  const SpanConditionStats& gathering = stats.at(Condition::Gathering);
  CHECK(gathering.mean_tf_within_ms == doctest::Approx(100.0));
  CHECK(*gathering.mean_tf_outside_ms == doctest::Approx(100.0));
  CHECK(gathering.mean_norm_within == doctest::Approx(*gathering.mean_norm_outside));

  // Normalized variant agrees in direction.
  CHECK(hunting.mean_norm_within > *hunting.mean_norm_outside);
}

TEST_CASE("span_reading_stats spans covering everything have no outside") {
  Passage passage;
  passage.id = "p";
  passage.text = "alpha beta";
  passage.words = split_words(passage.text);
  std::vector<GazeTrial> trials = {trial_with("p", "q", Condition::Hunting, true, {10, 30})};
  SpanReadingStats stats = span_reading_stats(trials, passage, WordSpan{0, 2});
  CHECK(!stats.at(Condition::Hunting).mean_tf_outside_ms.has_value());
  CHECK(stats.at(Condition::Hunting).mean_tf_within_ms == doctest::Approx(20.0));

  CHECK_THROWS_AS((void)span_reading_stats(trials, passage, WordSpan{0, 3}), ValidationError);
  std::vector<GazeTrial> bad = {trial_with("p", "q", Condition::Hunting, true, {10, 30, 5})};
  CHECK_THROWS_AS((void)span_reading_stats(bad, passage, WordSpan{0, 2}), ValidationError);
}

TEST_CASE("condition_accuracy counts every trial, usable or not") {
  std::vector<GazeTrial> trials = {
      trial_with("p", "q", Condition::Hunting, true, {1}),
      trial_with("p", "q", Condition::Hunting, true, {1}),
      trial_with("p", "q", Condition::Hunting, false, {1}),
      trial_with("p", "q", Condition::Gathering, false, {1}),
  };
  std::map<Condition, double> acc = condition_accuracy(trials);
  CHECK(acc.at(Condition::Hunting) == doctest::Approx(2.0 / 3.0));
  CHECK(acc.at(Condition::Gathering) == doctest::Approx(0.0));
}

TEST_CASE("gaze JSON round-trips") {
  Corpus corpus = fixtures::make_corpus(2);
  fixtures::GazeShape shape;
  shape.subjects = 2;
  GazeStore store = fixtures::make_gaze(corpus, shape);
  REQUIRE(!store.trials.empty());

  std::string text = gaze_to_json(store);
  GazeStore reloaded = load_gaze_json(text);
  REQUIRE(reloaded.trials.size() == store.trials.size());
  for (std::size_t i = 0; i < store.trials.size(); ++i) {
    CHECK(reloaded.trials[i].subject_id == store.trials[i].subject_id);
    CHECK(reloaded.trials[i].passage_id == store.trials[i].passage_id);
    CHECK(reloaded.trials[i].question_id == store.trials[i].question_id);
    CHECK(reloaded.trials[i].condition == store.trials[i].condition);
    CHECK(reloaded.trials[i].correct == store.trials[i].correct);
    CHECK(reloaded.trials[i].tf_ms == store.trials[i].tf_ms);
  }
  CHECK_NOTHROW(validate_gaze_against_corpus(reloaded, corpus));
}

TEST_CASE("gaze loader and validator reject malformed input") {
  CHECK_THROWS_AS((void)load_gaze_json("[]"), ParseError);
  CHECK_THROWS_AS((void)load_gaze_json("{\"trials\": [{}]}"), ParseError);
  CHECK_THROWS_AS((void)load_gaze_json("{\"trials\": [{\"subject_id\": \"s\", \"passage_id\": "
                                       "\"p\", \"condition\": \"hunting\", \"correct\": true, "
                                       "\"tf_ms\": [-5]}]}"),
                  ValidationError);

  Corpus corpus = fixtures::make_corpus(1);
  GazeStore store;
  store.trials.push_back(trial_with("unknown", "q", Condition::Hunting, true, {1.0}));
  CHECK_THROWS_AS(validate_gaze_against_corpus(store, corpus), ValidationError);

  GazeStore wrong_len;
  wrong_len.trials.push_back(trial_with("art0_p0", "q", Condition::Hunting, true, {1.0}));
  CHECK_THROWS_AS(validate_gaze_against_corpus(wrong_len, corpus), ValidationError);
}

TEST_CASE("export_long_csv writes one row per trial word") {
  Corpus corpus = fixtures::make_corpus(1);
  const Passage& passage = *corpus.passages()[0];
  std::vector<double> tf(passage.words.size(), 0.0);
  tf[0] = 120.0;
  tf[2] = 80.0;
  GazeStore store;
  store.trials.push_back(trial_with(passage.id, "art0_q0", Condition::Hunting, true, tf));

  std::string dir = fixtures::fresh_dir("long_csv");
  std::string path = dir + "/long.csv";
  std::size_t rows = export_long_csv(store.trials, corpus, path);
  CHECK(rows == passage.words.size());

  std::ifstream in(path);
  REQUIRE(in.good());
  std::string header;
  std::getline(in, header);
  CHECK(header.find("subject") != std::string::npos);
  std::size_t lines = 0;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) ++lines;
  }
  CHECK(lines == rows);
}
