#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "gazeqa/errors.hpp"
#include "gazeqa/tiny_encoder.hpp"
#include "support.hpp"

using namespace gazeqa;

namespace {

TinyEncoderConfig small_config() {
  TinyEncoderConfig config;
  config.dim = 6;
  config.layers = 1;
  config.heads = 2;
  config.ffn_mult = 2;
  config.vocab = 24;
  config.max_len = 12;
  config.piece_chars = 4;
  config.seed = 5;
  return config;
}

// Scalar probe: weighted sum of all output states with fixed pseudo-random
// weights, so every state entry influences the loss.
double probe_loss(const Matrix& states, std::uint64_t salt) {
  double loss = 0.0;
  std::mt19937_64 rng(salt);
  for (double v : states.data) {
    double w = (static_cast<double>(rng() % 2000) - 1000.0) / 1000.0;
    loss += w * v;
  }
  return loss;
}

Matrix probe_grad(const Matrix& states, std::uint64_t salt) {
  Matrix d = states;
  std::mt19937_64 rng(salt);
  for (double& v : d.data) {
    v = (static_cast<double>(rng() % 2000) - 1000.0) / 1000.0;
  }
  return d;
}

}  // namespace

TEST_CASE("spec strings parse, default and round-trip") {
  TinyEncoderConfig defaults = parse_tiny_encoder_spec("tiny");
  CHECK(defaults.dim == 16);
  CHECK(defaults.layers == 2);
  CHECK(defaults.heads == 2);
  CHECK(defaults.vocab == 512);
  CHECK(defaults.max_len == 128);
  CHECK(defaults.piece_chars == 8);
  CHECK(defaults.seed == 7);

  TinyEncoderConfig parsed = parse_tiny_encoder_spec("tiny:dim=8,layers=1,seed=3");
  CHECK(parsed.dim == 8);
  CHECK(parsed.layers == 1);
  CHECK(parsed.seed == 3);
  CHECK(parsed.vocab == 512);  // unlisted keys keep defaults

  TinyEncoderConfig round = parse_tiny_encoder_spec(parsed.spec_string());
  CHECK(round.spec_string() == parsed.spec_string());

  CHECK_THROWS_AS((void)parse_tiny_encoder_spec("huge:dim=8"), ParseError);
  CHECK_THROWS_AS((void)parse_tiny_encoder_spec("tiny:widths=8"), ParseError);
  CHECK_THROWS_AS((void)parse_tiny_encoder_spec("tiny:dim=zero"), ParseError);
  CHECK_THROWS_AS((void)parse_tiny_encoder_spec("tiny:dim=0"), ParseError);
  CHECK_THROWS_AS((void)parse_tiny_encoder_spec("tiny:dim=5,heads=2"), ParseError);
}

TEST_CASE("construction is deterministic in the seed") {
  TinyEncoder a(small_config());
  TinyEncoder b(small_config());
  auto pa = a.parameters();
  auto pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->name == pb[i]->name);
    CHECK(pa[i]->value == pb[i]->value);
  }

  TinyEncoderConfig other = small_config();
  other.seed = 6;
  TinyEncoder c(other);
  CHECK(c.parameters()[0]->value != pa[0]->value);
}

TEST_CASE("tokenize aligns pieces with words") {
  TinyEncoder encoder(small_config());  // piece_chars = 4

  Tokenization t = encoder.tokenize({"a", "gaze", "fixation,"});
  REQUIRE(t.tokens_per_word.size() == 3);
  CHECK(t.tokens_per_word[0] == 1);
  CHECK(t.tokens_per_word[1] == 1);
  CHECK(t.tokens_per_word[2] == 3);  // "fixa" "tion" ","
  CHECK(t.ids.size() == 5);

  // Alignment property: token counts always sum to the id count.
  std::mt19937_64 rng(21);
  for (int round = 0; round < 100; ++round) {
    std::vector<std::string> words = fixtures::make_words(1 + rng() % 10, rng());
    Tokenization tok = encoder.tokenize(words);
    REQUIRE(tok.tokens_per_word.size() == words.size());
    std::size_t total = 0;
    for (int k : tok.tokens_per_word) {
      CHECK(k >= 1);
      total += static_cast<std::size_t>(k);
    }
    CHECK(total == tok.ids.size());
    for (int id : tok.ids) {
      CHECK(id >= 2);  // 0 and 1 are reserved
      CHECK(id < small_config().vocab);
    }
  }

  // Same word, same ids, every time.
  CHECK(encoder.tokenize({"gaze"}).ids == encoder.tokenize({"gaze"}).ids);
  CHECK(encoder.piece_id("gaze") == encoder.tokenize({"gaze"}).ids[0]);
}

TEST_CASE("encode produces one state row per token plus determinism") {
  TinyEncoder encoder(small_config());
  std::vector<int> ids = {0, 5, 9, 1, 7};
  EncodeResult r = encoder.encode(ids);
  CHECK(r.states.rows == ids.size());
  CHECK(r.states.cols == static_cast<std::size_t>(encoder.dim()));
  CHECK(r.summary_position == 0);
  CHECK(r.summary() == r.states.row(0));

  EncodeResult again = encoder.encode(ids);
  CHECK(r.states.data == again.states.data);

  for (double v : r.states.data) CHECK(std::isfinite(v));
}

TEST_CASE("encode rejects invalid sequences") {
  TinyEncoder encoder(small_config());
  CHECK_THROWS_AS((void)encoder.encode({}), ValidationError);
  CHECK_THROWS_AS((void)encoder.encode({0, -1}), ValidationError);
  CHECK_THROWS_AS((void)encoder.encode({0, small_config().vocab}), ValidationError);
  std::vector<int> too_long(small_config().max_len + 1, 2);
  CHECK_THROWS_AS((void)encoder.encode(too_long), ValidationError);
  std::vector<int> max_ok(small_config().max_len, 2);
  CHECK_NOTHROW((void)encoder.encode(max_ok));
}

TEST_CASE("backward matches central finite differences on every parameter") {
  TinyEncoder encoder(small_config());
  std::vector<int> ids = {0, 4, 17, 1, 9, 3};
  const std::uint64_t salt = 2024;

  encoder.zero_grad();
  auto trace = encoder.forward(ids);
  encoder.backward(*trace, probe_grad(trace->states, salt));

  const double step = 1e-5;
  std::size_t checked = 0;
  for (Tensor* tensor : encoder.parameters()) {
    for (std::size_t i = 0; i < tensor->size(); ++i) {
      // Embedding rows never touched by ids have exactly zero gradient and
      // zero finite difference; spot-check those cheaply.
      double analytic = tensor->grad[i];
      const double saved = tensor->value[i];
      tensor->value[i] = saved + step;
      double up = probe_loss(encoder.forward(ids)->states, salt);
      tensor->value[i] = saved - step;
      double down = probe_loss(encoder.forward(ids)->states, salt);
      tensor->value[i] = saved;
      double numeric = (up - down) / (2.0 * step);

      double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      double rel = std::abs(analytic - numeric) / denom;
      if (rel >= 1e-4) {
        CAPTURE(tensor->name);
        CAPTURE(i);
        CAPTURE(analytic);
        CAPTURE(numeric);
      }
      REQUIRE(rel < 1e-4);
      ++checked;
    }
  }
  CHECK(checked > 500);
}

TEST_CASE("backward accumulates gradients across calls") {
  TinyEncoder encoder(small_config());
  std::vector<int> ids = {0, 4, 7, 1};

  encoder.zero_grad();
  auto trace = encoder.forward(ids);
  Matrix d = probe_grad(trace->states, 77);
  encoder.backward(*trace, d);
  std::vector<double> once = encoder.parameters()[0]->grad;

  encoder.backward(*trace, d);
  std::vector<double> twice = encoder.parameters()[0]->grad;
  for (std::size_t i = 0; i < once.size(); ++i) {
    CHECK(twice[i] == doctest::Approx(2.0 * once[i]).epsilon(1e-12));
  }

  encoder.zero_grad();
  for (double g : encoder.parameters()[0]->grad) CHECK(g == 0.0);
}

TEST_CASE("clone is deep and independent") {
  TinyEncoder encoder(small_config());
  std::unique_ptr<TrainableEncoder> copy = encoder.clone();
  CHECK(copy->id() == encoder.id());

  std::vector<int> ids = {0, 3, 1};
  EncodeResult before = encoder.encode(ids);
  copy->parameters()[0]->value[0] += 1.0;
  EncodeResult after = encoder.encode(ids);
  CHECK(before.states.data == after.states.data);
  CHECK(copy->encode(ids).states.data != encoder.encode(ids).states.data);
}

TEST_CASE("encoder id names the configuration") {
  TinyEncoder encoder(small_config());
  CHECK(encoder.id() == small_config().spec_string());
  CHECK(encoder.id().find("dim=6") != std::string::npos);
  TinyEncoderConfig reparsed = parse_tiny_encoder_spec(encoder.id());
  CHECK(reparsed.spec_string() == encoder.id());
}
