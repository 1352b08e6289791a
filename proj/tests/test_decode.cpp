#include <gtest/gtest.h>

#include <mutex>

#include "atbias/decode.hpp"
#include "atbias/error.hpp"
#include "reference.hpp"

using namespace atbias;

namespace {

const std::string kFixtures = ATBIAS_FIXTURES;

EntitySet misery_entities() {
  EntitySet e;
  e.add({"richard", EntitySource::new_knowledge});
  e.add({"dawkins", EntitySource::new_knowledge});
  e.add({"stephen", EntitySource::parametric_knowledge});
  e.add({"king", EntitySource::parametric_knowledge});
  return e;
}

// Records every context a decode asks for.
class RecordingBackend final : public ModelBackend {
 public:
  explicit RecordingBackend(const ModelBackend& inner) : inner_(inner) {}
  BackendCapability capability() const override { return inner_.capability(); }
  TokenDistribution step(std::string_view context, std::size_t top_n) const override {
    std::lock_guard lock(mutex_);
    contexts_.emplace_back(context);
    return inner_.step(context, top_n);
  }
  const PieceNormalizer& normalizer() const override { return inner_.normalizer(); }
  std::vector<std::string> contexts() const { return contexts_; }

 private:
  const ModelBackend& inner_;
  mutable std::mutex mutex_;
  mutable std::vector<std::string> contexts_;
};

class Misery : public ::testing::Test {
 protected:
  MockLM lm = MockLM::load(kFixtures + "/misery/script.json");
  const std::string prompt = "Question: Who wrote Misery?\nAnswer:";
};

}  // namespace

TEST_F(Misery, BiasedDecodeFollowsNewKnowledge) {
  const auto r = decode(lm, prompt, misery_entities(), BiasConfig{});
  EXPECT_EQ(r.text, "richard dawkins");
  EXPECT_TRUE(r.stopped);
  EXPECT_EQ(r.tokens.size(), 2u);
  EXPECT_EQ(r.transcript.size(), 3u);
}

TEST_F(Misery, ControlDecodeFollowsParametricKnowledge) {
  const auto r = decode(lm, prompt, misery_entities(), BiasConfig{}.as_control());
  EXPECT_EQ(r.text, "stephen king");
  EXPECT_EQ(r.similarity_evaluations, 0u);
}

TEST_F(Misery, TranscriptReplays) {
  const auto entities = misery_entities();
  const BiasConfig cfg;
  const auto r = decode(lm, prompt, entities, cfg);
  for (const auto& step : r.transcript.steps()) {
    const auto replay = bias_step(step.raw, entities, cfg);
    ASSERT_EQ(replay.size(), step.scores.size());
    for (std::size_t i = 0; i < replay.size(); ++i) {
      EXPECT_EQ(replay.entries[i].token, step.scores.entries[i].token);
      EXPECT_EQ(replay.entries[i].score, step.scores.entries[i].score);
    }
    const auto head = head_filter(step.raw, cfg.filter);
    EXPECT_TRUE(head.contains(step.chosen));
    EXPECT_EQ(step.chosen, select_greedy(step.scores));
  }
}

TEST_F(Misery, DeterministicAcrossRuns) {
  const auto a = decode(lm, prompt, misery_entities(), BiasConfig{});
  const auto b = decode(lm, prompt, misery_entities(), BiasConfig{});
  EXPECT_EQ(a.text, b.text);
  EXPECT_EQ(a.tokens, b.tokens);
  ASSERT_EQ(a.transcript.size(), b.transcript.size());
  for (std::size_t i = 0; i < a.transcript.size(); ++i) {
    EXPECT_EQ(a.transcript.steps()[i].chosen, b.transcript.steps()[i].chosen);
  }
}

TEST_F(Misery, SeededSamplingIsReproducible) {
  DecodeOptions opts;
  opts.mode = SelectMode::sample(17);
  const auto a = decode(lm, prompt, misery_entities(), BiasConfig{}, opts);
  const auto b = decode(lm, prompt, misery_entities(), BiasConfig{}, opts);
  EXPECT_EQ(a.text, b.text);
  EXPECT_EQ(a.tokens, b.tokens);
}

TEST_F(Misery, ControlAndBiasedShareRequestsUntilDivergence) {
  RecordingBackend biased_rec(lm), control_rec(lm);
  const auto b = decode(biased_rec, prompt, misery_entities(), BiasConfig{});
  const auto c = decode(control_rec, prompt, misery_entities(), BiasConfig{}.as_control());
  std::size_t diverge = 0;
  while (diverge < b.tokens.size() && diverge < c.tokens.size() &&
         b.tokens[diverge] == c.tokens[diverge]) {
    ++diverge;
  }
  const auto bc = biased_rec.contexts(), cc = control_rec.contexts();
  for (std::size_t i = 0; i <= diverge; ++i) EXPECT_EQ(bc.at(i), cc.at(i));
}

TEST_F(Misery, DefaultsEqualExplicitValues) {
  BiasConfig explicit_cfg;
  explicit_cfg.filter = {0.0005, 10};
  explicit_cfg.n = 2;
  explicit_cfg.lambda_new = 25;
  explicit_cfg.lambda_para = 1;
  EXPECT_EQ(decode(lm, prompt, misery_entities(), explicit_cfg).text,
            decode(lm, prompt, misery_entities(), BiasConfig{}).text);
}

TEST_F(Misery, ZeroLambdaEqualsPlainFilteredGreedy) {
  const auto r = decode(lm, prompt, misery_entities(), BiasConfig{}.as_control());
  for (const auto& step : r.transcript.steps()) {
    std::vector<reference::Row> rows;
    for (const auto& e : step.raw.entries()) rows.push_back({e.token.value, e.piece.normalized, e.prob});
    const auto h = reference::head(rows, 0.0005, 10);
    unsigned best = *h.begin();
    double best_p = -1.0;
    for (const auto& row : rows) {
      if (h.count(row.id) != 0 && (row.prob > best_p || (row.prob == best_p && row.id < best))) {
        best = row.id;
        best_p = row.prob;
      }
    }
    EXPECT_EQ(step.chosen.value, best);
  }
}

TEST_F(Misery, MaxTokensStopsGeneration) {
  DecodeOptions opts;
  opts.max_tokens = 1;
  const auto r = decode(lm, prompt, misery_entities(), BiasConfig{}, opts);
  EXPECT_EQ(r.text, "richard");
  EXPECT_FALSE(r.stopped);
}

TEST_F(Misery, Preconditions) {
  DecodeOptions opts;
  opts.max_tokens = 0;
  EXPECT_THROW((void)decode(lm, prompt, misery_entities(), BiasConfig{}, opts),
               PreconditionError);
  opts = {};
  opts.top_n = 5;
  EXPECT_THROW((void)decode(lm, prompt, misery_entities(), BiasConfig{}, opts), ConfigError);
  DecodeSession session(lm, misery_entities(), BiasConfig{}, {});
  (void)session.run(prompt);
  EXPECT_THROW((void)session.run(prompt), PreconditionError);
}

TEST_F(Misery, TransportFailureCarriesPartialOutput) {
  lm.script("Answer: richard", {{"▁dawkins", 1.0}});  // "... dawkins" is unscripted
  lm.script("Answer: richard dawkins", {{"▁zzz", 1.0}});
  try {
    (void)decode(lm, prompt, misery_entities(), BiasConfig{});
    FAIL() << "expected DecodeError";
  } catch (const DecodeError& e) {
    EXPECT_EQ(e.partial().text, "richard dawkins zzz");
    EXPECT_EQ(e.partial().tokens.size(), 3u);
  }
}

TEST(Transcript, RingBufferDropsOldest) {
  Transcript t(2);
  for (std::size_t i = 0; i < 5; ++i) t.push({i, {}, {}, TokenId(0)});
  EXPECT_EQ(t.size(), 2u);
  EXPECT_EQ(t.total_steps(), 5u);
  EXPECT_EQ(t.dropped(), 3u);
  EXPECT_EQ(t.steps().front().index, 3u);
}

TEST(DefaultTopN, IsFourKOrSixtyFour) {
  EXPECT_EQ(default_top_n({0.0005, 10}), 64u);
  EXPECT_EQ(default_top_n({0.0005, 32}), 128u);
}
