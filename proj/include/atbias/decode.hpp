#pragma once

#include <cstddef>
#include <deque>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "atbias/backend.hpp"
#include "atbias/biaser.hpp"
#include "atbias/entity_match.hpp"
#include "atbias/error.hpp"

namespace atbias {

struct TranscriptStep {
  std::size_t index = 0;
  TokenDistribution raw;
  ScoreVector scores;  // tokens are exactly the head set
  TokenId chosen;
};

// Bounded step log; the oldest steps are dropped once capacity is reached.
class Transcript {
 public:
  explicit Transcript(std::size_t capacity = 4096) : capacity_(capacity) {}

  void push(TranscriptStep step);

  [[nodiscard]] const std::deque<TranscriptStep>& steps() const { return steps_; }
  [[nodiscard]] std::size_t size() const { return steps_.size(); }
  [[nodiscard]] bool empty() const { return steps_.empty(); }
  [[nodiscard]] std::size_t total_steps() const { return total_; }
  [[nodiscard]] std::size_t dropped() const { return total_ - steps_.size(); }
  [[nodiscard]] std::size_t capacity() const { return capacity_; }

 private:
  std::deque<TranscriptStep> steps_;
  std::size_t capacity_;
  std::size_t total_ = 0;
};

// Default slice size requested from backends: max(4k, 64).
[[nodiscard]] std::size_t default_top_n(const FilterConfig& filter);

struct DecodeOptions {
  SelectMode mode = SelectMode::greedy();
  std::size_t max_tokens = 64;
  std::size_t top_n = 0;  // 0 selects default_top_n
  // Raw pieces that end generation; the stop token is not emitted.
  std::vector<std::string> stop_pieces{"</s>"};
  std::size_t transcript_capacity = 4096;
};

struct DecodeResult {
  std::string text;  // detokenized generation, leading space trimmed
  std::vector<TokenId> tokens;
  Transcript transcript;
  bool stopped = false;  // ended on a stop piece rather than max_tokens
  std::size_t similarity_evaluations = 0;
  std::size_t max_step_similarity_evaluations = 0;
};

// Backend failure in the middle of a sequence. Carries what was produced.
class DecodeError : public TransportError {
 public:
  DecodeError(const std::string& what, DecodeResult partial)
      : TransportError(what), partial_(std::move(partial)) {}
  [[nodiscard]] const DecodeResult& partial() const { return partial_; }

 private:
  DecodeResult partial_;
};

// One autoregressive decoding session with the bias hook. Steps are
// sequential; separate sessions may share a backend across threads.
class DecodeSession {
 public:
  DecodeSession(const ModelBackend& backend, EntitySet entities, BiasConfig cfg,
                DecodeOptions opts);

  // Runs until a stop piece or max_tokens. Callable once.
  DecodeResult run(std::string_view prompt);

  [[nodiscard]] const BiasConfig& config() const { return cfg_; }
  [[nodiscard]] const EntitySet& entities() const { return entities_; }
  [[nodiscard]] std::size_t top_n() const { return top_n_; }
  [[nodiscard]] const SimilarityMemo& memo() const { return memo_; }

 private:
  const ModelBackend& backend_;
  EntitySet entities_;
  BiasConfig cfg_;
  DecodeOptions opts_;
  std::size_t top_n_;
  SimilarityMemo memo_;
  std::mt19937_64 rng_;
  bool used_ = false;
};

[[nodiscard]] DecodeResult decode(const ModelBackend& backend,
                                  std::string_view prompt,
                                  const EntitySet& entities,
                                  const BiasConfig& cfg,
                                  const DecodeOptions& opts = {});

}  // namespace atbias
