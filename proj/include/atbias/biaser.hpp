#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "atbias/entity_match.hpp"
#include "atbias/filter.hpp"
#include "atbias/token_space.hpp"

namespace atbias {

enum class FloorPolicy { clamp_zero, keep_negative };

struct BiasConfig {
  FilterConfig filter;
  std::size_t n = 2;          // gram size for similarity
  double lambda_new = 25.0;   // boost toward new-knowledge entities
  double lambda_para = 1.0;   // suppression of parametric entities
  FloorPolicy floor_policy = FloorPolicy::clamp_zero;

  void validate() const;

  // Both coefficients zero: scores equal the masked probabilities.
  [[nodiscard]] bool is_control() const {
    return lambda_new == 0.0 && lambda_para == 0.0;
  }
  [[nodiscard]] BiasConfig as_control() const {
    auto c = *this;
    c.lambda_new = 0.0;
    c.lambda_para = 0.0;
    return c;
  }

  friend bool operator==(const BiasConfig&, const BiasConfig&) = default;
};

struct ScoreEntry {
  TokenId token;
  double score = 0.0;
};

// Adjusted per-token values over the head set, in distribution order.
// Not a probability distribution: boosted scores routinely exceed 1.
struct ScoreVector {
  std::vector<ScoreEntry> entries;
  double basis = 0.0;  // mean head probability the bias was scaled by
  // (token, entity) pairs examined this step, memo hits included.
  std::size_t similarity_evaluations = 0;
  // All adjusted scores were zero and the masked probabilities were used.
  bool fell_back = false;

  [[nodiscard]] std::size_t size() const { return entries.size(); }
  [[nodiscard]] bool empty() const { return entries.empty(); }
};

// Arithmetic mean of the probabilities in a masked distribution.
[[nodiscard]] double mean_filtered_prob(const TokenDistribution& masked);

// One adaptive-bias step: head filter, mean head probability, then per head
// token add lambda_new * mean * sim for every matching new entity and
// subtract lambda_para * mean * sim for every matching parametric entity.
[[nodiscard]] ScoreVector bias_step(const TokenDistribution& dist,
                                    const EntitySet& entities,
                                    const BiasConfig& cfg);

// Same, serving similarities from a session memo. The memo must be bound to
// entities.texts() and cfg.n.
[[nodiscard]] ScoreVector bias_step(const TokenDistribution& dist,
                                    const EntitySet& entities,
                                    const BiasConfig& cfg, SimilarityMemo& memo);

// Summed similarity of one token to the new and parametric entities.
struct SimilaritySums {
  double new_knowledge = 0.0;
  double parametric = 0.0;
};

// Splits a memo row at `n_new`: new-knowledge entities first.
[[nodiscard]] SimilaritySums sum_similarities(const std::vector<double>& row,
                                              std::size_t n_new);

using SimilaritySource = std::function<SimilaritySums(const TokenEntry&)>;

// Same, with per-token sums supplied by the caller.
[[nodiscard]] ScoreVector bias_step(const TokenDistribution& dist,
                                    const EntitySet& entities,
                                    const BiasConfig& cfg, const SimilaritySource& sums);

class SelectMode {
 public:
  enum class Kind { greedy, sample };

  static SelectMode greedy() { return SelectMode(Kind::greedy, 0); }
  static SelectMode sample(std::uint64_t seed) {
    return SelectMode(Kind::sample, seed);
  }

  [[nodiscard]] Kind kind() const { return kind_; }
  [[nodiscard]] std::uint64_t seed() const { return seed_; }

 private:
  SelectMode(Kind k, std::uint64_t s) : kind_(k), seed_(s) {}
  Kind kind_;
  std::uint64_t seed_;
};

// Max score; ties go to the lowest token id.
[[nodiscard]] TokenId select_greedy(const ScoreVector& scores);

// Draws from the non-negative scores renormalized over the head. Uniform over
// the head if every score is non-positive.
[[nodiscard]] TokenId select_sample(const ScoreVector& scores,
                                    std::mt19937_64& rng);

[[nodiscard]] TokenId select_next(const ScoreVector& scores, SelectMode mode);

}  // namespace atbias
