#pragma once

#include <cstddef>
#include <vector>

#include "atbias/token_space.hpp"

namespace atbias {

struct FilterConfig {
  double alpha = 0.0005;  // probability constraint, relative to the max
  std::size_t k = 10;     // rank constraint

  // Throws ConfigError unless 0 < alpha <= 1 and k >= 1.
  void validate() const;

  friend bool operator==(const FilterConfig&, const FilterConfig&) = default;
};

// Tokens surviving both constraints. Members are listed in distribution
// order, so members.front() is the argmax.
struct HeadSet {
  std::vector<TokenId> members;
  double threshold_prob = 0.0;  // alpha * max probability
  double kth_prob = 0.0;        // probability at rank k (or of the last entry)

  [[nodiscard]] bool contains(TokenId t) const;
  [[nodiscard]] std::size_t size() const { return members.size(); }
};

// { x : P(x) >= alpha * max P }, in distribution order.
[[nodiscard]] std::vector<TokenId> probabilistic_filter(
    const TokenDistribution& dist, double alpha);

// { x : P(x) >= P(R_k) }. Ties with the k-th probability are kept.
[[nodiscard]] std::vector<TokenId> rank_filter(const TokenDistribution& dist,
                                               std::size_t k);

// Intersection of the two filters. A top_slice shorter than k is rejected.
[[nodiscard]] HeadSet head_filter(const TokenDistribution& dist,
                                  const FilterConfig& cfg);

// Restriction of `dist` to the head members; excluded tokens are absent.
[[nodiscard]] TokenDistribution mask_distribution(const TokenDistribution& dist,
                                                  const HeadSet& head);

}  // namespace atbias
