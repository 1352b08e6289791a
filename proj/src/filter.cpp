#include "atbias/filter.hpp"

#include <algorithm>
#include <string>

#include "atbias/error.hpp"

namespace atbias {
namespace {

void require_non_empty(const TokenDistribution& dist) {
  if (dist.empty()) throw PreconditionError("empty distribution");
}

void require_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) {
    throw ConfigError("alpha must lie in (0, 1], got " + std::to_string(alpha));
  }
}

// Entries are sorted, so each filter keeps a prefix. These return its length.
std::size_t prob_prefix(const TokenDistribution& dist, double threshold) {
  const auto entries = dist.entries();
  const auto it = std::partition_point(
      entries.begin(), entries.end(),
      [threshold](const TokenEntry& e) { return e.prob >= threshold; });
  return static_cast<std::size_t>(it - entries.begin());
}

double kth_probability(const TokenDistribution& dist, std::size_t k) {
  return dist[std::min(k, dist.size()) - 1].prob;
}

std::vector<TokenId> prefix_ids(const TokenDistribution& dist, std::size_t n) {
  std::vector<TokenId> ids;
  ids.reserve(n);
  for (std::size_t i = 0; i < n; ++i) ids.push_back(dist[i].token);
  return ids;
}

}  // namespace

void FilterConfig::validate() const {
  require_alpha(alpha);
  if (k < 1) throw ConfigError("k must be >= 1");
}

bool HeadSet::contains(TokenId t) const {
  return std::find(members.begin(), members.end(), t) != members.end();
}

std::vector<TokenId> probabilistic_filter(const TokenDistribution& dist,
                                          double alpha) {
  require_alpha(alpha);
  require_non_empty(dist);
  return prefix_ids(dist, prob_prefix(dist, alpha * dist.max_prob()));
}

std::vector<TokenId> rank_filter(const TokenDistribution& dist, std::size_t k) {
  require_non_empty(dist);
  if (k < 1) throw ConfigError("k must be >= 1");
  return prefix_ids(dist, prob_prefix(dist, kth_probability(dist, k)));
}

HeadSet head_filter(const TokenDistribution& dist, const FilterConfig& cfg) {
  cfg.validate();
  require_non_empty(dist);
  if (dist.origin() == DistributionOrigin::top_slice && dist.size() < cfg.k) {
    throw ConfigError("slice too short for rank filter (" +
                      std::to_string(dist.size()) + " entries, k = " +
                      std::to_string(cfg.k) + ")");
  }

  HeadSet head;
  head.threshold_prob = cfg.alpha * dist.max_prob();
  head.kth_prob = kth_probability(dist, cfg.k);
  const auto n = std::min(prob_prefix(dist, head.threshold_prob),
                          prob_prefix(dist, head.kth_prob));
  head.members = prefix_ids(dist, n);
  return head;
}

TokenDistribution mask_distribution(const TokenDistribution& dist,
                                    const HeadSet& head) {
  std::vector<TokenEntry> kept;
  kept.reserve(head.size());
  for (const auto& e : dist.entries()) {
    if (head.contains(e.token)) kept.push_back(e);
  }
  if (kept.size() != head.size()) {
    throw PreconditionError("mask_distribution: head is not a subset of dist");
  }
  return TokenDistribution(std::move(kept), DistributionOrigin::top_slice);
}

}  // namespace atbias
