#include "atbias/biaser.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "atbias/error.hpp"

namespace atbias {
namespace {

bool memo_matches(const SimilarityMemo& memo, const EntitySet& entities,
                  std::size_t n) {
  const auto bound = memo.entity_texts();
  if (memo.n() != n || bound.size() != entities.total()) return false;
  std::size_t j = 0;
  for (const auto& e : entities.new_entities) {
    if (bound[j++] != e.text) return false;
  }
  for (const auto& e : entities.para_entities) {
    if (bound[j++] != e.text) return false;
  }
  return true;
}

// Shared step body. `similarities(entry)` yields the token's summed
// similarity to the new and parametric entities.
template <typename Similarities>
ScoreVector run_bias_step(const TokenDistribution& dist,
                          const EntitySet& entities, const BiasConfig& cfg,
                          Similarities&& similarities) {
  cfg.validate();
  const auto head = head_filter(dist, cfg.filter);

  ScoreVector out;
  out.entries.reserve(head.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < head.size(); ++i) {
    out.entries.push_back({dist[i].token, dist[i].prob});
    sum += dist[i].prob;
  }
  // Computed once, before any adjustment.
  const double mean = sum / static_cast<double>(head.size());
  out.basis = mean;

  if (cfg.is_control() || entities.empty()) return out;

  const bool do_new = cfg.lambda_new != 0.0 && !entities.new_entities.empty();
  const bool do_para = cfg.lambda_para != 0.0 && !entities.para_entities.empty();
  const std::size_t per_token = (do_new ? entities.new_entities.size() : 0) +
                                (do_para ? entities.para_entities.size() : 0);

  for (std::size_t i = 0; i < head.size(); ++i) {
    if (dist[i].piece.normalized.empty()) continue;
    const SimilaritySums sims = similarities(dist[i]);
    double& p = out.entries[i].score;
    if (do_new) p += cfg.lambda_new * mean * sims.new_knowledge;
    if (do_para) p -= cfg.lambda_para * mean * sims.parametric;
    out.similarity_evaluations += per_token;
  }

  if (cfg.floor_policy == FloorPolicy::clamp_zero) {
    bool all_zero = true;
    for (auto& e : out.entries) {
      if (e.score < 0.0) e.score = 0.0;
      all_zero = all_zero && e.score == 0.0;
    }
    if (all_zero) {
      for (std::size_t i = 0; i < head.size(); ++i) {
        out.entries[i].score = dist[i].prob;
      }
      out.fell_back = true;
    }
  }
  return out;
}

}  // namespace

void BiasConfig::validate() const {
  filter.validate();
  if (n < 1) throw ConfigError("n-gram size must be >= 1");
  if (!(std::isfinite(lambda_new) && lambda_new >= 0.0)) {
    throw ConfigError("lambda_new must be a finite non-negative number");
  }
  if (!(std::isfinite(lambda_para) && lambda_para >= 0.0)) {
    throw ConfigError("lambda_para must be a finite non-negative number");
  }
}

double mean_filtered_prob(const TokenDistribution& masked) {
  if (masked.empty()) throw PreconditionError("empty masked distribution");
  return masked.coverage() / static_cast<double>(masked.size());
}

SimilaritySums sum_similarities(const std::vector<double>& row, std::size_t n_new) {
  SimilaritySums s;
  for (std::size_t j = 0; j < n_new; ++j) s.new_knowledge += row[j];
  for (std::size_t j = n_new; j < row.size(); ++j) s.parametric += row[j];
  return s;
}

ScoreVector bias_step(const TokenDistribution& dist, const EntitySet& entities,
                      const BiasConfig& cfg) {
  return run_bias_step(dist, entities, cfg, [&](const TokenEntry& e) {
    SimilaritySums s;
    for (const auto& x : entities.new_entities) {
      s.new_knowledge += token_entity_similarity(e.piece.normalized, x.text, cfg.n);
    }
    for (const auto& x : entities.para_entities) {
      s.parametric += token_entity_similarity(e.piece.normalized, x.text, cfg.n);
    }
    return s;
  });
}

ScoreVector bias_step(const TokenDistribution& dist, const EntitySet& entities,
                      const BiasConfig& cfg, SimilarityMemo& memo) {
  if (!memo_matches(memo, entities, cfg.n)) {
    throw PreconditionError(
        "bias_step: similarity memo is bound to a different entity set or n");
  }
  const auto n_new = entities.new_entities.size();
  return run_bias_step(dist, entities, cfg, [&](const TokenEntry& e) {
    return sum_similarities(memo.row(e.piece.normalized), n_new);
  });
}

ScoreVector bias_step(const TokenDistribution& dist, const EntitySet& entities,
                      const BiasConfig& cfg, const SimilaritySource& sums) {
  return run_bias_step(dist, entities, cfg, sums);
}

TokenId select_greedy(const ScoreVector& scores) {
  if (scores.empty()) throw PreconditionError("select_next: empty score vector");
  const ScoreEntry* best = &scores.entries.front();
  for (const auto& e : scores.entries) {
    if (e.score > best->score || (e.score == best->score && e.token < best->token)) {
      best = &e;
    }
  }
  return best->token;
}

TokenId select_sample(const ScoreVector& scores, std::mt19937_64& rng) {
  if (scores.empty()) throw PreconditionError("select_next: empty score vector");
  double total = 0.0;
  for (const auto& e : scores.entries) total += std::max(e.score, 0.0);

  // 53 random bits.
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  if (total <= 0.0) {
    const auto idx = static_cast<std::size_t>(u * static_cast<double>(scores.size()));
    return scores.entries[std::min(idx, scores.size() - 1)].token;
  }
  const double target = u * total;
  double acc = 0.0;
  const ScoreEntry* last_positive = nullptr;
  for (const auto& e : scores.entries) {
    if (e.score <= 0.0) continue;
    acc += e.score;
    last_positive = &e;
    if (target < acc) return e.token;
  }
  return last_positive->token;
}

TokenId select_next(const ScoreVector& scores, SelectMode mode) {
  if (mode.kind() == SelectMode::Kind::greedy) return select_greedy(scores);
  std::mt19937_64 rng(mode.seed());
  return select_sample(scores, rng);
}

}  // namespace atbias
