#include "atbias/decode.hpp"

#include <algorithm>
#include <optional>

namespace atbias {
namespace {

std::string trim_leading_space(const std::string& s) {
  const auto first = s.find_first_not_of(' ');
  return first == std::string::npos ? std::string() : s.substr(first);
}

const BiasConfig& validated(const BiasConfig& cfg) {
  cfg.validate();
  return cfg;
}

}  // namespace

void Transcript::push(TranscriptStep step) {
  ++total_;
  if (capacity_ == 0) return;
  if (steps_.size() == capacity_) steps_.pop_front();
  steps_.push_back(std::move(step));
}

std::size_t default_top_n(const FilterConfig& filter) {
  return std::max<std::size_t>(4 * filter.k, 64);
}

DecodeSession::DecodeSession(const ModelBackend& backend, EntitySet entities,
                             BiasConfig cfg, DecodeOptions opts)
    : backend_(backend),
      entities_(std::move(entities)),
      cfg_(validated(cfg)),
      opts_(std::move(opts)),
      top_n_(opts_.top_n == 0 ? default_top_n(cfg_.filter) : opts_.top_n),
      memo_(entities_.texts(), cfg_.n),
      rng_(opts_.mode.seed()) {
  if (opts_.max_tokens < 1) {
    throw PreconditionError("decode: max_tokens must be >= 1");
  }
  if (top_n_ < cfg_.filter.k) {
    throw ConfigError("slice too short for rank filter: top_n " +
                      std::to_string(top_n_) + " < k " +
                      std::to_string(cfg_.filter.k));
  }
  const auto cap = backend_.capability();
  if (cap.max_top_n != 0 && top_n_ > cap.max_top_n) {
    throw ConfigError("backend supports top_n up to " +
                      std::to_string(cap.max_top_n));
  }
  if (!cap.normalized) {
    throw ConfigError(
        "backend does not report full-softmax probabilities; refusing to run");
  }
}

DecodeResult DecodeSession::run(std::string_view prompt) {
  if (used_) throw PreconditionError("decode session already ran");
  used_ = true;

  const auto& normalizer = backend_.normalizer();
  DecodeResult result;
  result.transcript = Transcript(opts_.transcript_capacity);
  std::string context(prompt);
  std::string generated;

  // Similarity sums cached by token id.
  const auto n_new = entities_.new_entities.size();
  std::vector<std::optional<SimilaritySums>> by_token;
  const SimilaritySource sums = [&](const TokenEntry& e) {
    const auto id = e.token.value;
    if (id >= by_token.size()) by_token.resize(std::size_t{id} + 1);
    auto& slot = by_token[id];
    if (!slot) {
      slot = sum_similarities(memo_.row(e.piece.normalized), n_new);
    }
    return *slot;
  };

  for (std::size_t i = 0; i < opts_.max_tokens; ++i) {
    TokenDistribution dist;
    try {
      dist = backend_.step(context, top_n_);
    } catch (const Error& e) {
      if (dynamic_cast<const TransportError*>(&e) == nullptr &&
          dynamic_cast<const ProtocolError*>(&e) == nullptr) {
        throw;
      }
      result.text = trim_leading_space(generated);
      throw DecodeError("decode step " + std::to_string(i) + ": " + e.what(),
                        std::move(result));
    }

    auto scores = bias_step(dist, entities_, cfg_, sums);
    const TokenId chosen = opts_.mode.kind() == SelectMode::Kind::greedy
                               ? select_greedy(scores)
                               : select_sample(scores, rng_);
    result.similarity_evaluations += scores.similarity_evaluations;
    result.max_step_similarity_evaluations = std::max(
        result.max_step_similarity_evaluations, scores.similarity_evaluations);

    const auto& entry = dist[dist.find(chosen)];
    const bool stop = std::find(opts_.stop_pieces.begin(), opts_.stop_pieces.end(),
                                entry.piece.raw) != opts_.stop_pieces.end();
    std::string surface = stop ? std::string() : normalizer.to_surface(entry.piece.raw);

    result.transcript.push({i, std::move(dist), std::move(scores), chosen});
    if (stop) {
      result.stopped = true;
      break;
    }
    result.tokens.push_back(chosen);
    generated += surface;
    context += surface;
  }

  result.text = trim_leading_space(generated);
  return result;
}

DecodeResult decode(const ModelBackend& backend, std::string_view prompt,
                    const EntitySet& entities, const BiasConfig& cfg,
                    const DecodeOptions& opts) {
  DecodeSession session(backend, entities, cfg, opts);
  return session.run(prompt);
}

}  // namespace atbias
