#include "atbias/token_space.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "atbias/error.hpp"

namespace atbias {
namespace {

constexpr double kCoverageSlack = 1e-6;

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' ||
         c == '\v';
}

char ascii_lower(char c) {
  return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c;
}

}  // namespace

const std::vector<std::string>& PieceNormalizer::default_markers() {
  static const std::vector<std::string> markers = {"\xE2\x96\x81",  // ▁
                                                   "\xC4\xA0",      // Ġ
                                                   " "};
  return markers;
}

PieceNormalizer::PieceNormalizer() : markers_(default_markers()) {}

PieceNormalizer::PieceNormalizer(std::vector<std::string> markers)
    : markers_(std::move(markers)) {
  std::erase_if(markers_, [](const std::string& m) { return m.empty(); });
}

std::string PieceNormalizer::normalize(std::string_view raw) const {
  std::string s(raw);
  std::transform(s.begin(), s.end(), s.begin(), ascii_lower);

  std::string_view v = s;
  for (bool stripped = true; stripped && !v.empty();) {
    stripped = false;
    while (!v.empty() && is_space(v.front())) {
      v.remove_prefix(1);
      stripped = true;
    }
    for (const auto& m : markers_) {
      if (v.starts_with(m)) {
        v.remove_prefix(m.size());
        stripped = true;
        break;
      }
    }
  }
  while (!v.empty() && is_space(v.back())) v.remove_suffix(1);
  return std::string(v);
}

std::string PieceNormalizer::to_surface(std::string_view raw) const {
  for (const auto& m : markers_) {
    if (raw.starts_with(m)) {
      return " " + std::string(raw.substr(m.size()));
    }
  }
  return std::string(raw);
}

std::string normalize_piece(std::string_view raw) {
  static const PieceNormalizer normalizer;
  return normalizer.normalize(raw);
}

TokenPiece::TokenPiece(std::string raw_piece)
    : raw(std::move(raw_piece)), normalized(normalize_piece(raw)) {}

TokenPiece::TokenPiece(std::string raw_piece, const PieceNormalizer& normalizer)
    : raw(std::move(raw_piece)), normalized(normalizer.normalize(raw)) {}

TokenDistribution::TokenDistribution(std::vector<TokenEntry> entries,
                                     DistributionOrigin origin)
    : entries_(std::move(entries)), origin_(origin) {
  std::unordered_set<TokenId> seen;
  seen.reserve(entries_.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& e = entries_[i];
    if (!std::isfinite(e.prob) || e.prob < 0.0) {
      throw PreconditionError("token distribution: probability of token " +
                              std::to_string(e.token.value) +
                              " is negative or non-finite");
    }
    if (i > 0 && entries_[i - 1].prob < e.prob) {
      throw PreconditionError(
          "token distribution: probabilities not sorted non-increasing at "
          "index " +
          std::to_string(i));
    }
    if (!seen.insert(e.token).second) {
      throw PreconditionError("token distribution: duplicate token id " +
                              std::to_string(e.token.value));
    }
    sum += e.prob;
  }
  coverage_ = sum;
  if (coverage_ > 1.0 + kCoverageSlack) {
    throw PreconditionError("token distribution: coverage " +
                            std::to_string(coverage_) + " exceeds 1");
  }
  if (origin_ == DistributionOrigin::full_vocabulary &&
      std::abs(coverage_ - 1.0) > kCoverageSlack) {
    throw PreconditionError(
        "token distribution: full-vocabulary distribution does not sum to 1 "
        "(coverage " +
        std::to_string(coverage_) + ")");
  }
}

TokenDistribution TokenDistribution::from_unsorted(
    std::vector<TokenEntry> entries, DistributionOrigin origin) {
  std::stable_sort(entries.begin(), entries.end(),
                   [](const TokenEntry& a, const TokenEntry& b) {
                     if (a.prob != b.prob) return a.prob > b.prob;
                     return a.token < b.token;
                   });
  return TokenDistribution(std::move(entries), origin);
}

std::size_t TokenDistribution::find(TokenId token) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].token == token) return i;
  }
  return entries_.size();
}

TokenDistribution top_slice(const TokenDistribution& dist, std::size_t n_keep) {
  if (dist.empty()) throw PreconditionError("empty distribution");
  if (n_keep == 0) throw PreconditionError("top_slice: n_keep must be >= 1");
  const auto n = std::min(n_keep, dist.size());
  std::vector<TokenEntry> kept(dist.entries().begin(),
                               dist.entries().begin() + static_cast<long>(n));
  return TokenDistribution(std::move(kept), DistributionOrigin::top_slice);
}

}  // namespace atbias
