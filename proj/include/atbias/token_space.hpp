#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace atbias {

// Opaque index into a backend vocabulary.
struct TokenId {
  std::uint32_t value = 0;

  constexpr TokenId() = default;
  constexpr explicit TokenId(std::uint32_t v) : value(v) {}

  friend constexpr auto operator<=>(TokenId, TokenId) = default;
};

// Strips word-boundary markers and folds case so decoded pieces can be
// compared against entity strings. The marker set is configurable; the
// default covers SentencePiece ("▁"), byte-level BPE ("Ġ") and a plain space.
class PieceNormalizer {
 public:
  PieceNormalizer();
  explicit PieceNormalizer(std::vector<std::string> markers);

  // Lowercases ASCII, drops every leading marker and surrounding whitespace.
  // Idempotent.
  [[nodiscard]] std::string normalize(std::string_view raw) const;

  // Replaces a leading marker with a single space, for detokenization.
  [[nodiscard]] std::string to_surface(std::string_view raw) const;

  [[nodiscard]] const std::vector<std::string>& markers() const {
    return markers_;
  }

  static const std::vector<std::string>& default_markers();

 private:
  std::vector<std::string> markers_;
};

// normalize_piece with the default marker set.
[[nodiscard]] std::string normalize_piece(std::string_view raw);

struct TokenPiece {
  std::string raw;
  std::string normalized;

  TokenPiece() = default;
  explicit TokenPiece(std::string raw_piece);
  TokenPiece(std::string raw_piece, const PieceNormalizer& normalizer);

  friend bool operator==(const TokenPiece&, const TokenPiece&) = default;
};

struct TokenEntry {
  TokenId token;
  TokenPiece piece;
  double prob = 0.0;
};

enum class DistributionOrigin { full_vocabulary, top_slice };

// Next-token probabilities sorted non-increasing. Probabilities are always
// over the full vocabulary even when only a prefix of it is held, so a
// top_slice never gets renormalized.
class TokenDistribution {
 public:
  TokenDistribution() = default;

  // Validates every invariant; entries must already be sorted.
  TokenDistribution(std::vector<TokenEntry> entries, DistributionOrigin origin);

  // Sorts by (prob desc, id asc) before validating.
  static TokenDistribution from_unsorted(std::vector<TokenEntry> entries,
                                         DistributionOrigin origin);

  [[nodiscard]] std::span<const TokenEntry> entries() const { return entries_; }
  [[nodiscard]] std::size_t size() const { return entries_.size(); }
  [[nodiscard]] bool empty() const { return entries_.empty(); }
  [[nodiscard]] const TokenEntry& operator[](std::size_t i) const {
    return entries_[i];
  }
  [[nodiscard]] DistributionOrigin origin() const { return origin_; }
  [[nodiscard]] double coverage() const { return coverage_; }
  [[nodiscard]] double max_prob() const {
    return entries_.empty() ? 0.0 : entries_.front().prob;
  }

  // Index of `token` in entries, or size() when absent.
  [[nodiscard]] std::size_t find(TokenId token) const;

 private:
  std::vector<TokenEntry> entries_;
  DistributionOrigin origin_ = DistributionOrigin::top_slice;
  double coverage_ = 0.0;
};

// First min(n_keep, size) entries, origin top_slice, no renormalization.
[[nodiscard]] TokenDistribution top_slice(const TokenDistribution& dist,
                                          std::size_t n_keep);

}  // namespace atbias

template <>
struct std::hash<atbias::TokenId> {
  std::size_t operator()(atbias::TokenId t) const noexcept {
    return std::hash<std::uint32_t>{}(t.value);
  }
};
