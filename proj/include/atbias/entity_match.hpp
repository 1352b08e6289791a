#pragma once

#include <cstddef>
#include <atomic>
#include <span>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "atbias/token_space.hpp"

namespace atbias {

// Character n-grams of a string. Strings shorter than n decompose to the
// singleton set holding the whole string. Grams are kept sorted and unique.
struct NGramSet {
  std::size_t n = 0;
  std::vector<std::string> grams;

  [[nodiscard]] std::size_t size() const { return grams.size(); }
  [[nodiscard]] bool contains(std::string_view g) const;
};

enum class EntitySource { new_knowledge, parametric_knowledge };

// A single normalized entity word: lowercase, marker-free, no whitespace.
struct EntityString {
  std::string text;
  EntitySource source = EntitySource::new_knowledge;

  EntityString() = default;
  // Throws PreconditionError if `text` is empty or contains whitespace.
  EntityString(std::string text, EntitySource source);

  friend bool operator==(const EntityString&, const EntityString&) = default;
};

// Split entity words for new and parametric knowledge. Lists are
// deduplicated and keep first-insertion order.
struct EntitySet {
  std::vector<EntityString> new_entities;
  std::vector<EntityString> para_entities;

  // Normalized duplicates are ignored. Returns true when inserted.
  bool add(EntityString e);
  void merge(const EntitySet& other);

  // New-knowledge texts followed by parametric ones; the layout a
  // SimilarityMemo for this set is bound to.
  [[nodiscard]] std::vector<std::string> texts() const;
  [[nodiscard]] std::size_t total() const {
    return new_entities.size() + para_entities.size();
  }
  [[nodiscard]] bool empty() const { return total() == 0; }

  friend bool operator==(const EntitySet&, const EntitySet&) = default;
};

[[nodiscard]] NGramSet ngram_decompose(std::string_view s, std::size_t n);

// |a ∩ b| / |a ∪ b|. Throws PreconditionError on mismatched n or empty sets.
[[nodiscard]] double jaccard(const NGramSet& a, const NGramSet& b);

// Zero unless the normalized piece is a non-empty substring of the entity;
// otherwise the Jaccard similarity of their n-gram sets.
[[nodiscard]] double token_entity_similarity(const TokenPiece& piece,
                                             const EntityString& entity,
                                             std::size_t n);
[[nodiscard]] double token_entity_similarity(std::string_view normalized_piece,
                                             std::string_view entity_text,
                                             std::size_t n);

// Memoizes token-to-entity similarities for one decoding session. The memo
// is bound to an ordered entity list and gram size; row(piece) holds the
// similarity of that piece to every bound entity, in list order.
// Concurrent row() calls are safe and always agree with the pure function.
class SimilarityMemo {
 public:
  SimilarityMemo(std::vector<std::string> entity_texts, std::size_t n);

  // References stay valid for the memo's lifetime.
  const std::vector<double>& row(std::string_view normalized_piece);

  [[nodiscard]] bool bound_to(std::span<const std::string> entity_texts,
                              std::size_t n) const;
  [[nodiscard]] std::span<const std::string> entity_texts() const {
    return entities_;
  }
  [[nodiscard]] std::size_t n() const { return n_; }
  [[nodiscard]] std::size_t size() const;
  [[nodiscard]] std::size_t hits() const { return hits_.load(); }
  [[nodiscard]] std::size_t misses() const { return misses_.load(); }

 private:
  struct Hash {
    using is_transparent = void;
    std::size_t operator()(std::string_view s) const noexcept {
      return std::hash<std::string_view>{}(s);
    }
  };

  std::vector<std::string> entities_;
  std::vector<NGramSet> entity_grams_;
  std::size_t n_;
  mutable std::shared_mutex mutex_;
  std::unordered_map<std::string, std::vector<double>, Hash, std::equal_to<>>
      rows_;
  std::atomic<std::size_t> hits_{0};
  std::atomic<std::size_t> misses_{0};
};

}  // namespace atbias
