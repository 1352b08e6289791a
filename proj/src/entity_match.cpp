#include "atbias/entity_match.hpp"

#include <algorithm>
#include <string>

#include <mutex>

#include "atbias/error.hpp"

namespace atbias {
namespace {

bool has_space(std::string_view s) {
  return std::any_of(s.begin(), s.end(), [](char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' ||
           c == '\v';
  });
}

// Both ranges sorted and unique.
std::size_t intersection_size(const std::vector<std::string>& a,
                              const std::vector<std::string>& b) {
  std::size_t count = 0;
  auto i = a.begin();
  auto j = b.begin();
  while (i != a.end() && j != b.end()) {
    if (*i < *j) {
      ++i;
    } else if (*j < *i) {
      ++j;
    } else {
      ++count;
      ++i;
      ++j;
    }
  }
  return count;
}

double gated_similarity(std::string_view piece, std::string_view entity,
                        const NGramSet& entity_grams, std::size_t n) {
  if (piece.empty() || entity.find(piece) == std::string_view::npos) return 0.0;
  return jaccard(ngram_decompose(piece, n), entity_grams);
}

}  // namespace

bool NGramSet::contains(std::string_view g) const {
  return std::binary_search(grams.begin(), grams.end(), g);
}

EntityString::EntityString(std::string t, EntitySource s)
    : text(std::move(t)), source(s) {
  if (text.empty()) throw PreconditionError("entity string is empty");
  if (has_space(text)) {
    throw PreconditionError("entity string contains whitespace: '" + text + "'");
  }
}

bool EntitySet::add(EntityString e) {
  auto& list = e.source == EntitySource::new_knowledge ? new_entities
                                                       : para_entities;
  if (std::find(list.begin(), list.end(), e) != list.end()) return false;
  list.push_back(std::move(e));
  return true;
}

void EntitySet::merge(const EntitySet& other) {
  for (const auto& e : other.new_entities) add(e);
  for (const auto& e : other.para_entities) add(e);
}

std::vector<std::string> EntitySet::texts() const {
  std::vector<std::string> out;
  out.reserve(total());
  for (const auto& e : new_entities) out.push_back(e.text);
  for (const auto& e : para_entities) out.push_back(e.text);
  return out;
}

NGramSet ngram_decompose(std::string_view s, std::size_t n) {
  if (s.empty()) throw PreconditionError("empty string");
  if (n < 1) throw PreconditionError("n-gram size must be >= 1");

  NGramSet out{n, {}};
  if (s.size() < n) {
    out.grams.emplace_back(s);
    return out;
  }
  out.grams.reserve(s.size() - n + 1);
  for (std::size_t i = 0; i + n <= s.size(); ++i) {
    out.grams.emplace_back(s.substr(i, n));
  }
  std::sort(out.grams.begin(), out.grams.end());
  out.grams.erase(std::unique(out.grams.begin(), out.grams.end()),
                  out.grams.end());
  return out;
}

double jaccard(const NGramSet& a, const NGramSet& b) {
  if (a.n != b.n) {
    throw PreconditionError("jaccard: mismatched n-gram sizes " +
                            std::to_string(a.n) + " and " + std::to_string(b.n));
  }
  if (a.grams.empty() || b.grams.empty()) {
    throw PreconditionError("jaccard: empty n-gram set");
  }
  const auto common = intersection_size(a.grams, b.grams);
  const auto uni = a.size() + b.size() - common;
  return static_cast<double>(common) / static_cast<double>(uni);
}

double token_entity_similarity(std::string_view normalized_piece,
                               std::string_view entity_text, std::size_t n) {
  if (normalized_piece.empty() ||
      entity_text.find(normalized_piece) == std::string_view::npos) {
    return 0.0;
  }
  return jaccard(ngram_decompose(normalized_piece, n),
                 ngram_decompose(entity_text, n));
}

double token_entity_similarity(const TokenPiece& piece,
                               const EntityString& entity, std::size_t n) {
  return token_entity_similarity(piece.normalized, entity.text, n);
}

SimilarityMemo::SimilarityMemo(std::vector<std::string> entity_texts,
                               std::size_t n)
    : entities_(std::move(entity_texts)), n_(n) {
  if (n_ < 1) throw PreconditionError("n-gram size must be >= 1");
  entity_grams_.reserve(entities_.size());
  for (const auto& e : entities_) entity_grams_.push_back(ngram_decompose(e, n_));
}

const std::vector<double>& SimilarityMemo::row(std::string_view piece) {
  {
    std::shared_lock lock(mutex_);
    if (auto it = rows_.find(piece); it != rows_.end()) {
      ++hits_;
      return it->second;
    }
  }
  std::vector<double> sims(entities_.size());
  for (std::size_t j = 0; j < entities_.size(); ++j) {
    sims[j] = gated_similarity(piece, entities_[j], entity_grams_[j], n_);
  }
  std::unique_lock lock(mutex_);
  auto [it, inserted] = rows_.try_emplace(std::string(piece), std::move(sims));
  if (inserted) {
    ++misses_;
  } else {
    ++hits_;
  }
  return it->second;
}

bool SimilarityMemo::bound_to(std::span<const std::string> entity_texts,
                              std::size_t n) const {
  return n == n_ && std::equal(entity_texts.begin(), entity_texts.end(),
                               entities_.begin(), entities_.end());
}

std::size_t SimilarityMemo::size() const {
  std::shared_lock lock(mutex_);
  return rows_.size();
}

}  // namespace atbias
