#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "atbias/backend.hpp"
#include "atbias/entity_match.hpp"

namespace atbias {

inline constexpr std::string_view kObjectBlank = "[X]";
inline constexpr std::string_view kSubjectSlot = "{}";
inline constexpr int kCacheSchemaVersion = 1;

// An edited fact. Structured facts carry a template with exactly one "[X]"
// object slot (and optionally a "{}" subject slot); free-text facts leave
// the template empty and carry raw_text instead.
struct FactRecord {
  std::string id;
  std::string subject;
  std::string relation_template;
  std::string new_object;
  std::optional<std::string> parametric_object;
  std::optional<std::string> raw_text;

  void validate() const;
  [[nodiscard]] bool is_free_text() const { return relation_template.empty(); }

  friend bool operator==(const FactRecord&, const FactRecord&) = default;
};

// The fact sentence with `object` in the object slot.
[[nodiscard]] std::string render_fact(const FactRecord& fact,
                                      std::string_view object);
// render_fact(fact, fact.new_object).
[[nodiscard]] std::string new_fact_text(const FactRecord& fact);

// The fact with its object replaced by "_".
[[nodiscard]] std::string build_cloze(const FactRecord& fact);

struct InductionOptions {
  // "{cloze}" is replaced by the cloze text.
  std::string prompt_template = "Fill in the blank: {cloze}\nAnswer:";
  std::size_t max_tokens = 16;
};

// Unedited greedy completion of the cloze blank.
[[nodiscard]] std::string induce_parametric(const ModelBackend& backend,
                                            std::string_view cloze,
                                            const InductionOptions& opts = {});

// Pluggable entity extraction. Both calls return normalized words.
class EntityExtractor {
 public:
  virtual ~EntityExtractor() = default;
  // Splits a known object phrase into words.
  [[nodiscard]] virtual std::vector<std::string> from_object(
      std::string_view phrase) const = 0;
  // Pulls entity words out of a free-text fact sentence.
  [[nodiscard]] virtual std::vector<std::string> from_text(
      std::string_view text) const = 0;
};

// Whitespace split, punctuation trim, lowercase; free text additionally
// drops stop words.
class RuleExtractor final : public EntityExtractor {
 public:
  RuleExtractor();
  explicit RuleExtractor(std::unordered_set<std::string> stop_words);

  // One word per line; '#' starts a comment.
  static RuleExtractor from_stop_word_file(const std::filesystem::path& path);
  static const std::unordered_set<std::string>& default_stop_words();

  [[nodiscard]] std::vector<std::string> from_object(
      std::string_view phrase) const override;
  [[nodiscard]] std::vector<std::string> from_text(
      std::string_view text) const override;
  [[nodiscard]] const std::unordered_set<std::string>& stop_words() const {
    return stop_words_;
  }

 private:
  std::unordered_set<std::string> stop_words_;
};

[[nodiscard]] const EntityExtractor& default_extractor();

// Lowercased word with surrounding punctuation and boundary markers removed.
[[nodiscard]] std::string normalize_word(std::string_view word);

// Structured mode: words of the object phrase. Throws PreconditionError
// "no entities extracted" when nothing survives.
[[nodiscard]] std::vector<EntityString> extract_entities(
    std::string_view object_phrase, EntitySource source,
    const EntityExtractor& extractor = default_extractor());

// Raw-text mode over a fact sentence.
[[nodiscard]] std::vector<EntityString> extract_entities_from_text(
    std::string_view fact_text, EntitySource source,
    const EntityExtractor& extractor = default_extractor());

struct KnowledgeCacheRecord {
  std::string fact_id;
  std::string cloze;
  std::string new_object;
  std::string parametric_object;
  std::string parametric_fact;
  EntitySet entities;
  std::int64_t created_at = 0;  // unix seconds
  // The unedited model already answers with the new object.
  bool parametric_equals_new = false;

  friend bool operator==(const KnowledgeCacheRecord&,
                         const KnowledgeCacheRecord&) = default;
};

// Facts available for retrieval. batch_size counts evaluation instances
// whose edits share one memory; nullopt means the full dataset.
struct EditMemory {
  std::vector<FactRecord> records;
  std::optional<std::size_t> batch_size;

  [[nodiscard]] std::size_t size() const { return records.size(); }
  [[nodiscard]] bool empty() const { return records.empty(); }
};

struct CacheFailure {
  std::string fact_id;
  std::string message;
};

struct CacheBuildOptions {
  // Records whose fact_id, cloze and new object are unchanged are reused.
  const std::vector<KnowledgeCacheRecord>* existing = nullptr;
  std::optional<std::int64_t> created_at;  // defaults to now
  std::size_t jobs = 1;
  InductionOptions induction;
  const EntityExtractor* extractor = nullptr;
};

struct CacheBuildResult {
  std::vector<KnowledgeCacheRecord> records;  // sorted by fact_id
  std::vector<CacheFailure> failures;
  std::size_t induced = 0;
  std::size_t reused = 0;
};

[[nodiscard]] CacheBuildResult build_cache(const EditMemory& memory,
                                           const ModelBackend& backend,
                                           const CacheBuildOptions& opts = {});

// Top `limit` facts by word-level Jaccard overlap between the question and
// the fact's subject + new-object words. Ties break by fact id.
[[nodiscard]] std::vector<FactRecord> retrieve_facts(const EditMemory& memory,
                                                     std::string_view question,
                                                     std::size_t limit);

// Word set used for retrieval scoring.
[[nodiscard]] std::vector<std::string> retrieval_words(std::string_view text);

// JSON Lines persistence, one record per line.
[[nodiscard]] nlohmann::json cache_record_to_json(const KnowledgeCacheRecord& r);
// `line` is used in error messages only.
[[nodiscard]] KnowledgeCacheRecord cache_record_from_json(const nlohmann::json& j,
                                                          std::size_t line);
void save_cache(const std::filesystem::path& path,
                const std::vector<KnowledgeCacheRecord>& records);
// Parse errors name the line and field; a version mismatch throws
// VersionError. Entity sets that disagree with the default extractor are
// reported at warn level.
[[nodiscard]] std::vector<KnowledgeCacheRecord> load_cache(
    const std::filesystem::path& path);

[[nodiscard]] nlohmann::json fact_to_json(const FactRecord& f);
[[nodiscard]] FactRecord fact_from_json(const nlohmann::json& j, std::size_t line);
void save_memory(const std::filesystem::path& path, const EditMemory& memory);
[[nodiscard]] EditMemory load_memory(const std::filesystem::path& path);

}  // namespace atbias
