#include "atbias/knowledge_store.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <fstream>
#include <future>
#include <map>
#include <sstream>

#include <spdlog/spdlog.h>

#include "atbias/decode.hpp"
#include "atbias/error.hpp"

namespace atbias {
namespace {

std::size_t count_occurrences(std::string_view haystack, std::string_view needle) {
  std::size_t count = 0;
  for (auto pos = haystack.find(needle); pos != std::string_view::npos;
       pos = haystack.find(needle, pos + needle.size())) {
    ++count;
  }
  return count;
}

std::string replace_first(std::string s, std::string_view what,
                          std::string_view with) {
  if (auto pos = s.find(what); pos != std::string::npos) {
    s.replace(pos, what.size(), with);
  }
  return s;
}

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  for (std::string w; in >> w;) out.push_back(std::move(w));
  return out;
}

bool is_ascii_punct(unsigned char c) {
  return c < 0x80 && std::ispunct(c) != 0;
}

std::vector<std::string> dedupe(std::vector<std::string> words) {
  std::vector<std::string> out;
  for (auto& w : words) {
    if (w.empty()) continue;
    if (std::find(out.begin(), out.end(), w) == out.end()) out.push_back(std::move(w));
  }
  return out;
}

std::vector<EntityString> to_entities(std::vector<std::string> words,
                                      EntitySource source) {
  std::vector<EntityString> out;
  for (auto& w : dedupe(std::move(words))) out.emplace_back(std::move(w), source);
  if (out.empty()) throw PreconditionError("no entities extracted");
  return out;
}

std::int64_t now_seconds() {
  return std::chrono::duration_cast<std::chrono::seconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

// Field access with line/field diagnostics.
class FieldReader {
 public:
  FieldReader(const nlohmann::json& j, std::size_t line, std::string_view what)
      : j_(j), line_(line), what_(what) {
    if (!j_.is_object()) fail("record is not an object");
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw ParseError(std::string(what_) + " line " + std::to_string(line_) + ": " + msg);
  }

  [[nodiscard]] bool has(const char* field) const {
    return j_.contains(field) && !j_.at(field).is_null();
  }

  const nlohmann::json& require(const char* field) const {
    if (!has(field)) fail(std::string("missing required field '") + field + "'");
    return j_.at(field);
  }

  std::string string(const char* field) const {
    const auto& v = require(field);
    if (!v.is_string()) fail(std::string("field '") + field + "' must be a string");
    return v.get<std::string>();
  }

  std::optional<std::string> optional_string(const char* field) const {
    if (!has(field)) return std::nullopt;
    return string(field);
  }

  std::vector<std::string> strings(const char* field) const {
    const auto& v = require(field);
    if (!v.is_array()) fail(std::string("field '") + field + "' must be an array");
    std::vector<std::string> out;
    for (const auto& s : v) {
      if (!s.is_string()) {
        fail(std::string("field '") + field + "' must hold only strings");
      }
      out.push_back(s.get<std::string>());
    }
    return out;
  }

  std::int64_t integer(const char* field) const {
    const auto& v = require(field);
    if (!v.is_number_integer()) fail(std::string("field '") + field + "' must be an integer");
    return v.get<std::int64_t>();
  }

  bool boolean(const char* field) const {
    const auto& v = require(field);
    if (!v.is_boolean()) fail(std::string("field '") + field + "' must be a boolean");
    return v.get<bool>();
  }

 private:
  const nlohmann::json& j_;
  std::size_t line_;
  std::string_view what_;
};

// Reads JSON Lines, skipping blank lines; calls fn(json, line_number).
template <typename Fn>
void for_each_json_line(const std::filesystem::path& path, std::string_view what,
                        Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw Error(std::string(what) + " not found: " + path.string());
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string(what) + " line " + std::to_string(n) +
                       ": malformed JSON (" + e.what() + ")");
    }
    fn(j, n);
  }
}

void write_json_lines(const std::filesystem::path& path,
                      const std::vector<nlohmann::json>& rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& r : rows) out << r.dump() << '\n';
  if (!out) throw Error("write failed: " + path.string());
}

EntitySet entities_for(std::string_view new_object, std::string_view parametric_object,
                       const EntityExtractor& extractor) {
  EntitySet set;
  for (auto& e : extract_entities(new_object, EntitySource::new_knowledge, extractor)) {
    set.add(std::move(e));
  }
  for (auto& e : extract_entities(parametric_object, EntitySource::parametric_knowledge,
                                  extractor)) {
    set.add(std::move(e));
  }
  return set;
}

KnowledgeCacheRecord build_record(const FactRecord& fact, const ModelBackend& backend,
                                  const CacheBuildOptions& opts,
                                  const EntityExtractor& extractor,
                                  std::int64_t created_at, bool& induced) {
  fact.validate();
  KnowledgeCacheRecord rec;
  rec.fact_id = fact.id;
  rec.cloze = build_cloze(fact);
  rec.new_object = fact.new_object;
  induced = !fact.parametric_object.has_value();
  rec.parametric_object = induced ? induce_parametric(backend, rec.cloze, opts.induction)
                                  : *fact.parametric_object;
  rec.parametric_fact = render_fact(fact, rec.parametric_object);
  rec.entities = entities_for(rec.new_object, rec.parametric_object, extractor);
  rec.created_at = created_at;

  auto new_words = extractor.from_object(rec.new_object);
  auto para_words = extractor.from_object(rec.parametric_object);
  rec.parametric_equals_new = dedupe(new_words) == dedupe(para_words);
  if (rec.parametric_equals_new) {
    spdlog::warn("fact {}: induced parametric object '{}' equals the new object",
                 fact.id, rec.parametric_object);
  }
  return rec;
}

}  // namespace

// ---------------------------------------------------------------- facts

void FactRecord::validate() const {
  if (id.empty()) throw PreconditionError("fact record: empty id");
  if (trim(new_object).empty()) {
    throw PreconditionError("fact " + id + ": new_object is empty");
  }
  if (relation_template.empty()) {
    if (!raw_text || trim(*raw_text).empty()) {
      throw PreconditionError("fact " + id +
                              ": needs a relation_template or raw_text");
    }
    return;
  }
  if (count_occurrences(relation_template, kObjectBlank) != 1) {
    throw PreconditionError("fact " + id +
                            ": relation_template must contain [X] exactly once");
  }
}

std::string render_fact(const FactRecord& fact, std::string_view object) {
  if (fact.is_free_text()) {
    const auto& text = fact.raw_text.value_or("");
    if (text.find(fact.new_object) == std::string::npos) {
      throw PreconditionError("cannot locate object span");
    }
    return replace_first(text, fact.new_object, object);
  }
  auto out = replace_first(fact.relation_template, kSubjectSlot, fact.subject);
  return replace_first(std::move(out), kObjectBlank, object);
}

std::string new_fact_text(const FactRecord& fact) {
  return render_fact(fact, fact.new_object);
}

std::string build_cloze(const FactRecord& fact) {
  fact.validate();
  return render_fact(fact, "_");
}

std::string induce_parametric(const ModelBackend& backend, std::string_view cloze,
                              const InductionOptions& opts) {
  if (trim(cloze).empty()) throw PreconditionError("induce_parametric: empty cloze");
  const auto prompt = replace_first(opts.prompt_template, "{cloze}", cloze);

  DecodeOptions dopts;
  dopts.max_tokens = opts.max_tokens;
  dopts.transcript_capacity = 0;
  BiasConfig control;
  control.lambda_new = 0.0;
  control.lambda_para = 0.0;

  std::string text;
  try {
    text = decode(backend, prompt, EntitySet{}, control, dopts).text;
  } catch (const TransportError& e) {
    throw TransportError("induction failed for cloze '" + std::string(cloze) +
                         "': " + e.what());
  }
  text = trim(text);
  if (text.empty()) throw Error("induction produced no entity");
  return text;
}

// ---------------------------------------------------------------- entities

std::string normalize_word(std::string_view word) {
  auto s = normalize_piece(word);
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && is_ascii_punct(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && is_ascii_punct(static_cast<unsigned char>(s[e - 1]))) --e;
  return normalize_piece(std::string_view(s).substr(b, e - b));
}

const std::unordered_set<std::string>& RuleExtractor::default_stop_words() {
  // Keep in sync with data/stopwords.txt.
  static const std::unordered_set<std::string> words = {
      // articles
      "a", "an", "the",
      // prepositions
      "of", "in", "on", "at", "by", "for", "with", "to", "from", "into", "about",
      "as",
      // copulas and auxiliaries
      "is", "are", "was", "were", "be", "been", "being", "has", "have", "had",
      // conjunctions, relatives, possessives
      "and", "or", "that", "which", "who", "its", "his", "her", "their",
      // relation words
      "author", "wrote", "written"};
  return words;
}

RuleExtractor::RuleExtractor() : stop_words_(default_stop_words()) {}

RuleExtractor::RuleExtractor(std::unordered_set<std::string> stop_words)
    : stop_words_(std::move(stop_words)) {}

RuleExtractor RuleExtractor::from_stop_word_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("stop-word file not found: " + path.string());
  std::unordered_set<std::string> words;
  for (std::string line; std::getline(in, line);) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    auto w = normalize_word(trim(line));
    if (!w.empty()) words.insert(std::move(w));
  }
  return RuleExtractor(std::move(words));
}

std::vector<std::string> RuleExtractor::from_object(std::string_view phrase) const {
  std::vector<std::string> out;
  for (const auto& w : split_whitespace(phrase)) out.push_back(normalize_word(w));
  return dedupe(std::move(out));
}

std::vector<std::string> RuleExtractor::from_text(std::string_view text) const {
  std::vector<std::string> out;
  for (const auto& w : split_whitespace(text)) {
    auto n = normalize_word(w);
    if (!n.empty() && !stop_words_.contains(n)) out.push_back(std::move(n));
  }
  return dedupe(std::move(out));
}

const EntityExtractor& default_extractor() {
  static const RuleExtractor extractor;
  return extractor;
}

std::vector<EntityString> extract_entities(std::string_view object_phrase,
                                           EntitySource source,
                                           const EntityExtractor& extractor) {
  if (trim(object_phrase).empty()) throw PreconditionError("no entities extracted");
  return to_entities(extractor.from_object(object_phrase), source);
}

std::vector<EntityString> extract_entities_from_text(std::string_view fact_text,
                                                     EntitySource source,
                                                     const EntityExtractor& extractor) {
  if (trim(fact_text).empty()) throw PreconditionError("no entities extracted");
  return to_entities(extractor.from_text(fact_text), source);
}

// ---------------------------------------------------------------- cache

CacheBuildResult build_cache(const EditMemory& memory, const ModelBackend& backend,
                             const CacheBuildOptions& opts) {
  const EntityExtractor& extractor =
      opts.extractor != nullptr ? *opts.extractor : default_extractor();
  const auto created_at = opts.created_at.value_or(now_seconds());

  std::vector<const FactRecord*> facts;
  for (const auto& f : memory.records) facts.push_back(&f);
  std::stable_sort(facts.begin(), facts.end(),
                   [](const FactRecord* a, const FactRecord* b) { return a->id < b->id; });

  std::map<std::string, const KnowledgeCacheRecord*> existing;
  if (opts.existing != nullptr) {
    for (const auto& r : *opts.existing) existing.emplace(r.fact_id, &r);
  }

  struct Outcome {
    std::optional<KnowledgeCacheRecord> record;
    std::optional<CacheFailure> failure;
    bool induced = false;
    bool reused = false;
  };
  std::vector<Outcome> outcomes(facts.size());

  auto process = [&](std::size_t i) {
    const auto& fact = *facts[i];
    auto& out = outcomes[i];
    try {
      if (auto it = existing.find(fact.id); it != existing.end()) {
        const auto& prev = *it->second;
        if (prev.cloze == build_cloze(fact) && prev.new_object == fact.new_object &&
            (!fact.parametric_object || *fact.parametric_object == prev.parametric_object)) {
          out.record = prev;
          out.reused = true;
          return;
        }
      }
      out.record = build_record(fact, backend, opts, extractor, created_at, out.induced);
    } catch (const Error& e) {
      out.failure = CacheFailure{fact.id, e.what()};
    }
  };

  const auto jobs = std::max<std::size_t>(1, std::min(opts.jobs, facts.size()));
  if (jobs == 1) {
    for (std::size_t i = 0; i < facts.size(); ++i) process(i);
  } else {
    std::vector<std::future<void>> workers;
    for (std::size_t w = 0; w < jobs; ++w) {
      workers.push_back(std::async(std::launch::async, [&, w] {
        for (std::size_t i = w; i < facts.size(); i += jobs) process(i);
      }));
    }
    for (auto& f : workers) f.get();
  }

  CacheBuildResult result;
  for (auto& o : outcomes) {
    if (o.record) result.records.push_back(std::move(*o.record));
    if (o.failure) result.failures.push_back(std::move(*o.failure));
    result.induced += o.induced ? 1 : 0;
    result.reused += o.reused ? 1 : 0;
  }
  return result;
}

// ---------------------------------------------------------------- retrieval

std::vector<std::string> retrieval_words(std::string_view text) {
  std::vector<std::string> words;
  for (const auto& w : split_whitespace(text)) {
    auto n = normalize_word(w);
    if (!n.empty()) words.push_back(std::move(n));
  }
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  return words;
}

std::vector<FactRecord> retrieve_facts(const EditMemory& memory,
                                       std::string_view question, std::size_t limit) {
  if (memory.empty()) throw PreconditionError("retrieve_facts: empty edit memory");
  if (limit < 1) throw PreconditionError("retrieve_facts: limit must be >= 1");

  const auto q = retrieval_words(question);
  std::vector<std::pair<double, const FactRecord*>> scored;
  scored.reserve(memory.size());
  for (const auto& f : memory.records) {
    const auto source = f.subject.empty() && f.raw_text
                            ? *f.raw_text
                            : f.subject + " " + f.new_object;
    const auto w = retrieval_words(source);
    std::vector<std::string> common;
    std::set_intersection(q.begin(), q.end(), w.begin(), w.end(),
                          std::back_inserter(common));
    const auto uni = q.size() + w.size() - common.size();
    const double score =
        uni == 0 ? 0.0 : static_cast<double>(common.size()) / static_cast<double>(uni);
    scored.emplace_back(score, &f);
  }
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second->id < b.second->id;
  });

  std::vector<FactRecord> out;
  for (std::size_t i = 0; i < std::min(limit, scored.size()); ++i) {
    out.push_back(*scored[i].second);
  }
  return out;
}

// ---------------------------------------------------------------- persistence

nlohmann::json cache_record_to_json(const KnowledgeCacheRecord& r) {
  auto words = [](const std::vector<EntityString>& list) {
    auto a = nlohmann::json::array();
    for (const auto& e : list) a.push_back(e.text);
    return a;
  };
  nlohmann::json j;
  j["version"] = kCacheSchemaVersion;
  j["fact_id"] = r.fact_id;
  j["cloze"] = r.cloze;
  j["new_object"] = r.new_object;
  j["parametric_object"] = r.parametric_object;
  j["parametric_fact"] = r.parametric_fact;
  j["new_entities"] = words(r.entities.new_entities);
  j["para_entities"] = words(r.entities.para_entities);
  j["created_at"] = r.created_at;
  j["parametric_equals_new"] = r.parametric_equals_new;
  return j;
}

KnowledgeCacheRecord cache_record_from_json(const nlohmann::json& j, std::size_t line) {
  FieldReader f(j, line, "cache");
  const auto version = f.integer("version");
  if (version != kCacheSchemaVersion) {
    throw VersionError("cache line " + std::to_string(line) + ": schema version " +
                       std::to_string(version) + " is not supported (expected " +
                       std::to_string(kCacheSchemaVersion) + ")");
  }
  KnowledgeCacheRecord r;
  r.fact_id = f.string("fact_id");
  if (r.fact_id.empty()) f.fail("field 'fact_id' is empty");
  r.cloze = f.string("cloze");
  r.parametric_fact = f.string("parametric_fact");
  r.new_object = f.optional_string("new_object").value_or("");
  r.parametric_object = f.optional_string("parametric_object").value_or("");
  r.created_at = f.has("created_at") ? f.integer("created_at") : 0;
  r.parametric_equals_new =
      f.has("parametric_equals_new") ? f.boolean("parametric_equals_new") : false;

  auto add_all = [&](const char* field, EntitySource source) {
    for (auto& w : f.strings(field)) {
      try {
        r.entities.add(EntityString(std::move(w), source));
      } catch (const PreconditionError& e) {
        f.fail(std::string("field '") + field + "': " + e.what());
      }
    }
  };
  add_all("new_entities", EntitySource::new_knowledge);
  add_all("para_entities", EntitySource::parametric_knowledge);
  return r;
}

void save_cache(const std::filesystem::path& path,
                const std::vector<KnowledgeCacheRecord>& records) {
  std::vector<nlohmann::json> rows;
  rows.reserve(records.size());
  for (const auto& r : records) rows.push_back(cache_record_to_json(r));
  write_json_lines(path, rows);
}

std::vector<KnowledgeCacheRecord> load_cache(const std::filesystem::path& path) {
  std::vector<KnowledgeCacheRecord> records;
  std::unordered_set<std::string> ids;
  for_each_json_line(path, "cache", [&](const nlohmann::json& j, std::size_t line) {
    auto r = cache_record_from_json(j, line);
    if (!ids.insert(r.fact_id).second) {
      throw ParseError("cache line " + std::to_string(line) + ": duplicate fact_id '" +
                       r.fact_id + "'");
    }
    if (!r.new_object.empty() && !r.parametric_object.empty()) {
      try {
        const auto expected =
            entities_for(r.new_object, r.parametric_object, default_extractor());
        if (!(expected == r.entities)) {
          spdlog::warn("cache line {}: entity sets for '{}' differ from the default "
                       "extractor output",
                       line, r.fact_id);
        }
      } catch (const Error& e) {
        spdlog::warn("cache line {}: cannot re-extract entities: {}", line, e.what());
      }
    }
    records.push_back(std::move(r));
  });
  return records;
}

nlohmann::json fact_to_json(const FactRecord& f) {
  nlohmann::json j;
  j["id"] = f.id;
  j["subject"] = f.subject;
  j["relation_template"] = f.relation_template;
  j["new_object"] = f.new_object;
  if (f.parametric_object) j["parametric_object"] = *f.parametric_object;
  if (f.raw_text) j["raw_text"] = *f.raw_text;
  return j;
}

FactRecord fact_from_json(const nlohmann::json& j, std::size_t line) {
  FieldReader f(j, line, "memory");
  FactRecord fact;
  fact.id = f.string("id");
  fact.subject = f.optional_string("subject").value_or("");
  fact.relation_template = f.optional_string("relation_template").value_or("");
  fact.new_object = f.string("new_object");
  fact.parametric_object = f.optional_string("parametric_object");
  fact.raw_text = f.optional_string("raw_text");
  try {
    fact.validate();
  } catch (const PreconditionError& e) {
    f.fail(e.what());
  }
  return fact;
}

void save_memory(const std::filesystem::path& path, const EditMemory& memory) {
  std::vector<nlohmann::json> rows;
  for (const auto& f : memory.records) rows.push_back(fact_to_json(f));
  write_json_lines(path, rows);
}

EditMemory load_memory(const std::filesystem::path& path) {
  EditMemory memory;
  std::unordered_set<std::string> ids;
  for_each_json_line(path, "memory", [&](const nlohmann::json& j, std::size_t line) {
    auto fact = fact_from_json(j, line);
    if (!ids.insert(fact.id).second) {
      throw ParseError("memory line " + std::to_string(line) + ": duplicate id '" +
                       fact.id + "'");
    }
    memory.records.push_back(std::move(fact));
  });
  return memory;
}

}  // namespace atbias
