#include "atbias/backend.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "atbias/error.hpp"

namespace atbias {
namespace {

constexpr double kSumSlack = 1e-6;

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::istringstream in{std::string(text)};
  for (std::string w; in >> w;) words.push_back(std::move(w));
  return words;
}

std::vector<MockLM::Row> rows_from_json(const nlohmann::json& j,
                                        std::string_view where) {
  if (!j.is_array()) {
    throw ParseError("mock script: " + std::string(where) + " must be an array");
  }
  std::vector<MockLM::Row> rows;
  for (const auto& r : j) {
    if (!r.contains("piece") || !r.contains("prob")) {
      throw ParseError("mock script: row in " + std::string(where) +
                       " needs 'piece' and 'prob'");
    }
    rows.push_back({r.at("piece").get<std::string>(), r.at("prob").get<double>()});
  }
  return rows;
}

}  // namespace

// ---------------------------------------------------------------- MockLM

MockLM::MockLM() : MockLM(PieceNormalizer()) {}

MockLM::MockLM(PieceNormalizer normalizer, std::string end_piece)
    : normalizer_(std::move(normalizer)) {
  intern(end_piece);
}

TokenId MockLM::intern(std::string_view piece) {
  if (auto it = index_.find(std::string(piece)); it != index_.end()) {
    return TokenId(it->second);
  }
  const auto id = static_cast<std::uint32_t>(vocab_.size());
  vocab_.emplace_back(std::string(piece), normalizer_);
  index_.emplace(std::string(piece), id);
  return TokenId(id);
}

MockLM::Scripted MockLM::compile(const std::vector<Row>& rows) {
  if (rows.empty()) throw ConfigError("mock script: empty row set");
  std::vector<TokenEntry> entries;
  std::unordered_set<std::string> seen;
  double sum = 0.0;
  for (const auto& r : rows) {
    if (!std::isfinite(r.prob) || r.prob < 0.0) {
      throw ConfigError("mock script: invalid probability for piece '" +
                        r.piece + "'");
    }
    if (!seen.insert(r.piece).second) {
      throw ConfigError("mock script: duplicate piece '" + r.piece + "'");
    }
    sum += r.prob;
    entries.push_back({intern(r.piece), {}, r.prob});
  }
  if (std::abs(sum - 1.0) > kSumSlack) {
    throw ConfigError("mock script: row probabilities sum to " +
                      std::to_string(sum) + ", expected 1");
  }
  std::stable_sort(entries.begin(), entries.end(),
                   [](const TokenEntry& a, const TokenEntry& b) {
                     if (a.prob != b.prob) return a.prob > b.prob;
                     return a.token < b.token;
                   });
  Scripted s;
  for (const auto& e : entries) {
    s.ids.push_back(e.token);
    s.probs.push_back(e.prob);
  }
  return s;
}

void MockLM::script(std::string suffix, const std::vector<Row>& rows) {
  auto compiled = compile(rows);
  for (auto& [key, value] : scripts_) {
    if (key == suffix) {
      value = std::move(compiled);
      return;
    }
  }
  scripts_.emplace_back(std::move(suffix), std::move(compiled));
}

void MockLM::script_completion(std::string_view suffix, std::string_view text,
                               double confidence) {
  if (!(confidence > 0.0 && confidence <= 1.0)) {
    throw ConfigError("mock script: completion confidence must be in (0, 1]");
  }
  const auto words = split_words(text);
  const std::string end = end_piece();
  const std::string marker = normalizer_.markers().empty()
                                 ? std::string(" ")
                                 : normalizer_.markers().front();
  std::string key(suffix);
  for (const auto& w : words) {
    std::vector<Row> rows{{marker + w, confidence}};
    if (confidence < 1.0) rows.push_back({end, 1.0 - confidence});
    script(key, rows);
    key += " " + w;
  }
  script(key, {{end, 1.0}});
}

void MockLM::set_fallback(const std::vector<Row>& rows) {
  fallback_ = compile(rows);
}

void MockLM::pad_vocabulary(std::size_t size) {
  for (std::size_t i = vocab_.size(); i < size; ++i) {
    intern("<pad_" + std::to_string(i) + ">");
  }
}

const MockLM::Scripted* MockLM::match(std::string_view context) const {
  const Scripted* best = nullptr;
  std::size_t best_len = 0;
  for (const auto& [key, value] : scripts_) {
    if ((best == nullptr || key.size() > best_len) && context.ends_with(key)) {
      best = &value;
      best_len = key.size();
    }
  }
  if (best != nullptr) return best;
  if (unscripted_ == Unscripted::fallback && fallback_) return &*fallback_;
  return nullptr;
}

BackendCapability MockLM::capability() const {
  return {0, 0, vocab_.size(), true};
}

TokenDistribution MockLM::step(std::string_view context,
                               std::size_t top_n) const {
  if (top_n == 0) throw PreconditionError("mock: top_n must be >= 1");
  const Scripted* s = match(context);
  if (s == nullptr) {
    const auto tail = context.size() > 60 ? context.substr(context.size() - 60)
                                          : context;
    throw TransportError("mock: no script for context ending in '" +
                         std::string(tail) + "'");
  }

  const auto n = std::min(top_n, vocab_.size());
  std::vector<TokenEntry> entries;
  entries.reserve(n);
  for (std::size_t i = 0; i < s->ids.size() && entries.size() < n; ++i) {
    entries.push_back({s->ids[i], vocab_[s->ids[i].value], s->probs[i]});
  }
  // Zero-probability tail, ascending ids, skipping scripted tokens.
  for (std::uint32_t id = 0; id < vocab_.size() && entries.size() < n; ++id) {
    if (std::find(s->ids.begin(), s->ids.end(), TokenId(id)) != s->ids.end()) {
      continue;
    }
    entries.push_back({TokenId(id), vocab_[id], 0.0});
  }
  const auto origin = n == vocab_.size() ? DistributionOrigin::full_vocabulary
                                         : DistributionOrigin::top_slice;
  return TokenDistribution(std::move(entries), origin);
}

MockLM MockLM::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError("mock script: top level must be an object");
  PieceNormalizer normalizer;
  if (j.contains("markers")) {
    normalizer = PieceNormalizer(j.at("markers").get<std::vector<std::string>>());
  }
  MockLM lm(std::move(normalizer), j.value("end_piece", std::string("</s>")));

  if (j.contains("vocabulary")) {
    for (const auto& p : j.at("vocabulary")) lm.intern(p.get<std::string>());
  }
  if (j.contains("script")) {
    const auto& script = j.at("script");
    if (!script.is_object()) throw ParseError("mock script: 'script' must be an object");
    for (const auto& [suffix, rows] : script.items()) {
      lm.script(suffix, rows_from_json(rows, "script['" + suffix + "']"));
    }
  }
  const double confidence = j.value("completion_confidence", 0.9);
  if (j.contains("completions")) {
    for (const auto& [suffix, text] : j.at("completions").items()) {
      lm.script_completion(suffix, text.get<std::string>(), confidence);
    }
  }
  if (j.contains("fallback")) {
    lm.set_fallback(rows_from_json(j.at("fallback"), "fallback"));
  }
  const auto unscripted = j.value("unscripted", std::string("error"));
  if (unscripted == "fallback") {
    lm.set_unscripted(Unscripted::fallback);
  } else if (unscripted != "error") {
    throw ParseError("mock script: 'unscripted' must be 'error' or 'fallback'");
  }
  if (j.contains("pad_vocabulary_to")) {
    lm.pad_vocabulary(j.at("pad_vocabulary_to").get<std::size_t>());
  }
  return lm;
}

MockLM MockLM::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("mock script not found: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("mock script " + path.string() + ": " + e.what());
  }
  try {
    return from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("mock script " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------- wire protocol

nlohmann::json encode_step_request(const StepRequest& req) {
  nlohmann::json j;
  if (const auto* text = std::get_if<std::string>(&req.context)) {
    j["context"] = *text;
  } else {
    auto ids = nlohmann::json::array();
    for (const auto t : std::get<std::vector<TokenId>>(req.context)) {
      ids.push_back(t.value);
    }
    j["context"] = std::move(ids);
  }
  j["top_n"] = req.top_n;
  return j;
}

TokenDistribution parse_step_response(const nlohmann::json& body,
                                      std::size_t top_n,
                                      const PieceNormalizer& normalizer,
                                      const StepResponseOptions& opts) {
  if (!body.is_object()) throw ProtocolError("response: body is not an object");
  for (const char* field : {"vocab_size", "normalized", "tokens"}) {
    if (!body.contains(field)) {
      throw ProtocolError(std::string("response: missing field '") + field + "'");
    }
  }
  const auto& vs = body.at("vocab_size");
  if (!vs.is_number_integer() || vs.get<long long>() <= 0) {
    throw ProtocolError("response: 'vocab_size' must be a positive integer");
  }
  const auto vocab_size = vs.get<std::size_t>();
  if (!body.at("normalized").is_boolean()) {
    throw ProtocolError("response: 'normalized' must be a boolean");
  }
  const bool normalized = body.at("normalized").get<bool>();
  if (!normalized && !opts.allow_renormalize) {
    throw ConfigError(
        "backend reports non-normalized probabilities; enable local "
        "renormalization to proceed");
  }
  const auto& tokens = body.at("tokens");
  if (!tokens.is_array()) throw ProtocolError("response: 'tokens' must be an array");

  std::vector<TokenEntry> entries;
  entries.reserve(tokens.size());
  std::unordered_set<std::uint32_t> ids;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto& t = tokens[i];
    const auto where = "response: tokens[" + std::to_string(i) + "]";
    if (!t.is_object() || !t.contains("id") || !t.contains("piece") ||
        !t.contains("prob")) {
      throw ProtocolError(where + " needs 'id', 'piece' and 'prob'");
    }
    if (!t.at("id").is_number_integer() || t.at("id").get<long long>() < 0) {
      throw ProtocolError(where + ".id must be a non-negative integer");
    }
    if (!t.at("piece").is_string()) throw ProtocolError(where + ".piece must be a string");
    if (!t.at("prob").is_number()) throw ProtocolError(where + ".prob must be a number");
    const auto id = t.at("id").get<std::uint32_t>();
    const auto prob = t.at("prob").get<double>();
    if (id >= vocab_size) throw ProtocolError(where + ".id exceeds vocab_size");
    if (!std::isfinite(prob) || prob < 0.0) {
      throw ProtocolError(where + ".prob is negative or non-finite");
    }
    if (!ids.insert(id).second) throw ProtocolError(where + ".id is a duplicate");
    entries.push_back(
        {TokenId(id), TokenPiece(t.at("piece").get<std::string>(), normalizer), prob});
  }
  const auto required = std::min(top_n, vocab_size);
  if (entries.size() < required) {
    throw ProtocolError("response: " + std::to_string(entries.size()) +
                        " tokens, expected at least " + std::to_string(required));
  }

  const bool sorted = std::is_sorted(
      entries.begin(), entries.end(),
      [](const TokenEntry& a, const TokenEntry& b) { return a.prob > b.prob; });
  if (!sorted) {
    spdlog::warn("remote backend returned unsorted tokens; re-sorting locally");
  }
  std::stable_sort(entries.begin(), entries.end(),
                   [](const TokenEntry& a, const TokenEntry& b) {
                     if (a.prob != b.prob) return a.prob > b.prob;
                     return a.token < b.token;
                   });
  const bool whole_vocab = entries.size() == vocab_size;
  if (entries.size() > top_n) entries.resize(top_n);

  double sum = 0.0;
  for (const auto& e : entries) sum += e.prob;
  if (!normalized) {
    if (sum <= 0.0) throw ProtocolError("response: probabilities sum to zero");
    spdlog::warn("renormalizing non-normalized backend probabilities locally");
    for (auto& e : entries) e.prob /= sum;
    return TokenDistribution(std::move(entries), DistributionOrigin::top_slice);
  }
  if (sum > 1.0 + kSumSlack) {
    throw ProtocolError("response: probabilities sum to " + std::to_string(sum) +
                        " (> 1) although 'normalized' is true");
  }
  const auto origin = whole_vocab && entries.size() == vocab_size
                          ? DistributionOrigin::full_vocabulary
                          : DistributionOrigin::top_slice;
  if (origin == DistributionOrigin::full_vocabulary &&
      std::abs(sum - 1.0) > kSumSlack) {
    throw ProtocolError("response: full vocabulary returned but probabilities sum to " +
                        std::to_string(sum));
  }
  return TokenDistribution(std::move(entries), origin);
}

// ----------------------------------------------------------- RemoteBackend

RemoteBackend::RemoteBackend(RemoteOptions opts)
    : opts_(std::move(opts)), normalizer_(opts_.markers) {
  const auto& url = opts_.endpoint;
  const auto scheme_end = url.find("://");
  if (url.empty() || scheme_end == std::string::npos) {
    throw ConfigError("remote endpoint must look like http://host:port/path, got '" +
                      url + "'");
  }
  const auto path_start = url.find('/', scheme_end + 3);
  const auto base = url.substr(0, path_start);
  path_ = path_start == std::string::npos ? "/" : url.substr(path_start);
  client_ = std::make_unique<httplib::Client>(base);
  if (!client_->is_valid()) throw ConfigError("unsupported remote endpoint: " + url);
  const auto secs = static_cast<time_t>(opts_.timeout_seconds);
  const auto usecs = static_cast<time_t>((opts_.timeout_seconds - static_cast<double>(secs)) * 1e6);
  client_->set_connection_timeout(secs, usecs);
  client_->set_read_timeout(secs, usecs);
  client_->set_write_timeout(secs, usecs);
}

RemoteBackend::~RemoteBackend() = default;

BackendCapability RemoteBackend::capability() const {
  std::lock_guard lock(mutex_);
  return {0, 0, last_vocab_size_, true};
}

TokenDistribution RemoteBackend::remote_step(const StepRequest& req) const {
  if (req.top_n == 0) throw PreconditionError("remote_step: top_n must be >= 1");
  const auto body = encode_step_request(req).dump();

  std::lock_guard lock(mutex_);
  auto res = client_->Post(path_, body, "application/json");
  if (!res) {
    throw TransportError("remote backend " + opts_.endpoint + ": " +
                         httplib::to_string(res.error()));
  }
  if (res->status != 200) {
    throw TransportError("remote backend " + opts_.endpoint + ": HTTP " +
                         std::to_string(res->status));
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(std::string("response: malformed JSON: ") + e.what());
  }
  auto dist = parse_step_response(j, req.top_n, normalizer_,
                                  {.allow_renormalize = opts_.allow_renormalize});
  last_vocab_size_ = j.at("vocab_size").get<std::size_t>();
  return dist;
}

TokenDistribution RemoteBackend::step(std::string_view context,
                                      std::size_t top_n) const {
  return remote_step(StepRequest{std::string(context), top_n});
}

TokenDistribution remote_step(const RemoteBackend& client,
                              std::string_view context, std::size_t top_n) {
  return client.step(context, top_n);
}

}  // namespace atbias
